//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use acronym_circuit::circuit::{CircuitSpec, HeadId};
use acronym_circuit::model::BosRescale;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Sample counts per experiment. `None` means the whole dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCounts {
    pub patch: Option<usize>,
    pub ablate: Option<usize>,
    pub attention: Option<usize>,
    pub scatter: Option<usize>,
    pub swap: Option<usize>,
}

impl SampleCounts {
    fn or(self, fallback: SampleCounts) -> SampleCounts {
        SampleCounts {
            patch: self.patch.or(fallback.patch),
            ablate: self.ablate.or(fallback.ablate),
            attention: self.attention.or(fallback.attention),
            scatter: self.scatter.or(fallback.scatter),
            swap: self.swap.or(fallback.swap),
        }
    }
}

/// Everything a run can be configured with. All fields are optional in the
/// file; relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// safetensors checkpoint.
    pub weights: Option<PathBuf>,
    /// Model hyperparameters as JSON; GPT-2 Small when absent.
    pub model_config: Option<PathBuf>,
    /// Tensor-name overrides for the checkpoint.
    pub name_map: Option<PathBuf>,
    /// Tokenizer files; the bundled GPT-2 tokenizer when absent.
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    /// One noun per line; the bundled list when absent.
    pub word_list: Option<PathBuf>,
    /// A dataset manifest to reuse instead of sampling a new dataset.
    pub dataset: Option<PathBuf>,
    pub dataset_size: Option<usize>,
    pub seed: Option<u64>,
    pub samples: SampleCounts,
    pub output_dir: Option<PathBuf>,
    /// Minimum relative loss for a head to join the combined BOS swap.
    pub bos_impact_threshold: Option<f64>,
    pub bos_rescale: Option<BosRescale>,
    pub workers: Option<usize>,
    pub circuit: Option<CircuitSpec>,
    pub letter_movers: Option<Vec<HeadId>>,
    pub previous_token_heads: Option<Vec<HeadId>>,
    pub histogram_heads: Option<Vec<HeadId>>,
    pub observe_head: Option<HeadId>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing_or_io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [
            &mut self.weights,
            &mut self.model_config,
            &mut self.name_map,
            &mut self.vocab,
            &mut self.merges,
            &mut self.word_list,
            &mut self.dataset,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: RunConfig) -> RunConfig {
        RunConfig {
            weights: self.weights.or(base.weights),
            model_config: self.model_config.or(base.model_config),
            name_map: self.name_map.or(base.name_map),
            vocab: self.vocab.or(base.vocab),
            merges: self.merges.or(base.merges),
            word_list: self.word_list.or(base.word_list),
            dataset: self.dataset.or(base.dataset),
            dataset_size: self.dataset_size.or(base.dataset_size),
            seed: self.seed.or(base.seed),
            samples: self.samples.or(base.samples),
            output_dir: self.output_dir.or(base.output_dir),
            bos_impact_threshold: self.bos_impact_threshold.or(base.bos_impact_threshold),
            bos_rescale: self.bos_rescale.or(base.bos_rescale),
            workers: self.workers.or(base.workers),
            circuit: self.circuit.or(base.circuit),
            letter_movers: self.letter_movers.or(base.letter_movers),
            previous_token_heads: self.previous_token_heads.or(base.previous_token_heads),
            histogram_heads: self.histogram_heads.or(base.histogram_heads),
            observe_head: self.observe_head.or(base.observe_head),
        }
    }

    /// Applies defaults and checks that every referenced file exists.
    pub fn resolve(self) -> Result<Settings, CliError> {
        for p in [
            &self.weights,
            &self.model_config,
            &self.name_map,
            &self.vocab,
            &self.merges,
            &self.word_list,
            &self.dataset,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(CliError::MissingInput(p.clone()));
            }
        }
        if self.vocab.is_some() != self.merges.is_some() {
            return Err(CliError::Usage("vocab and merges must be given together".into()));
        }
        let seed = self
            .seed
            .ok_or_else(|| CliError::Usage("no seed: pass --seed or set \"seed\" in the config file".into()))?;
        let circuit = self.circuit.unwrap_or_default();
        let movers = self
            .letter_movers
            .unwrap_or_else(|| ["8.11", "10.10", "9.9", "11.4"].map(|h| h.parse().expect("valid head")).to_vec());
        let histogram_heads = self.histogram_heads.unwrap_or_else(|| {
            let mut heads = movers.clone();
            heads.push("5.8".parse().expect("valid head"));
            heads
        });
        Ok(Settings {
            observe_head: self.observe_head.or_else(|| movers.first().copied()).unwrap_or(HeadId::new(0, 0)),
            weights: self.weights,
            model_config: self.model_config,
            name_map: self.name_map,
            vocab: self.vocab,
            merges: self.merges,
            word_list: self.word_list,
            dataset: self.dataset,
            dataset_size: self.dataset_size.unwrap_or(800),
            seed,
            samples: self.samples.or(SampleCounts {
                patch: Some(50),
                swap: Some(100),
                ..Default::default()
            }),
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            bos_impact_threshold: self.bos_impact_threshold.unwrap_or(0.01),
            bos_rescale: self.bos_rescale.unwrap_or_default(),
            workers: self.workers,
            circuit,
            letter_movers: movers,
            previous_token_heads: self
                .previous_token_heads
                .unwrap_or_else(|| ["1.0", "2.2", "4.11"].map(|h| h.parse().expect("valid head")).to_vec()),
            histogram_heads,
        })
    }
}

/// A fully resolved configuration, recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub weights: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub name_map: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub word_list: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub dataset_size: usize,
    pub seed: u64,
    pub samples: SampleCounts,
    pub output_dir: PathBuf,
    pub bos_impact_threshold: f64,
    pub bos_rescale: BosRescale,
    pub workers: Option<usize>,
    pub circuit: CircuitSpec,
    pub letter_movers: Vec<HeadId>,
    pub previous_token_heads: Vec<HeadId>,
    pub histogram_heads: Vec<HeadId>,
    pub observe_head: HeadId,
}
