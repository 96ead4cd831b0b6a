//! Mean-ablation evaluation of a head circuit.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Capture, HookPoint, Intervention, Model, ModelConfig};
use crate::patching::logit_diff_from_resid;
use crate::report;
use crate::task::{LetterIndex, PromptSample, TaskVocab};
use crate::tensor::Tensor;

/// An attention head, written `layer.head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn validate(self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(Error::Coordinate(format!(
                "head {self} in a {}x{} model",
                config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("head {s:?} is not of the form layer.head"));
        let (l, h) = s.trim().split_once('.').ok_or_else(bad)?;
        Ok(Self {
            layer: l.parse().map_err(|_| bad())?,
            head: h.parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for HeadId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HeadId> for String {
    fn from(h: HeadId) -> String {
        h.to_string()
    }
}

/// Ordered list of heads; order matters for progressive evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CircuitSpec {
    pub heads: Vec<HeadId>,
}

impl Default for CircuitSpec {
    /// Letter movers first, then the head feeding them and the fuzzy previous-token heads.
    fn default() -> Self {
        Self {
            heads: [(8, 11), (10, 10), (9, 9), (11, 4), (5, 8), (1, 0), (2, 2), (4, 11)]
                .iter()
                .map(|&(l, h)| HeadId::new(l, h))
                .collect(),
        }
    }
}

impl CircuitSpec {
    pub fn new(heads: Vec<HeadId>) -> Self {
        Self { heads }
    }

    /// Every head of the model, layer-major.
    pub fn all_heads(config: &ModelConfig) -> Self {
        Self {
            heads: (0..config.n_layers)
                .flat_map(|l| (0..config.n_heads).map(move |h| HeadId::new(l, h)))
                .collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &h in &self.heads {
            h.validate(config)?;
            if !seen.insert(h) {
                return Err(Error::Config(format!("head {h} appears twice in the circuit")));
            }
        }
        Ok(())
    }

    pub fn prefix(&self, k: usize) -> CircuitSpec {
        CircuitSpec {
            heads: self.heads[..k.min(self.heads.len())].to_vec(),
        }
    }
}

impl FromStr for CircuitSpec {
    type Err = Error;
    /// Comma-separated heads, e.g. `8.11,10.10`. An empty string is the empty circuit.
    fn from_str(s: &str) -> Result<Self> {
        let heads = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }
}

impl fmt::Display for CircuitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.heads.iter().map(|h| h.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Position-resolved mean of every head's output over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCache {
    /// One `[H, N, d]` tensor per layer.
    pub head_out: Vec<Tensor>,
    pub samples: usize,
}

impl MeanCache {
    pub fn seq_len(&self) -> usize {
        self.head_out[0].shape()[1]
    }

    /// The `[N, d]` mean output of one head.
    pub fn head(&self, id: HeadId) -> Tensor {
        let t = &self.head_out[id.layer];
        let (n, d) = (t.shape()[1], t.shape()[2]);
        Tensor::new(vec![n, d], t.slab(id.head).to_vec()).expect("slab has [N, d] elements")
    }
}

const MEAN_CHUNK: usize = 16;

/// Averages `head_out` over samples in f64, in sample order.
pub fn compute_mean_cache(model: &Model, samples: &[PromptSample]) -> Result<MeanCache> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("mean cache needs at least one sample".into()))?;
    let cfg = model.config();
    let n = first.tokens.len();
    if samples.iter().any(|s| s.tokens.len() != n) {
        return Err(Error::Precondition("samples are not aligned to one length".into()));
    }
    let capture = Capture::only((0..cfg.n_layers).map(HookPoint::HeadOut));
    let per_layer = cfg.n_heads * n * cfg.d_model;
    let mut sums = vec![vec![0.0f64; per_layer]; cfg.n_layers];
    for chunk in samples.chunks(MEAN_CHUNK) {
        let caches = chunk
            .par_iter()
            .map(|s| model.residual(&s.tokens, &[], &capture).map(|o| o.cache))
            .collect::<Result<Vec<_>>>()?;
        for cache in &caches {
            for (l, sum) in sums.iter_mut().enumerate() {
                for (acc, &v) in sum.iter_mut().zip(cache.head_out(l)?.data()) {
                    *acc += v as f64;
                }
            }
        }
    }
    let count = samples.len() as f64;
    let head_out = sums
        .into_iter()
        .map(|sum| {
            Tensor::new(
                vec![cfg.n_heads, n, cfg.d_model],
                sum.into_iter().map(|v| (v / count) as f32).collect(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(MeanCache {
        head_out,
        samples: samples.len(),
    })
}

/// Interventions replacing every head outside `circuit` by its mean output.
pub fn ablation_interventions(config: &ModelConfig, circuit: &CircuitSpec, means: &MeanCache) -> Result<Vec<Intervention>> {
    circuit.validate(config)?;
    let keep: BTreeSet<HeadId> = circuit.heads.iter().copied().collect();
    let positions: Vec<usize> = (0..means.seq_len()).collect();
    Ok(CircuitSpec::all_heads(config)
        .heads
        .into_iter()
        .filter(|h| !keep.contains(h))
        .map(|h| Intervention::PatchHeadOut {
            layer: h.layer,
            head: h.head,
            positions: positions.clone(),
            value: means.head(h),
        })
        .collect())
}

fn mean_logit_diffs(model: &Model, vocab: &TaskVocab, samples: &[PromptSample], interventions: &[Intervention]) -> Result<[f64; 3]> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let out = model.residual(&s.tokens, interventions, &Capture::Nothing)?;
            let mut row = [0.0f32; 3];
            for i in LetterIndex::ALL {
                row[i.offset()] = logit_diff_from_resid(model, &out.resid_final, s, i, vocab)?;
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = [0.0f64; 3];
    for r in &per_sample {
        for k in 0..3 {
            sums[k] += r[k] as f64;
        }
    }
    Ok(sums.map(|s| s / samples.len() as f64))
}

/// Per-letter mean logit difference with every head outside `circuit` mean-ablated.
pub fn ablate_except(
    model: &Model,
    vocab: &TaskVocab,
    samples: &[PromptSample],
    circuit: &CircuitSpec,
    means: &MeanCache,
) -> Result<[f64; 3]> {
    if samples.iter().any(|s| s.tokens.len() != means.seq_len()) {
        return Err(Error::Precondition("samples do not match the mean cache length".into()));
    }
    let ivs = ablation_interventions(model.config(), circuit, means)?;
    mean_logit_diffs(model, vocab, samples, &ivs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressStep {
    pub prefix: usize,
    pub added: Option<HeadId>,
    pub logit_diff: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveResult {
    pub circuit: CircuitSpec,
    pub steps: Vec<ProgressStep>,
    /// Unablated model.
    pub baseline: [f64; 3],
    pub samples: usize,
}

impl ProgressiveResult {
    pub fn to_csv(&self) -> String {
        let mut rows = Vec::new();
        for i in LetterIndex::ALL {
            rows.push(vec![
                "baseline".into(),
                String::new(),
                i.to_string(),
                report::fmt_value(self.baseline[i.offset()]),
            ]);
        }
        for step in &self.steps {
            for i in LetterIndex::ALL {
                rows.push(vec![
                    step.prefix.to_string(),
                    step.added.map(|h| h.to_string()).unwrap_or_default(),
                    i.to_string(),
                    report::fmt_value(step.logit_diff[i.offset()]),
                ]);
            }
        }
        report::table_csv(&["prefix", "head_added", "letter", "mean_logit_diff"], &rows)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = dir.join("circuit_progressive.csv");
        report::write_text(&csv, &self.to_csv())?;
        let labels: Vec<String> = self
            .steps
            .iter()
            .map(|s| s.added.map_or_else(|| "none".to_owned(), |h| format!("+{h}")))
            .collect();
        let series: Vec<(String, Vec<f64>)> = LetterIndex::ALL
            .iter()
            .map(|i| (format!("letter {i}"), self.steps.iter().map(|s| s.logit_diff[i.offset()]).collect()))
            .collect();
        let base = self.baseline.iter().sum::<f64>() / 3.0;
        let svg = dir.join("circuit_progressive.svg");
        report::write_text(
            &svg,
            &report::line_plot_svg(
                &format!("Mean-ablated circuit, progressive heads (n={})", self.samples),
                &labels,
                &series,
                Some(("baseline".into(), base)),
            ),
        )?;
        Ok(vec![csv, svg])
    }
}

/// Evaluates every prefix of the circuit, from the empty circuit to the full one.
pub fn progressive_eval(
    model: &Model,
    vocab: &TaskVocab,
    samples: &[PromptSample],
    circuit: &CircuitSpec,
    means: &MeanCache,
) -> Result<ProgressiveResult> {
    circuit.validate(model.config())?;
    let baseline = mean_logit_diffs(model, vocab, samples, &[])?;
    let mut steps = Vec::with_capacity(circuit.heads.len() + 1);
    for k in 0..=circuit.heads.len() {
        let prefix = circuit.prefix(k);
        steps.push(ProgressStep {
            prefix: k,
            added: k.checked_sub(1).map(|j| circuit.heads[j]),
            logit_diff: ablate_except(model, vocab, samples, &prefix, means)?,
        });
        log::info!("circuit prefix {k}: {:?}", steps[k].logit_diff);
    }
    Ok(ProgressiveResult {
        circuit: circuit.clone(),
        steps,
        baseline,
        samples: samples.len(),
    })
}
