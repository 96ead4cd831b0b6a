//! `acronym`: runs the acronym-circuit experiments and writes CSV, SVG and
//! JSON outputs plus a run manifest.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acronym_circuit::circuit::{CircuitSpec, HeadId};
use acronym_circuit::dataset::CorruptionKind;
use acronym_circuit::model::BosRescale;
use acronym_circuit::patching::PositionFilter;
use acronym_circuit::positional::WordPair;
use acronym_circuit::report;
use acronym_circuit::task::LetterIndex;
use acronym_circuit::toy::{make_toy_model, write_toy_assets, ToyConfig};
use clap::{Args, Parser, Subcommand};

use commands::{Context, PatchTarget, SwapKind};
use config::{RunConfig, SampleCounts};
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input file not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("invariant check failed: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] acronym_circuit::Error),
}

impl CliError {
    pub fn missing_or_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(path.to_path_buf())
        } else {
            CliError::Core(acronym_circuit::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingInput(_) | CliError::Usage(_) => 2,
            CliError::Core(acronym_circuit::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "acronym", version, about = "Acronym-prediction circuit experiments on GPT-2")]
struct Cli {
    /// JSON run configuration. Flags override its values.
    #[arg(long, env = "ACRONYM_CONFIG", global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// safetensors checkpoint
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// model hyperparameters as JSON (default: GPT-2 Small)
    #[arg(long, global = true)]
    model_config: Option<PathBuf>,
    /// JSON map from logical to archive tensor names
    #[arg(long, global = true)]
    name_map: Option<PathBuf>,
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    merges: Option<PathBuf>,
    /// noun list, one word per line (default: bundled list)
    #[arg(long, global = true)]
    word_list: Option<PathBuf>,
    /// reuse a dataset manifest instead of sampling
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset_size: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// rescaling after a BOS swap: proportional or none
    #[arg(long, global = true, value_parser = parse_rescale)]
    bos_rescale: Option<BosRescale>,
    /// samples used by patching sweeps
    #[arg(long, global = true)]
    patch_samples: Option<usize>,
    /// samples used by the BOS and positional swaps
    #[arg(long, global = true)]
    swap_samples: Option<usize>,
}

impl Overrides {
    fn into_config(self) -> RunConfig {
        RunConfig {
            weights: self.weights,
            model_config: self.model_config,
            name_map: self.name_map,
            vocab: self.vocab,
            merges: self.merges,
            word_list: self.word_list,
            dataset: self.dataset,
            dataset_size: self.dataset_size,
            seed: self.seed,
            samples: SampleCounts {
                patch: self.patch_samples,
                swap: self.swap_samples,
                ..Default::default()
            },
            output_dir: self.out,
            bos_rescale: self.bos_rescale,
            workers: self.workers,
            ..Default::default()
        }
    }
}

fn parse_rescale(s: &str) -> Result<BosRescale, String> {
    match s {
        "proportional" => Ok(BosRescale::Proportional),
        "none" => Ok(BosRescale::None),
        _ => Err(format!("expected proportional or none, got {s:?}")),
    }
}

fn parse_heads(s: &str) -> Result<Vec<HeadId>, String> {
    s.parse::<CircuitSpec>().map(|c| c.heads).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the prompt dataset and write it as JSON lines.
    GenDataset,
    /// Mean logit and probability difference of the clean model.
    EvalBaseline,
    /// Activation-patching sweep over the residual stream, heads or MLPs.
    Patch {
        #[arg(long, value_enum)]
        target: PatchTarget,
        /// current_word, previous_words or previous_letters
        #[arg(long, default_value = "current_word")]
        corruption: CorruptionKind,
        /// letters to sweep (default: every letter the corruption applies to)
        #[arg(long, value_delimiter = ',')]
        letter: Vec<usize>,
        /// head patch positions: all, Ci, Ti, C(i-1), T(i-1), A(i-1) or a slot
        #[arg(long, default_value = "all")]
        positions: PositionFilter,
    },
    /// Mean-ablate everything outside the circuit, adding heads one at a time.
    Ablate {
        #[arg(long)]
        circuit: Option<CircuitSpec>,
    },
    /// Full OV circuit over capital-letter tokens.
    Ov {
        /// heads to sum (default: letter movers)
        #[arg(long, value_parser = parse_heads)]
        heads: Option<Vec<HeadId>>,
        /// read letters without a leading space
        #[arg(long)]
        input_plain: bool,
        /// write letters with a leading space
        #[arg(long)]
        output_spaced: bool,
    },
    /// Attention to Ci against the head's projection on the correct letter.
    Scatter {
        #[arg(long)]
        head: Option<HeadId>,
    },
    /// Attention histograms and mean attention patterns.
    Attn {
        #[arg(long, value_parser = parse_heads)]
        heads: Option<Vec<HeadId>>,
        #[arg(long, value_parser = parse_heads)]
        patterns: Option<Vec<HeadId>>,
    },
    /// Positional-embedding and BOS-attention swaps.
    Swap {
        #[arg(long, value_enum, default_value = "all")]
        kind: SwapKind,
        #[arg(long, default_value = "C1-C3")]
        pair: WordPair,
        /// relative loss a head needs to join the combined swap
        #[arg(long)]
        threshold: Option<f64>,
        /// heads whose attention is reported (default: letter movers)
        #[arg(long, value_parser = parse_heads)]
        heads: Option<Vec<HeadId>>,
    },
    /// Write a small random model with a synthetic vocabulary and a run config for it.
    MakeToy {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        toy_seed: u64,
    },
    /// Every experiment with its default settings.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDataset => "gen-dataset",
            Command::EvalBaseline => "eval-baseline",
            Command::Patch { .. } => "patch",
            Command::Ablate { .. } => "ablate",
            Command::Ov { .. } => "ov",
            Command::Scatter { .. } => "scatter",
            Command::Attn { .. } => "attn",
            Command::Swap { .. } => "swap",
            Command::MakeToy { .. } => "make-toy",
            Command::All => "all",
        }
    }
}

fn letters(raw: &[usize], corruption: CorruptionKind) -> Result<Vec<LetterIndex>, CliError> {
    if raw.is_empty() {
        return Ok(commands::default_letters(corruption));
    }
    Ok(raw.iter().map(|&i| LetterIndex::new(i)).collect::<Result<_, _>>()?)
}

fn make_toy(dir: &Path, seed: u64) -> Result<(), CliError> {
    let toy = make_toy_model(&ToyConfig::with_seed(seed))?;
    let assets = write_toy_assets(&toy, dir)?;
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("asset files have names"));
    let heads = |s: &str| parse_heads(s).expect("valid toy heads");
    let run = RunConfig {
        weights: Some(rel(&assets.weights)),
        model_config: Some(rel(&assets.config)),
        vocab: Some(rel(&assets.vocab)),
        merges: Some(rel(&assets.merges)),
        word_list: Some(rel(&assets.words)),
        dataset_size: Some(24),
        seed: Some(seed),
        samples: SampleCounts {
            patch: Some(8),
            swap: Some(8),
            ..Default::default()
        },
        output_dir: Some(PathBuf::from("out")),
        circuit: Some(CircuitSpec::new(heads("1.0,1.1,0.2,0.3"))),
        letter_movers: Some(heads("1.0,1.1")),
        previous_token_heads: Some(heads("0.2")),
        histogram_heads: Some(heads("1.0,1.1,0.3")),
        observe_head: Some(heads("1.0")[0]),
        ..Default::default()
    };
    let path = dir.join("run.json");
    report::write_json(&path, &run)?;
    log::info!("wrote toy model and {}", path.display());
    Ok(())
}

fn run_all(ctx: &Context, manifest: &mut RunManifest) -> Result<(), CliError> {
    use CorruptionKind::*;
    let s = &ctx.settings;
    manifest.record("gen-dataset", || commands::gen_dataset(ctx))?;
    manifest.record("eval-baseline", || commands::eval_baseline(ctx))?;
    let sweeps: [(&str, PatchTarget, CorruptionKind, PositionFilter); 7] = [
        ("residual/current_word", PatchTarget::Residual, CurrentWord, PositionFilter::All),
        ("heads/current_word", PatchTarget::Heads, CurrentWord, PositionFilter::All),
        ("residual/previous_words", PatchTarget::Residual, PreviousWords, PositionFilter::All),
        ("heads/previous_words/Ci", PatchTarget::Heads, PreviousWords, "Ci".parse()?),
        ("heads/previous_words/A(i-1)", PatchTarget::Heads, PreviousWords, "A(i-1)".parse()?),
        ("residual/previous_letters", PatchTarget::Residual, PreviousLetters, PositionFilter::All),
        ("mlps/current_word", PatchTarget::Mlps, CurrentWord, PositionFilter::All),
    ];
    for (name, target, kind, filter) in sweeps {
        manifest.record(&format!("patch {name}"), || {
            commands::patch(ctx, target, kind, &commands::default_letters(kind), filter)
        })?;
    }
    manifest.record("attn", || commands::attention(ctx, &s.histogram_heads, &s.previous_token_heads))?;
    manifest.record("ablate", || commands::ablate(ctx, &s.circuit))?;
    manifest.record("ov", || {
        let mut files = commands::ov(ctx, &[s.observe_head], true, false)?;
        files.extend(commands::ov(ctx, &s.letter_movers, true, false)?);
        Ok(files)
    })?;
    manifest.record("scatter", || commands::scatter(ctx, s.observe_head))?;
    for pair in WordPair::all_distinct() {
        manifest.record(&format!("swap {pair}"), || {
            commands::swap(ctx, SwapKind::All, pair, s.bos_impact_threshold, &s.letter_movers)
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    let name = cli.command.name();
    if let Command::MakeToy { dir, toy_seed } = &cli.command {
        return make_toy(dir, *toy_seed);
    }
    let file = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let settings = cli.overrides.into_config().over(file).resolve()?;
    if let Some(n) = settings.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size worker pool: {e}")))?;
    }
    let ctx = Context::new(settings.clone())?;
    let mut manifest = RunManifest::new(command_line, settings);
    let s = &ctx.settings;
    match cli.command {
        Command::GenDataset => manifest.record(name, || commands::gen_dataset(&ctx))?,
        Command::EvalBaseline => manifest.record(name, || commands::eval_baseline(&ctx))?,
        Command::Patch {
            target,
            corruption,
            letter,
            positions,
        } => {
            let letters = letters(&letter, corruption)?;
            manifest.record(name, || commands::patch(&ctx, target, corruption, &letters, positions))?
        }
        Command::Ablate { circuit } => {
            let circuit = circuit.unwrap_or_else(|| s.circuit.clone());
            manifest.record(name, || commands::ablate(&ctx, &circuit))?
        }
        Command::Ov {
            heads,
            input_plain,
            output_spaced,
        } => {
            let heads = heads.unwrap_or_else(|| s.letter_movers.clone());
            manifest.record(name, || commands::ov(&ctx, &heads, !input_plain, output_spaced))?
        }
        Command::Scatter { head } => manifest.record(name, || commands::scatter(&ctx, head.unwrap_or(s.observe_head)))?,
        Command::Attn { heads, patterns } => {
            let heads = heads.unwrap_or_else(|| s.histogram_heads.clone());
            let patterns = patterns.unwrap_or_else(|| s.previous_token_heads.clone());
            manifest.record(name, || commands::attention(&ctx, &heads, &patterns))?
        }
        Command::Swap {
            kind,
            pair,
            threshold,
            heads,
        } => {
            let heads = heads.unwrap_or_else(|| s.letter_movers.clone());
            let threshold = threshold.unwrap_or(s.bos_impact_threshold);
            manifest.record(name, || commands::swap(&ctx, kind, pair, threshold, &heads))?
        }
        Command::All => run_all(&ctx, &mut manifest)?,
        Command::MakeToy { .. } => unreachable!("handled above"),
    }
    manifest.write(&s.output_dir.join(format!("manifest_{name}.json")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
