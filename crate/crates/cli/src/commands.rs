//! Experiment drivers. Each returns the files it wrote.

use std::cell::OnceCell;
use std::path::PathBuf;

use acronym_circuit::circuit::{compute_mean_cache, progressive_eval, CircuitSpec, HeadId};
use acronym_circuit::dataset::{
    bundled_noun_list, enumerate_acronyms, filter_nouns, read_manifest, read_word_list, write_manifest, AcronymSet,
    CorruptionKind, DatasetBuilder, NounPool,
};
use acronym_circuit::heads::{attention_histograms, copy_scatter, full_ov_circuit, histograms_csv, mean_attention_pattern, pearson, scatter_csv};
use acronym_circuit::model::{load_weights, Model, ModelConfig, NameMap};
use acronym_circuit::patching::{evaluate_baseline, sweep_heads, sweep_mlps, sweep_residual, PositionFilter};
use acronym_circuit::positional::{bos_swap_sweep, combined_bos_swap, swap_pos_embeddings, BosImpactGrid, WordPair};
use acronym_circuit::report;
use acronym_circuit::task::{LetterIndex, PromptSample, Slot, TaskVocab};
use acronym_circuit::tokenizer::{gpt2_tokenizer, load_tokenizer, Tokenizer};
use clap::ValueEnum;
use serde::Serialize;

use crate::config::Settings;
use crate::CliError;

type Files = Result<Vec<PathBuf>, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PatchTarget {
    Residual,
    Heads,
    Mlps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SwapKind {
    PosEmbed,
    BosSweep,
    Combined,
    All,
}

pub struct Context {
    pub settings: Settings,
    pub tok: Tokenizer,
    pub vocab: TaskVocab,
    pub pool: NounPool,
    pub acronyms: AcronymSet,
    pub samples: Vec<PromptSample>,
    model: OnceCell<Model>,
}

fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(CliError::Invariant(format!("{what} contains non-finite values")))
    }
}

impl Context {
    pub fn new(settings: Settings) -> Result<Self, CliError> {
        let tok = match (&settings.vocab, &settings.merges) {
            (Some(v), Some(m)) => load_tokenizer(v, m)?,
            _ => gpt2_tokenizer()?,
        };
        let words = match &settings.word_list {
            Some(p) => read_word_list(p)?,
            None => bundled_noun_list(),
        };
        let pool = filter_nouns(&words, &tok)?;
        log::info!("{} of {} words are usable nouns", pool.len(), words.len());
        let acronyms = enumerate_acronyms(&tok)?;
        let samples = match &settings.dataset {
            Some(p) => read_manifest(p)?,
            None => DatasetBuilder::new(&tok, &pool, &acronyms)?.build(settings.dataset_size, settings.seed)?,
        };
        let vocab = TaskVocab::from_tokenizer(&tok)?;
        std::fs::create_dir_all(&settings.output_dir).map_err(|e| CliError::missing_or_io(&settings.output_dir, e))?;
        Ok(Self {
            settings,
            tok,
            vocab,
            pool,
            acronyms,
            samples,
            model: OnceCell::new(),
        })
    }

    pub fn builder(&self) -> Result<DatasetBuilder<'_>, CliError> {
        Ok(DatasetBuilder::new(&self.tok, &self.pool, &self.acronyms)?)
    }

    pub fn model(&self) -> Result<&Model, CliError> {
        if let Some(m) = self.model.get() {
            return Ok(m);
        }
        let s = &self.settings;
        let path = s
            .weights
            .as_ref()
            .ok_or_else(|| CliError::Usage("no weights configured: pass --weights or set \"weights\"".into()))?;
        let config = match &s.model_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::missing_or_io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => ModelConfig::gpt2_small(),
        };
        let map = s.name_map.as_deref().map(NameMap::from_json_file).transpose()?;
        let weights = load_weights(path, &config, map.as_ref())?;
        if weights.config.vocab != self.tok.vocab_size() {
            return Err(CliError::Usage(format!(
                "model vocabulary has {} entries, tokenizer has {}",
                weights.config.vocab,
                self.tok.vocab_size()
            )));
        }
        let model = Model::new(weights)?;
        Ok(self.model.get_or_init(|| model))
    }

    fn first(&self, n: Option<usize>) -> &[PromptSample] {
        &self.samples[..n.unwrap_or(usize::MAX).min(self.samples.len())]
    }

    fn out(&self, name: &str) -> PathBuf {
        self.settings.output_dir.join(name)
    }

    fn check_heads(&self, heads: &[HeadId]) -> Result<(), CliError> {
        let cfg = self.model()?.config();
        for h in heads {
            h.validate(cfg)?;
        }
        Ok(())
    }
}

pub fn gen_dataset(ctx: &Context) -> Files {
    let path = ctx.out("dataset.jsonl");
    write_manifest(&path, &ctx.samples)?;
    Ok(vec![path])
}

#[derive(Serialize)]
struct BaselineReport {
    samples: usize,
    seed: u64,
    logit_diff: [f64; 3],
    prob_diff: [f64; 3],
    mean_logit_diff: f64,
    mean_prob_diff: f64,
}

pub fn eval_baseline(ctx: &Context) -> Files {
    let b = evaluate_baseline(ctx.model()?, &ctx.vocab, &ctx.samples)?;
    ensure_finite("baseline", b.logit_diff.iter().chain(&b.prob_diff).copied())?;
    let json = ctx.out("baseline.json");
    report::write_json(
        &json,
        &BaselineReport {
            samples: b.samples,
            seed: ctx.settings.seed,
            logit_diff: b.logit_diff,
            prob_diff: b.prob_diff,
            mean_logit_diff: b.mean_logit_diff,
            mean_prob_diff: b.mean_prob_diff,
        },
    )?;
    let mut rows: Vec<Vec<String>> = LetterIndex::ALL
        .iter()
        .map(|i| {
            vec![
                i.to_string(),
                report::fmt_value(b.logit_diff[i.offset()]),
                report::fmt_value(b.prob_diff[i.offset()]),
            ]
        })
        .collect();
    rows.push(vec![
        "overall".into(),
        report::fmt_value(b.mean_logit_diff),
        report::fmt_value(b.mean_prob_diff),
    ]);
    let csv = ctx.out("baseline.csv");
    report::write_table_csv(&csv, &["letter", "logit_diff", "prob_diff"], &rows)?;
    log::info!(
        "baseline over {} samples: logit diff {:.4}, prob diff {:.4}",
        b.samples,
        b.mean_logit_diff,
        b.mean_prob_diff
    );
    Ok(vec![json, csv])
}

pub fn patch(
    ctx: &Context,
    target: PatchTarget,
    corruption: CorruptionKind,
    letters: &[LetterIndex],
    filter: PositionFilter,
) -> Files {
    let model = ctx.model()?;
    let samples = ctx.first(ctx.settings.samples.patch);
    let builder = ctx.builder()?;
    let mut files = Vec::new();
    for &i in letters {
        if !corruption.applies_to(i) {
            return Err(CliError::Usage(format!(
                "{} corruption does not apply to letter {i}",
                corruption.name()
            )));
        }
        let pairs = builder.corrupted_pairs(samples, i, corruption, ctx.settings.seed)?;
        let mut grid = match target {
            PatchTarget::Residual => sweep_residual(model, &ctx.vocab, &pairs, i, corruption)?,
            PatchTarget::Heads => sweep_heads(model, &ctx.vocab, &pairs, i, corruption, filter)?,
            PatchTarget::Mlps => sweep_mlps(model, &ctx.vocab, &pairs, i, corruption)?,
        };
        grid.meta.seed = Some(ctx.settings.seed);
        ensure_finite(&grid.file_stem(), grid.values.iter().copied())?;
        files.extend(grid.write(&ctx.settings.output_dir)?);
    }
    Ok(files)
}

pub fn ablate(ctx: &Context, circuit: &CircuitSpec) -> Files {
    let model = ctx.model()?;
    let samples = ctx.first(ctx.settings.samples.ablate);
    let means = compute_mean_cache(model, samples)?;
    let result = progressive_eval(model, &ctx.vocab, samples, circuit, &means)?;
    ensure_finite(
        "progressive evaluation",
        result.steps.iter().flat_map(|s| s.logit_diff).chain(result.baseline),
    )?;
    let mut files = result.write(&ctx.settings.output_dir)?;
    let json = ctx.out("circuit_progressive.json");
    report::write_json(&json, &result)?;
    files.push(json);
    Ok(files)
}

#[derive(Serialize)]
struct OvSummary {
    heads: Vec<HeadId>,
    input_spaced: bool,
    output_spaced: bool,
    diagonal_in_top_3: usize,
    diagonal_contrast: f64,
}

pub fn ov(ctx: &Context, heads: &[HeadId], input_spaced: bool, output_spaced: bool) -> Files {
    ctx.check_heads(heads)?;
    let grid = full_ov_circuit(ctx.model()?.weights(), &ctx.vocab, heads, input_spaced, output_spaced)?;
    ensure_finite("OV grid", grid.values.iter().copied())?;
    let mut files = grid.write(&ctx.settings.output_dir)?;
    let json = ctx.out(&format!("{}.json", grid.file_stem()));
    report::write_json(
        &json,
        &OvSummary {
            heads: heads.to_vec(),
            input_spaced,
            output_spaced,
            diagonal_in_top_3: grid.diagonal_in_top_k(3),
            diagonal_contrast: grid.diagonal_contrast(),
        },
    )?;
    files.push(json);
    Ok(files)
}

fn head_stem(h: HeadId) -> String {
    h.to_string().replace('.', "_")
}

pub fn scatter(ctx: &Context, head: HeadId) -> Files {
    ctx.check_heads(&[head])?;
    let points = copy_scatter(ctx.model()?, ctx.first(ctx.settings.samples.scatter), head)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.attention as f64, p.projection as f64)).collect();
    ensure_finite("scatter", xy.iter().flat_map(|&(x, y)| [x, y]))?;
    let stem = format!("scatter_{}", head_stem(head));
    let csv = ctx.out(&format!("{stem}.csv"));
    report::write_text(&csv, &scatter_csv(&points))?;
    let svg = ctx.out(&format!("{stem}.svg"));
    report::write_text(
        &svg,
        &report::scatter_svg(
            &format!("Head {head}: projection on the correct letter vs attention to Ci"),
            "attention to Ci",
            "projection on correct letter",
            &xy,
        ),
    )?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
    let json = ctx.out(&format!("{stem}.json"));
    report::write_json(&json, &serde_json::json!({ "head": head, "points": xs.len(), "pearson": pearson(&xs, &ys) }))?;
    Ok(vec![csv, svg, json])
}

pub fn attention(ctx: &Context, hist_heads: &[HeadId], pattern_heads: &[HeadId]) -> Files {
    ctx.check_heads(hist_heads)?;
    ctx.check_heads(pattern_heads)?;
    let model = ctx.model()?;
    let samples = ctx.first(ctx.settings.samples.attention);
    let mut files = Vec::new();
    if !hist_heads.is_empty() {
        let hists = attention_histograms(model, samples, hist_heads)?;
        ensure_finite("attention histograms", hists.iter().flat_map(|h| h.values.iter().copied()))?;
        let csv = ctx.out("attention_histograms.csv");
        report::write_text(&csv, &histograms_csv(&hists))?;
        files.push(csv);
        for h in &hists {
            let svg = ctx.out(&format!("attention_{}_letter{}.svg", head_stem(h.head), h.letter));
            let title = format!("Head {}: attention from A(i-1) for letter {}", h.head, h.letter);
            report::write_text(&svg, &report::bar_chart_svg(&title, &h.labels, &h.values))?;
            files.push(svg);
        }
    }
    for &head in pattern_heads {
        let pattern = mean_attention_pattern(model, samples, head)?;
        let n = pattern.rows();
        let labels: Vec<String> = (0..n).map(|p| Slot::at(p).map_or(p.to_string(), |s| s.to_string())).collect();
        let values: Vec<f64> = pattern.data().iter().map(|&v| v as f64).collect();
        ensure_finite("attention pattern", values.iter().copied())?;
        let stem = format!("attention_pattern_{}", head_stem(head));
        let csv = ctx.out(&format!("{stem}.csv"));
        report::write_grid_csv(&csv, "query", &labels, &labels, &values)?;
        let svg = ctx.out(&format!("{stem}.svg"));
        report::write_text(
            &svg,
            &report::heatmap_svg(&format!("Mean attention pattern of head {head}"), &labels, &labels, &values),
        )?;
        files.extend([csv, svg]);
    }
    Ok(files)
}

fn sweep_for(ctx: &Context, pair: WordPair) -> Result<BosImpactGrid, CliError> {
    let grid = bos_swap_sweep(
        ctx.model()?,
        &ctx.vocab,
        ctx.first(ctx.settings.samples.swap),
        pair,
        ctx.settings.bos_rescale,
    )?;
    ensure_finite("BOS sweep", grid.overall.iter().copied())?;
    Ok(grid)
}

pub fn swap(ctx: &Context, kind: SwapKind, pair: WordPair, threshold: f64, heads: &[HeadId]) -> Files {
    ctx.check_heads(heads)?;
    let model = ctx.model()?;
    let samples = ctx.first(ctx.settings.samples.swap);
    let dir = &ctx.settings.output_dir;
    let mut files = Vec::new();
    if matches!(kind, SwapKind::PosEmbed | SwapKind::All) {
        for &head in heads {
            let cmp = swap_pos_embeddings(model, samples, pair, head)?;
            files.push(cmp.write(dir, "pos_embed_swap")?);
        }
    }
    if matches!(kind, SwapKind::BosSweep | SwapKind::Combined | SwapKind::All) {
        let grid = sweep_for(ctx, pair)?;
        files.extend(grid.write(dir)?);
        if matches!(kind, SwapKind::Combined | SwapKind::All) {
            for &head in heads {
                let cmp = combined_bos_swap(model, samples, &grid, threshold, head, ctx.settings.bos_rescale)?;
                files.push(cmp.write(dir, "combined_swap")?);
            }
        }
    }
    Ok(files)
}

pub fn default_letters(corruption: CorruptionKind) -> Vec<LetterIndex> {
    LetterIndex::ALL.into_iter().filter(|&i| corruption.applies_to(i)).collect()
}
