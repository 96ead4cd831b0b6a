//! Letter metrics and activation-patching sweeps.
//!
//! Every sweep cell is the mean over aligned (clean, corrupted) pairs of
//! `patched − clean` logit difference, where the patched run is the clean run
//! with one activation taken from the corrupted run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CorruptedPairs, CorruptionKind};
use crate::error::{Error, Result};
use crate::model::{Capture, HookPoint, Intervention, Model};
use crate::report;
use crate::task::{LetterIndex, PromptSample, Slot, TaskVocab, LPAREN_POS, PROMPT_LEN};
use crate::tensor::{softmax_in_place, Tensor};

/// `values[correct] − max(values[others])` over the 26 capital letters.
pub fn letter_margin(values: &[f32; 26], correct: usize) -> f32 {
    let best_other = values
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != correct)
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    values[correct] - best_other
}

fn correct_index(vocab: &TaskVocab, sample: &PromptSample, i: LetterIndex) -> Result<usize> {
    let answer = sample.answer(i);
    vocab
        .letters
        .iter()
        .position(|&t| t == answer)
        .ok_or_else(|| Error::Precondition(format!("answer token {answer} is not a capital letter")))
}

fn check_logits(logits: &Tensor, pos: usize) -> Result<()> {
    if logits.shape().len() != 2 || pos >= logits.rows() {
        return Err(Error::Dimension {
            op: "letter metric",
            lhs: logits.shape().to_vec(),
            rhs: vec![pos + 1],
        });
    }
    Ok(())
}

fn gather_letters(row: &[f32], vocab: &TaskVocab) -> Result<[f32; 26]> {
    let mut out = [0.0; 26];
    for (o, &t) in out.iter_mut().zip(&vocab.letters) {
        *o = *row.get(t as usize).ok_or(Error::TokenId(t))?;
    }
    Ok(out)
}

/// Logit of the correct letter minus the best other capital letter, read at
/// the position that predicts letter `i`.
pub fn logit_diff(logits: &Tensor, sample: &PromptSample, i: LetterIndex, vocab: &TaskVocab) -> Result<f32> {
    let pos = i.pred_pos();
    check_logits(logits, pos)?;
    let letters = gather_letters(logits.row(pos), vocab)?;
    Ok(letter_margin(&letters, correct_index(vocab, sample, i)?))
}

/// Same as [`logit_diff`] with probabilities from a softmax over the whole vocabulary.
pub fn prob_diff(logits: &Tensor, sample: &PromptSample, i: LetterIndex, vocab: &TaskVocab) -> Result<f32> {
    let pos = i.pred_pos();
    check_logits(logits, pos)?;
    let mut row = logits.row(pos).to_vec();
    let n = row.len();
    softmax_in_place(&mut row, n);
    let letters = gather_letters(&row, vocab)?;
    Ok(letter_margin(&letters, correct_index(vocab, sample, i)?))
}

/// [`logit_diff`] computed from the final residual stream, touching only the
/// 26 letter rows of the unembedding.
pub fn logit_diff_from_resid(
    model: &Model,
    resid_final: &Tensor,
    sample: &PromptSample,
    i: LetterIndex,
    vocab: &TaskVocab,
) -> Result<f32> {
    let values = model.logits_at(resid_final, i.pred_pos(), &vocab.letters)?;
    let letters: [f32; 26] = values.try_into().expect("26 letters requested");
    Ok(letter_margin(&letters, correct_index(vocab, sample, i)?))
}

/// Clean-model performance averaged over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub samples: usize,
    /// Mean logit difference for letters 1..3.
    pub logit_diff: [f64; 3],
    pub prob_diff: [f64; 3],
    pub mean_logit_diff: f64,
    pub mean_prob_diff: f64,
}

/// Both letter metrics for each letter of each sample, in input order.
pub fn per_sample_metrics(model: &Model, vocab: &TaskVocab, samples: &[PromptSample]) -> Result<Vec<[(f32, f32); 3]>> {
    samples
        .par_iter()
        .map(|s| {
            let out = model.residual(&s.tokens, &[], &Capture::Nothing)?;
            let mut row = [(0.0, 0.0); 3];
            for i in LetterIndex::ALL {
                let logits = model.logits_row(&out.resid_final, i.pred_pos())?;
                let correct = correct_index(vocab, s, i)?;
                let letters = gather_letters(&logits, vocab)?;
                let mut probs = logits;
                let n = probs.len();
                softmax_in_place(&mut probs, n);
                let p_letters = gather_letters(&probs, vocab)?;
                row[i.offset()] = (letter_margin(&letters, correct), letter_margin(&p_letters, correct));
            }
            Ok(row)
        })
        .collect()
}

pub fn evaluate_baseline(model: &Model, vocab: &TaskVocab, samples: &[PromptSample]) -> Result<Baseline> {
    if samples.is_empty() {
        return Err(Error::Precondition("baseline needs at least one sample".into()));
    }
    let rows = per_sample_metrics(model, vocab, samples)?;
    let n = rows.len() as f64;
    let mut ld = [0.0f64; 3];
    let mut pd = [0.0f64; 3];
    for r in &rows {
        for k in 0..3 {
            ld[k] += r[k].0 as f64;
            pd[k] += r[k].1 as f64;
        }
    }
    ld.iter_mut().for_each(|v| *v /= n);
    pd.iter_mut().for_each(|v| *v /= n);
    Ok(Baseline {
        samples: samples.len(),
        logit_diff: ld,
        prob_diff: pd,
        mean_logit_diff: ld.iter().sum::<f64>() / 3.0,
        mean_prob_diff: pd.iter().sum::<f64>() / 3.0,
    })
}

/// A template position, either fixed or relative to the predicted letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedPosition {
    Fixed(usize),
    /// `Ci`
    CurrentWord,
    /// `Ti`
    CurrentRest,
    /// `C(i−1)`
    PreviousWord,
    /// `T(i−1)`
    PreviousRest,
    /// `A(i−1)`: the prediction position; for the first letter this is `" ("`.
    PreviousAnswer,
}

impl NamedPosition {
    pub fn resolve(self, i: LetterIndex) -> Result<usize> {
        let prev = || {
            i.previous()
                .ok_or_else(|| Error::Precondition(format!("{self} is undefined for the first letter")))
        };
        Ok(match self {
            NamedPosition::Fixed(p) => p,
            NamedPosition::CurrentWord => i.word_pos(),
            NamedPosition::CurrentRest => i.rest_pos(),
            NamedPosition::PreviousWord => prev()?.word_pos(),
            NamedPosition::PreviousRest => prev()?.rest_pos(),
            NamedPosition::PreviousAnswer => i.previous().map_or(LPAREN_POS, |p| p.answer_pos()),
        })
    }
}

impl fmt::Display for NamedPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NamedPosition::Fixed(p) => match Slot::at(*p) {
                Some(s) => write!(f, "{s}"),
                None => write!(f, "{p}"),
            },
            NamedPosition::CurrentWord => write!(f, "Ci"),
            NamedPosition::CurrentRest => write!(f, "Ti"),
            NamedPosition::PreviousWord => write!(f, "C(i-1)"),
            NamedPosition::PreviousRest => write!(f, "T(i-1)"),
            NamedPosition::PreviousAnswer => write!(f, "A(i-1)"),
        }
    }
}

impl FromStr for NamedPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let rel = match s {
            "Ci" => Some(NamedPosition::CurrentWord),
            "Ti" => Some(NamedPosition::CurrentRest),
            "C(i-1)" | "Ci-1" => Some(NamedPosition::PreviousWord),
            "T(i-1)" | "Ti-1" => Some(NamedPosition::PreviousRest),
            "A(i-1)" | "Ai-1" => Some(NamedPosition::PreviousAnswer),
            _ => None,
        };
        if let Some(r) = rel {
            return Ok(r);
        }
        if let Some(slot) = Slot::all().iter().find(|sl| sl.to_string() == s) {
            return Ok(NamedPosition::Fixed(slot.position()));
        }
        if s == "LParen" {
            return Ok(NamedPosition::Fixed(LPAREN_POS));
        }
        match s.parse::<usize>() {
            Ok(p) if p < PROMPT_LEN => Ok(NamedPosition::Fixed(p)),
            _ => Err(Error::Config(format!("unknown named position {s:?}"))),
        }
    }
}

/// Which positions a head-output patch touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PositionFilter {
    #[default]
    All,
    Named(NamedPosition),
}

impl PositionFilter {
    pub fn positions(self, i: LetterIndex, n: usize) -> Result<Vec<usize>> {
        match self {
            PositionFilter::All => Ok((0..n).collect()),
            PositionFilter::Named(p) => {
                let pos = p.resolve(i)?;
                if pos >= n {
                    return Err(Error::Coordinate(format!("position {pos} in a sequence of {n}")));
                }
                Ok(vec![pos])
            }
        }
    }
}

impl fmt::Display for PositionFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositionFilter::All => write!(f, "all"),
            PositionFilter::Named(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for PositionFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(PositionFilter::All)
        } else {
            s.parse().map(PositionFilter::Named)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Residual,
    Heads,
    Mlps,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Residual => "residual",
            SweepKind::Heads => "heads",
            SweepKind::Mlps => "mlps",
        }
    }
}

/// Run-level facts stored next to a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub kind: SweepKind,
    pub letter: LetterIndex,
    pub corruption: CorruptionKind,
    pub position_filter: String,
    pub samples: usize,
    pub skipped: usize,
    pub clean_logit_diff: f64,
    pub corrupted_logit_diff: f64,
    pub seed: Option<u64>,
}

/// Mean Δ logit difference indexed by layer and position (or head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub meta: GridMeta,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major `[layers, cols]`.
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    /// `(row, col, value)` of the most negative cell.
    pub fn min_cell(&self) -> (usize, usize, f64) {
        let (k, v) = self
            .values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
        (k / self.cols(), k % self.cols(), v)
    }

    /// Cells sorted from most negative upwards.
    pub fn ranked(&self) -> Vec<(usize, usize, f64)> {
        let mut cells: Vec<_> = (0..self.values.len())
            .map(|k| (k / self.cols(), k % self.cols(), self.values[k]))
            .collect();
        cells.sort_by(|a, b| a.2.total_cmp(&b.2));
        cells
    }

    pub fn file_stem(&self) -> String {
        let m = &self.meta;
        let mut stem = format!("{}_letter{}_{}", m.kind.name(), m.letter, m.corruption.name());
        if m.kind == SweepKind::Heads && m.position_filter != "all" {
            let safe: String = m
                .position_filter
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            stem.push_str(&format!("_at_{safe}"));
        }
        stem
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let stem = self.file_stem();
        let csv = dir.join(format!("{stem}.csv"));
        report::write_grid_csv(&csv, "layer", &self.row_labels, &self.col_labels, &self.values)?;
        let json = dir.join(format!("{stem}.json"));
        report::write_json(&json, &self.meta)?;
        let svg = dir.join(format!("{stem}.svg"));
        let title = format!(
            "{} patching, letter {}, {} (n={})",
            self.meta.kind.name(),
            self.meta.letter,
            self.meta.corruption.name(),
            self.meta.samples
        );
        report::write_text(
            &svg,
            &report::heatmap_svg(&title, &self.row_labels, &self.col_labels, &self.values),
        )?;
        Ok(vec![csv, json, svg])
    }
}

fn check_pairs(pairs: &CorruptedPairs) -> Result<usize> {
    if pairs.clean.len() != pairs.corrupted.len() {
        return Err(Error::Precondition("clean and corrupted sets differ in size".into()));
    }
    if pairs.clean.is_empty() {
        return Err(Error::Precondition("no aligned samples to patch".into()));
    }
    let n = pairs.clean[0].tokens.len();
    for (c, k) in pairs.clean.iter().zip(&pairs.corrupted) {
        if c.tokens.len() != n || k.tokens.len() != n {
            return Err(Error::Precondition("samples are not aligned to one length".into()));
        }
    }
    Ok(n)
}

fn position_labels(n: usize) -> Vec<String> {
    (0..n)
        .map(|p| Slot::at(p).map_or_else(|| p.to_string(), |s| s.to_string()))
        .collect()
}

fn layer_labels(layers: usize) -> Vec<String> {
    (0..layers).map(|l| l.to_string()).collect()
}

/// Shared sweep driver. `make_patch` builds the intervention for one cell
/// from the corrupted cache; cells are `(layer, col)`.
fn sweep<F>(
    model: &Model,
    vocab: &TaskVocab,
    pairs: &CorruptedPairs,
    i: LetterIndex,
    cols: usize,
    capture: Capture,
    make_patch: F,
) -> Result<(Vec<f64>, f64, f64)>
where
    F: Fn(usize, usize, &crate::model::ActivationCache) -> Result<Option<Intervention>> + Sync,
{
    let layers = model.config().n_layers;
    let mut sums = vec![0.0f64; layers * cols];
    let (mut clean_sum, mut corrupt_sum) = (0.0f64, 0.0f64);
    let mut clean_capture = match &capture {
        Capture::Only(set) => set.clone(),
        _ => Default::default(),
    };
    clean_capture.extend((0..layers).map(HookPoint::ResidPre));
    let clean_capture = Capture::Only(clean_capture);

    for (clean, corrupted) in pairs.clean.iter().zip(&pairs.corrupted) {
        let clean_run = model.residual(&clean.tokens, &[], &clean_capture)?;
        let corrupt_run = model.residual(&corrupted.tokens, &[], &capture)?;
        let clean_ld = logit_diff_from_resid(model, &clean_run.resid_final, clean, i, vocab)?;
        clean_sum += clean_ld as f64;
        corrupt_sum += logit_diff_from_resid(model, &corrupt_run.resid_final, clean, i, vocab)? as f64;

        let deltas: Vec<f32> = (0..layers * cols)
            .into_par_iter()
            .map(|cell| {
                let (layer, col) = (cell / cols, cell % cols);
                let Some(iv) = make_patch(layer, col, &corrupt_run.cache)? else {
                    return Ok(0.0);
                };
                let resid = clean_run.cache.resid_pre(layer)?;
                let out = model.residual_from(layer, resid, std::slice::from_ref(&iv), &Capture::Nothing)?;
                Ok(logit_diff_from_resid(model, &out.resid_final, clean, i, vocab)? - clean_ld)
            })
            .collect::<Result<_>>()?;
        for (s, d) in sums.iter_mut().zip(deltas) {
            *s += d as f64;
        }
    }
    let n = pairs.clean.len() as f64;
    sums.iter_mut().for_each(|s| *s /= n);
    Ok((sums, clean_sum / n, corrupt_sum / n))
}

fn meta(kind: SweepKind, i: LetterIndex, corruption: CorruptionKind, filter: PositionFilter, pairs: &CorruptedPairs, clean: f64, corrupted: f64) -> GridMeta {
    GridMeta {
        kind,
        letter: i,
        corruption,
        position_filter: filter.to_string(),
        samples: pairs.clean.len(),
        skipped: pairs.skipped,
        clean_logit_diff: clean,
        corrupted_logit_diff: corrupted,
        seed: None,
    }
}

/// Patches `resid_pre[layer][pos]` for every layer and position.
pub fn sweep_residual(
    model: &Model,
    vocab: &TaskVocab,
    pairs: &CorruptedPairs,
    i: LetterIndex,
    corruption: CorruptionKind,
) -> Result<PatchGrid> {
    let n = check_pairs(pairs)?;
    let layers = model.config().n_layers;
    let capture = Capture::only((0..layers).map(HookPoint::ResidPre));
    let (values, clean, corrupted) = sweep(model, vocab, pairs, i, n, capture, |layer, pos, cache| {
        let value = Tensor::new(vec![1, model.config().d_model], cache.resid_pre(layer)?.row(pos).to_vec())?;
        Ok(Some(Intervention::PatchResidPre {
            layer,
            positions: vec![pos],
            value,
        }))
    })?;
    Ok(PatchGrid {
        meta: meta(SweepKind::Residual, i, corruption, PositionFilter::All, pairs, clean, corrupted),
        row_labels: layer_labels(layers),
        col_labels: position_labels(n),
        values,
    })
}

/// Patches each head's output at the filtered positions.
pub fn sweep_heads(
    model: &Model,
    vocab: &TaskVocab,
    pairs: &CorruptedPairs,
    i: LetterIndex,
    corruption: CorruptionKind,
    filter: PositionFilter,
) -> Result<PatchGrid> {
    let n = check_pairs(pairs)?;
    let cfg = model.config();
    let (layers, heads, d) = (cfg.n_layers, cfg.n_heads, cfg.d_model);
    let positions = filter.positions(i, n)?;
    let capture = Capture::only((0..layers).map(HookPoint::HeadOut));
    let (values, clean, corrupted) = sweep(model, vocab, pairs, i, heads, capture, |layer, head, cache| {
        let slab = cache.head_out(layer)?.slab(head);
        let mut value = Vec::with_capacity(positions.len() * d);
        for &p in &positions {
            value.extend_from_slice(&slab[p * d..(p + 1) * d]);
        }
        Ok(Some(Intervention::PatchHeadOut {
            layer,
            head,
            positions: positions.clone(),
            value: Tensor::new(vec![positions.len(), d], value)?,
        }))
    })?;
    Ok(PatchGrid {
        meta: meta(SweepKind::Heads, i, corruption, filter, pairs, clean, corrupted),
        row_labels: layer_labels(layers),
        col_labels: (0..heads).map(|h| h.to_string()).collect(),
        values,
    })
}

/// Patches `mlp_out[layer][pos]` for every layer and position.
pub fn sweep_mlps(
    model: &Model,
    vocab: &TaskVocab,
    pairs: &CorruptedPairs,
    i: LetterIndex,
    corruption: CorruptionKind,
) -> Result<PatchGrid> {
    let n = check_pairs(pairs)?;
    let layers = model.config().n_layers;
    let capture = Capture::only((0..layers).map(HookPoint::MlpOut));
    let (values, clean, corrupted) = sweep(model, vocab, pairs, i, n, capture, |layer, pos, cache| {
        let value = Tensor::new(vec![1, model.config().d_model], cache.mlp_out(layer)?.row(pos).to_vec())?;
        Ok(Some(Intervention::PatchMlpOut {
            layer,
            positions: vec![pos],
            value,
        }))
    })?;
    Ok(PatchGrid {
        meta: meta(SweepKind::Mlps, i, corruption, PositionFilter::All, pairs, clean, corrupted),
        row_labels: layer_labels(layers),
        col_labels: position_labels(n),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TaskVocab {
        let letters: [u32; 26] = std::array::from_fn(|k| k as u32);
        TaskVocab {
            bos: 99,
            the: 98,
            lparen: 97,
            letters,
            spaced_letters: std::array::from_fn(|k| 26 + k as u32),
        }
    }

    fn sample(answers: [u32; 3]) -> PromptSample {
        PromptSample {
            tokens: vec![0; PROMPT_LEN],
            words: Default::default(),
            acronym: String::new(),
            answers,
            seed: 0,
        }
    }

    #[test]
    fn margin_examples() {
        let mut v = [1.0f32; 26];
        assert_eq!(letter_margin(&v, 3), 0.0);
        v[3] = 5.0;
        v[7] = 3.0;
        assert_eq!(letter_margin(&v, 3), 2.0);
        assert_eq!(letter_margin(&v, 7), -2.0);
    }

    #[test]
    fn logit_diff_reads_the_prediction_row() {
        let v = vocab();
        let mut logits = Tensor::zeros(&[PROMPT_LEN, 100]);
        // letter 2 is predicted at position 9
        logits.row_mut(9)[4] = 5.0;
        logits.row_mut(9)[10] = 3.0;
        logits.row_mut(9)[60] = 50.0; // non-letter tokens are ignored
        let s = sample([0, 4, 0]);
        assert_eq!(logit_diff(&logits, &s, LetterIndex::SECOND, &v).unwrap(), 2.0);
        assert_eq!(logit_diff(&logits, &s, LetterIndex::FIRST, &v).unwrap(), 0.0);
    }

    #[test]
    fn prob_diff_saturates_and_ties() {
        let v = vocab();
        let s = sample([2, 2, 2]);
        let uniform = Tensor::zeros(&[PROMPT_LEN, 100]);
        assert!(prob_diff(&uniform, &s, LetterIndex::THIRD, &v).unwrap().abs() < 1e-7);
        let mut peaked = Tensor::zeros(&[PROMPT_LEN, 100]);
        peaked.row_mut(10)[2] = 100.0;
        assert!((prob_diff(&peaked, &s, LetterIndex::THIRD, &v).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_letter_answer_is_rejected() {
        let v = vocab();
        let logits = Tensor::zeros(&[PROMPT_LEN, 100]);
        assert!(logit_diff(&logits, &sample([50, 0, 0]), LetterIndex::FIRST, &v).is_err());
    }

    #[test]
    fn named_positions() {
        use LetterIndex as L;
        let p = |s: &str, i| s.parse::<NamedPosition>().unwrap().resolve(i);
        assert_eq!(p("Ci", L::THIRD).unwrap(), 6);
        assert_eq!(p("Ti", L::FIRST).unwrap(), 3);
        assert_eq!(p("C(i-1)", L::SECOND).unwrap(), 2);
        assert_eq!(p("T(i-1)", L::THIRD).unwrap(), 5);
        assert_eq!(p("A(i-1)", L::THIRD).unwrap(), 10);
        assert_eq!(p("A(i-1)", L::FIRST).unwrap(), 8);
        assert!(p("C(i-1)", L::FIRST).is_err());
        assert_eq!(p("C2", L::FIRST).unwrap(), 4);
        assert_eq!(p("BOS", L::FIRST).unwrap(), 0);
        assert_eq!(p("(", L::FIRST).unwrap(), 8);
        assert!("Z9".parse::<NamedPosition>().is_err());
        for s in ["Ci", "Ti", "C(i-1)", "T(i-1)", "A(i-1)", "C3", "BOS"] {
            assert_eq!(s.parse::<NamedPosition>().unwrap().to_string(), s);
        }
        assert_eq!("all".parse::<PositionFilter>().unwrap(), PositionFilter::All);
        assert_eq!(PositionFilter::All.positions(L::FIRST, 12).unwrap().len(), 12);
    }
}
