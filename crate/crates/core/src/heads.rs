//! Per-head analyses: attention allocation, OV-circuit letter maps and the
//! attention-vs-projection scatter.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::HeadId;
use crate::error::{Error, Result};
use crate::model::{Capture, HookPoint, Model, Weights};
use crate::report;
use crate::task::{LetterIndex, PromptSample, Slot, TaskVocab, CAPITALS};
use crate::tensor::{dot, matmul_acc, Tensor};

/// Mean attention from the prediction position of one letter to every earlier position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHistogram {
    pub head: HeadId,
    pub letter: LetterIndex,
    /// Slot names of the source positions `0..=pred_pos`.
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub samples: usize,
}

fn check_samples(samples: &[PromptSample]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("no samples to analyse".into()))?;
    let n = first.tokens.len();
    if samples.iter().any(|s| s.tokens.len() != n) {
        return Err(Error::Precondition("samples are not aligned to one length".into()));
    }
    Ok(n)
}

fn check_heads(model: &Model, heads: &[HeadId]) -> Result<()> {
    heads.iter().try_for_each(|h| h.validate(model.config()))
}

/// Sums of `f(sample, cache)` over samples in order, evaluated in parallel.
fn accumulate<F>(model: &Model, samples: &[PromptSample], capture: &Capture, len: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&PromptSample, &crate::model::ActivationCache) -> Result<Vec<f64>> + Sync,
{
    let parts = samples
        .par_iter()
        .map(|s| {
            let out = model.residual(&s.tokens, &[], capture)?;
            f(s, &out.cache)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; len];
    for p in parts {
        for (a, v) in sums.iter_mut().zip(p) {
            *a += v;
        }
    }
    Ok(sums)
}

/// Histograms for each head and each letter, from one forward per sample.
pub fn attention_histograms(model: &Model, samples: &[PromptSample], heads: &[HeadId]) -> Result<Vec<AttentionHistogram>> {
    let n = check_samples(samples)?;
    check_heads(model, heads)?;
    let layers: BTreeSet<usize> = heads.iter().map(|h| h.layer).collect();
    let capture = Capture::only(layers.iter().map(|&l| HookPoint::AttnProbs(l)));
    for i in LetterIndex::ALL {
        if i.pred_pos() >= n {
            return Err(Error::Precondition(format!("prompts of {n} tokens have no letter {i}")));
        }
    }
    // layout: head-major, then letter, then source position 0..n
    let stride = 3 * n;
    let sums = accumulate(model, samples, &capture, heads.len() * stride, |_, cache| {
        let mut out = vec![0.0; heads.len() * stride];
        for (k, h) in heads.iter().enumerate() {
            let probs = cache.attn_probs(h.layer)?.slab(h.head);
            for i in LetterIndex::ALL {
                let dst = i.pred_pos();
                for src in 0..=dst {
                    out[k * stride + i.offset() * n + src] = probs[dst * n + src] as f64;
                }
            }
        }
        Ok(out)
    })?;
    let count = samples.len() as f64;
    let mut hists = Vec::new();
    for (k, &head) in heads.iter().enumerate() {
        for i in LetterIndex::ALL {
            let dst = i.pred_pos();
            let base = k * stride + i.offset() * n;
            hists.push(AttentionHistogram {
                head,
                letter: i,
                labels: (0..=dst).map(|p| Slot::at(p).map_or(p.to_string(), |s| s.to_string())).collect(),
                values: sums[base..=base + dst].iter().map(|v| v / count).collect(),
                samples: samples.len(),
            });
        }
    }
    Ok(hists)
}

pub fn attention_histogram(model: &Model, samples: &[PromptSample], head: HeadId, i: LetterIndex) -> Result<AttentionHistogram> {
    let mut all = attention_histograms(model, samples, &[head])?;
    Ok(all.swap_remove(i.offset()))
}

/// Writes histograms as `head,letter,position,mean_attention` rows.
pub fn histograms_csv(hists: &[AttentionHistogram]) -> String {
    let mut rows = Vec::new();
    for h in hists {
        for (label, v) in h.labels.iter().zip(&h.values) {
            rows.push(vec![h.head.to_string(), h.letter.to_string(), label.clone(), report::fmt_value(*v)]);
        }
    }
    report::table_csv(&["head", "letter", "position", "mean_attention"], &rows)
}

/// Mean `[N, N]` attention pattern of one head.
pub fn mean_attention_pattern(model: &Model, samples: &[PromptSample], head: HeadId) -> Result<Tensor> {
    let n = check_samples(samples)?;
    check_heads(model, &[head])?;
    let capture = Capture::only([HookPoint::AttnProbs(head.layer)]);
    let sums = accumulate(model, samples, &capture, n * n, |_, cache| {
        Ok(cache.attn_probs(head.layer)?.slab(head.head).iter().map(|&v| v as f64).collect())
    })?;
    let count = samples.len() as f64;
    Tensor::new(vec![n, n], sums.iter().map(|v| (v / count) as f32).collect())
}

/// Letter-to-letter logits through the summed OV circuit of a head set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvGrid {
    pub heads: Vec<HeadId>,
    pub input_spaced: bool,
    pub output_spaced: bool,
    /// Row-major `[26 inputs, 26 outputs]`.
    pub values: Vec<f64>,
}

impl OvGrid {
    pub fn get(&self, input: usize, output: usize) -> f64 {
        self.values[input * 26 + output]
    }

    /// Rows whose diagonal entry is among the row's `k` largest.
    pub fn diagonal_in_top_k(&self, k: usize) -> usize {
        (0..26)
            .filter(|&r| {
                let diag = self.get(r, r);
                (0..26).filter(|&c| self.get(r, c) > diag).count() < k
            })
            .count()
    }

    /// Mean diagonal minus mean off-diagonal entry.
    pub fn diagonal_contrast(&self) -> f64 {
        let diag: f64 = (0..26).map(|r| self.get(r, r)).sum();
        let total: f64 = self.values.iter().sum();
        diag / 26.0 - (total - diag) / (26.0 * 25.0)
    }

    pub fn labels(spaced: bool) -> Vec<String> {
        CAPITALS
            .iter()
            .map(|c| if spaced { format!("_{c}") } else { c.to_string() })
            .collect()
    }

    pub fn file_stem(&self) -> String {
        let heads: Vec<String> = self.heads.iter().map(|h| h.to_string().replace('.', "_")).collect();
        format!(
            "ov_{}_{}_to_{}",
            heads.join("-"),
            if self.input_spaced { "spaced" } else { "plain" },
            if self.output_spaced { "spaced" } else { "plain" }
        )
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let stem = self.file_stem();
        let (rows, cols) = (Self::labels(self.input_spaced), Self::labels(self.output_spaced));
        let csv = dir.join(format!("{stem}.csv"));
        report::write_grid_csv(&csv, "input", &rows, &cols, &self.values)?;
        let svg = dir.join(format!("{stem}.svg"));
        let names: Vec<String> = self.heads.iter().map(|h| h.to_string()).collect();
        report::write_text(
            &svg,
            &report::heatmap_svg(&format!("OV circuit of {}", names.join(", ")), &rows, &cols, &self.values),
        )?;
        Ok(vec![csv, svg])
    }
}

/// `W_E[input] · Σ_h W_V W_O · W_E[output]ᵀ` over the 26 capital letters.
/// Layer norms and biases are left out.
pub fn full_ov_circuit(
    weights: &Weights,
    vocab: &TaskVocab,
    heads: &[HeadId],
    input_spaced: bool,
    output_spaced: bool,
) -> Result<OvGrid> {
    let cfg = &weights.config;
    heads.iter().try_for_each(|h| h.validate(cfg))?;
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let ids = |spaced: bool| if spaced { vocab.spaced_letters } else { vocab.letters };
    let gather = |ids: [u32; 26]| -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(26 * d);
        for t in ids {
            if t as usize >= cfg.vocab {
                return Err(Error::TokenId(t));
            }
            out.extend_from_slice(weights.w_e.row(t as usize));
        }
        Ok(out)
    };
    let inputs = gather(ids(input_spaced))?;
    let outputs = gather(ids(output_spaced))?;
    let mut written = vec![0.0f32; 26 * d];
    for h in heads {
        let lw = &weights.layers[h.layer];
        let mut v = vec![0.0f32; 26 * dh];
        matmul_acc(&inputs, lw.w_v.slab(h.head), &mut v, 26, d, dh);
        matmul_acc(&v, lw.w_o.slab(h.head), &mut written, 26, dh, d);
    }
    let mut values = Vec::with_capacity(26 * 26);
    for r in 0..26 {
        for c in 0..26 {
            values.push(dot(&written[r * d..(r + 1) * d], &outputs[c * d..(c + 1) * d]) as f64);
        }
    }
    Ok(OvGrid {
        heads: heads.to_vec(),
        input_spaced,
        output_spaced,
        values,
    })
}

/// The `[d, d]` QK matrix of one head.
pub fn qk_matrix(weights: &Weights, head: HeadId) -> Result<Tensor> {
    weights.qk_matrix(head.layer, head.head)
}

/// One point per (sample, letter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub sample: usize,
    pub letter: LetterIndex,
    /// Attention from the prediction position to `Ci`.
    pub attention: f32,
    /// Head output at the prediction position dotted with the correct letter's unembedding.
    pub projection: f32,
}

pub fn copy_scatter(model: &Model, samples: &[PromptSample], head: HeadId) -> Result<Vec<ScatterPoint>> {
    let n = check_samples(samples)?;
    check_heads(model, &[head])?;
    let d = model.config().d_model;
    let capture = Capture::only([HookPoint::AttnProbs(head.layer), HookPoint::HeadOut(head.layer)]);
    let w_u = model.weights().w_u();
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let out = model.residual(&s.tokens, &[], &capture)?;
            let probs = out.cache.attn_probs(head.layer)?.slab(head.head);
            let outs = out.cache.head_out(head.layer)?.slab(head.head);
            LetterIndex::ALL
                .iter()
                .map(|&i| {
                    let dst = i.pred_pos();
                    let answer = s.answer(i) as usize;
                    if answer >= w_u.rows() {
                        return Err(Error::TokenId(s.answer(i)));
                    }
                    Ok(ScatterPoint {
                        sample: k,
                        letter: i,
                        attention: probs[dst * n + i.word_pos()],
                        projection: dot(&outs[dst * d..(dst + 1) * d], w_u.row(answer)),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                report::fmt_value(p.attention as f64),
                report::fmt_value(p.projection as f64),
                p.sample.to_string(),
                p.letter.to_string(),
            ]
        })
        .collect();
    report::table_csv(&["x_attention", "y_projection", "sample", "letter"], &rows)
}

/// Sample Pearson correlation; `None` when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&xs, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&xs, &[1.0; 4]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    #[test]
    fn diagonal_statistics() {
        let mut values = vec![0.0; 26 * 26];
        for r in 0..26 {
            values[r * 26 + r] = 1.0;
        }
        values[26 + 2] = 5.0; // row 1 prefers column 2
        let g = OvGrid {
            heads: vec![],
            input_spaced: true,
            output_spaced: false,
            values,
        };
        assert_eq!(g.diagonal_in_top_k(1), 25);
        assert_eq!(g.diagonal_in_top_k(2), 26);
        assert!(g.diagonal_contrast() > 0.0);
        assert_eq!(g.file_stem(), "ov__spaced_to_plain");
        assert_eq!(OvGrid::labels(true)[0], "_A");
    }
}
