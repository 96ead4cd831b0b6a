//! Positional-information experiments: swapping positional embeddings and
//! swapping the attention that word tokens pay to BOS.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{CircuitSpec, HeadId};
use crate::error::{Error, Result};
use crate::model::{BosRescale, Capture, HookPoint, Intervention, Model};
use crate::patching::logit_diff_from_resid;
use crate::report;
use crate::task::{LetterIndex, PromptSample, TaskVocab};

/// Two word positions `Ca`, `Cb` to exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPair {
    pub a: LetterIndex,
    pub b: LetterIndex,
}

impl WordPair {
    pub fn new(a: LetterIndex, b: LetterIndex) -> Result<Self> {
        if a == b {
            return Err(Error::Precondition(format!("cannot swap C{a} with itself")));
        }
        Ok(Self { a, b })
    }

    /// Like [`WordPair::new`] but allows `a == b`, which makes every swap a no-op.
    pub fn allow_same(a: LetterIndex, b: LetterIndex) -> Self {
        Self { a, b }
    }

    pub fn positions(self) -> (usize, usize) {
        (self.a.word_pos(), self.b.word_pos())
    }

    pub fn all_distinct() -> Vec<WordPair> {
        use LetterIndex as L;
        vec![
            WordPair { a: L::FIRST, b: L::SECOND },
            WordPair { a: L::FIRST, b: L::THIRD },
            WordPair { a: L::SECOND, b: L::THIRD },
        ]
    }
}

impl fmt::Display for WordPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}-C{}", self.a, self.b)
    }
}

impl std::str::FromStr for WordPair {
    type Err = Error;
    /// Accepts `C1-C3`, `1,3` or `13`.
    fn from_str(s: &str) -> Result<Self> {
        let digits: Vec<usize> = s
            .chars()
            .filter(|c| c.is_ascii_digit())
            .map(|c| c as usize - '0' as usize)
            .collect();
        match digits[..] {
            [a, b] => WordPair::new(LetterIndex::new(a)?, LetterIndex::new(b)?),
            _ => Err(Error::Config(format!("word pair {s:?} should name two of C1, C2, C3"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwapCondition {
    Clean,
    PosEmbedSwap(WordPair),
    BosSwap(Vec<HeadId>, WordPair),
    Both(Vec<HeadId>, WordPair),
}

impl SwapCondition {
    pub fn name(&self) -> &'static str {
        match self {
            SwapCondition::Clean => "clean",
            SwapCondition::PosEmbedSwap(_) => "pos_embed_swap",
            SwapCondition::BosSwap(..) => "bos_swap",
            SwapCondition::Both(..) => "both",
        }
    }

    pub fn interventions(&self, rescale: BosRescale) -> Vec<Intervention> {
        let pos = |pair: &WordPair| {
            let (a, b) = pair.positions();
            Intervention::SwapPosEmbed { pos_a: a, pos_b: b }
        };
        let bos = |heads: &[HeadId], pair: &WordPair| {
            let (a, b) = pair.positions();
            heads
                .iter()
                .map(|h| Intervention::SwapBosAttention {
                    layer: h.layer,
                    head: h.head,
                    dst_a: a,
                    dst_b: b,
                    rescale,
                })
                .collect::<Vec<_>>()
        };
        match self {
            SwapCondition::Clean => vec![],
            SwapCondition::PosEmbedSwap(p) => vec![pos(p)],
            SwapCondition::BosSwap(heads, p) => bos(heads, p),
            SwapCondition::Both(heads, p) => {
                let mut v = vec![pos(p)];
                v.extend(bos(heads, p));
                v
            }
        }
    }
}

/// Mean attention of one head from each letter's prediction position to each `Ck`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAttention {
    pub condition: String,
    /// `values[letter][k]`: attention from `pred_pos(letter)` to `Ck`.
    pub values: [[f64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionComparison {
    pub head: HeadId,
    pub pair: WordPair,
    pub samples: usize,
    /// Heads whose BOS attention was swapped (empty when not applicable).
    pub bos_heads: Vec<HeadId>,
    pub conditions: Vec<ConditionAttention>,
}

impl AttentionComparison {
    pub fn condition(&self, name: &str) -> Option<&ConditionAttention> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    pub fn to_csv(&self) -> String {
        let mut rows = Vec::new();
        for c in &self.conditions {
            for i in LetterIndex::ALL {
                for k in LetterIndex::ALL {
                    rows.push(vec![
                        c.condition.clone(),
                        i.to_string(),
                        format!("C{k}"),
                        report::fmt_value(c.values[i.offset()][k.offset()]),
                    ]);
                }
            }
        }
        report::table_csv(&["condition", "pred_letter", "source", "mean_attention"], &rows)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}_{}_{}.csv", self.pair, self.head.to_string().replace('.', "_")));
        report::write_text(&path, &self.to_csv())?;
        Ok(path)
    }
}

fn check_samples(samples: &[PromptSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("no samples".into()))?;
    if samples.iter().any(|s| s.tokens.len() != first.tokens.len()) {
        return Err(Error::Precondition("samples are not aligned to one length".into()));
    }
    if first.tokens.len() <= LetterIndex::THIRD.pred_pos() {
        return Err(Error::Precondition("prompts are too short for three letters".into()));
    }
    Ok(())
}

fn observe(
    model: &Model,
    samples: &[PromptSample],
    head: HeadId,
    condition: &SwapCondition,
    rescale: BosRescale,
) -> Result<ConditionAttention> {
    let ivs = condition.interventions(rescale);
    let capture = Capture::only([HookPoint::AttnProbs(head.layer)]);
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let out = model.residual(&s.tokens, &ivs, &capture)?;
            let n = s.tokens.len();
            let probs = out.cache.attn_probs(head.layer)?.slab(head.head);
            let mut v = [[0.0f64; 3]; 3];
            for i in LetterIndex::ALL {
                for k in LetterIndex::ALL {
                    v[i.offset()][k.offset()] = probs[i.pred_pos() * n + k.word_pos()] as f64;
                }
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = [[0.0f64; 3]; 3];
    for v in &per_sample {
        for r in 0..3 {
            for c in 0..3 {
                values[r][c] += v[r][c];
            }
        }
    }
    let n = samples.len() as f64;
    values.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(ConditionAttention {
        condition: condition.name().to_owned(),
        values,
    })
}

/// Clean vs positional-embedding swap, observed at one head.
pub fn swap_pos_embeddings(model: &Model, samples: &[PromptSample], pair: WordPair, head: HeadId) -> Result<AttentionComparison> {
    check_samples(samples)?;
    head.validate(model.config())?;
    let conditions = [SwapCondition::Clean, SwapCondition::PosEmbedSwap(pair)]
        .iter()
        .map(|c| observe(model, samples, head, c, BosRescale::Proportional))
        .collect::<Result<_>>()?;
    Ok(AttentionComparison {
        head,
        pair,
        samples: samples.len(),
        bos_heads: vec![],
        conditions,
    })
}

/// Relative change in mean logit difference when one head's BOS attention is swapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BosImpactGrid {
    pub pair: WordPair,
    pub rescale: BosRescale,
    pub samples: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Clean mean logit difference per letter.
    pub baseline: [f64; 3],
    /// `(swapped − clean) / |clean|` per letter, layer-major over heads.
    pub per_letter: [Vec<f64>; 3],
    /// Same, for the mean over the three letters.
    pub overall: Vec<f64>,
}

impl BosImpactGrid {
    pub fn impact(&self, head: HeadId) -> f64 {
        self.overall[head.layer * self.n_heads + head.head]
    }

    /// Heads whose relative impact is at most `−threshold`, most harmful first.
    pub fn harmful_heads(&self, threshold: f64) -> Vec<HeadId> {
        let mut heads: Vec<(HeadId, f64)> = (0..self.overall.len())
            .map(|k| (HeadId::new(k / self.n_heads, k % self.n_heads), self.overall[k]))
            .filter(|&(_, v)| v <= -threshold)
            .collect();
        heads.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        heads.into_iter().map(|(h, _)| h).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let rows: Vec<String> = (0..self.n_layers).map(|l| l.to_string()).collect();
        let cols: Vec<String> = (0..self.n_heads).map(|h| h.to_string()).collect();
        let mut paths = Vec::new();
        let mut grids: Vec<(String, &Vec<f64>)> = vec![("overall".into(), &self.overall)];
        for i in LetterIndex::ALL {
            grids.push((format!("letter{i}"), &self.per_letter[i.offset()]));
        }
        for (name, values) in grids {
            let stem = format!("bos_sweep_{}_{name}", self.pair);
            let csv = dir.join(format!("{stem}.csv"));
            report::write_grid_csv(&csv, "layer", &rows, &cols, values)?;
            let svg = dir.join(format!("{stem}.svg"));
            report::write_text(
                &svg,
                &report::heatmap_svg(
                    &format!("BOS attention swap {} ({name}), relative change", self.pair),
                    &rows,
                    &cols,
                    values,
                ),
            )?;
            paths.extend([csv, svg]);
        }
        let json = dir.join(format!("bos_sweep_{}.json", self.pair));
        report::write_json(&json, self)?;
        paths.push(json);
        Ok(paths)
    }
}

/// Swaps the BOS attention of each head in turn and records the relative change.
pub fn bos_swap_sweep(
    model: &Model,
    vocab: &TaskVocab,
    samples: &[PromptSample],
    pair: WordPair,
    rescale: BosRescale,
) -> Result<BosImpactGrid> {
    check_samples(samples)?;
    let cfg = model.config();
    let heads = CircuitSpec::all_heads(cfg).heads;
    let (a, b) = pair.positions();
    let capture = Capture::only((0..cfg.n_layers).map(HookPoint::ResidPre));
    let mut clean_sum = [0.0f64; 3];
    let mut swapped_sum = vec![[0.0f64; 3]; heads.len()];
    for s in samples {
        let clean = model.residual(&s.tokens, &[], &capture)?;
        for i in LetterIndex::ALL {
            clean_sum[i.offset()] += logit_diff_from_resid(model, &clean.resid_final, s, i, vocab)? as f64;
        }
        let rows = heads
            .par_iter()
            .map(|h| {
                let iv = Intervention::SwapBosAttention {
                    layer: h.layer,
                    head: h.head,
                    dst_a: a,
                    dst_b: b,
                    rescale,
                };
                let out = model.residual_from(h.layer, clean.cache.resid_pre(h.layer)?, &[iv], &Capture::Nothing)?;
                let mut row = [0.0f64; 3];
                for i in LetterIndex::ALL {
                    row[i.offset()] = logit_diff_from_resid(model, &out.resid_final, s, i, vocab)? as f64;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        for (acc, row) in swapped_sum.iter_mut().zip(rows) {
            for k in 0..3 {
                acc[k] += row[k];
            }
        }
    }
    let n = samples.len() as f64;
    let baseline = clean_sum.map(|v| v / n);
    let base_overall = baseline.iter().sum::<f64>() / 3.0;
    let relative = |swapped: f64, base: f64| (swapped - base) / base.abs().max(f64::MIN_POSITIVE);
    let mut per_letter: [Vec<f64>; 3] = Default::default();
    let mut overall = Vec::with_capacity(heads.len());
    for row in &swapped_sum {
        let means = row.map(|v| v / n);
        for k in 0..3 {
            per_letter[k].push(relative(means[k], baseline[k]));
        }
        overall.push(relative(means.iter().sum::<f64>() / 3.0, base_overall));
    }
    Ok(BosImpactGrid {
        pair,
        rescale,
        samples: samples.len(),
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        baseline,
        per_letter,
        overall,
    })
}

/// Attention of `head` under all four conditions, swapping BOS attention in the
/// heads whose sweep impact is at most `−threshold`.
pub fn combined_bos_swap(
    model: &Model,
    samples: &[PromptSample],
    sweep: &BosImpactGrid,
    threshold: f64,
    head: HeadId,
    rescale: BosRescale,
) -> Result<AttentionComparison> {
    check_samples(samples)?;
    head.validate(model.config())?;
    let pair = sweep.pair;
    let bos_heads = sweep.harmful_heads(threshold);
    if bos_heads.is_empty() {
        log::warn!("no head reaches a relative impact of -{threshold}; the BOS swap condition equals the clean run");
    }
    let conditions = [
        SwapCondition::Clean,
        SwapCondition::PosEmbedSwap(pair),
        SwapCondition::BosSwap(bos_heads.clone(), pair),
        SwapCondition::Both(bos_heads.clone(), pair),
    ]
    .iter()
    .map(|c| observe(model, samples, head, c, rescale))
    .collect::<Result<_>>()?;
    Ok(AttentionComparison {
        head,
        pair,
        samples: samples.len(),
        bos_heads,
        conditions,
    })
}
