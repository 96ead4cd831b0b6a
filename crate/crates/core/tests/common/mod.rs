//! Shared fixtures and invariant checks for the toy model.
//!
//! Each check returns `Err(description)` on the first violation so it can back
//! both an ordinary test and a line of the acceptance report.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use acronym_circuit::circuit::HeadId;
use acronym_circuit::dataset::{enumerate_acronyms, filter_nouns, AcronymSet, DatasetBuilder, NounPool};
use acronym_circuit::heads::full_ov_circuit;
use acronym_circuit::model::{BosRescale, Capture, HookPoint, Intervention, Model};
use acronym_circuit::task::{PromptSample, TaskVocab};
use acronym_circuit::tensor::Tensor;
use acronym_circuit::tokenizer::Tokenizer;
use acronym_circuit::toy::{make_toy_model, ToyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

pub struct Toy {
    pub model: Model,
    pub tok: Tokenizer,
    pub vocab: TaskVocab,
    pub pool: NounPool,
    pub acronyms: AcronymSet,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let toy = make_toy_model(&ToyConfig::with_seed(seed)).unwrap();
        let pool = filter_nouns(&toy.words, &toy.tokenizer).unwrap();
        let acronyms = enumerate_acronyms(&toy.tokenizer).unwrap();
        let vocab = TaskVocab::from_tokenizer(&toy.tokenizer).unwrap();
        Self {
            model: Model::new(toy.weights).unwrap(),
            tok: toy.tokenizer,
            vocab,
            pool,
            acronyms,
        }
    }

    /// A process-wide instance for seeds below 8.
    pub fn shared(seed: u64) -> &'static Toy {
        static TOYS: [OnceLock<Toy>; 8] = [const { OnceLock::new() }; 8];
        TOYS[seed as usize].get_or_init(|| Toy::new(seed))
    }

    pub fn builder(&self) -> DatasetBuilder<'_> {
        DatasetBuilder::new(&self.tok, &self.pool, &self.acronyms).unwrap()
    }

    pub fn samples(&self, n: usize, seed: u64) -> Vec<PromptSample> {
        self.builder().build(n, seed).unwrap()
    }
}

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn within(label: &str, diff: f32, tol: f32) -> Check {
    if diff < tol {
        Ok(())
    } else {
        Err(format!("{label}: deviation {diff:e} exceeds {tol:e}"))
    }
}

fn logits(model: &Model, tokens: &[u32], ivs: &[Intervention]) -> Tensor {
    model.forward(tokens, ivs, &Capture::Nothing).unwrap().logits
}

/// Patching every hook with its own clean value leaves the logits unchanged.
pub fn self_patch_is_noop(model: &Model, tokens: &[u32], tol: f32) -> Check {
    let clean = model.forward(tokens, &[], &Capture::Everything).unwrap();
    let cfg = model.config();
    let n = tokens.len();
    let all: Vec<usize> = (0..n).collect();
    for layer in 0..cfg.n_layers {
        let mut ivs = vec![
            Intervention::PatchResidPre {
                layer,
                positions: all.clone(),
                value: clean.cache.resid_pre(layer).unwrap().clone(),
            },
            Intervention::PatchMlpOut {
                layer,
                positions: all.clone(),
                value: clean.cache.mlp_out(layer).unwrap().clone(),
            },
        ];
        let heads = clean.cache.head_out(layer).unwrap();
        for head in 0..cfg.n_heads {
            ivs.push(Intervention::PatchHeadOut {
                layer,
                head,
                positions: all.clone(),
                value: Tensor::new(vec![n, cfg.d_model], heads.slab(head).to_vec()).unwrap(),
            });
        }
        for iv in &ivs {
            let patched = logits(model, tokens, std::slice::from_ref(iv));
            within(&format!("self-patch {}", iv.hook()), max_abs_diff(patched.data(), clean.logits.data()), tol)?;
        }
    }
    Ok(())
}

/// Rows of every attention pattern sum to one and put no mass on later positions.
pub fn attention_is_causal_and_stochastic(model: &Model, tokens: &[u32], tol: f32) -> Check {
    let out = model.forward(tokens, &[], &Capture::Everything).unwrap();
    let n = tokens.len();
    for layer in 0..model.config().n_layers {
        let probs = out.cache.attn_probs(layer).unwrap();
        for head in 0..model.config().n_heads {
            let slab = probs.slab(head);
            for q in 0..n {
                let row = &slab[q * n..(q + 1) * n];
                let sum: f32 = row.iter().sum();
                within(&format!("attention row sum {layer}.{head} q{q}"), (sum - 1.0).abs(), tol)?;
                if let Some(k) = (q + 1..n).find(|&k| row[k] != 0.0) {
                    return Err(format!("head {layer}.{head}: query {q} attends to later key {k}"));
                }
                if row.iter().any(|&p| p < 0.0) {
                    return Err(format!("head {layer}.{head}: negative attention at query {q}"));
                }
            }
        }
    }
    Ok(())
}

/// `resid_pre[l+1] = resid_pre[l] + Σ head_out + b_O + mlp_out`.
pub fn residual_is_additive(model: &Model, tokens: &[u32], tol: f32) -> Check {
    let out = model.forward(tokens, &[], &Capture::Everything).unwrap();
    let cfg = model.config();
    let d = cfg.d_model;
    for l in 0..cfg.n_layers {
        let pre = out.cache.resid_pre(l).unwrap();
        let next = out.cache.get(HookPoint::ResidPre(l + 1)).unwrap();
        let heads = out.cache.head_out(l).unwrap();
        let mlp = out.cache.mlp_out(l).unwrap();
        let b_o = &model.weights().layers[l].b_o;
        for p in 0..tokens.len() {
            for (j, &bias) in b_o.iter().enumerate() {
                let mut v = pre.row(p)[j] + bias + mlp.row(p)[j];
                for h in 0..cfg.n_heads {
                    v += heads.slab(h)[p * d + j];
                }
                within(&format!("additivity layer {l} pos {p}"), (v - next.row(p)[j]).abs(), tol)?;
            }
        }
    }
    Ok(())
}

/// The OV grid of a head set equals the sum of the single-head grids.
pub fn ov_grid_is_additive(model: &Model, vocab: &TaskVocab, heads: &[HeadId], tol: f64) -> Check {
    let joint = full_ov_circuit(model.weights(), vocab, heads, true, false).unwrap();
    let mut sum = vec![0.0f64; 26 * 26];
    for &h in heads {
        let g = full_ov_circuit(model.weights(), vocab, &[h], true, false).unwrap();
        sum.iter_mut().zip(&g.values).for_each(|(s, v)| *s += v);
    }
    let diff = joint.values.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    within("OV additivity", diff as f32, tol as f32)
}

/// Swapping the BOS attention of two rows twice restores the clean run.
pub fn bos_swap_is_involution(model: &Model, tokens: &[u32], head: HeadId, dst: (usize, usize), tol: f32) -> Check {
    let clean = model.forward(tokens, &[], &Capture::only([HookPoint::AttnProbs(head.layer)])).unwrap();
    let swap = Intervention::SwapBosAttention {
        layer: head.layer,
        head: head.head,
        dst_a: dst.0,
        dst_b: dst.1,
        rescale: BosRescale::Proportional,
    };
    let twice = model
        .forward(tokens, &[swap.clone(), swap], &Capture::only([HookPoint::AttnProbs(head.layer)]))
        .unwrap();
    within(
        "double BOS swap attention",
        max_abs_diff(
            twice.cache.attn_probs(head.layer).unwrap().data(),
            clean.cache.attn_probs(head.layer).unwrap().data(),
        ),
        tol,
    )?;
    within("double BOS swap logits", max_abs_diff(twice.logits.data(), clean.logits.data()), tol)
}

/// Random strings mixing ASCII, whitespace runs, punctuation and multi-byte characters.
pub fn random_strings(n: usize, seed: u64) -> Vec<String> {
    const POOL: &[&str] = &[
        "a", "b", "z", "A", "Q", " ", "  ", "\n", "\t", "'s", "'t", "'ll", "0", "7", "42", ".", ",", "(", ")", "!", "?",
        "-", "_", "é", "ß", "中", "文", "😀", "👍🏽", "ñ", "Ω", "\u{200b}", "the", " The", " of", "ing", "ABC", "<|endoftext|>",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(0..24);
            let mut s = String::new();
            for _ in 0..len {
                if rng.gen_bool(0.2) {
                    s.push(char::from_u32(rng.gen_range(0x20..0x3000)).unwrap_or('x'));
                } else {
                    s.push_str(POOL[rng.gen_range(0..POOL.len())]);
                }
            }
            s
        })
        .collect()
}

pub fn tokenizer_round_trips(tok: &Tokenizer, texts: &[String]) -> Check {
    for t in texts {
        let ids = tok.encode(t).map_err(|e| format!("{t:?}: {e}"))?;
        let back = tok.decode(&ids).map_err(|e| format!("{t:?}: {e}"))?;
        if &back != t {
            return Err(format!("{t:?} decoded as {back:?}"));
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
pub struct CorpusEntry {
    pub text: String,
    pub ids: Vec<u32>,
}

pub fn tokenizer_matches_corpus(tok: &Tokenizer) -> Check {
    let text = std::fs::read_to_string(fixtures_dir().join("tokenizer_corpus.json")).map_err(|e| e.to_string())?;
    let corpus: Vec<CorpusEntry> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let bad = corpus.iter().filter(|e| tok.encode(&e.text).ok().as_ref() != Some(&e.ids)).count();
    if bad == 0 {
        Ok(())
    } else {
        Err(format!("{bad} of {} corpus strings encode differently", corpus.len()))
    }
}
