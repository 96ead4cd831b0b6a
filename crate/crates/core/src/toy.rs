//! Small seeded models with a synthetic byte-level vocabulary.
//!
//! The vocabulary mirrors the GPT-2 letter-token layout (`"A"`, `" A"`,
//! `"The"`, `" ("`, `<|endoftext|>`) and a set of two-letter remainders, so
//! two-token nouns like `" Can"` exist and every experiment runs end to end.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_weights, LayerWeights, ModelConfig, Weights};
use crate::report;
use crate::task::CAPITALS;
use crate::tensor::{Gelu, Tensor, LN_EPS};
use crate::tokenizer::{byte_to_unicode, MergeRules, Tokenizer, Vocab, END_OF_TEXT};

const LOWERCASE: [&str; 9] = ["a", "e", "h", "i", "n", "o", "r", "s", "t"];
const REMAINDERS: [&str; 12] = ["an", "en", "in", "on", "ar", "er", "or", "at", "et", "it", "ot", "as"];
/// Words the noun filter must reject: single token, unencodable, three tokens.
const REJECTED_WORDS: [&str; 3] = ["b", "zzz", "tanner"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 32,
                d_head: 8,
                d_mlp: 128,
                vocab: 100,
                n_ctx: 32,
                ln_eps: LN_EPS,
                gelu: Gelu::Tanh,
            },
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let need = base_tokens().len() + 1;
        if self.model.vocab < need {
            return Err(Error::Config(format!(
                "toy vocabulary needs at least {need} entries, got {}",
                self.model.vocab
            )));
        }
        if self.model.n_ctx < crate::task::PROMPT_LEN {
            return Err(Error::Config(format!("n_ctx {} is shorter than a prompt", self.model.n_ctx)));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub weights: Weights,
    pub tokenizer: Tokenizer,
    /// Lowercase word list covering every letter, plus a few words the noun filter rejects.
    pub words: Vec<String>,
}

fn spaced(s: &str) -> String {
    format!("{}{s}", byte_to_unicode()[b' ' as usize])
}

/// Every real token, in id order. `<|endoftext|>` and padding come after.
fn base_tokens() -> Vec<String> {
    let mut t: Vec<String> = CAPITALS.iter().map(|c| c.to_string()).collect();
    t.extend(CAPITALS.iter().map(|c| spaced(&c.to_string())));
    t.extend([spaced(""), "(".into(), spaced("("), "Th".into(), "The".into()]);
    t.extend(LOWERCASE.iter().map(|s| s.to_string()));
    t.extend(REMAINDERS.iter().map(|s| s.to_string()));
    t
}

fn merges() -> Vec<(String, String)> {
    let sp = spaced("");
    let mut m: Vec<(String, String)> = CAPITALS.iter().map(|c| (sp.clone(), c.to_string())).collect();
    m.push((sp, "(".into()));
    for r in REMAINDERS {
        let (a, b) = r.split_at(1);
        m.push((a.into(), b.into()));
    }
    m.push(("T".into(), "h".into()));
    m.push(("Th".into(), "e".into()));
    m
}

pub fn toy_tokenizer(vocab_size: usize) -> Result<Tokenizer> {
    let mut tokens = base_tokens();
    if vocab_size < tokens.len() + 1 {
        return Err(Error::Config(format!(
            "toy vocabulary needs at least {} entries, got {vocab_size}",
            tokens.len() + 1
        )));
    }
    let pad = vocab_size - tokens.len() - 1;
    tokens.extend((0..pad).map(|k| format!("<|unused{k}|>")));
    tokens.push(END_OF_TEXT.into());
    Tokenizer::new(Vocab::new(tokens)?, MergeRules::new(merges())?)
}

/// Three nouns per letter, each `" X"` plus one remainder, then the rejects.
pub fn toy_words() -> Vec<String> {
    let mut words = Vec::new();
    for (i, c) in CAPITALS.iter().enumerate() {
        for k in 0..3 {
            let rem = REMAINDERS[(i + 5 * k) % REMAINDERS.len()];
            words.push(format!("{}{rem}", c.to_ascii_lowercase()));
        }
    }
    words.extend(REJECTED_WORDS.iter().map(|s| s.to_string()));
    words
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], scale: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    fn vec(&mut self, n: usize, center: f32, scale: f32) -> Vec<f32> {
        (0..n).map(|_| center + self.rng.gen_range(-scale..scale)).collect()
    }
}

/// Seeded weights plus the synthetic tokenizer and word list.
pub fn make_toy_model(config: &ToyConfig) -> Result<ToyModel> {
    config.validate()?;
    let c = &config.model;
    let (d, h, dh, m) = (c.d_model, c.n_heads, c.d_head, c.d_mlp);
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let w_scale = 1.0 / (d as f32).sqrt();
    let w_e = init.uniform(&[c.vocab, d], 1.0);
    let w_pos = init.uniform(&[c.n_ctx, d], 0.5);
    let layers = (0..c.n_layers)
        .map(|_| LayerWeights {
            ln1_gain: init.vec(d, 1.0, 0.2),
            ln1_bias: init.vec(d, 0.0, 0.1),
            w_q: init.uniform(&[h, d, dh], 2.0 * w_scale),
            b_q: init.uniform(&[h, dh], 0.1),
            w_k: init.uniform(&[h, d, dh], 2.0 * w_scale),
            b_k: init.uniform(&[h, dh], 0.1),
            w_v: init.uniform(&[h, d, dh], w_scale),
            b_v: init.uniform(&[h, dh], 0.1),
            w_o: init.uniform(&[h, dh, d], w_scale),
            b_o: init.vec(d, 0.0, 0.1),
            ln2_gain: init.vec(d, 1.0, 0.2),
            ln2_bias: init.vec(d, 0.0, 0.1),
            w_in: init.uniform(&[d, m], w_scale),
            b_in: init.vec(m, 0.0, 0.1),
            w_out: init.uniform(&[m, d], 1.0 / (m as f32).sqrt()),
            b_out: init.vec(d, 0.0, 0.1),
        })
        .collect();
    let weights = Weights {
        config: c.clone(),
        w_e,
        w_pos,
        layers,
        ln_f_gain: init.vec(d, 1.0, 0.2),
        ln_f_bias: init.vec(d, 0.0, 0.1),
    };
    weights.validate()?;
    Ok(ToyModel {
        config: config.clone(),
        weights,
        tokenizer: toy_tokenizer(c.vocab)?,
        words: toy_words(),
    })
}

/// Files written by [`write_toy_assets`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyAssets {
    pub weights: PathBuf,
    pub config: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub words: PathBuf,
}

/// Writes `model.safetensors`, `config.json`, `vocab.json`, `merges.txt` and `words.txt`.
pub fn write_toy_assets(toy: &ToyModel, dir: &Path) -> Result<ToyAssets> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let assets = ToyAssets {
        weights: dir.join("model.safetensors"),
        config: dir.join("config.json"),
        vocab: dir.join("vocab.json"),
        merges: dir.join("merges.txt"),
        words: dir.join("words.txt"),
    };
    save_weights(&toy.weights, &assets.weights, None)?;
    report::write_json(&assets.config, &toy.config.model)?;
    let vocab = toy.tokenizer.vocab();
    let map: serde_json::Map<String, serde_json::Value> = (0..vocab.len() as u32)
        .map(|id| (vocab.token(id).expect("dense ids").to_owned(), id.into()))
        .collect();
    report::write_json(&assets.vocab, &map)?;
    let mut merges = String::from("#version: 0.2\n");
    for (a, b) in toy.tokenizer.merges().pairs() {
        merges.push_str(&format!("{a} {b}\n"));
    }
    report::write_text(&assets.merges, &merges)?;
    report::write_text(&assets.words, &(toy.words.join("\n") + "\n"))?;
    Ok(assets)
}
