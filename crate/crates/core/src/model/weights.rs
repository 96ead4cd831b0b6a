//! GPT-2 parameters split per head, and their safetensors ingestion.
//!
//! Checkpoints store attention as a fused `c_attn` Conv1D of shape `[d, 3d]`
//! (input-major). Columns `0..d` are Q, `d..2d` are K and `2d..3d` are V; inside
//! each block head `h` owns columns `h*d_head..(h+1)*d_head`. The output
//! projection `c_proj` is `[d, d]` and head `h` owns its rows
//! `h*d_head..(h+1)*d_head`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_transposed, Tensor};

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// `[H, d, d_head]`
    pub w_q: Tensor,
    /// `[H, d_head]`
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    /// `[H, d_head, d]`
    pub w_o: Tensor,
    /// Output bias shared by all heads of the layer.
    pub b_o: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    /// `[d, d_mlp]`
    pub w_in: Tensor,
    pub b_in: Vec<f32>,
    /// `[d_mlp, d]`
    pub w_out: Tensor,
    pub b_out: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    /// Token embedding `[V, d]`. Also the unembedding, read transposed.
    pub w_e: Tensor,
    /// Positional embedding `[n_ctx, d]`.
    pub w_pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_f_gain: Vec<f32>,
    pub ln_f_bias: Vec<f32>,
}

impl Weights {
    /// The unembedding matrix. GPT-2 ties it to the embedding, so this is
    /// `W_E` itself and callers multiply by its transpose.
    pub fn w_u(&self) -> &Tensor {
        &self.w_e
    }

    fn head_factor(t: &Tensor, head: usize, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], t.slab(head).to_vec()).expect("per-head slab has the declared shape")
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        let c = &self.config;
        if layer >= c.n_layers || head >= c.n_heads {
            return Err(Error::Coordinate(format!(
                "head {layer}.{head} in a {}x{} model",
                c.n_layers, c.n_heads
            )));
        }
        Ok(())
    }

    pub fn w_q(&self, layer: usize, head: usize) -> Result<Tensor> {
        self.check_head(layer, head)?;
        let c = &self.config;
        Ok(Self::head_factor(&self.layers[layer].w_q, head, c.d_model, c.d_head))
    }

    pub fn w_k(&self, layer: usize, head: usize) -> Result<Tensor> {
        self.check_head(layer, head)?;
        let c = &self.config;
        Ok(Self::head_factor(&self.layers[layer].w_k, head, c.d_model, c.d_head))
    }

    pub fn w_v(&self, layer: usize, head: usize) -> Result<Tensor> {
        self.check_head(layer, head)?;
        let c = &self.config;
        Ok(Self::head_factor(&self.layers[layer].w_v, head, c.d_model, c.d_head))
    }

    pub fn w_o(&self, layer: usize, head: usize) -> Result<Tensor> {
        self.check_head(layer, head)?;
        let c = &self.config;
        Ok(Self::head_factor(&self.layers[layer].w_o, head, c.d_head, c.d_model))
    }

    /// `W_QK = W_Q · W_Kᵀ`, shape `[d, d]`.
    pub fn qk_matrix(&self, layer: usize, head: usize) -> Result<Tensor> {
        matmul_transposed(&self.w_q(layer, head)?, &self.w_k(layer, head)?)
    }

    /// `W_OV = W_V · W_O`, shape `[d, d]`.
    pub fn ov_matrix(&self, layer: usize, head: usize) -> Result<Tensor> {
        matmul(&self.w_v(layer, head)?, &self.w_o(layer, head)?)
    }

    /// Checks every parameter shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, h, dh, m) = (c.d_model, c.n_heads, c.d_head, c.d_mlp);
        let check = |name: String, t: &[usize], expected: &[usize]| -> Result<()> {
            if t != expected {
                return Err(Error::TensorShape {
                    name,
                    expected: expected.to_vec(),
                    actual: t.to_vec(),
                });
            }
            Ok(())
        };
        check("wte".into(), self.w_e.shape(), &[c.vocab, d])?;
        check("wpe".into(), self.w_pos.shape(), &[c.n_ctx, d])?;
        check("ln_f.gain".into(), &[self.ln_f_gain.len()], &[d])?;
        check("ln_f.bias".into(), &[self.ln_f_bias.len()], &[d])?;
        if self.layers.len() != c.n_layers {
            return Err(Error::TensorShape {
                name: "blocks".into(),
                expected: vec![c.n_layers],
                actual: vec![self.layers.len()],
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            check(n("ln1.gain"), &[l.ln1_gain.len()], &[d])?;
            check(n("ln1.bias"), &[l.ln1_bias.len()], &[d])?;
            check(n("w_q"), l.w_q.shape(), &[h, d, dh])?;
            check(n("w_k"), l.w_k.shape(), &[h, d, dh])?;
            check(n("w_v"), l.w_v.shape(), &[h, d, dh])?;
            check(n("b_q"), l.b_q.shape(), &[h, dh])?;
            check(n("b_k"), l.b_k.shape(), &[h, dh])?;
            check(n("b_v"), l.b_v.shape(), &[h, dh])?;
            check(n("w_o"), l.w_o.shape(), &[h, dh, d])?;
            check(n("b_o"), &[l.b_o.len()], &[d])?;
            check(n("ln2.gain"), &[l.ln2_gain.len()], &[d])?;
            check(n("ln2.bias"), &[l.ln2_bias.len()], &[d])?;
            check(n("w_in"), l.w_in.shape(), &[d, m])?;
            check(n("b_in"), &[l.b_in.len()], &[m])?;
            check(n("w_out"), l.w_out.shape(), &[m, d])?;
            check(n("b_out"), &[l.b_out.len()], &[d])?;
        }
        Ok(())
    }
}

/// Logical parameter → archive tensor name. Per-layer entries contain `{layer}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameMap {
    /// Prefix prepended to every archive name (e.g. `transformer.`). When empty,
    /// lookups also fall back to the `transformer.` prefix.
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub names: BTreeMap<String, String>,
}

const LOGICAL_NAMES: &[(&str, &str)] = &[
    ("wte", "wte.weight"),
    ("wpe", "wpe.weight"),
    ("ln_f.gain", "ln_f.weight"),
    ("ln_f.bias", "ln_f.bias"),
    ("blocks.{layer}.ln1.gain", "h.{layer}.ln_1.weight"),
    ("blocks.{layer}.ln1.bias", "h.{layer}.ln_1.bias"),
    ("blocks.{layer}.attn.qkv.weight", "h.{layer}.attn.c_attn.weight"),
    ("blocks.{layer}.attn.qkv.bias", "h.{layer}.attn.c_attn.bias"),
    ("blocks.{layer}.attn.out.weight", "h.{layer}.attn.c_proj.weight"),
    ("blocks.{layer}.attn.out.bias", "h.{layer}.attn.c_proj.bias"),
    ("blocks.{layer}.ln2.gain", "h.{layer}.ln_2.weight"),
    ("blocks.{layer}.ln2.bias", "h.{layer}.ln_2.bias"),
    ("blocks.{layer}.mlp.in.weight", "h.{layer}.mlp.c_fc.weight"),
    ("blocks.{layer}.mlp.in.bias", "h.{layer}.mlp.c_fc.bias"),
    ("blocks.{layer}.mlp.out.weight", "h.{layer}.mlp.c_proj.weight"),
    ("blocks.{layer}.mlp.out.bias", "h.{layer}.mlp.c_proj.bias"),
];

impl Default for NameMap {
    /// Parameter names of the published GPT-2 checkpoints.
    fn default() -> Self {
        Self {
            prefix: String::new(),
            names: LOGICAL_NAMES
                .iter()
                .map(|(l, a)| ((*l).to_owned(), (*a).to_owned()))
                .collect(),
        }
    }
}

impl NameMap {
    /// Reads a JSON name map; entries override the GPT-2 defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let partial: NameMap = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut map = Self {
            prefix: partial.prefix,
            ..Self::default()
        };
        for (k, v) in partial.names {
            if !map.names.contains_key(&k) {
                return Err(Error::Config(format!("unknown logical parameter {k:?} in name map")));
            }
            map.names.insert(k, v);
        }
        Ok(map)
    }

    fn archive_name(&self, logical_template: &str, layer: Option<usize>) -> (String, String) {
        let template = &self.names[logical_template];
        match layer {
            Some(l) => (
                logical_template.replace("{layer}", &l.to_string()),
                format!("{}{}", self.prefix, template.replace("{layer}", &l.to_string())),
            ),
            None => (logical_template.to_owned(), format!("{}{template}", self.prefix)),
        }
    }
}

struct Archive<'a> {
    st: SafeTensors<'a>,
    map: &'a NameMap,
}

impl Archive<'_> {
    fn get(&self, logical_template: &str, layer: Option<usize>, shape: &[usize]) -> Result<Vec<f32>> {
        let (logical, archive) = self.map.archive_name(logical_template, layer);
        let view = match self.st.tensor(&archive) {
            Ok(v) => v,
            Err(_) if self.map.prefix.is_empty() => self
                .st
                .tensor(&format!("transformer.{archive}"))
                .map_err(|_| Error::MissingTensor {
                    logical: logical.clone(),
                    archive: archive.clone(),
                })?,
            Err(_) => return Err(Error::MissingTensor { logical, archive }),
        };
        if view.shape() != shape {
            return Err(Error::TensorShape {
                name: logical,
                expected: shape.to_vec(),
                actual: view.shape().to_vec(),
            });
        }
        if view.dtype() != Dtype::F32 {
            return Err(Error::Archive(format!("{archive}: expected F32, found {:?}", view.dtype())));
        }
        Ok(view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Loads a GPT-2 checkpoint stored as safetensors and validates it against `config`.
pub fn load_weights(archive: &Path, config: &ModelConfig, name_map: Option<&NameMap>) -> Result<Weights> {
    config.validate()?;
    let default_map = NameMap::default();
    let map = name_map.unwrap_or(&default_map);
    let bytes = fs::read(archive).map_err(|e| Error::io(archive, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Archive(format!("{}: {e}", archive.display())))?;
    let ar = Archive { st, map };

    let (d, h, dh, m) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
    let w_e = Tensor::new(vec![config.vocab, d], ar.get("wte", None, &[config.vocab, d])?)?;
    let w_pos = Tensor::new(vec![config.n_ctx, d], ar.get("wpe", None, &[config.n_ctx, d])?)?;
    let ln_f_gain = ar.get("ln_f.gain", None, &[d])?;
    let ln_f_bias = ar.get("ln_f.bias", None, &[d])?;

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let get = |name: &str, shape: &[usize]| ar.get(name, Some(l), shape);
        let qkv_w = get("blocks.{layer}.attn.qkv.weight", &[d, 3 * d])?;
        let qkv_b = get("blocks.{layer}.attn.qkv.bias", &[3 * d])?;
        let proj_w = get("blocks.{layer}.attn.out.weight", &[d, d])?;

        // fused [d, 3d] → three [H, d, d_head] stacks
        let split = |block: usize| -> (Tensor, Tensor) {
            let mut w = vec![0.0; h * d * dh];
            let mut b = vec![0.0; h * dh];
            for head in 0..h {
                let col0 = block * d + head * dh;
                for i in 0..d {
                    let src = &qkv_w[i * 3 * d + col0..i * 3 * d + col0 + dh];
                    w[(head * d + i) * dh..(head * d + i + 1) * dh].copy_from_slice(src);
                }
                b[head * dh..(head + 1) * dh].copy_from_slice(&qkv_b[col0..col0 + dh]);
            }
            (
                Tensor::new(vec![h, d, dh], w).expect("sized above"),
                Tensor::new(vec![h, dh], b).expect("sized above"),
            )
        };
        let (w_q, b_q) = split(0);
        let (w_k, b_k) = split(1);
        let (w_v, b_v) = split(2);

        layers.push(LayerWeights {
            ln1_gain: get("blocks.{layer}.ln1.gain", &[d])?,
            ln1_bias: get("blocks.{layer}.ln1.bias", &[d])?,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            // rows of c_proj are already grouped by head
            w_o: Tensor::new(vec![h, dh, d], proj_w)?,
            b_o: get("blocks.{layer}.attn.out.bias", &[d])?,
            ln2_gain: get("blocks.{layer}.ln2.gain", &[d])?,
            ln2_bias: get("blocks.{layer}.ln2.bias", &[d])?,
            w_in: Tensor::new(vec![d, m], get("blocks.{layer}.mlp.in.weight", &[d, m])?)?,
            b_in: get("blocks.{layer}.mlp.in.bias", &[m])?,
            w_out: Tensor::new(vec![m, d], get("blocks.{layer}.mlp.out.weight", &[m, d])?)?,
            b_out: get("blocks.{layer}.mlp.out.bias", &[d])?,
        });
    }

    let weights = Weights {
        config: config.clone(),
        w_e,
        w_pos,
        layers,
        ln_f_gain,
        ln_f_bias,
    };
    weights.validate()?;
    Ok(weights)
}

/// Writes weights back out in the GPT-2 checkpoint layout (fused `c_attn`).
pub fn save_weights(weights: &Weights, path: &Path, name_map: Option<&NameMap>) -> Result<()> {
    weights.validate()?;
    let default_map = NameMap::default();
    let map = name_map.unwrap_or(&default_map);
    let c = &weights.config;
    let (d, h, dh) = (c.d_model, c.n_heads, c.d_head);

    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut push = |template: &str, layer: Option<usize>, shape: Vec<usize>, data: &[f32]| {
        let (_, name) = map.archive_name(template, layer);
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push((name, shape, bytes));
    };

    push("wte", None, vec![c.vocab, d], weights.w_e.data());
    push("wpe", None, vec![c.n_ctx, d], weights.w_pos.data());
    push("ln_f.gain", None, vec![d], &weights.ln_f_gain);
    push("ln_f.bias", None, vec![d], &weights.ln_f_bias);
    for (l, lw) in weights.layers.iter().enumerate() {
        let mut qkv_w = vec![0.0; d * 3 * d];
        let mut qkv_b = vec![0.0; 3 * d];
        for (block, (w, b)) in [(&lw.w_q, &lw.b_q), (&lw.w_k, &lw.b_k), (&lw.w_v, &lw.b_v)].into_iter().enumerate() {
            for head in 0..h {
                let col0 = block * d + head * dh;
                for i in 0..d {
                    qkv_w[i * 3 * d + col0..i * 3 * d + col0 + dh]
                        .copy_from_slice(&w.data()[(head * d + i) * dh..(head * d + i + 1) * dh]);
                }
                qkv_b[col0..col0 + dh].copy_from_slice(&b.data()[head * dh..(head + 1) * dh]);
            }
        }
        let l = Some(l);
        push("blocks.{layer}.ln1.gain", l, vec![d], &lw.ln1_gain);
        push("blocks.{layer}.ln1.bias", l, vec![d], &lw.ln1_bias);
        push("blocks.{layer}.attn.qkv.weight", l, vec![d, 3 * d], &qkv_w);
        push("blocks.{layer}.attn.qkv.bias", l, vec![3 * d], &qkv_b);
        push("blocks.{layer}.attn.out.weight", l, vec![d, d], lw.w_o.data());
        push("blocks.{layer}.attn.out.bias", l, vec![d], &lw.b_o);
        push("blocks.{layer}.ln2.gain", l, vec![d], &lw.ln2_gain);
        push("blocks.{layer}.ln2.bias", l, vec![d], &lw.ln2_bias);
        push("blocks.{layer}.mlp.in.weight", l, vec![d, c.d_mlp], lw.w_in.data());
        push("blocks.{layer}.mlp.in.bias", l, vec![c.d_mlp], &lw.b_in);
        push("blocks.{layer}.mlp.out.weight", l, vec![c.d_mlp, d], lw.w_out.data());
        push("blocks.{layer}.mlp.out.bias", l, vec![d], &lw.b_out);
    }

    let views: Vec<(String, TensorView)> = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Archive(format!("{name}: {e}")))
        })
        .collect::<Result<_>>()?;
    let meta: HashMap<String, String> = [("format".to_owned(), "pt".to_owned())].into();
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
}
