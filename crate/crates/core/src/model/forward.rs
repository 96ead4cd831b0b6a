use rayon::prelude::*;

use super::config::ModelConfig;
use super::hooks::{ActivationCache, Capture, HookPoint};
use super::intervention::{swap_bos, Intervention};
use super::weights::Weights;
use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, layer_norm_row, matmul_acc, matmul_bt_into, softmax_in_place, Tensor};

/// Logits plus whatever hooks were requested.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, V]`
    pub logits: Tensor,
    pub cache: ActivationCache,
}

/// The residual stream after the last block (before `ln_f`) plus hooks.
///
/// Cheaper than [`ForwardOutput`] when only a handful of logits are needed.
#[derive(Debug, Clone)]
pub struct ResidualOutput {
    /// `[N, d]`
    pub resid_final: Tensor,
    pub cache: ActivationCache,
}

/// A GPT-2 style decoder with hook points. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    weights: Weights,
}

enum Start<'a> {
    Embed(&'a [u32]),
    Layer(usize, &'a Tensor),
}

impl Model {
    pub fn new(weights: Weights) -> Result<Self> {
        weights.validate()?;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    /// Full forward pass returning logits at every position.
    pub fn forward(&self, tokens: &[u32], interventions: &[Intervention], capture: &Capture) -> Result<ForwardOutput> {
        let out = self.run(Start::Embed(tokens), interventions, capture)?;
        Ok(self.with_logits(out, capture))
    }

    /// Forward pass that stops at the final residual stream.
    pub fn residual(&self, tokens: &[u32], interventions: &[Intervention], capture: &Capture) -> Result<ResidualOutput> {
        self.run(Start::Embed(tokens), interventions, capture)
    }

    /// Resumes a forward pass at `start_layer` from a given `resid_pre[start_layer]`.
    ///
    /// Interventions must not target anything upstream of `start_layer`.
    pub fn forward_from(
        &self,
        start_layer: usize,
        resid: &Tensor,
        interventions: &[Intervention],
        capture: &Capture,
    ) -> Result<ForwardOutput> {
        let out = self.run(Start::Layer(start_layer, resid), interventions, capture)?;
        Ok(self.with_logits(out, capture))
    }

    pub fn residual_from(
        &self,
        start_layer: usize,
        resid: &Tensor,
        interventions: &[Intervention],
        capture: &Capture,
    ) -> Result<ResidualOutput> {
        self.run(Start::Layer(start_layer, resid), interventions, capture)
    }

    /// Runs equal-length prompts in parallel; results keep the input order.
    pub fn run_batch<P: AsRef<[u32]> + Sync>(
        &self,
        prompts: &[P],
        interventions: &[Intervention],
        capture: &Capture,
    ) -> Result<Vec<ForwardOutput>> {
        if let Some(first) = prompts.first() {
            let n = first.as_ref().len();
            if let Some(bad) = prompts.iter().position(|p| p.as_ref().len() != n) {
                return Err(Error::Precondition(format!(
                    "ragged batch: prompt {bad} has {} tokens, prompt 0 has {n}",
                    prompts[bad].as_ref().len()
                )));
            }
        }
        prompts
            .par_iter()
            .map(|p| self.forward(p.as_ref(), interventions, capture))
            .collect()
    }

    /// Final layer norm of one residual row.
    pub fn final_norm(&self, resid_row: &[f32]) -> Vec<f32> {
        let w = &self.weights;
        let mut out = vec![0.0; resid_row.len()];
        layer_norm_row(resid_row, &w.ln_f_gain, &w.ln_f_bias, w.config.ln_eps, &mut out);
        out
    }

    /// Logits of selected tokens at one position of a final residual stream.
    pub fn logits_at(&self, resid_final: &Tensor, pos: usize, token_ids: &[u32]) -> Result<Vec<f32>> {
        self.check_row(resid_final, pos)?;
        let normed = self.final_norm(resid_final.row(pos));
        token_ids
            .iter()
            .map(|&t| {
                if (t as usize) < self.config().vocab {
                    Ok(dot(&normed, self.weights.w_e.row(t as usize)))
                } else {
                    Err(Error::TokenId(t))
                }
            })
            .collect()
    }

    /// All `V` logits at one position of a final residual stream.
    pub fn logits_row(&self, resid_final: &Tensor, pos: usize) -> Result<Vec<f32>> {
        self.check_row(resid_final, pos)?;
        let normed = self.final_norm(resid_final.row(pos));
        let v = self.config().vocab;
        let mut out = vec![0.0; v];
        matmul_bt_into(&normed, self.weights.w_e.data(), &mut out, 1, normed.len(), v);
        Ok(out)
    }

    /// Greedy continuation without a KV cache.
    pub fn generate_greedy(&self, tokens: &[u32], steps: usize) -> Result<Vec<u32>> {
        let mut seq = tokens.to_vec();
        for _ in 0..steps {
            let out = self.residual(&seq, &[], &Capture::Nothing)?;
            let row = self.logits_row(&out.resid_final, seq.len() - 1)?;
            seq.push(argmax(&row).expect("non-empty vocabulary") as u32);
        }
        Ok(seq[tokens.len()..].to_vec())
    }

    fn check_row(&self, resid: &Tensor, pos: usize) -> Result<()> {
        if resid.shape().len() != 2 || resid.cols() != self.config().d_model {
            return Err(Error::Dimension {
                op: "unembed",
                lhs: resid.shape().to_vec(),
                rhs: vec![self.config().d_model],
            });
        }
        if pos >= resid.rows() {
            return Err(Error::Coordinate(format!("position {pos} in a sequence of {}", resid.rows())));
        }
        Ok(())
    }

    fn with_logits(&self, out: ResidualOutput, capture: &Capture) -> ForwardOutput {
        let ResidualOutput { resid_final, mut cache } = out;
        let (n, d, v) = (resid_final.rows(), self.config().d_model, self.config().vocab);
        let mut normed = vec![0.0; n * d];
        for p in 0..n {
            normed[p * d..(p + 1) * d].copy_from_slice(&self.final_norm(resid_final.row(p)));
        }
        let mut logits = vec![0.0; n * v];
        matmul_bt_into(&normed, self.weights.w_e.data(), &mut logits, n, d, v);
        let logits = Tensor::new(vec![n, v], logits).expect("sized above");
        if capture.contains(HookPoint::Logits) {
            cache.insert(HookPoint::Logits, logits.clone());
        }
        ForwardOutput { logits, cache }
    }

    fn run(&self, start: Start<'_>, interventions: &[Intervention], capture: &Capture) -> Result<ResidualOutput> {
        let cfg = self.config();
        let (d, h_count, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let mut cache = ActivationCache::default();

        let (mut x, first_layer) = match start {
            Start::Embed(tokens) => {
                let n = self.check_tokens(tokens)?;
                for iv in interventions {
                    iv.validate(cfg, n)?;
                }
                (self.embed(tokens, interventions, capture, &mut cache), 0)
            }
            Start::Layer(layer, resid) => {
                if layer > cfg.n_layers {
                    return Err(Error::Coordinate(format!("start layer {layer} of {}", cfg.n_layers)));
                }
                if resid.shape().len() != 2 || resid.cols() != d || resid.rows() == 0 {
                    return Err(Error::Dimension {
                        op: "forward_from",
                        lhs: resid.shape().to_vec(),
                        rhs: vec![d],
                    });
                }
                let n = resid.rows();
                if n > cfg.n_ctx {
                    return Err(Error::Length { len: n, max: cfg.n_ctx });
                }
                for iv in interventions {
                    iv.validate(cfg, n)?;
                    match iv.hook().layer() {
                        Some(l) if l >= layer => {}
                        _ => {
                            return Err(Error::Precondition(format!(
                                "intervention at {} lies upstream of start layer {layer}",
                                iv.hook()
                            )))
                        }
                    }
                }
                (resid.clone(), layer)
            }
        };
        let n = x.rows();
        let scale = (dh as f32).sqrt();

        let mut normed = vec![0.0; n * d];
        let mut q = vec![0.0; n * dh];
        let mut k = vec![0.0; n * dh];
        let mut v = vec![0.0; n * dh];
        let mut z = vec![0.0; n * dh];
        for layer in first_layer..cfg.n_layers {
            let lw = &self.weights.layers[layer];
            for iv in interventions {
                if let Intervention::PatchResidPre { layer: l, positions, value } = iv {
                    if *l == layer {
                        write_rows(&mut x, positions, value);
                    }
                }
            }
            if capture.contains(HookPoint::ResidPre(layer)) {
                cache.insert(HookPoint::ResidPre(layer), x.clone());
            }

            // attention
            for p in 0..n {
                layer_norm_row(x.row(p), &lw.ln1_gain, &lw.ln1_bias, cfg.ln_eps, &mut normed[p * d..(p + 1) * d]);
            }
            let mut probs = Tensor::zeros(&[h_count, n, n]);
            let mut head_out = Tensor::zeros(&[h_count, n, d]);
            for head in 0..h_count {
                for (buf, w, b) in [
                    (&mut q, &lw.w_q, &lw.b_q),
                    (&mut k, &lw.w_k, &lw.b_k),
                    (&mut v, &lw.w_v, &lw.b_v),
                ] {
                    let bias = b.slab(head);
                    for p in 0..n {
                        buf[p * dh..(p + 1) * dh].copy_from_slice(bias);
                    }
                    matmul_acc(&normed, w.slab(head), buf, n, d, dh);
                }
                let pattern = probs.slab_mut(head);
                for dst in 0..n {
                    let row = &mut pattern[dst * n..(dst + 1) * n];
                    for src in 0..=dst {
                        row[src] = dot(&q[dst * dh..(dst + 1) * dh], &k[src * dh..(src + 1) * dh]) / scale;
                    }
                    softmax_in_place(row, dst + 1);
                }
                for iv in interventions {
                    if let Intervention::SwapBosAttention {
                        layer: l,
                        head: hd,
                        dst_a,
                        dst_b,
                        rescale,
                    } = iv
                    {
                        if *l == layer && *hd == head {
                            swap_bos(pattern, n, *dst_a, *dst_b, *rescale);
                        }
                    }
                }
                z.iter_mut().for_each(|e| *e = 0.0);
                matmul_acc(pattern, &v, &mut z, n, n, dh);
                matmul_acc(&z, lw.w_o.slab(head), head_out.slab_mut(head), n, dh, d);
            }
            for iv in interventions {
                if let Intervention::PatchHeadOut {
                    layer: l,
                    head,
                    positions,
                    value,
                } = iv
                {
                    if *l == layer {
                        let slab = head_out.slab_mut(*head);
                        for (i, &p) in positions.iter().enumerate() {
                            slab[p * d..(p + 1) * d].copy_from_slice(value.row(i));
                        }
                    }
                }
            }
            for p in 0..n {
                let row = x.row_mut(p);
                let mut attn = lw.b_o.clone();
                for head in 0..h_count {
                    let contrib = &head_out.slab(head)[p * d..(p + 1) * d];
                    attn.iter_mut().zip(contrib).for_each(|(a, c)| *a += c);
                }
                row.iter_mut().zip(&attn).for_each(|(r, a)| *r += a);
            }
            if capture.contains(HookPoint::AttnProbs(layer)) {
                cache.insert(HookPoint::AttnProbs(layer), probs);
            }
            if capture.contains(HookPoint::HeadOut(layer)) {
                cache.insert(HookPoint::HeadOut(layer), head_out);
            }

            // MLP
            for p in 0..n {
                layer_norm_row(x.row(p), &lw.ln2_gain, &lw.ln2_bias, cfg.ln_eps, &mut normed[p * d..(p + 1) * d]);
            }
            let m = cfg.d_mlp;
            let mut hidden = Vec::with_capacity(n * m);
            for _ in 0..n {
                hidden.extend_from_slice(&lw.b_in);
            }
            matmul_acc(&normed, lw.w_in.data(), &mut hidden, n, d, m);
            hidden.iter_mut().for_each(|e| *e = cfg.gelu.apply(*e));
            let mut mlp = Vec::with_capacity(n * d);
            for _ in 0..n {
                mlp.extend_from_slice(&lw.b_out);
            }
            matmul_acc(&hidden, lw.w_out.data(), &mut mlp, n, m, d);
            let mut mlp = Tensor::new(vec![n, d], mlp).expect("sized above");
            for iv in interventions {
                if let Intervention::PatchMlpOut { layer: l, positions, value } = iv {
                    if *l == layer {
                        write_rows(&mut mlp, positions, value);
                    }
                }
            }
            x.data_mut().iter_mut().zip(mlp.data()).for_each(|(r, a)| *r += a);
            if capture.contains(HookPoint::MlpOut(layer)) {
                cache.insert(HookPoint::MlpOut(layer), mlp);
            }
        }
        if capture.contains(HookPoint::ResidPre(cfg.n_layers)) {
            cache.insert(HookPoint::ResidPre(cfg.n_layers), x.clone());
        }
        Ok(ResidualOutput { resid_final: x, cache })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<usize> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::Precondition("empty token sequence".into()));
        }
        if tokens.len() > cfg.n_ctx {
            return Err(Error::Length {
                len: tokens.len(),
                max: cfg.n_ctx,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::TokenId(bad));
        }
        Ok(tokens.len())
    }

    fn embed(&self, tokens: &[u32], interventions: &[Intervention], capture: &Capture, cache: &mut ActivationCache) -> Tensor {
        let w = &self.weights;
        let d = w.config.d_model;
        let n = tokens.len();
        let mut pos_index: Vec<usize> = (0..n).collect();
        for iv in interventions {
            if let Intervention::SwapPosEmbed { pos_a, pos_b } = iv {
                pos_index.swap(*pos_a, *pos_b);
            }
        }
        let mut pos = Vec::with_capacity(n * d);
        for &p in &pos_index {
            pos.extend_from_slice(w.w_pos.row(p));
        }
        let pos = Tensor::new(vec![n, d], pos).expect("sized above");
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            x.extend(w.w_e.row(t as usize).iter().zip(pos.row(i)).map(|(e, p)| e + p));
        }
        if capture.contains(HookPoint::PosEmbed) {
            cache.insert(HookPoint::PosEmbed, pos);
        }
        Tensor::new(vec![n, d], x).expect("sized above")
    }
}

fn write_rows(target: &mut Tensor, positions: &[usize], value: &Tensor) {
    for (i, &p) in positions.iter().enumerate() {
        target.row_mut(p).copy_from_slice(value.row(i));
    }
}
