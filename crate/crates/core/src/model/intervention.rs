use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::hooks::HookPoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What happens to the non-BOS entries of a row whose BOS probability was swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BosRescale {
    /// Scale the other entries by `(1 - new) / (1 - old)` so the row sums to 1.
    #[default]
    Proportional,
    /// Swap the two scalars and leave everything else alone.
    None,
}

/// An edit applied to the forward pass at a hook point.
///
/// Patch values replace the activation at the listed positions; `value` has one
/// row of width `d_model` per position.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    PatchResidPre {
        layer: usize,
        positions: Vec<usize>,
        value: Tensor,
    },
    PatchHeadOut {
        layer: usize,
        head: usize,
        positions: Vec<usize>,
        value: Tensor,
    },
    PatchMlpOut {
        layer: usize,
        positions: Vec<usize>,
        value: Tensor,
    },
    /// Exchanges the positional embedding rows used at two positions.
    SwapPosEmbed { pos_a: usize, pos_b: usize },
    /// Exchanges the attention paid to position 0 by two destination rows.
    SwapBosAttention {
        layer: usize,
        head: usize,
        dst_a: usize,
        dst_b: usize,
        rescale: BosRescale,
    },
}

impl Intervention {
    /// The hook at which the edit takes effect.
    pub fn hook(&self) -> HookPoint {
        match self {
            Intervention::PatchResidPre { layer, .. } => HookPoint::ResidPre(*layer),
            Intervention::PatchHeadOut { layer, .. } => HookPoint::HeadOut(*layer),
            Intervention::PatchMlpOut { layer, .. } => HookPoint::MlpOut(*layer),
            Intervention::SwapPosEmbed { .. } => HookPoint::PosEmbed,
            Intervention::SwapBosAttention { layer, .. } => HookPoint::AttnProbs(*layer),
        }
    }

    /// Checks coordinates against the model shape and a sequence of `seq_len` tokens.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let layer_ok = |l: usize| {
            if l < config.n_layers {
                Ok(())
            } else {
                Err(Error::Coordinate(format!("layer {l} of {}", config.n_layers)))
            }
        };
        let head_ok = |h: usize| {
            if h < config.n_heads {
                Ok(())
            } else {
                Err(Error::Coordinate(format!("head {h} of {}", config.n_heads)))
            }
        };
        let pos_ok = |p: usize| {
            if p < seq_len {
                Ok(())
            } else {
                Err(Error::Coordinate(format!("position {p} in a sequence of {seq_len}")))
            }
        };
        let patch_ok = |positions: &[usize], value: &Tensor| {
            positions.iter().try_for_each(|&p| pos_ok(p))?;
            if value.shape() != [positions.len(), config.d_model] {
                return Err(Error::Dimension {
                    op: "patch value",
                    lhs: value.shape().to_vec(),
                    rhs: vec![positions.len(), config.d_model],
                });
            }
            Ok(())
        };
        match self {
            Intervention::PatchResidPre { layer, positions, value }
            | Intervention::PatchMlpOut { layer, positions, value } => {
                layer_ok(*layer)?;
                patch_ok(positions, value)
            }
            Intervention::PatchHeadOut {
                layer,
                head,
                positions,
                value,
            } => {
                layer_ok(*layer)?;
                head_ok(*head)?;
                patch_ok(positions, value)
            }
            Intervention::SwapPosEmbed { pos_a, pos_b } => {
                pos_ok(*pos_a)?;
                pos_ok(*pos_b)
            }
            Intervention::SwapBosAttention {
                layer,
                head,
                dst_a,
                dst_b,
                ..
            } => {
                layer_ok(*layer)?;
                head_ok(*head)?;
                pos_ok(*dst_a)?;
                pos_ok(*dst_b)?;
                if *dst_a == 0 || *dst_b == 0 {
                    return Err(Error::Coordinate(
                        "BOS attention swap needs destination rows after position 0".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Swaps column 0 between rows `a` and `b` of a causal `[N, N]` probability
/// matrix and re-normalizes each touched row according to `mode`.
pub(crate) fn swap_bos(probs: &mut [f32], n: usize, a: usize, b: usize, mode: BosRescale) {
    if a == b {
        return;
    }
    let old_a = probs[a * n];
    let old_b = probs[b * n];
    for (row, old, new) in [(a, old_a, old_b), (b, old_b, old_a)] {
        let r = &mut probs[row * n..(row + 1) * n];
        r[0] = new;
        if mode == BosRescale::None {
            continue;
        }
        // causal: only columns 1..=row carry mass
        let rest = &mut r[1..=row];
        let old_rest = 1.0 - old;
        if old_rest > 1e-12 {
            let scale = (1.0 - new) / old_rest;
            rest.iter_mut().for_each(|v| *v *= scale);
        } else {
            // the row was all on BOS; spread the freed mass evenly
            let share = (1.0 - new) / rest.len() as f32;
            rest.iter_mut().for_each(|v| *v = share);
        }
    }
}
