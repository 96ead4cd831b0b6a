use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named activation site.
///
/// `ResidPre(n_layers)` is accepted as the residual stream after the last
/// block, before the final layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookPoint {
    /// Positional embedding rows actually added at each position, `[N, d]`.
    PosEmbed,
    /// Residual stream entering a block, `[N, d]`.
    ResidPre(usize),
    /// Attention probabilities, `[H, N, N]` indexed `[head, dst, src]`.
    AttnProbs(usize),
    /// Per-head contribution to the residual stream after `W_O`, `[H, N, d]`.
    HeadOut(usize),
    /// MLP contribution, `[N, d]`.
    MlpOut(usize),
    /// `[N, V]`.
    Logits,
}

impl HookPoint {
    pub fn layer(self) -> Option<usize> {
        match self {
            HookPoint::ResidPre(l) | HookPoint::AttnProbs(l) | HookPoint::HeadOut(l) | HookPoint::MlpOut(l) => Some(l),
            HookPoint::PosEmbed | HookPoint::Logits => None,
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::PosEmbed => write!(f, "hook_pos_embed"),
            HookPoint::ResidPre(l) => write!(f, "blocks.{l}.hook_resid_pre"),
            HookPoint::AttnProbs(l) => write!(f, "blocks.{l}.attn.hook_pattern"),
            HookPoint::HeadOut(l) => write!(f, "blocks.{l}.attn.hook_result"),
            HookPoint::MlpOut(l) => write!(f, "blocks.{l}.hook_mlp_out"),
            HookPoint::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown hook name {s:?}"));
        match s {
            "hook_pos_embed" => return Ok(HookPoint::PosEmbed),
            "logits" => return Ok(HookPoint::Logits),
            _ => {}
        }
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (layer, site) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        match site {
            "hook_resid_pre" => Ok(HookPoint::ResidPre(layer)),
            "attn.hook_pattern" => Ok(HookPoint::AttnProbs(layer)),
            "attn.hook_result" => Ok(HookPoint::HeadOut(layer)),
            "hook_mlp_out" => Ok(HookPoint::MlpOut(layer)),
            _ => Err(bad()),
        }
    }
}

/// Which hooks a forward pass should record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Capture {
    #[default]
    Nothing,
    Everything,
    Only(BTreeSet<HookPoint>),
}

impl Capture {
    pub fn only(points: impl IntoIterator<Item = HookPoint>) -> Self {
        Capture::Only(points.into_iter().collect())
    }

    pub fn contains(&self, point: HookPoint) -> bool {
        match self {
            Capture::Nothing => false,
            Capture::Everything => true,
            Capture::Only(set) => set.contains(&point),
        }
    }
}

/// Activations recorded by one forward pass. Values are post-intervention.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    entries: BTreeMap<HookPoint, Tensor>,
}

impl ActivationCache {
    pub fn insert(&mut self, point: HookPoint, value: Tensor) {
        self.entries.insert(point, value);
    }

    pub fn get(&self, point: HookPoint) -> Option<&Tensor> {
        self.entries.get(&point)
    }

    pub fn require(&self, point: HookPoint) -> Result<&Tensor> {
        self.get(point)
            .ok_or_else(|| Error::Precondition(format!("hook {point} was not captured")))
    }

    pub fn contains(&self, point: HookPoint) -> bool {
        self.entries.contains_key(&point)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookPoint, &Tensor)> {
        self.entries.iter()
    }

    pub fn resid_pre(&self, layer: usize) -> Result<&Tensor> {
        self.require(HookPoint::ResidPre(layer))
    }

    pub fn attn_probs(&self, layer: usize) -> Result<&Tensor> {
        self.require(HookPoint::AttnProbs(layer))
    }

    pub fn head_out(&self, layer: usize) -> Result<&Tensor> {
        self.require(HookPoint::HeadOut(layer))
    }

    pub fn mlp_out(&self, layer: usize) -> Result<&Tensor> {
        self.require(HookPoint::MlpOut(layer))
    }

    pub fn logits(&self) -> Result<&Tensor> {
        self.require(HookPoint::Logits)
    }
}
