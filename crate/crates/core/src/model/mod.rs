//! GPT-2 forward pass with hook points for caching and editing activations.
//!
//! The residual stream seen at `resid_pre[l]` is the pre-layer-norm stream;
//! layer norms are always computed explicitly. Each block adds
//! `Σ_h head_out[h] + b_O` and then `mlp_out`.

mod config;
mod forward;
mod hooks;
mod intervention;
mod weights;

pub use config::ModelConfig;
pub use forward::{ForwardOutput, Model, ResidualOutput};
pub use hooks::{ActivationCache, Capture, HookPoint};
pub use intervention::{BosRescale, Intervention};
pub use weights::{load_weights, save_weights, LayerWeights, NameMap, Weights};
