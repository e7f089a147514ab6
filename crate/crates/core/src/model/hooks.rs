//! Observation and override points inside self-attention blocks.
//!
//! Every attention block consults a hook right after projecting Q/K/V and
//! before forming the attention product. A hook may record the projections,
//! replace them (optionally with a softmax temperature), or do nothing; the
//! do-nothing path is bit-identical to running without a hook.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// Stable identity of one self-attention block. Serialized under the same
/// names `name`/`parse` use, so config files read naturally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerId {
    #[serde(rename = "enc.32")]
    Enc32,
    #[serde(rename = "enc.16")]
    Enc16,
    #[serde(rename = "bn.16")]
    Bottleneck16,
    #[serde(rename = "dec.16")]
    Dec16,
    #[serde(rename = "dec.32")]
    Dec32,
}

impl LayerId {
    pub const ALL: [LayerId; 5] = [
        LayerId::Enc32,
        LayerId::Enc16,
        LayerId::Bottleneck16,
        LayerId::Dec16,
        LayerId::Dec32,
    ];

    /// The late decoder blocks — the default feature-injection set.
    pub const DECODER: [LayerId; 2] = [LayerId::Dec16, LayerId::Dec32];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Enc32 => "enc.32",
            LayerId::Enc16 => "enc.16",
            LayerId::Bottleneck16 => "bn.16",
            LayerId::Dec16 => "dec.16",
            LayerId::Dec32 => "dec.32",
        }
    }

    pub fn parse(s: &str) -> Result<LayerId> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown attention layer id: {s}")))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a layer sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPosition {
    Encoder,
    Bottleneck,
    Decoder,
}

/// Registry entry describing one attention block.
#[derive(Debug, Clone, Copy)]
pub struct LayerInfo {
    pub id: LayerId,
    pub position: LayerPosition,
    /// Spatial edge length the block operates at.
    pub resolution: usize,
    /// Token dimension (= channel count, single-head).
    pub dim: usize,
}

/// What a hook asks the block to do after seeing the fresh projections.
pub enum HookAction {
    /// Proceed untouched.
    Pass,
    /// Replace the projections and scale the softmax logits by `tau`.
    /// `q` of `None` keeps the block's own query.
    Override {
        q: Option<Tensor>,
        k: Tensor,
        v: Tensor,
        tau: f32,
    },
}

/// Behavior consulted by every self-attention block during inference.
///
/// `q`, `k`, `v` are `[tokens, dim]` projections of the current feature map.
/// Implementations may record them (capture), return replacements
/// (override), or pass. The optional logit-statistics channel reports the
/// row standard deviation of the scaled pre-softmax logits; blocks only
/// compute it when `wants_logit_std` returns true.
pub trait AttentionHook {
    fn on_attention(
        &mut self,
        layer: LayerId,
        t: usize,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Result<HookAction>;

    fn wants_logit_std(&self, _layer: LayerId) -> bool {
        false
    }

    /// `base_std` is the std of `QKᵀ/√d` logits; `scaled_std` of `τ·QKᵀ/√d`.
    fn observe_logit_std(&mut self, _layer: LayerId, _t: usize, _base_std: f64, _scaled_std: f64) {}
}

/// Hook that always passes.
pub struct PassHook;

impl AttentionHook for PassHook {
    fn on_attention(
        &mut self,
        _layer: LayerId,
        _t: usize,
        _q: &Tensor,
        _k: &Tensor,
        _v: &Tensor,
    ) -> Result<HookAction> {
        Ok(HookAction::Pass)
    }
}
