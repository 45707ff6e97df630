//! Attention variants: causal softmax, sliding window, sinks, streaming
//! linear attention with learned feature maps, rotary embeddings and the
//! fixed-mix hybrid with its ablation modes.
//!
//! Kernels operate on a single head (`T × d` queries and keys, `T × d_v`
//! values). Multi-head attention runs them per head and concatenates.

pub mod feature_map;
pub mod hybrid;
pub mod linear;
pub mod rope;
pub mod softmax;

pub use feature_map::{feature_map_apply, feature_map_tape, Activation, FeatureMapParams, FeatureMapVars};
pub use hybrid::{hybrid_attention, hybrid_head_tape, AblationMode, HybridHead, HybridSpec, WindowSpec};
pub use linear::{
    linear_attention_quadratic_oracle, linear_attention_streaming, linear_attention_tape,
    streaming_state_size, LinearAttentionOutput, LA_EPS,
};
pub use rope::{apply_rope, rope_tape, RopeParams};
pub use softmax::{
    band_softmax_attention, band_softmax_attention_tape, causal_softmax_weights, sinks_attention,
    sliding_window_attention, softmax_attention_causal, KeyBand,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One head's post-projection queries, keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        Self::check_shapes(&q, &k, &v)?;
        Ok(Self { q, k, v })
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_shapes(&self.q, &self.k, &self.v)
    }

    pub(crate) fn check_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
        if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
            return Err(Error::dim("attention inputs must be matrices"));
        }
        if q.shape() != k.shape() {
            return Err(Error::dim(format!(
                "queries {:?} and keys {:?} must share shape",
                q.shape(),
                k.shape()
            )));
        }
        if v.rows() != q.rows() {
            return Err(Error::dim("values and queries differ in length"));
        }
        if q.rows() == 0 {
            return Err(Error::dim("empty sequence"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same inputs with rotary embeddings applied to queries and keys.
    pub fn with_rope(&self, params: RopeParams) -> Result<Self> {
        Ok(Self {
            q: apply_rope(&self.q, params)?,
            k: apply_rope(&self.k, params)?,
            v: self.v.clone(),
        })
    }
}
