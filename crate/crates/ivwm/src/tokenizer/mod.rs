//! Compressive dual-codec vector-quantized tokenizer.
//!
//! A context codec encodes each of the first `T0` frames independently into
//! `N` tokens. A dynamics codec encodes every later frame into `n << N`
//! tokens by cross-attending to the context codec's multi-scale feature maps
//! and squeezing through an extra bottleneck downsampler before codebook
//! lookup. Decoding future frames retrieves context the same way.

mod codebook;
mod codec;

pub use codebook::{Codebook, CodebookUpdate, QuantizeOutput};
pub use codec::{
    augment_with, BridgeParams,
    CodecConfig, ContextEncodeOutput, ContextFeatures, DualCodec, FutureEncodeOutput,
    TokenizerBatchLoss, CROSS_ATTENTION_SITES,
};

/// Whether a grid came from the context codec (`N` tokens) or the dynamics
/// codec (`n` tokens).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridRole {
    Context,
    Future,
}

/// A frame's discrete token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frame_index: usize,
    pub role: GridRole,
    /// Code indices in `[0, K)`, row-major over the token grid.
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(frame_index: usize, role: GridRole, indices: Vec<u32>) -> Self {
        TokenGrid {
            frame_index,
            role,
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
