//! Interactive visual world model at desk scale.
//!
//! The crate is organized around three learned components and the harness
//! that drives them:
//!
//! - [`tensor`]: dense-tensor arithmetic with reverse-mode autodiff and an
//!   AdamW optimizer; every learnable module sits on this substrate.
//! - [`tokenizer`]: a compressive dual-codec vector-quantized tokenizer.
//!   Context frames are encoded through `N` tokens, future frames through a
//!   far smaller `n` by conditioning on context features with multi-scale
//!   cross-attention.
//! - [`sequencer`]: builds and parses the interleaved multimodal token
//!   stream (vocabulary bands, slot tokens, loss mask, action track, reward
//!   positions, goal rearrangement).
//! - [`transformer`]: the autoregressive dynamics model with rotary
//!   positions, a reward head, and KV-cached frame-by-frame generation.
//! - [`env`]: a deterministic pixel-observation push-block environment used
//!   as the ground-truth POMDP.
//! - [`rl`]: replay buffers, a twin-critic actor-critic, the MBPO-style
//!   training loop, and a random-shooting visual MPC planner.
//! - [`pipeline`]: dataset generation, stage training, evaluation metrics,
//!   efficiency benchmarking, and artifact export behind the `ivwm` CLI.

pub mod env;
pub mod error;
pub mod pipeline;
pub mod rl;
pub mod sequencer;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;

pub use error::{IvwmError, Result};
