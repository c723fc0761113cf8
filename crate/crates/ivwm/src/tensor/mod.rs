//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The substrate is a define-by-run tape: a [`Graph`] records every forward
//! op, [`Graph::backward`] replays the tape in reverse, and gradients land in
//! a [`ParameterSet`] consumed by [`AdamW`]. Values are row-major
//! [`ndarray::ArrayD`] storage generic over [`Scalar`] (f32 for training,
//! f64 for the finite-difference test suite). Matrix products are delegated
//! to `ndarray`'s single-threaded SIMD kernels, which keeps results
//! bit-deterministic for a fixed seed.

mod checkpoint;
pub mod fdcheck;
mod graph;
mod kernels;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, read_sidecar, write_checkpoint, write_sidecar, CKPT_MAGIC};
pub use graph::{Graph, Tensor};
pub use optim::{AdamW, AdamWConfig, LrSchedule, StepOutcome};
pub use params::{init, ParameterSet};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of the substrate: f32 or f64.
pub trait Scalar:
    Float + NumAssignOps + LinalgScalar + ScalarOperand + Sum + Send + Sync + Debug + Display + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
