//! Shared vector-quantization dictionary.
//!
//! Nearest-neighbor lookup with straight-through gradients and a commitment
//! term. Codebook learning is EMA by default (decay 0.99) with a config
//! switch to the gradient-based codebook loss; unused codes are re-seeded
//! from batch embeddings after a configurable number of stale steps.

use crate::error::{IvwmError, Result};
use crate::tensor::{init, Graph, ParameterSet, Scalar, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Codebook<S: Scalar> {
    /// Number of codes (K).
    pub size: usize,
    /// Code dimension (d).
    pub dim: usize,
    /// Commitment coefficient.
    pub beta: f64,
    /// EMA decay for codebook updates.
    pub ema_decay: f64,
    /// Laplace smoothing for EMA cluster sizes.
    pub epsilon: f64,
    /// EMA codebook learning when true, gradient-based codebook loss when false.
    pub use_ema: bool,
    /// Steps without assignment before a code is re-seeded.
    pub dead_code_steps: u32,
    /// Name of the entries parameter inside the model's parameter set.
    pub param_name: String,
    ema_cluster_size: Vec<S>,
    ema_embed_sum: Array2<S>,
    stale_steps: Vec<u32>,
}

/// Result of quantizing a batch of embedding rows.
pub struct QuantizeOutput {
    pub indices: Vec<u32>,
    /// Straight-through quantized vectors, same shape as the input rows.
    pub quantized: Tensor,
    /// Commitment loss (plus codebook loss in gradient mode).
    pub aux_loss: Tensor,
}

/// Bookkeeping from an EMA update.
#[derive(Clone, Copy, Debug, Default)]
pub struct CodebookUpdate {
    pub reinitialized: usize,
    pub used_codes: usize,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(
        param_name: impl Into<String>,
        size: usize,
        dim: usize,
        beta: f64,
        ema_decay: f64,
        use_ema: bool,
        dead_code_steps: u32,
    ) -> Self {
        Codebook {
            size,
            dim,
            beta,
            ema_decay,
            epsilon: 1e-5,
            use_ema,
            dead_code_steps,
            param_name: param_name.into(),
            ema_cluster_size: vec![S::zero(); size],
            ema_embed_sum: Array2::zeros((size, dim)),
            stale_steps: vec![0; size],
        }
    }

    /// Insert the entries parameter `[K, d]`.
    pub fn register<R: Rng>(&self, params: &mut ParameterSet<S>, rng: &mut R) {
        let bound = 1.0 / (self.dim as f64).sqrt();
        params.insert(
            self.param_name.clone(),
            init::uniform(rng, &[self.size, self.dim], bound),
        );
    }

    /// Nearest code per row of `embeddings` `[m, d]` by squared Euclidean
    /// distance, ties broken toward the lowest index.
    pub fn nearest(&self, entries: &ArrayD<S>, embeddings: &ArrayD<S>) -> Result<Vec<u32>> {
        if self.size == 0 {
            return Err(IvwmError::invalid("quantize", "empty codebook"));
        }
        let m = embeddings.len() / self.dim;
        let e = embeddings.as_slice().unwrap();
        let c = entries.as_slice().unwrap();
        // dist(i,k) = |e_i|^2 - 2 e_i.c_k + |c_k|^2; the |e|^2 term is
        // constant per row and dropped.
        let ev = ndarray::ArrayView2::from_shape((m, self.dim), e).unwrap();
        let cv = ndarray::ArrayView2::from_shape((self.size, self.dim), c).unwrap();
        let dots = ev.dot(&cv.t()); // [m, K]
        let code_norms: Vec<S> = (0..self.size)
            .map(|k| {
                let row = &c[k * self.dim..(k + 1) * self.dim];
                row.iter().map(|&v| v * v).sum()
            })
            .collect();
        let two = S::from_f64(2.0);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let mut best = 0usize;
            let mut best_d = code_norms[0] - two * dots[[i, 0]];
            for k in 1..self.size {
                let d = code_norms[k] - two * dots[[i, k]];
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            out.push(best as u32);
        }
        Ok(out)
    }

    /// Quantize embedding rows `[m, d]` through the graph: returns indices,
    /// straight-through quantized vectors, and the auxiliary loss.
    pub fn quantize(
        &self,
        g: &mut Graph<S>,
        params: &ParameterSet<S>,
        embeddings: &Tensor,
    ) -> Result<QuantizeOutput> {
        if embeddings.ndim() != 2 || embeddings.shape()[1] != self.dim {
            return Err(IvwmError::ShapeMismatch {
                op: "quantize",
                lhs: vec![embeddings.shape()[0], self.dim],
                rhs: embeddings.shape().to_vec(),
            });
        }
        let entries = g.param(params, &self.param_name)?;
        let indices = self.nearest(g.value(&entries), g.value(embeddings))?;
        let idx_usize: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        let codes = g.index_select(&entries, 0, &idx_usize)?;
        // straight-through: q = e + stopgrad(c - e)
        let delta = g.sub(&codes, embeddings)?;
        let frozen_delta = g.stop_grad(&delta);
        let quantized = g.add(embeddings, &frozen_delta)?;
        // commitment: beta * mean |e - stopgrad(c)|^2
        let frozen_codes = g.stop_grad(&codes);
        let commit = g.mse(embeddings, &frozen_codes)?;
        let mut aux = g.scale(&commit, S::from_f64(self.beta));
        if !self.use_ema {
            // gradient route: + mean |stopgrad(e) - c|^2 onto the entries
            let frozen_e = g.stop_grad(embeddings);
            let cb = g.mse(&frozen_e, &codes)?;
            aux = g.add(&aux, &cb)?;
        }
        Ok(QuantizeOutput {
            indices,
            quantized,
            aux_loss: aux,
        })
    }

    /// Per-step usage bookkeeping for dead-code tracking (both modes).
    pub fn note_usage(&mut self, indices: &[u32]) {
        let mut used = vec![false; self.size];
        for &i in indices {
            used[i as usize] = true;
        }
        for k in 0..self.size {
            if used[k] {
                self.stale_steps[k] = 0;
            } else {
                self.stale_steps[k] = self.stale_steps[k].saturating_add(1);
            }
        }
    }

    /// EMA update of the entries toward their assigned embeddings; call once
    /// per optimization step in EMA mode. `embeddings` is the `[m, d]` value
    /// matrix that produced `indices`.
    pub fn ema_update(
        &mut self,
        params: &mut ParameterSet<S>,
        embeddings: &ArrayD<S>,
        indices: &[u32],
    ) {
        self.note_usage(indices);
        if !self.use_ema {
            return;
        }
        let m = indices.len();
        let e = embeddings.as_slice().unwrap();
        let decay = S::from_f64(self.ema_decay);
        let one_minus = S::one() - decay;
        let mut counts = vec![S::zero(); self.size];
        let mut sums = vec![S::zero(); self.size * self.dim];
        for i in 0..m {
            let k = indices[i] as usize;
            counts[k] += S::one();
            let row = &e[i * self.dim..(i + 1) * self.dim];
            let dst = &mut sums[k * self.dim..(k + 1) * self.dim];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        for k in 0..self.size {
            self.ema_cluster_size[k] = decay * self.ema_cluster_size[k] + one_minus * counts[k];
        }
        let sums_arr = Array2::from_shape_vec((self.size, self.dim), sums).unwrap();
        self.ema_embed_sum
            .zip_mut_with(&sums_arr, |a, &b| *a = decay * *a + one_minus * b);
        // Laplace-smoothed cluster sizes
        let total: S = self.ema_cluster_size.iter().copied().sum();
        let eps = S::from_f64(self.epsilon);
        let k_eps = S::from_usize(self.size) * eps;
        let entries = params
            .get_mut(&self.param_name)
            .expect("codebook entries registered");
        let ev = entries.as_slice_mut().unwrap();
        for k in 0..self.size {
            let smoothed = (self.ema_cluster_size[k] + eps) / (total + k_eps) * total;
            if smoothed > S::zero() {
                for d in 0..self.dim {
                    ev[k * self.dim + d] = self.ema_embed_sum[[k, d]] / smoothed;
                }
            }
        }
    }

    /// Re-seed codes that have been unassigned for `dead_code_steps` from
    /// random rows of the current batch embeddings.
    pub fn reinit_dead_codes<R: Rng>(
        &mut self,
        params: &mut ParameterSet<S>,
        embeddings: &ArrayD<S>,
        rng: &mut R,
    ) -> CodebookUpdate {
        let m = embeddings.len() / self.dim;
        let e = embeddings.as_slice().unwrap();
        let entries = params
            .get_mut(&self.param_name)
            .expect("codebook entries registered");
        let ev = entries.as_slice_mut().unwrap();
        let mut reinitialized = 0usize;
        if m > 0 {
            for k in 0..self.size {
                if self.stale_steps[k] >= self.dead_code_steps {
                    let src = rng.random_range(0..m);
                    let row = &e[src * self.dim..(src + 1) * self.dim];
                    ev[k * self.dim..(k + 1) * self.dim].copy_from_slice(row);
                    // seed the EMA stats so the code is not instantly pulled back
                    self.ema_cluster_size[k] = S::one();
                    for d in 0..self.dim {
                        self.ema_embed_sum[[k, d]] = row[d];
                    }
                    self.stale_steps[k] = 0;
                    reinitialized += 1;
                }
            }
        }
        let used = self.stale_steps.iter().filter(|&&s| s == 0).count();
        CodebookUpdate {
            reinitialized,
            used_codes: used,
        }
    }

    /// Side-state entries appended to checkpoints.
    pub fn state_entries(&self) -> Vec<(String, ArrayD<S>)> {
        vec![
            (
                format!("{}.ema_size", self.param_name),
                ArrayD::from_shape_vec(IxDyn(&[self.size]), self.ema_cluster_size.clone()).unwrap(),
            ),
            (
                format!("{}.ema_sum", self.param_name),
                self.ema_embed_sum.clone().into_dyn(),
            ),
        ]
    }

    pub fn load_state(&mut self, name: &str, value: &ArrayD<S>) -> bool {
        if name == format!("{}.ema_size", self.param_name) {
            self.ema_cluster_size = value.as_slice().unwrap().to_vec();
            true
        } else if name == format!("{}.ema_sum", self.param_name) {
            self.ema_embed_sum =
                Array2::from_shape_vec((self.size, self.dim), value.as_slice().unwrap().to_vec())
                    .unwrap();
            true
        } else {
            false
        }
    }
}
