//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! warmup/constant or warmup/cosine learning-rate schedules.

use super::params::ParameterSet;
use super::Scalar;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip applied before the moment update; <= 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

/// What a call to [`AdamW::step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    /// A non-finite gradient was found; parameters and moments untouched.
    SkippedNonFinite,
}

pub struct AdamW<S: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (ArrayD<S>, ArrayD<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, using `lr` for this
    /// step (schedules pass the current value). Gradients are not zeroed.
    pub fn step_with_lr(&mut self, params: &mut ParameterSet<S>, lr: f64) -> StepOutcome {
        if params.any_grad_nonfinite() {
            return StepOutcome::SkippedNonFinite;
        }
        let grad_norm = params.grad_norm().as_f64();
        let clip_scale = if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            self.config.grad_clip / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.config.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.config.beta2.powi(t));
        let eps = S::from_f64(self.config.eps);
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(self.config.weight_decay);
        let cs = S::from_f64(clip_scale);
        for (name, value, grad) in params.iter_mut_with_grad() {
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                (ArrayD::zeros(value.raw_dim()), ArrayD::zeros(value.raw_dim()))
            });
            let value_s = value.as_slice_mut().unwrap();
            let grad_s = grad.as_slice().unwrap();
            let m_s = m.as_slice_mut().unwrap();
            let v_s = v.as_slice_mut().unwrap();
            for i in 0..value_s.len() {
                let g = grad_s[i] * cs;
                m_s[i] = b1 * m_s[i] + (one - b1) * g;
                v_s[i] = b2 * v_s[i] + (one - b2) * g * g;
                let m_hat = m_s[i] / bc1;
                let v_hat = v_s[i] / bc2;
                // decoupled decay: applied to the parameter, not the gradient
                value_s[i] = value_s[i] - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * value_s[i]);
            }
        }
        StepOutcome::Applied { grad_norm }
    }

    pub fn step(&mut self, params: &mut ParameterSet<S>) -> StepOutcome {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }
}

/// Learning-rate schedule with linear warmup.
#[derive(Clone, Debug)]
pub enum LrSchedule {
    Constant { base: f64, warmup: usize },
    Cosine { base: f64, min: f64, warmup: usize, total: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { base, warmup } => {
                if warmup > 0 && step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else {
                    base
                }
            }
            LrSchedule::Cosine { base, min, warmup, total } => {
                if warmup > 0 && step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let t = ((step - warmup) as f64 / span).min(1.0);
                    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}
