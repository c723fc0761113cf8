//! Central finite-difference gradient oracle.
//!
//! Test support: compares reverse-mode gradients against a two-sided
//! difference quotient computed purely from forward evaluations, so it stays
//! independent of the backward implementation it checks.

use super::graph::{Graph, Tensor};
use super::Scalar;
use ndarray::ArrayD;

/// Max relative error between the reverse-mode gradient of `f`'s scalar
/// output w.r.t. each input and the central finite difference with step `h`.
///
/// `f` is called with a fresh graph and leaf tensors built from `inputs`;
/// it must be a pure function of them.
pub fn max_rel_error<S, F>(inputs: &[ArrayD<S>], h: f64, mut f: F) -> f64
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[Tensor]) -> Tensor,
{
    let eval = |values: &[ArrayD<S>], f: &mut F| -> f64 {
        let mut g = Graph::<S>::new();
        let leaves: Vec<Tensor> = values.iter().map(|v| g.variable(v.clone())).collect();
        let out = f(&mut g, &leaves);
        assert_eq!(out.numel(), 1, "oracle target must be scalar");
        g.value(&out).iter().next().unwrap().as_f64()
    };

    // reverse-mode gradients
    let mut g = Graph::<S>::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|v| g.variable(v.clone())).collect();
    let out = f(&mut g, &leaves);
    g.backward(&out).expect("backward on oracle target");
    let analytic: Vec<ArrayD<S>> = leaves
        .iter()
        .map(|t| {
            g.grad(t)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for flat in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let p = plus[i].as_slice_mut().unwrap();
                p[flat] = p[flat] + S::from_f64(h);
                let m = minus[i].as_slice_mut().unwrap();
                m[flat] = m[flat] - S::from_f64(h);
            }
            let numeric = (eval(&plus, &mut f) - eval(&minus, &mut f)) / (2.0 * h);
            let exact = analytic[i].as_slice().unwrap()[flat].as_f64();
            let denom = exact.abs().max(numeric.abs()).max(1.0);
            let rel = (numeric - exact).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
