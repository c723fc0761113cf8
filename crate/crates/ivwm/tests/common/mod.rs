//! Shared helpers for the integration and acceptance suites.

#![allow(dead_code)]

use ivwm::tensor::{fdcheck, Graph, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

pub fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Project a tensor to a scalar through a fixed random linear functional so
/// every op can be checked through one backward target.
fn to_scalar(g: &mut Graph<f64>, t: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ca1a);
    let w = rand_array(&mut rng, t.shape(), -1.0, 1.0);
    let wc = g.constant(w);
    let prod = g.mul(t, &wc).unwrap();
    g.sum_all(&prod)
}

/// Run the finite-difference oracle for every differentiable op over
/// `seeds` randomized shapes each. Returns `(op name, worst rel. error)`.
pub fn gradient_check_suite(seeds: usize) -> Vec<(String, f64)> {
    let h = 1e-4;
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, worst: f64| results.push((name.to_string(), worst));

    macro_rules! check {
        ($name:expr, $seed:expr, $inputs:expr, $f:expr) => {{
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64($seed * 1000 + s);
                let inputs = $inputs(&mut rng);
                let err = fdcheck::max_rel_error(&inputs, h, $f(s));
                if err > worst {
                    worst = err;
                }
            }
            record($name, worst);
        }};
    }

    // elementwise binary
    check!("add", 1, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[3, 4], -1.0, 1.0),
        rand_array(r, &[3, 4], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.add(&t[0], &t[1]).unwrap();
        to_scalar(g, &y, s)
    });
    check!("sub", 2, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 5], -1.0, 1.0),
        rand_array(r, &[2, 5], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.sub(&t[0], &t[1]).unwrap();
        to_scalar(g, &y, s)
    });
    check!("mul", 3, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[4, 3], -1.0, 1.0),
        rand_array(r, &[4, 3], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.mul(&t[0], &t[1]).unwrap();
        to_scalar(g, &y, s)
    });
    check!("neg_scale_add_scalar", 4, |r: &mut ChaCha8Rng| vec![rand_array(r, &[6], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let a = g.neg(&t[0]);
            let b = g.scale(&a, 1.7);
            let c = g.add_scalar(&b, 0.3);
            to_scalar(g, &c, s)
        });
    check!("add_broadcast", 5, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 3, 4], -1.0, 1.0),
        rand_array(r, &[3, 4], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.add_broadcast(&t[0], &t[1]).unwrap();
        to_scalar(g, &y, s)
    });

    // linear algebra
    check!("matmul", 6, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[3, 4], -1.0, 1.0),
        rand_array(r, &[4, 2], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.matmul(&t[0], &t[1]).unwrap();
        to_scalar(g, &y, s)
    });
    check!("bmm", 7, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 3, 4], -1.0, 1.0),
        rand_array(r, &[2, 4, 2], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.bmm(&t[0], &t[1], false).unwrap();
        to_scalar(g, &y, s)
    });
    check!("bmm_trans_b", 8, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 3, 4], -1.0, 1.0),
        rand_array(r, &[2, 5, 4], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.bmm(&t[0], &t[1], true).unwrap();
        to_scalar(g, &y, s)
    });

    // convolution
    check!("conv2d", 9, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 3, 6, 5], -1.0, 1.0),
        rand_array(r, &[4, 3, 3, 3], -1.0, 1.0),
        rand_array(r, &[4], -0.5, 0.5)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.conv2d(&t[0], &t[1], Some(&t[2]), 2, 1).unwrap();
        to_scalar(g, &y, s)
    });
    check!("conv2d_stride1", 10, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[1, 2, 5, 5], -1.0, 1.0),
        rand_array(r, &[3, 2, 3, 3], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.conv2d(&t[0], &t[1], None, 1, 1).unwrap();
        to_scalar(g, &y, s)
    });
    check!("conv_transpose2d", 11, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 3, 4, 4], -1.0, 1.0),
        rand_array(r, &[3, 2, 4, 4], -1.0, 1.0),
        rand_array(r, &[2], -0.5, 0.5)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.conv_transpose2d(&t[0], &t[1], Some(&t[2]), 2, 1).unwrap();
        to_scalar(g, &y, s)
    });

    // normalization
    check!("group_norm", 12, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 4, 3, 3], -1.0, 1.0),
        rand_array(r, &[4], 0.5, 1.5),
        rand_array(r, &[4], -0.5, 0.5)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.group_norm(&t[0], &t[1], &t[2], 2, 1e-5).unwrap();
        to_scalar(g, &y, s)
    });
    check!("rms_norm", 13, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[3, 6], -1.0, 1.0),
        rand_array(r, &[6], 0.5, 1.5)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.rms_norm(&t[0], &t[1], 1e-6).unwrap();
        to_scalar(g, &y, s)
    });

    // activations
    check!("silu", 14, |r: &mut ChaCha8Rng| vec![rand_array(r, &[4, 4], -2.0, 2.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.silu(&t[0]);
            to_scalar(g, &y, s)
        });
    check!("sigmoid", 15, |r: &mut ChaCha8Rng| vec![rand_array(r, &[4, 4], -2.0, 2.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.sigmoid(&t[0]);
            to_scalar(g, &y, s)
        });
    check!("tanh", 16, |r: &mut ChaCha8Rng| vec![rand_array(r, &[4, 4], -2.0, 2.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.tanh(&t[0]);
            to_scalar(g, &y, s)
        });
    check!("abs", 17, |r: &mut ChaCha8Rng| {
        // keep inputs away from the kink at zero
        let mut a = rand_array(r, &[5, 3], 0.2, 1.0);
        for (i, v) in a.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        vec![a]
    }, |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.abs(&t[0]);
        to_scalar(g, &y, s)
    });
    check!("softmax", 18, |r: &mut ChaCha8Rng| vec![rand_array(r, &[3, 5], -2.0, 2.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.softmax(&t[0]);
            to_scalar(g, &y, s)
        });

    // indexing / shape
    check!("index_select_axis0", 19, |r: &mut ChaCha8Rng| vec![rand_array(r, &[6, 3], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.index_select(&t[0], 0, &[1, 1, 4, 0]).unwrap();
            to_scalar(g, &y, s)
        });
    check!("index_select_axis1", 20, |r: &mut ChaCha8Rng| vec![rand_array(r, &[2, 5, 3], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.index_select(&t[0], 1, &[4, 2]).unwrap();
            to_scalar(g, &y, s)
        });
    check!("reshape_permute", 21, |r: &mut ChaCha8Rng| vec![rand_array(r, &[2, 3, 4], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.permute(&t[0], &[2, 0, 1]).unwrap();
            let z = g.reshape(&y, &[4, 6]).unwrap();
            to_scalar(g, &z, s)
        });
    check!("concat", 22, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 2, 3], -1.0, 1.0),
        rand_array(r, &[2, 4, 3], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.concat(&[t[0].clone(), t[1].clone()], 1).unwrap();
        to_scalar(g, &y, s)
    });
    check!("slice", 23, |r: &mut ChaCha8Rng| vec![rand_array(r, &[2, 6, 3], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let y = g.slice(&t[0], 1, 2, 3).unwrap();
            to_scalar(g, &y, s)
        });
    check!("rotary", 24, |r: &mut ChaCha8Rng| vec![rand_array(r, &[2, 2, 3, 4], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let (cos, sin) = rotary_tables(g, 3, 4);
            let y = g.rotary(&t[0], &cos, &sin).unwrap();
            to_scalar(g, &y, s)
        });
    check!("add_rows_at", 25, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 5, 3], -1.0, 1.0),
        rand_array(r, &[2, 2, 3], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let y = g.add_rows_at(&t[0], &t[1], &[1, 3]).unwrap();
        to_scalar(g, &y, s)
    });

    // reductions / losses
    check!("mean_all", 26, |r: &mut ChaCha8Rng| vec![rand_array(r, &[3, 4], -1.0, 1.0)],
        |_s| move |g: &mut Graph<f64>, t: &[Tensor]| g.mean_all(&t[0]));
    check!("sum_all", 27, |r: &mut ChaCha8Rng| vec![rand_array(r, &[7], -1.0, 1.0)],
        |_s| move |g: &mut Graph<f64>, t: &[Tensor]| g.sum_all(&t[0]));
    check!("cross_entropy", 28, |r: &mut ChaCha8Rng| vec![rand_array(r, &[5, 7], -2.0, 2.0)],
        |_s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            let targets = [0usize, 3, 6, 2, 5];
            let weights = [1.0, 0.0, 1.0, 1.0, 0.0];
            g.cross_entropy(&t[0], &targets, &weights).unwrap()
        });
    check!("mse", 29, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[3, 3], -1.0, 1.0),
        rand_array(r, &[3, 3], -1.0, 1.0)
    ], |_s| move |g: &mut Graph<f64>, t: &[Tensor]| g.mse(&t[0], &t[1]).unwrap());
    check!("l1", 30, |r: &mut ChaCha8Rng| {
        // keep the difference away from zero
        let a = rand_array(r, &[3, 3], 1.0, 2.0);
        let b = rand_array(r, &[3, 3], -2.0, -1.0);
        vec![a, b]
    }, |_s| move |g: &mut Graph<f64>, t: &[Tensor]| g.l1(&t[0], &t[1]).unwrap());
    check!("dropout", 31, |r: &mut ChaCha8Rng| vec![rand_array(r, &[4, 4], -1.0, 1.0)],
        |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
            // fixed rng per call keeps the closure pure for the oracle
            let mut mask_rng = ChaCha8Rng::seed_from_u64(7 + s);
            let y = g.dropout(&t[0], 0.4, &mut mask_rng);
            to_scalar(g, &y, s)
        });

    // scaled dot-product attention as the composite the transformer uses
    check!("sdpa_composite", 32, |r: &mut ChaCha8Rng| vec![
        rand_array(r, &[2, 2, 3, 4], -1.0, 1.0),
        rand_array(r, &[2, 2, 3, 4], -1.0, 1.0),
        rand_array(r, &[2, 2, 3, 4], -1.0, 1.0)
    ], |s| move |g: &mut Graph<f64>, t: &[Tensor]| {
        let scores = g.bmm(&t[0], &t[1], true).unwrap();
        let scaled = g.scale(&scores, 0.5);
        let probs = g.softmax(&scaled);
        let ctx = g.bmm(&probs, &t[2], false).unwrap();
        to_scalar(g, &ctx, s)
    });

    results
}

fn rotary_tables(g: &mut Graph<f64>, t: usize, d: usize) -> (Tensor, Tensor) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(t * half);
    let mut sin = Vec::with_capacity(t * half);
    for pos in 0..t {
        for i in 0..half {
            let theta = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            cos.push(theta.cos());
            sin.push(theta.sin());
        }
    }
    (
        g.constant_from(&[t, half], cos),
        g.constant_from(&[t, half], sin),
    )
}
