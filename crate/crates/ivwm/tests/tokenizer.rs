//! Tokenizer-level contracts: shape arithmetic, bridge equations,
//! determinism, gradient flow through the full dual codec, and a short
//! training-curve smoke test.

mod common;

use ivwm::tensor::{fdcheck, AdamW, AdamWConfig, Graph, Scalar, Tensor};
use ivwm::tokenizer::{augment_with, BridgeParams, CodecConfig, DualCodec, GridRole, TokenGrid};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> CodecConfig {
    CodecConfig {
        frame_size: 8,
        channels: [4, 6, 8],
        embed_dim: 4,
        codebook_size: 13,
        groups: 2,
        bottleneck: 2,
        cross_attn_threshold: 2,
        ..Default::default()
    }
}

fn desk_config() -> CodecConfig {
    CodecConfig::default()
}

fn rand_frames(rng: &mut ChaCha8Rng, count: usize, size: usize) -> ArrayD<f32> {
    let n = count * 3 * size * size;
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(&[count, 3, size, size]), data).unwrap()
}

#[test]
fn desk_shape_arithmetic() {
    let cfg = desk_config();
    // 32x32 frame, two stride-2 blocks, final 8x8 grid -> N = 64
    assert_eq!(cfg.context_grid(), 8);
    assert_eq!(cfg.context_tokens(), 64);
    // 8x8 pre-bottleneck, 4x bottleneck -> n = 2x2 = 4
    assert_eq!(cfg.future_grid(), 2);
    assert_eq!(cfg.future_tokens(), 4);
}

#[test]
fn paper_shape_arithmetic() {
    let cfg = CodecConfig {
        frame_size: 64,
        cross_attn_threshold: 16,
        ..Default::default()
    };
    // 64x64 -> 16x16 grid -> N = 256; n = 4x4 = 16; ratio 16
    assert_eq!(cfg.context_tokens(), 256);
    assert_eq!(cfg.future_tokens(), 16);
    assert_eq!(cfg.context_tokens() / cfg.future_tokens(), 16);
}

#[test]
fn encode_context_returns_n_tokens_and_features() {
    let cfg = desk_config();
    let codec = DualCodec::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = rand_frames(&mut rng, 2, cfg.frame_size);
    let mut g = Graph::inference();
    let ft = g.constant(frames);
    let out = codec.encode_context(&mut g, &ft, 1).unwrap();
    assert_eq!(out.grids.len(), 2);
    assert_eq!(out.grids[0].len(), 64);
    assert!(out.grids.iter().all(|gr| gr.indices.iter().all(|&i| (i as usize) < cfg.codebook_size)));
    // reconstruction preserves frame shape
    assert_eq!(g.value(&out.recon).shape(), &[2, 3, 32, 32]);
    // two context frames -> key/value length doubles at each conditioned scale
    assert_eq!(out.features.enc.len(), 2);
    assert_eq!(out.features.enc[0].shape()[1], 2 * 64);
    assert_eq!(out.features.dec[0].shape()[1], 2 * 64);
}

#[test]
fn encode_future_token_count_and_determinism() {
    let cfg = desk_config();
    let codec = DualCodec::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ctx = rand_frames(&mut rng, 2, cfg.frame_size);
    let fut = rand_frames(&mut rng, 1, cfg.frame_size);
    let run = |ctx: ArrayD<f32>, fut: ArrayD<f32>| {
        let mut g = Graph::inference();
        let ct = g.constant(ctx);
        let co = codec.encode_context(&mut g, &ct, 1).unwrap();
        let ft = g.constant(fut);
        let fo = codec.encode_future(&mut g, &ft, &co.features, &[0]).unwrap();
        fo.grids[0].clone()
    };
    let a = run(ctx.clone(), fut.clone());
    let b = run(ctx, fut);
    assert_eq!(a.len(), 4);
    assert_eq!(a, b, "identical frame with identical context quantizes identically");
}

#[test]
fn encode_future_count_mismatch_rejected() {
    let cfg = desk_config();
    let codec = DualCodec::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ctx = rand_frames(&mut rng, 1, cfg.frame_size);
    let fut = rand_frames(&mut rng, 2, cfg.frame_size);
    let mut g = Graph::inference();
    let ct = g.constant(ctx);
    let co = codec.encode_context(&mut g, &ct, 1).unwrap();
    let ft = g.constant(fut);
    assert!(codec.encode_future(&mut g, &ft, &co.features, &[0]).is_err());
}

#[test]
fn decode_all_zero_grid_is_finite() {
    let cfg = desk_config();
    let codec = DualCodec::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ctx = rand_frames(&mut rng, 1, cfg.frame_size);
    let mut g = Graph::inference();
    let ct = g.constant(ctx);
    let co = codec.encode_context(&mut g, &ct, 1).unwrap();
    let grid = TokenGrid::new(1, GridRole::Future, vec![0; cfg.future_tokens()]);
    let frames = codec
        .decode_future_tokens(&mut g, &[grid], &co.features, &[0], false)
        .unwrap();
    assert!(g.value(&frames).iter().all(|v| v.is_finite()));
    let inside = g.value(&frames).iter().all(|&v| (0.0..=1.0).contains(&v));
    assert!(inside, "decoded frame stays in [0,1]");
}

#[test]
fn decode_rejects_out_of_range_index() {
    let cfg = desk_config();
    let codec = DualCodec::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ctx = rand_frames(&mut rng, 1, cfg.frame_size);
    let mut g = Graph::inference();
    let ct = g.constant(ctx);
    let co = codec.encode_context(&mut g, &ct, 1).unwrap();
    let grid = TokenGrid::new(1, GridRole::Future, vec![cfg.codebook_size as u32; 4]);
    assert!(codec
        .decode_future_tokens(&mut g, &[grid], &co.features, &[0], false)
        .is_err());
}

#[test]
fn zero_future_batch_rejected() {
    let cfg = tiny_config();
    let codec = DualCodec::<f32>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ctx = rand_frames(&mut rng, 1, cfg.frame_size);
    let fut = ArrayD::<f32>::zeros(IxDyn(&[0, 3, cfg.frame_size, cfg.frame_size]));
    let mut g = Graph::new();
    let ct = g.constant(ctx);
    let ft = g.constant(fut);
    assert!(codec.tokenizer_loss(&mut g, &ct, &ft, 1, &[]).is_err());
}

fn bridge_params(
    g: &mut Graph<f64>,
    c: usize,
    hw: usize,
    rng: &mut ChaCha8Rng,
    zero_wv: bool,
) -> BridgeParams {
    let mut mat = |n: usize, z: bool| -> Tensor {
        let data: Vec<f64> = (0..n).map(|_| if z { 0.0 } else { rng.random_range(-0.5..0.5) }).collect();
        g.variable(ArrayD::from_shape_vec(IxDyn(&[c, c]), data).unwrap())
    };
    let wq = mat(c * c, false);
    let wk = mat(c * c, false);
    let wv = mat(c * c, zero_wv);
    let pos_q_data: Vec<f64> = (0..hw * c).map(|_| rng.random_range(-0.1..0.1)).collect();
    let pos_kv_data: Vec<f64> = (0..hw * c).map(|_| rng.random_range(-0.1..0.1)).collect();
    let pos_q = g.variable(ArrayD::from_shape_vec(IxDyn(&[hw, c]), pos_q_data).unwrap());
    let pos_kv = g.variable(ArrayD::from_shape_vec(IxDyn(&[hw, c]), pos_kv_data).unwrap());
    let norm_q = g.constant(ArrayD::from_elem(IxDyn(&[c]), 1.0));
    let norm_kv = g.constant(ArrayD::from_elem(IxDyn(&[c]), 1.0));
    BridgeParams { wq, wk, wv, pos_q, pos_kv, norm_q, norm_kv }
}

#[test]
fn augment_zero_value_projection_is_silu_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::<f64>::new();
    let (c, h, w) = (6usize, 2usize, 2usize);
    let fp_data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fp = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), fp_data.clone()).unwrap());
    let kv_data: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, h * w, c]), kv_data).unwrap());
    let bp = bridge_params(&mut g, c, h * w, &mut rng, true);
    let out = augment_with(&mut g, &fp, &kv, &[0], &bp).unwrap();
    let expect: Vec<f64> = fp_data
        .iter()
        .map(|&x| x * (1.0 / (1.0 + (-x).exp())))
        .collect();
    let got = g.value(&out).as_slice().unwrap();
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn augment_output_shape_matches_query_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(c, h) in &[(4usize, 2usize), (8, 4), (6, 3)] {
        let mut g = Graph::<f64>::new();
        let fp_data: Vec<f64> = (0..2 * c * h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fp = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, c, h, h]), fp_data).unwrap());
        // two context frames worth of kv
        let kv_data: Vec<f64> = (0..2 * h * h * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2 * h * h, c]), kv_data).unwrap());
        let bp = bridge_params(&mut g, c, h * h, &mut rng, false);
        let out = augment_with(&mut g, &fp, &kv, &[0, 0], &bp).unwrap();
        assert_eq!(out.shape(), &[2, c, h, h]);
    }
}

#[test]
fn augment_single_position_attention_is_projection() {
    // h = w = 1: softmax over one key gives weight 1, so the attention
    // output is exactly the projected single context vector.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph::<f64>::new();
    let c = 5usize;
    let fp_data: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fp = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, c, 1, 1]), fp_data.clone()).unwrap());
    let kv_data: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, c]), kv_data.clone()).unwrap());
    let bp = bridge_params(&mut g, c, 1, &mut rng, false);
    let out = augment_with(&mut g, &fp, &kv, &[0], &bp).unwrap();
    // hand-evaluate: v = (rms_norm(kv) + pos_kv) . Wv; out = silu(fp + v)
    let ms = kv_data.iter().map(|v| v * v).sum::<f64>() / c as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    let pos_kv = g.value(&bp.pos_kv).as_slice().unwrap();
    let vrow: Vec<f64> = (0..c).map(|i| kv_data[i] * inv + pos_kv[i]).collect();
    let wv = g.value(&bp.wv).as_slice().unwrap();
    for i in 0..c {
        let vproj: f64 = (0..c).map(|j| vrow[j] * wv[j * c + i]).sum();
        let x = fp_data[i] + vproj;
        let expect = x * (1.0 / (1.0 + (-x).exp()));
        let got = g.value(&out).as_slice().unwrap()[i];
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }
}

#[test]
fn full_codec_gradient_matches_finite_differences() {
    // layer-composite oracle: d(tokenizer_loss)/d(input frames) through both
    // codecs, the bridges, the bottleneck, and the quantizer.
    let cfg = tiny_config();
    let codec = DualCodec::<f64>::new(cfg.clone(), 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = cfg.frame_size;
    let ctx: Vec<f64> = (0..2 * 3 * s * s).map(|_| rng.random_range(0.05..0.95)).collect();
    let fut: Vec<f64> = (0..3 * s * s).map(|_| rng.random_range(0.05..0.95)).collect();
    let inputs = vec![
        ArrayD::from_shape_vec(IxDyn(&[2, 3, s, s]), ctx).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[1, 3, s, s]), fut).unwrap(),
    ];
    let err = fdcheck::max_rel_error(&inputs, 1e-5, |g, t| {
        let out = codec.tokenizer_loss(g, &t[0], &t[1], 1, &[0]).unwrap();
        out.loss
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn parameter_gradients_through_codec_match_fd() {
    // Perturb stored parameters directly and compare the loss response with
    // the analytic gradient: covers conv dW, transposed-conv dW, and the
    // bridge projection dW paths through the full composite.
    let cfg = tiny_config();
    let mut codec = DualCodec::<f64>::new(cfg.clone(), 43).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = cfg.frame_size;
    let ctx = ArrayD::from_shape_vec(
        IxDyn(&[1, 3, s, s]),
        (0..3 * s * s).map(|_| rng.random_range(0.05..0.95)).collect(),
    )
    .unwrap();
    let fut = ArrayD::from_shape_vec(
        IxDyn(&[1, 3, s, s]),
        (0..3 * s * s).map(|_| rng.random_range(0.05..0.95)).collect(),
    )
    .unwrap();

    let eval = |codec: &DualCodec<f64>| -> f64 {
        let mut g = Graph::inference();
        let ct = g.constant(ctx.clone());
        let ft = g.constant(fut.clone());
        let out = codec.tokenizer_loss(&mut g, &ct, &ft, 1, &[0]).unwrap();
        g.value(&out.loss).iter().next().unwrap().as_f64()
    };

    // analytic gradients
    {
        let mut g = Graph::new();
        let ct = g.constant(ctx.clone());
        let ft = g.constant(fut.clone());
        let out = codec.tokenizer_loss(&mut g, &ct, &ft, 1, &[0]).unwrap();
        g.backward(&out.loss).unwrap();
        codec.params.zero_grads();
        g.apply_param_grads(&mut codec.params);
    }

    let h = 1e-5;
    for name in ["dyn.stem.w", "dyn.up1.w", "dyn.enc_bridge0.wv", "ctx.down2.gn_g"] {
        let analytic = codec.params.grad(name).unwrap().clone();
        let numel = analytic.len();
        for probe in 0..4.min(numel) {
            let idx = (probe * 7919) % numel; // spread across the tensor
            let orig = codec.params.get(name).unwrap().as_slice().unwrap()[idx];
            codec.params.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig + h;
            let lp = eval(&codec);
            codec.params.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig - h;
            let lm = eval(&codec);
            codec.params.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let exact = analytic.as_slice().unwrap()[idx];
            let denom = exact.abs().max(numeric.abs()).max(1e-3);
            assert!(
                ((numeric - exact).abs() / denom) < 1e-4,
                "{name}[{idx}]: numeric {numeric:.6e} vs analytic {exact:.6e}"
            );
        }
    }
}

#[test]
fn training_smoke_loss_decreases() {
    let cfg = tiny_config();
    let mut codec = DualCodec::<f32>::new(cfg.clone(), 9).unwrap();
    let mut opt = AdamW::<f32>::new(AdamWConfig {
        lr: 2e-3,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    // fixed tiny synthetic batch: a moving bright square on dark background
    let s = cfg.frame_size;
    let mut frames = vec![0.1f32; 3 * 3 * s * s];
    for (f, frame) in frames.chunks_mut(3 * s * s).enumerate() {
        for y in 0..3 {
            for x in 0..3 {
                let idx = (y + 2) * s + x + f * 2;
                frame[idx] = 0.9;
            }
        }
    }
    let ctx = ArrayD::from_shape_vec(IxDyn(&[2, 3, s, s]), frames[..2 * 3 * s * s].to_vec()).unwrap();
    let fut = ArrayD::from_shape_vec(IxDyn(&[1, 3, s, s]), frames[2 * 3 * s * s..].to_vec()).unwrap();
    let mut losses = Vec::new();
    for _ in 0..80 {
        let mut g = Graph::new();
        let ct = g.constant(ctx.clone());
        let ft = g.constant(fut.clone());
        let out = codec.tokenizer_loss(&mut g, &ct, &ft, 1, &[0]).unwrap();
        g.backward(&out.loss).unwrap();
        codec.params.zero_grads();
        g.apply_param_grads(&mut codec.params);
        opt.step(&mut codec.params);
        codec.codebook_step(&out, &mut rng);
        losses.push(g.value(&out.loss).iter().next().unwrap().as_f64());
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(
        tail < head * 0.7,
        "loss should fall: first10 {head:.4} last10 {tail:.4}"
    );
    assert!(losses.iter().all(|l| l.is_finite()));
}
