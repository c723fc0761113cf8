//! Dual encoder/decoder pairs with multi-scale cross-attention conditioning.
//!
//! Both codecs share one trunk architecture: stem, two stride-2 down blocks,
//! a mid block, and a 1x1 projection to the embedding dim (then mirrored on
//! the way up). The dynamics codec differs in two ways: an extra `bottleneck`
//! convolution squeezes the embedding grid before codebook lookup, and every
//! feature map at or below `cross_attn_threshold` is augmented with the
//! context codec's feature map at the same depth before the next block runs.

use super::codebook::Codebook;
use super::{GridRole, TokenGrid};
use crate::error::{IvwmError, Result};
use crate::tensor::{init, Graph, ParameterSet, Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of potential conditioning sites per trunk half (encoder: after
/// down2 and after mid; decoder: after from_embed and after mid).
pub const CROSS_ATTENTION_SITES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Square frame extent (desk scale: 32).
    pub frame_size: usize,
    pub in_channels: usize,
    /// Channels after stem, down1, down2.
    pub channels: [usize; 3],
    /// Code dimension d.
    pub embed_dim: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// GroupNorm group count.
    pub groups: usize,
    /// Extra downsampling factor of the dynamics bottleneck (4: 8x8 -> 2x2).
    pub bottleneck: usize,
    /// Cross-attention applies only to maps with extent <= this.
    pub cross_attn_threshold: usize,
    /// Commitment coefficient.
    pub beta: f64,
    /// EMA decay for the codebook.
    pub ema_decay: f64,
    /// EMA codebook updates when true, gradient codebook loss when false.
    pub use_ema: bool,
    /// Stale steps before dead-code reinit.
    pub dead_code_steps: u32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            frame_size: 32,
            in_channels: 3,
            channels: [16, 32, 64],
            embed_dim: 32,
            codebook_size: 512,
            groups: 8,
            bottleneck: 4,
            cross_attn_threshold: 8,
            beta: 0.25,
            ema_decay: 0.99,
            use_ema: true,
            dead_code_steps: 250,
        }
    }
}

impl CodecConfig {
    /// Context token grid extent (frame/4 after two stride-2 blocks).
    pub fn context_grid(&self) -> usize {
        self.frame_size / 4
    }

    /// Context tokens per frame (N).
    pub fn context_tokens(&self) -> usize {
        self.context_grid() * self.context_grid()
    }

    /// Dynamics token grid extent.
    pub fn future_grid(&self) -> usize {
        self.context_grid() / self.bottleneck
    }

    /// Dynamics tokens per frame (n).
    pub fn future_tokens(&self) -> usize {
        self.future_grid() * self.future_grid()
    }

    fn validate(&self) -> Result<()> {
        if self.frame_size % 4 != 0 || self.context_grid() % self.bottleneck != 0 {
            return Err(IvwmError::Config(format!(
                "frame size {} incompatible with bottleneck {}",
                self.frame_size, self.bottleneck
            )));
        }
        if self.future_tokens() >= self.context_tokens() {
            return Err(IvwmError::Config(
                "dynamics grid must be strictly smaller than context grid".into(),
            ));
        }
        Ok(())
    }

    pub fn sidecar_entries(&self) -> Vec<(String, String)> {
        vec![
            ("frame_size".into(), self.frame_size.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("channels".into(), format!("{},{},{}", self.channels[0], self.channels[1], self.channels[2])),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("codebook_size".into(), self.codebook_size.to_string()),
            ("groups".into(), self.groups.to_string()),
            ("bottleneck".into(), self.bottleneck.to_string()),
            ("cross_attn_threshold".into(), self.cross_attn_threshold.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("ema_decay".into(), self.ema_decay.to_string()),
            ("use_ema".into(), (self.use_ema as u8).to_string()),
            ("dead_code_steps".into(), self.dead_code_steps.to_string()),
        ]
    }

    pub fn from_sidecar(entries: &[(String, String)]) -> Result<Self> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| IvwmError::Config(format!("bad value for {k}: {v}")))
        }
        let mut cfg = CodecConfig::default();
        for (k, v) in entries {
            match k.as_str() {
                "frame_size" => cfg.frame_size = parse(k, v)?,
                "in_channels" => cfg.in_channels = parse(k, v)?,
                "channels" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| parse(k, p.trim()))
                        .collect::<Result<_>>()?;
                    if parts.len() != 3 {
                        return Err(IvwmError::Config(format!("channels needs 3 values: {v}")));
                    }
                    cfg.channels = [parts[0], parts[1], parts[2]];
                }
                "embed_dim" => cfg.embed_dim = parse(k, v)?,
                "codebook_size" => cfg.codebook_size = parse(k, v)?,
                "groups" => cfg.groups = parse(k, v)?,
                "bottleneck" => cfg.bottleneck = parse(k, v)?,
                "cross_attn_threshold" => cfg.cross_attn_threshold = parse(k, v)?,
                "beta" => cfg.beta = parse(k, v)?,
                "ema_decay" => cfg.ema_decay = parse(k, v)?,
                "use_ema" => cfg.use_ema = parse::<u8>(k, v)? != 0,
                "dead_code_steps" => cfg.dead_code_steps = parse(k, v)?,
                other => return Err(IvwmError::Config(format!("unknown codec key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Multi-scale context features in key/value form, one entry per bridge site:
/// encoder-side and decoder-side maps flattened to `[B, T0*hw, c]`.
pub struct ContextFeatures {
    pub batch: usize,
    pub frames_per_seq: usize,
    pub enc: Vec<Tensor>,
    pub dec: Vec<Tensor>,
}

/// Everything produced by encoding (and re-decoding) context frames.
pub struct ContextEncodeOutput {
    pub grids: Vec<TokenGrid>,
    pub aux_loss: Tensor,
    /// Context reconstructions `[B*T0, 3, H, W]`.
    pub recon: Tensor,
    pub features: ContextFeatures,
    /// Pre-quantization embedding rows `[B*T0*N, d]` (EMA update input).
    pub embed_rows: Tensor,
    pub indices: Vec<u32>,
}

pub struct FutureEncodeOutput {
    pub grids: Vec<TokenGrid>,
    pub aux_loss: Tensor,
    /// Straight-through quantized embeddings `[Bf, d, gh, gw]`.
    pub quantized: Tensor,
    pub embed_rows: Tensor,
    pub indices: Vec<u32>,
}

/// Loss and EMA bookkeeping for one tokenizer training batch.
pub struct TokenizerBatchLoss {
    pub loss: Tensor,
    pub context_l1: f64,
    pub future_l1: f64,
    /// Embedding rows and chosen indices for the shared codebook update.
    pub embed_rows: ArrayD<f64>,
    pub indices: Vec<u32>,
}

/// The compressive tokenizer: context codec, dynamics codec, shared codebook.
pub struct DualCodec<S: Scalar> {
    pub config: CodecConfig,
    pub params: ParameterSet<S>,
    pub codebook: Codebook<S>,
}

impl<S: Scalar> DualCodec<S> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let codebook = Codebook::new(
            "codebook.entries",
            config.codebook_size,
            config.embed_dim,
            config.beta,
            config.ema_decay,
            config.use_ema,
            config.dead_code_steps,
        );
        codebook.register(&mut params, &mut rng);
        register_codec_half(&mut params, &config, "ctx", false, &mut rng);
        register_codec_half(&mut params, &config, "dyn", true, &mut rng);
        Ok(DualCodec {
            config,
            params,
            codebook,
        })
    }

    /// Independently tokenize and reconstruct context frames, capturing the
    /// multi-scale feature maps the dynamics codec conditions on.
    ///
    /// `frames` is `[B*T0, 3, H, W]`, sequence-major.
    pub fn encode_context(
        &self,
        g: &mut Graph<S>,
        frames: &Tensor,
        batch: usize,
    ) -> Result<ContextEncodeOutput> {
        self.check_frames(frames)?;
        let total = frames.shape()[0];
        if batch == 0 || total % batch != 0 {
            return Err(IvwmError::invalid(
                "encode_context",
                format!("{total} frames not divisible into {batch} sequences"),
            ));
        }
        let t0 = total / batch;
        let (embed, enc_feats) = self.enc_trunk(g, "ctx", frames, None)?;
        // quantize N tokens per frame
        let rows = self.embed_to_rows(g, &embed)?;
        let q = self.codebook.quantize(g, &self.params, &rows)?;
        let quantized = self.rows_to_embed(g, &q.quantized, embed.shape())?;
        let (recon, dec_feats) = self.dec_trunk(g, "ctx", &quantized, None)?;
        let grid = self.config.context_grid();
        let grids = split_grids(&q.indices, total, grid * grid, GridRole::Context, 0);
        let features = ContextFeatures {
            batch,
            frames_per_seq: t0,
            enc: enc_feats
                .iter()
                .map(|f| self.to_kv(g, f, batch, t0))
                .collect::<Result<_>>()?,
            dec: dec_feats
                .iter()
                .map(|f| self.to_kv(g, f, batch, t0))
                .collect::<Result<_>>()?,
        };
        Ok(ContextEncodeOutput {
            grids,
            aux_loss: q.aux_loss,
            recon,
            features,
            embed_rows: rows,
            indices: q.indices,
        })
    }

    /// Encode future frames conditioned on context features.
    ///
    /// `frames` is `[Bf, 3, H, W]`; `seq_of[i]` maps frame `i` to its
    /// sequence index inside the feature batch.
    pub fn encode_future(
        &self,
        g: &mut Graph<S>,
        frames: &Tensor,
        features: &ContextFeatures,
        seq_of: &[usize],
    ) -> Result<FutureEncodeOutput> {
        self.check_frames(frames)?;
        if frames.shape()[0] != seq_of.len() {
            return Err(IvwmError::invalid(
                "encode_future",
                format!("{} frames vs {} sequence ids", frames.shape()[0], seq_of.len()),
            ));
        }
        let bridges = BridgeInputs {
            kv: &features.enc,
            seq_of,
            prefix: "dyn.enc_bridge",
        };
        let (embed, _) = self.enc_trunk(g, "dyn", frames, Some(&bridges))?;
        // extra bottleneck before codebook lookup
        let bw = g.param(&self.params, "dyn.bottleneck.w")?;
        let bb = g.param(&self.params, "dyn.bottleneck.b")?;
        let squeezed = g.conv2d(&embed, &bw, Some(&bb), self.config.bottleneck, 0)?;
        let rows = self.embed_to_rows(g, &squeezed)?;
        let q = self.codebook.quantize(g, &self.params, &rows)?;
        let quantized = self.rows_to_embed(g, &q.quantized, squeezed.shape())?;
        let grid = self.config.future_grid();
        let grids = split_grids(&q.indices, seq_of.len(), grid * grid, GridRole::Future, 0);
        Ok(FutureEncodeOutput {
            grids,
            aux_loss: q.aux_loss,
            quantized,
            embed_rows: rows,
            indices: q.indices,
        })
    }

    /// Decode future frames from straight-through quantized embeddings
    /// `[Bf, d, gh, gw]`. With `ablate` the context bridges are skipped.
    pub fn decode_future_quantized(
        &self,
        g: &mut Graph<S>,
        quantized: &Tensor,
        features: &ContextFeatures,
        seq_of: &[usize],
        ablate: bool,
    ) -> Result<Tensor> {
        let uw = g.param(&self.params, "dyn.unbottleneck.w")?;
        let ub = g.param(&self.params, "dyn.unbottleneck.b")?;
        let up = g.conv_transpose2d(quantized, &uw, Some(&ub), self.config.bottleneck, 0)?;
        let bridges = BridgeInputs {
            kv: &features.dec,
            seq_of,
            prefix: "dyn.dec_bridge",
        };
        let (frames, _) = self.dec_trunk(g, "dyn", &up, if ablate { None } else { Some(&bridges) })?;
        Ok(frames)
    }

    /// Decode future frames from token grids (inference path).
    pub fn decode_future_tokens(
        &self,
        g: &mut Graph<S>,
        grids: &[TokenGrid],
        features: &ContextFeatures,
        seq_of: &[usize],
        ablate: bool,
    ) -> Result<Tensor> {
        let quantized = self.lookup_grids(g, grids, GridRole::Future)?;
        self.decode_future_quantized(g, &quantized, features, seq_of, ablate)
    }

    /// Decode context frames from token grids (inference path).
    pub fn decode_context_tokens(&self, g: &mut Graph<S>, grids: &[TokenGrid]) -> Result<Tensor> {
        let quantized = self.lookup_grids(g, grids, GridRole::Context)?;
        let (frames, _) = self.dec_trunk(g, "ctx", &quantized, None)?;
        Ok(frames)
    }

    /// Eq.-style training loss: (L1 + commitment) over context frames via the
    /// context codec plus the same over future frames via the dynamics codec,
    /// all terms equally weighted.
    pub fn tokenizer_loss(
        &self,
        g: &mut Graph<S>,
        context_frames: &Tensor,
        future_frames: &Tensor,
        batch: usize,
        seq_of_future: &[usize],
    ) -> Result<TokenizerBatchLoss> {
        if future_frames.shape()[0] == 0 {
            return Err(IvwmError::invalid("tokenizer_loss", "no future frames in batch"));
        }
        let ctx = self.encode_context(g, context_frames, batch)?;
        let ctx_l1 = g.l1(&ctx.recon, context_frames)?;
        let fut = self.encode_future(g, future_frames, &ctx.features, seq_of_future)?;
        let recon = self.decode_future_quantized(
            g,
            &fut.quantized,
            &ctx.features,
            seq_of_future,
            false,
        )?;
        let fut_l1 = g.l1(&recon, future_frames)?;
        let s1 = g.add(&ctx_l1, &ctx.aux_loss)?;
        let s2 = g.add(&fut_l1, &fut.aux_loss)?;
        let loss = g.add(&s1, &s2)?;
        // EMA bookkeeping: embeddings and indices from both quantize calls
        let mut rows: Vec<f64> = g
            .value(&ctx.embed_rows)
            .iter()
            .map(|v| v.as_f64())
            .collect();
        rows.extend(g.value(&fut.embed_rows).iter().map(|v| v.as_f64()));
        let d = self.config.embed_dim;
        let mut indices = ctx.indices;
        indices.extend(fut.indices);
        Ok(TokenizerBatchLoss {
            loss,
            context_l1: g.value(&ctx_l1).iter().next().unwrap().as_f64(),
            future_l1: g.value(&fut_l1).iter().next().unwrap().as_f64(),
            embed_rows: ArrayD::from_shape_vec(IxDyn(&[rows.len() / d, d]), rows).unwrap(),
            indices,
        })
    }

    /// One post-step codebook maintenance call: EMA update plus dead-code
    /// reinit bookkeeping.
    pub fn codebook_step<R: Rng>(
        &mut self,
        batch: &TokenizerBatchLoss,
        rng: &mut R,
    ) -> super::codebook::CodebookUpdate {
        let rows: Vec<S> = batch.embed_rows.iter().map(|&v| S::from_f64(v)).collect();
        let arr = ArrayD::from_shape_vec(batch.embed_rows.raw_dim(), rows).unwrap();
        self.codebook.ema_update(&mut self.params, &arr, &batch.indices);
        self.codebook.reinit_dead_codes(&mut self.params, &arr, rng)
    }

    // ---- internals ----

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        let c = self.config.in_channels;
        let hw = self.config.frame_size;
        if frames.ndim() != 4 || frames.shape()[1] != c || frames.shape()[2] != hw || frames.shape()[3] != hw
        {
            return Err(IvwmError::ShapeMismatch {
                op: "codec frames",
                lhs: vec![frames.shape().first().copied().unwrap_or(0), c, hw, hw],
                rhs: frames.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `[B, d, gh, gw] -> [B*gh*gw, d]` token-major rows.
    fn embed_to_rows(&self, g: &mut Graph<S>, embed: &Tensor) -> Result<Tensor> {
        let (b, d, gh, gw) = (
            embed.shape()[0],
            embed.shape()[1],
            embed.shape()[2],
            embed.shape()[3],
        );
        let moved = g.permute(embed, &[0, 2, 3, 1])?;
        g.reshape(&moved, &[b * gh * gw, d])
    }

    fn rows_to_embed(&self, g: &mut Graph<S>, rows: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let (b, d, gh, gw) = (shape[0], shape[1], shape[2], shape[3]);
        let spatial = g.reshape(rows, &[b, gh, gw, d])?;
        g.permute(&spatial, &[0, 3, 1, 2])
    }

    fn lookup_grids(&self, g: &mut Graph<S>, grids: &[TokenGrid], role: GridRole) -> Result<Tensor> {
        let (grid, count) = match role {
            GridRole::Context => (self.config.context_grid(), self.config.context_tokens()),
            GridRole::Future => (self.config.future_grid(), self.config.future_tokens()),
        };
        let mut flat = Vec::with_capacity(grids.len() * count);
        for gr in grids {
            if gr.len() != count {
                return Err(IvwmError::ShapeMismatch {
                    op: "lookup_grids",
                    lhs: vec![count],
                    rhs: vec![gr.len()],
                });
            }
            for &i in &gr.indices {
                if i as usize >= self.config.codebook_size {
                    return Err(IvwmError::TokenOutOfRange {
                        id: i,
                        vocab: self.config.codebook_size as u32,
                    });
                }
                flat.push(i as usize);
            }
        }
        let entries = g.param(&self.params, &self.codebook.param_name)?;
        let rows = g.index_select(&entries, 0, &flat)?;
        self.rows_to_embed(
            g,
            &rows,
            &[grids.len(), self.config.embed_dim, grid, grid],
        )
    }

    /// Flatten `[B*T0, c, h, w]` context maps to `[B, T0*h*w, c]` key/value
    /// rows (per-sequence concatenation along the position axis).
    fn to_kv(&self, g: &mut Graph<S>, f: &Tensor, batch: usize, t0: usize) -> Result<Tensor> {
        let (total, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        debug_assert_eq!(total, batch * t0);
        let moved = g.permute(f, &[0, 2, 3, 1])?; // [B*T0, h, w, c]
        g.reshape(&moved, &[batch, t0 * h * w, c])
    }

    fn enc_trunk(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        frames: &Tensor,
        bridges: Option<&BridgeInputs<'_>>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let p = &self.params;
        let mut x = conv_gn_silu(g, p, &format!("{prefix}.stem"), frames, 1, 1, self.config.groups)?;
        x = conv_gn_silu(g, p, &format!("{prefix}.down1"), &x, 2, 1, self.config.groups)?;
        x = conv_gn_silu(g, p, &format!("{prefix}.down2"), &x, 2, 1, self.config.groups)?;
        let mut feats = Vec::new();
        let mut site = 0usize;
        if x.shape()[2] <= self.config.cross_attn_threshold {
            feats.push(x.clone());
            if let Some(br) = bridges {
                x = self.augment(g, &x, &br.kv[site], br.seq_of, &format!("{}{site}", br.prefix))?;
            }
            site += 1;
        }
        x = conv_gn_silu(g, p, &format!("{prefix}.enc_mid"), &x, 1, 1, self.config.groups)?;
        if x.shape()[2] <= self.config.cross_attn_threshold {
            feats.push(x.clone());
            if let Some(br) = bridges {
                x = self.augment(g, &x, &br.kv[site], br.seq_of, &format!("{}{site}", br.prefix))?;
            }
        }
        let w = g.param(p, &format!("{prefix}.to_embed.w"))?;
        let b = g.param(p, &format!("{prefix}.to_embed.b"))?;
        let embed = g.conv2d(&x, &w, Some(&b), 1, 0)?;
        Ok((embed, feats))
    }

    fn dec_trunk(
        &self,
        g: &mut Graph<S>,
        prefix: &str,
        quantized: &Tensor,
        bridges: Option<&BridgeInputs<'_>>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let p = &self.params;
        let mut x = conv_gn_silu(
            g,
            p,
            &format!("{prefix}.from_embed"),
            quantized,
            1,
            1,
            self.config.groups,
        )?;
        let mut feats = Vec::new();
        let mut site = 0usize;
        if x.shape()[2] <= self.config.cross_attn_threshold {
            feats.push(x.clone());
            if let Some(br) = bridges {
                x = self.augment(g, &x, &br.kv[site], br.seq_of, &format!("{}{site}", br.prefix))?;
            }
            site += 1;
        }
        x = conv_gn_silu(g, p, &format!("{prefix}.dec_mid"), &x, 1, 1, self.config.groups)?;
        if x.shape()[2] <= self.config.cross_attn_threshold {
            feats.push(x.clone());
            if let Some(br) = bridges {
                x = self.augment(g, &x, &br.kv[site], br.seq_of, &format!("{}{site}", br.prefix))?;
            }
        }
        x = convt_gn_silu(g, p, &format!("{prefix}.up1"), &x, 2, 1, self.config.groups)?;
        x = convt_gn_silu(g, p, &format!("{prefix}.up2"), &x, 2, 1, self.config.groups)?;
        let w = g.param(p, &format!("{prefix}.head.w"))?;
        let b = g.param(p, &format!("{prefix}.head.b"))?;
        let logits = g.conv2d(&x, &w, Some(&b), 1, 1)?;
        let frames = g.sigmoid(&logits);
        Ok((frames, feats))
    }

    /// Cross-attention bridge with this codec's parameters at `bridge`.
    pub fn augment(
        &self,
        g: &mut Graph<S>,
        f_p: &Tensor,
        kv_flat: &Tensor,
        seq_of: &[usize],
        bridge: &str,
    ) -> Result<Tensor> {
        if f_p.shape()[2] > self.config.cross_attn_threshold {
            return Err(IvwmError::invalid(
                "augment",
                format!(
                    "map extent {} above threshold {}",
                    f_p.shape()[2],
                    self.config.cross_attn_threshold
                ),
            ));
        }
        let p = &self.params;
        let bp = BridgeParams {
            wq: g.param(p, &format!("{bridge}.wq"))?,
            wk: g.param(p, &format!("{bridge}.wk"))?,
            wv: g.param(p, &format!("{bridge}.wv"))?,
            pos_q: g.param(p, &format!("{bridge}.pos_q"))?,
            pos_kv: g.param(p, &format!("{bridge}.pos_kv"))?,
            norm_q: g.param(p, &format!("{bridge}.norm_q"))?,
            norm_kv: g.param(p, &format!("{bridge}.norm_kv"))?,
        };
        augment_with(g, f_p, kv_flat, seq_of, &bp)
    }

    /// Checkpoint including codebook side-state.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut full = ParameterSet::<S>::new();
        for (name, value) in self.params.iter() {
            full.insert(name, value.clone());
        }
        for (name, value) in self.codebook.state_entries() {
            full.insert(name, value);
        }
        crate::tensor::write_checkpoint(path, &full)
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let mut full = ParameterSet::<S>::new();
        for (name, value) in self.params.iter() {
            full.insert(name, ArrayD::zeros(value.raw_dim()));
        }
        for (name, value) in self.codebook.state_entries() {
            full.insert(name, ArrayD::zeros(value.raw_dim()));
        }
        crate::tensor::read_checkpoint(path, &mut full)?;
        for (name, value) in full.iter() {
            if self.codebook.load_state(name, value) {
                continue;
            }
            *self.params.get_mut(name).expect("matching parameter") = value.clone();
        }
        Ok(())
    }
}

struct BridgeInputs<'a> {
    kv: &'a [Tensor],
    seq_of: &'a [usize],
    prefix: &'a str,
}

/// The per-site cross-attention parameters.
pub struct BridgeParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub pos_q: Tensor,
    pub pos_kv: Tensor,
    pub norm_q: Tensor,
    pub norm_kv: Tensor,
}

/// `Q = Norm(flat(F_p)) + PosEmb_Q`, `K = V = Norm(flat(F_c)) + PosEmb_KV`,
/// `out = SiLU(F_p + reshape(Attention(Q Wq, K Wk, V Wv)))`.
///
/// `f_p` is `[Bf, c, h, w]`; `kv_flat` is `[B, T0*hw, c]` (context frames of
/// one sequence concatenated along the position axis); `seq_of[i]` names the
/// sequence whose context frame `i` of `f_p` conditions on. The positional
/// embedding over `hw` positions is tiled across the `T0` context frames.
pub fn augment_with<S: Scalar>(
    g: &mut Graph<S>,
    f_p: &Tensor,
    kv_flat: &Tensor,
    seq_of: &[usize],
    bp: &BridgeParams,
) -> Result<Tensor> {
    let (bf, c, h, w) = (f_p.shape()[0], f_p.shape()[1], f_p.shape()[2], f_p.shape()[3]);
    if kv_flat.ndim() != 3 || kv_flat.shape()[2] != c {
        return Err(IvwmError::ShapeMismatch {
            op: "augment",
            lhs: f_p.shape().to_vec(),
            rhs: kv_flat.shape().to_vec(),
        });
    }
    let hw = h * w;
    let kv_len = kv_flat.shape()[1];
    // Q from the future map
    let moved = g.permute(f_p, &[0, 2, 3, 1])?;
    let q_rows = g.reshape(&moved, &[bf, hw, c])?;
    let q_norm = g.rms_norm(&q_rows, &bp.norm_q, S::from_f64(1e-6))?;
    let q_pos = g.add_broadcast(&q_norm, &bp.pos_q)?;
    // K = V from the context maps of each frame's sequence
    let kv_norm = g.rms_norm(kv_flat, &bp.norm_kv, S::from_f64(1e-6))?;
    let t0 = kv_len / bp.pos_kv.shape()[0];
    let pos_kv = if t0 > 1 {
        let copies: Vec<Tensor> = (0..t0).map(|_| bp.pos_kv.clone()).collect();
        g.concat(&copies, 0)?
    } else {
        bp.pos_kv.clone()
    };
    let kv_pos = g.add_broadcast(&kv_norm, &pos_kv)?;
    let kv_exp = g.index_select(&kv_pos, 0, seq_of)?; // [Bf, kv_len, c]
    let q = project_rows(g, &q_pos, &bp.wq)?;
    let k = project_rows(g, &kv_exp, &bp.wk)?;
    let v = project_rows(g, &kv_exp, &bp.wv)?;
    let scores = g.bmm(&q, &k, true)?;
    let scaled = g.scale(&scores, S::from_f64(1.0 / (c as f64).sqrt()));
    let attn = g.softmax(&scaled);
    let r = g.bmm(&attn, &v, false)?; // [Bf, hw, c]
    let r_spatial = g.reshape(&r, &[bf, h, w, c])?;
    let r_chw = g.permute(&r_spatial, &[0, 3, 1, 2])?;
    let sum = g.add(f_p, &r_chw)?;
    Ok(g.silu(&sum))
}

fn project_rows<S: Scalar>(g: &mut Graph<S>, rows: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, l, c) = (rows.shape()[0], rows.shape()[1], rows.shape()[2]);
    let flat = g.reshape(rows, &[b * l, c])?;
    let proj = g.matmul(&flat, w)?;
    g.reshape(&proj, &[b, l, w.shape()[1]])
}

fn split_grids(
    indices: &[u32],
    frames: usize,
    per_frame: usize,
    role: GridRole,
    first_frame_index: usize,
) -> Vec<TokenGrid> {
    (0..frames)
        .map(|f| {
            TokenGrid::new(
                first_frame_index + f,
                role,
                indices[f * per_frame..(f + 1) * per_frame].to_vec(),
            )
        })
        .collect()
}

fn conv_gn_silu<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParameterSet<S>,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    let y = g.conv2d(x, &w, Some(&b), stride, pad)?;
    let gamma = g.param(p, &format!("{prefix}.gn_g"))?;
    let beta = g.param(p, &format!("{prefix}.gn_b"))?;
    let n = g.group_norm(&y, &gamma, &beta, groups, S::from_f64(1e-5))?;
    Ok(g.silu(&n))
}

fn convt_gn_silu<S: Scalar>(
    g: &mut Graph<S>,
    p: &ParameterSet<S>,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    let y = g.conv_transpose2d(x, &w, Some(&b), stride, pad)?;
    let gamma = g.param(p, &format!("{prefix}.gn_g"))?;
    let beta = g.param(p, &format!("{prefix}.gn_b"))?;
    let n = g.group_norm(&y, &gamma, &beta, groups, S::from_f64(1e-5))?;
    Ok(g.silu(&n))
}

fn register_conv<S: Scalar, R: Rng>(
    params: &mut ParameterSet<S>,
    rng: &mut R,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    norm: bool,
) {
    params.insert(format!("{prefix}.w"), init::kaiming(rng, &[cout, cin, k, k], cin * k * k));
    params.insert(format!("{prefix}.b"), init::zeros(&[cout]));
    if norm {
        params.insert(format!("{prefix}.gn_g"), init::full(&[cout], S::one()));
        params.insert(format!("{prefix}.gn_b"), init::zeros(&[cout]));
    }
}

fn register_convt<S: Scalar, R: Rng>(
    params: &mut ParameterSet<S>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    norm: bool,
) {
    params.insert(format!("{prefix}.w"), init::kaiming(rng, &[cin, cout, k, k], cin * k * k));
    params.insert(format!("{prefix}.b"), init::zeros(&[cout]));
    if norm {
        params.insert(format!("{prefix}.gn_g"), init::full(&[cout], S::one()));
        params.insert(format!("{prefix}.gn_b"), init::zeros(&[cout]));
    }
}

fn register_codec_half<S: Scalar, R: Rng>(
    params: &mut ParameterSet<S>,
    cfg: &CodecConfig,
    prefix: &str,
    dynamics: bool,
    rng: &mut R,
) {
    let [c0, c1, c2] = cfg.channels;
    let d = cfg.embed_dim;
    register_conv(params, rng, &format!("{prefix}.stem"), c0, cfg.in_channels, 3, true);
    register_conv(params, rng, &format!("{prefix}.down1"), c1, c0, 3, true);
    register_conv(params, rng, &format!("{prefix}.down2"), c2, c1, 3, true);
    register_conv(params, rng, &format!("{prefix}.enc_mid"), c2, c2, 3, true);
    register_conv(params, rng, &format!("{prefix}.to_embed"), d, c2, 1, false);
    register_conv(params, rng, &format!("{prefix}.from_embed"), c2, d, 3, true);
    register_conv(params, rng, &format!("{prefix}.dec_mid"), c2, c2, 3, true);
    register_convt(params, rng, &format!("{prefix}.up1"), c2, c1, 4, true);
    register_convt(params, rng, &format!("{prefix}.up2"), c1, c0, 4, true);
    register_conv(params, rng, &format!("{prefix}.head"), cfg.in_channels, c0, 3, false);
    if dynamics {
        let k = cfg.bottleneck;
        register_conv(params, rng, &format!("{prefix}.bottleneck"), d, d, k, false);
        register_convt(params, rng, &format!("{prefix}.unbottleneck"), d, d, k, false);
        let grid = cfg.context_grid();
        if grid <= cfg.cross_attn_threshold {
            let hw = grid * grid;
            for side in ["enc_bridge", "dec_bridge"] {
                for site in 0..CROSS_ATTENTION_SITES {
                    let b = format!("{prefix}.{side}{site}");
                    params.insert(format!("{b}.wq"), init::kaiming(rng, &[c2, c2], c2));
                    params.insert(format!("{b}.wk"), init::kaiming(rng, &[c2, c2], c2));
                    params.insert(format!("{b}.wv"), init::kaiming(rng, &[c2, c2], c2));
                    params.insert(format!("{b}.pos_q"), init::normal(rng, &[hw, c2], 0.02));
                    params.insert(format!("{b}.pos_kv"), init::normal(rng, &[hw, c2], 0.02));
                    params.insert(format!("{b}.norm_q"), init::full(&[c2], S::one()));
                    params.insert(format!("{b}.norm_kv"), init::full(&[c2], S::one()));
                }
            }
        }
    }
}
