//! Interleaved multimodal token stream: vocabulary bands, slot tokens, the
//! sequence-length formula, the next-token loss mask, action injection,
//! reward positions, and the goal-conditioned rearrangement.
//!
//! Layout of one sequence (positions are 1-based in this module's API):
//!
//! ```text
//! z1(1..N)  [S1] z2(1..N) ... [S1] zT0(1..N)  [S2] z(T0+1)(1..n) ... [S2] zT(1..n)
//! ```
//!
//! A slot precedes every frame except the very first, giving exactly
//! `T0-1` S1 slots, `T-T0` S2 slots, and a total length of
//! `L = (N+1)*T0 + (n+1)*(T-T0) - 1`.

use crate::error::{IvwmError, Result};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::tokenizer::{GridRole, TokenGrid};

/// Disjoint id bands over a shared codebook of `K` codes: context tokens in
/// `[0, K)`, future tokens in `[K, 2K)`, then the two slot ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenVocabulary {
    pub codebook_size: u32,
}

impl TokenVocabulary {
    pub fn new(codebook_size: u32) -> Self {
        TokenVocabulary { codebook_size }
    }

    pub fn s1(&self) -> u32 {
        2 * self.codebook_size
    }

    pub fn s2(&self) -> u32 {
        2 * self.codebook_size + 1
    }

    pub fn size(&self) -> u32 {
        2 * self.codebook_size + 2
    }

    pub fn context_id(&self, code: u32) -> u32 {
        debug_assert!(code < self.codebook_size);
        code
    }

    pub fn future_id(&self, code: u32) -> u32 {
        debug_assert!(code < self.codebook_size);
        self.codebook_size + code
    }

    pub fn is_context_id(&self, id: u32) -> bool {
        id < self.codebook_size
    }

    pub fn is_future_id(&self, id: u32) -> bool {
        id >= self.codebook_size && id < 2 * self.codebook_size
    }
}

/// Token counts defining one interleaved sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    /// Tokens per context frame (N).
    pub context_tokens: usize,
    /// Tokens per future frame (n).
    pub future_tokens: usize,
    /// Total frames (T).
    pub frames: usize,
    /// Context frames (T0).
    pub context_frames: usize,
}

impl SequenceLayout {
    pub fn new(
        context_tokens: usize,
        future_tokens: usize,
        frames: usize,
        context_frames: usize,
    ) -> Result<Self> {
        let layout = SequenceLayout {
            context_tokens,
            future_tokens,
            frames,
            context_frames,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_frames < 1 || self.context_frames > self.frames {
            return Err(IvwmError::invalid(
                "sequence_layout",
                format!(
                    "need 1 <= T0 <= T, got T0={} T={}",
                    self.context_frames, self.frames
                ),
            ));
        }
        if self.future_tokens >= self.context_tokens {
            return Err(IvwmError::invalid(
                "sequence_layout",
                format!(
                    "future tokens must be strictly fewer: n={} N={}",
                    self.future_tokens, self.context_tokens
                ),
            ));
        }
        Ok(())
    }

    pub fn future_frames(&self) -> usize {
        self.frames - self.context_frames
    }
}

/// `L = (N+1)*T0 + (n+1)*(T-T0) - 1`.
pub fn sequence_length(layout: &SequenceLayout) -> Result<usize> {
    layout.validate()?;
    let n_ctx = layout.context_tokens;
    let n_fut = layout.future_tokens;
    Ok((n_ctx + 1) * layout.context_frames + (n_fut + 1) * layout.future_frames() - 1)
}

/// What a position holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Context,
    Future,
    Slot1,
    Slot2,
}

impl TokenKind {
    pub fn label(&self) -> &'static str {
        match self {
            TokenKind::Context => "CTX",
            TokenKind::Future => "FUT",
            TokenKind::Slot1 => "S1",
            TokenKind::Slot2 => "S2",
        }
    }
}

/// The flattened multimodal token stream for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSequence {
    pub layout: SequenceLayout,
    pub vocab: TokenVocabulary,
    /// Token ids, length L.
    pub tokens: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    /// True where the token is a next-token prediction target.
    pub loss_mask: Vec<bool>,
    /// 0-based indices of S2 slots, one per future frame, in frame order.
    pub action_slots: Vec<usize>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Debug dump, one line per position: `pos id kind masked` (1-based pos).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, (&id, kind)) in self.tokens.iter().zip(&self.kinds).enumerate() {
            out.push_str(&format!(
                "{} {} {} {}\n",
                i + 1,
                id,
                kind.label(),
                u8::from(self.loss_mask[i])
            ));
        }
        out
    }
}

/// Interleave context and future grids into one id stream.
///
/// Context tokens stay in the context band, future tokens shift up by `K`,
/// S1 precedes context frames 2..T0 and S2 precedes every future frame.
pub fn flatten(
    context: &[TokenGrid],
    future: &[TokenGrid],
    layout: &SequenceLayout,
    vocab: TokenVocabulary,
) -> Result<InterleavedSequence> {
    layout.validate()?;
    if context.len() != layout.context_frames || future.len() != layout.future_frames() {
        return Err(IvwmError::invalid(
            "flatten",
            format!(
                "expected {} context and {} future grids, got {} and {}",
                layout.context_frames,
                layout.future_frames(),
                context.len(),
                future.len()
            ),
        ));
    }
    let expect_len = sequence_length(layout)?;
    let mut tokens = Vec::with_capacity(expect_len);
    let mut kinds = Vec::with_capacity(expect_len);
    let mut action_slots = Vec::with_capacity(layout.future_frames());
    for (i, grid) in context.iter().enumerate() {
        if grid.len() != layout.context_tokens {
            return Err(IvwmError::ShapeMismatch {
                op: "flatten context grid",
                lhs: vec![layout.context_tokens],
                rhs: vec![grid.len()],
            });
        }
        if i > 0 {
            tokens.push(vocab.s1());
            kinds.push(TokenKind::Slot1);
        }
        for &code in &grid.indices {
            if code >= vocab.codebook_size {
                return Err(IvwmError::TokenOutOfRange {
                    id: code,
                    vocab: vocab.codebook_size,
                });
            }
            tokens.push(vocab.context_id(code));
            kinds.push(TokenKind::Context);
        }
    }
    for grid in future {
        if grid.len() != layout.future_tokens {
            return Err(IvwmError::ShapeMismatch {
                op: "flatten future grid",
                lhs: vec![layout.future_tokens],
                rhs: vec![grid.len()],
            });
        }
        action_slots.push(tokens.len());
        tokens.push(vocab.s2());
        kinds.push(TokenKind::Slot2);
        for &code in &grid.indices {
            if code >= vocab.codebook_size {
                return Err(IvwmError::TokenOutOfRange {
                    id: code,
                    vocab: vocab.codebook_size,
                });
            }
            tokens.push(vocab.future_id(code));
            kinds.push(TokenKind::Future);
        }
    }
    debug_assert_eq!(tokens.len(), expect_len);
    let mask = loss_mask(layout)?;
    Ok(InterleavedSequence {
        layout: *layout,
        vocab,
        tokens,
        kinds,
        loss_mask: mask,
        action_slots,
    })
}

/// Recover the per-frame grids from an interleaved stream; inverse of
/// [`flatten`] on valid input, rejecting band violations.
pub fn unflatten(seq: &InterleavedSequence) -> Result<(Vec<TokenGrid>, Vec<TokenGrid>)> {
    let layout = &seq.layout;
    let vocab = seq.vocab;
    if seq.tokens.len() != sequence_length(layout)? {
        return Err(IvwmError::invalid(
            "unflatten",
            format!("length {} does not match layout", seq.tokens.len()),
        ));
    }
    fn take(
        tokens: &[u32],
        pos: &mut usize,
        vocab: TokenVocabulary,
        count: usize,
        future_band: bool,
        frame: usize,
    ) -> Result<TokenGrid> {
        let mut indices = Vec::with_capacity(count);
        for _ in 0..count {
            let id = tokens[*pos];
            *pos += 1;
            let ok = if future_band {
                vocab.is_future_id(id)
            } else {
                vocab.is_context_id(id)
            };
            if !ok {
                return Err(IvwmError::TokenOutOfRange {
                    id,
                    vocab: vocab.size(),
                });
            }
            indices.push(if future_band { id - vocab.codebook_size } else { id });
        }
        Ok(TokenGrid::new(
            frame,
            if future_band { GridRole::Future } else { GridRole::Context },
            indices,
        ))
    }

    let mut pos = 0usize;
    let mut context = Vec::with_capacity(layout.context_frames);
    for f in 0..layout.context_frames {
        if f > 0 {
            if seq.tokens[pos] != vocab.s1() {
                return Err(IvwmError::invalid("unflatten", format!("expected S1 at {pos}")));
            }
            pos += 1;
        }
        context.push(take(&seq.tokens, &mut pos, vocab, layout.context_tokens, false, f)?);
    }
    let mut future = Vec::with_capacity(layout.future_frames());
    for f in 0..layout.future_frames() {
        if seq.tokens[pos] != vocab.s2() {
            return Err(IvwmError::invalid("unflatten", format!("expected S2 at {pos}")));
        }
        pos += 1;
        future.push(take(
            &seq.tokens,
            &mut pos,
            vocab,
            layout.future_tokens,
            true,
            layout.context_frames + f,
        )?);
    }
    Ok((context, future))
}

/// Next-token target mask over 1-based positions: true exactly for
/// `pos >= (N+1)*T0 + 1`. Slot tokens inside the predicted region count.
pub fn loss_mask(layout: &SequenceLayout) -> Result<Vec<bool>> {
    let total = sequence_length(layout)?;
    let first_predicted = (layout.context_tokens + 1) * layout.context_frames + 1;
    Ok((1..=total).map(|pos| pos >= first_predicted).collect())
}

/// 1-based position of each future frame's last token, in frame order.
/// The reward head reads hidden states at these positions.
pub fn reward_positions(layout: &SequenceLayout) -> Result<Vec<usize>> {
    layout.validate()?;
    if layout.future_frames() == 0 {
        return Err(IvwmError::invalid("reward_positions", "no future frames (T == T0)"));
    }
    let context_block = (layout.context_tokens + 1) * layout.context_frames - 1;
    let per_future = layout.future_tokens + 1;
    Ok((1..=layout.future_frames())
        .map(|t| context_block + t * per_future)
        .collect())
}

/// Add linearly projected actions to the S2 slot embeddings, leaving every
/// other position bit-identical.
///
/// `embeddings` is `[B, L, D]`, `actions` is `[B, F, A]` with one action per
/// S2 slot, `projection` is `[A, D]`.
pub fn inject_actions<S: Scalar>(
    g: &mut Graph<S>,
    embeddings: &Tensor,
    actions: Option<&Tensor>,
    projection: &Tensor,
    seq_action_slots: &[usize],
) -> Result<Tensor> {
    let Some(actions) = actions else {
        // action-free mode
        return Ok(embeddings.clone());
    };
    if actions.ndim() != 3 || actions.shape()[1] != seq_action_slots.len() {
        return Err(IvwmError::ShapeMismatch {
            op: "inject_actions",
            lhs: vec![embeddings.shape()[0], seq_action_slots.len()],
            rhs: actions.shape().to_vec(),
        });
    }
    let (b, f, a) = (actions.shape()[0], actions.shape()[1], actions.shape()[2]);
    if projection.shape() != [a, embeddings.shape()[2]] {
        return Err(IvwmError::ShapeMismatch {
            op: "inject_actions projection",
            lhs: vec![a, embeddings.shape()[2]],
            rhs: projection.shape().to_vec(),
        });
    }
    let flat = g.reshape(actions, &[b * f, a])?;
    let proj = g.matmul(&flat, projection)?;
    let d = embeddings.shape()[2];
    let proj3 = g.reshape(&proj, &[b, f, d])?;
    g.add_rows_at(embeddings, &proj3, seq_action_slots)
}

/// Rotate a frame sequence so the final frame leads: `(o_T, o_1, .., o_{T-1})`.
/// Position 1 is then treated as the goal frame by the goal-conditioned mode.
pub fn goal_rearrange<T: Clone>(frames: &[T]) -> Result<Vec<T>> {
    if frames.len() < 2 {
        return Err(IvwmError::invalid(
            "goal_rearrange",
            format!("need at least 2 frames, got {}", frames.len()),
        ));
    }
    let mut out = Vec::with_capacity(frames.len());
    out.push(frames[frames.len() - 1].clone());
    out.extend_from_slice(&frames[..frames.len() - 1]);
    Ok(out)
}
