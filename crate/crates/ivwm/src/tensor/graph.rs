//! Define-by-run computation graph with reverse-mode differentiation.

use super::kernels::{self, as2};
use super::params::ParameterSet;
use super::Scalar;
use crate::error::{IvwmError, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;

/// Handle to a node in a [`Graph`]. Cheap to clone; values live in the graph.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub(crate) id: usize,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }
}

/// Recorded operation; parent ids plus whatever the backward pass needs.
enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, S),
    AddScalar(usize),
    AddBroadcast { x: usize, b: usize },
    Matmul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, eps: S },
    RmsNorm { x: usize, gamma: usize, eps: S },
    Silu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    SoftmaxLast(usize),
    IndexSelect { x: usize, axis: usize, indices: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Rotary { x: usize, cos: usize, sin: usize },
    MeanAll(usize),
    SumAll(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<S> },
    Dropout { x: usize, mask: Vec<S> },
    StopGrad,
    AddRowsAt { x: usize, src: usize, positions: Vec<usize> },
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// The tape. Single-writer; values are immutable once created.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<ArrayD<S>>>,
    recording: bool,
    param_ids: HashMap<String, usize>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// Graph that records ops for a later backward pass.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            param_ids: HashMap::new(),
        }
    }

    /// Forward-only graph; `backward` on it is an error.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, t: &Tensor) -> &ArrayD<S> {
        &self.nodes[t.id].value
    }

    /// Gradient of the last backward target w.r.t. `t`, if it was reached.
    pub fn grad(&self, t: &Tensor) -> Option<&ArrayD<S>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, requires_grad: bool) -> Tensor {
        let shape = value.shape().to_vec();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Tensor { id, shape }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<S>) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<S>) -> Tensor {
        let arr = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data agree");
        self.constant(arr)
    }

    pub fn scalar(&mut self, v: S) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Leaf holding a variable that wants a gradient but is not a named
    /// parameter (used by tests and the MPC action optimizer).
    pub fn variable(&mut self, value: ArrayD<S>) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter leaf; repeated lookups of one name share a node so the
    /// gradient accumulates once.
    pub fn param(&mut self, params: &ParameterSet<S>, name: &str) -> Result<Tensor> {
        if let Some(&id) = self.param_ids.get(name) {
            let shape = self.nodes[id].value.shape().to_vec();
            return Ok(Tensor { id, shape });
        }
        let value = params
            .get(name)
            .ok_or_else(|| IvwmError::UnknownParameter(name.to_string()))?;
        let t = self.push(value.clone(), Op::Leaf, true);
        self.param_ids.insert(name.to_string(), t.id);
        Ok(t)
    }

    // ---- elementwise ----

    fn check_same_shape(&self, op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(IvwmError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_same_shape("add", a, b)?;
        let v = &self.nodes[a.id].value + &self.nodes[b.id].value;
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(v, Op::Add(a.id, b.id), rg))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_same_shape("sub", a, b)?;
        let v = &self.nodes[a.id].value - &self.nodes[b.id].value;
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(v, Op::Sub(a.id, b.id), rg))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_same_shape("mul", a, b)?;
        let v = &self.nodes[a.id].value * &self.nodes[b.id].value;
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(v, Op::Mul(a.id, b.id), rg))
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        let v = self.nodes[a.id].value.mapv(|x| -x);
        let rg = self.any_grad(&[a.id]);
        self.push(v, Op::Neg(a.id), rg)
    }

    pub fn scale(&mut self, a: &Tensor, c: S) -> Tensor {
        let v = self.nodes[a.id].value.mapv(|x| x * c);
        let rg = self.any_grad(&[a.id]);
        self.push(v, Op::Scale(a.id, c), rg)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: S) -> Tensor {
        let v = self.nodes[a.id].value.mapv(|x| x + c);
        let rg = self.any_grad(&[a.id]);
        self.push(v, Op::AddScalar(a.id), rg)
    }

    /// `x + b` where `b`'s shape right-aligns against `x`'s (missing leading
    /// axes broadcast).
    pub fn add_broadcast(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let bs = b.shape();
        let ok = bs.len() <= xs.len()
            && bs
                .iter()
                .rev()
                .zip(xs.iter().rev())
                .all(|(&bd, &xd)| bd == xd || bd == 1);
        if !ok {
            return Err(IvwmError::ShapeMismatch {
                op: "add_broadcast",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let v = &self.nodes[x.id].value + &self.nodes[b.id].value;
        if v.shape() != xs {
            return Err(IvwmError::ShapeMismatch {
                op: "add_broadcast",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let rg = self.any_grad(&[x.id, b.id]);
        Ok(self.push(v, Op::AddBroadcast { x: x.id, b: b.id }, rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(IvwmError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let v = kernels::matmul(
            as2(&self.nodes[a.id].value, m, k),
            as2(&self.nodes[b.id].value, k, n),
        );
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(v.into_dyn(), Op::Matmul(a.id, b.id), rg))
    }

    /// Batched matmul over matching leading axes: `[..,m,k] x [..,k,n]`,
    /// or `[..,m,k] x [..,n,k]` with `trans_b`.
    pub fn bmm(&mut self, a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
        let err = || IvwmError::ShapeMismatch {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.ndim() < 2 || a.ndim() != b.ndim() || a.shape()[..a.ndim() - 2] != b.shape()[..b.ndim() - 2]
        {
            return Err(err());
        }
        let d = a.ndim();
        let (m, k) = (a.shape()[d - 2], a.shape()[d - 1]);
        let (bk, bn) = if trans_b {
            (b.shape()[d - 1], b.shape()[d - 2])
        } else {
            (b.shape()[d - 2], b.shape()[d - 1])
        };
        if k != bk {
            return Err(err());
        }
        let batch: usize = a.shape()[..d - 2].iter().product();
        let mut out = Vec::with_capacity(batch * m * bn);
        {
            let av = &self.nodes[a.id].value;
            let bv = &self.nodes[b.id].value;
            let a_sl = av.as_slice().unwrap();
            let b_sl = bv.as_slice().unwrap();
            let (b_rows, b_cols) = if trans_b { (bn, k) } else { (k, bn) };
            for i in 0..batch {
                let am = ndarray::ArrayView2::from_shape((m, k), &a_sl[i * m * k..(i + 1) * m * k])
                    .unwrap();
                let bm = ndarray::ArrayView2::from_shape(
                    (b_rows, b_cols),
                    &b_sl[i * b_rows * b_cols..(i + 1) * b_rows * b_cols],
                )
                .unwrap();
                let c = if trans_b { am.dot(&bm.t()) } else { am.dot(&bm) };
                out.extend(c.iter().copied());
            }
        }
        let mut shape = a.shape().to_vec();
        shape[d - 2] = m;
        shape[d - 1] = bn;
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let rg = self.any_grad(&[a.id, b.id]);
        Ok(self.push(v, Op::Bmm { a: a.id, b: b.id, trans_b }, rg))
    }

    // ---- convolution ----

    /// 2-D convolution: x `[B,Cin,H,W]`, w `[Cout,Cin,k,k]` -> `[B,Cout,OH,OW]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let err = || IvwmError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] || w.shape()[2] != w.shape()[3]
        {
            return Err(err());
        }
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(err());
        }
        let oh = kernels::conv_out(h, k, stride, pad);
        let ow = kernels::conv_out(wd, k, stride, pad);
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(IvwmError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: bt.shape().to_vec(),
                });
            }
        }
        let cols = kernels::im2col(
            self.nodes[x.id].value.as_slice().unwrap(),
            (b, c, h, wd),
            k,
            stride,
            pad,
            (oh, ow),
        );
        let w_mat = as2(&self.nodes[w.id].value, cout, c * k * k);
        // rows: [B*OH*OW, Cout]
        let mut rows = cols.dot(&w_mat.t());
        if let Some(bt) = bias {
            let bv = self.nodes[bt.id].value.as_slice().unwrap().to_vec();
            for mut row in rows.rows_mut() {
                for (v, &bi) in row.iter_mut().zip(&bv) {
                    *v += bi;
                }
            }
        }
        // [B,OH,OW,Cout] -> [B,Cout,OH,OW]
        let v = ArrayD::from_shape_vec(IxDyn(&[b, oh, ow, cout]), rows.into_raw_vec_and_offset().0)
            .unwrap()
            .permuted_axes(IxDyn(&[0, 3, 1, 2]))
            .as_standard_layout()
            .into_owned();
        let mut ids = vec![x.id, w.id];
        if let Some(bt) = bias {
            ids.push(bt.id);
        }
        let rg = self.any_grad(&ids);
        Ok(self.push(
            v,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                bias: bias.map(|t| t.id),
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed 2-D convolution: x `[B,Cin,H,W]`, w `[Cin,Cout,k,k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let err = || IvwmError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[0] || w.shape()[2] != w.shape()[3]
        {
            return Err(err());
        }
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[1], w.shape()[2]);
        let oh = kernels::conv_transpose_out(h, k, stride, pad);
        let ow = kernels::conv_transpose_out(wd, k, stride, pad);
        // cols[B*H*W, Cout*k*k] = x_rows[B*H*W, Cin] . w_mat[Cin, Cout*k*k]
        let x_rows = {
            let xv = &self.nodes[x.id].value;
            // [B,Cin,H,W] -> [B,H,W,Cin]
            xv.view()
                .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                .as_standard_layout()
                .into_owned()
        };
        let x_rows2 = as2(&x_rows, b * h * wd, cin);
        let w_mat = as2(&self.nodes[w.id].value, cin, cout * k * k);
        let cols = x_rows2.dot(&w_mat);
        let mut out = kernels::col2im(&cols, (b, cout, oh, ow), k, stride, pad, (h, wd));
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(IvwmError::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    lhs: vec![cout],
                    rhs: bt.shape().to_vec(),
                });
            }
            let bv = self.nodes[bt.id].value.as_slice().unwrap();
            let plane = oh * ow;
            for bi in 0..b {
                for ci in 0..cout {
                    let base = (bi * cout + ci) * plane;
                    for v in &mut out[base..base + plane] {
                        *v += bv[ci];
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, cout, oh, ow]), out).unwrap();
        let mut ids = vec![x.id, w.id];
        if let Some(bt) = bias {
            ids.push(bt.id);
        }
        let rg = self.any_grad(&ids);
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                x: x.id,
                w: w.id,
                bias: bias.map(|t| t.id),
                stride,
                pad,
            },
            rg,
        ))
    }

    // ---- normalization ----

    pub fn group_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        groups: usize,
        eps: S,
    ) -> Result<Tensor> {
        if x.ndim() != 4 || x.shape()[1] % groups != 0 {
            return Err(IvwmError::invalid(
                "group_norm",
                format!("shape {:?} with {} groups", x.shape(), groups),
            ));
        }
        let c = x.shape()[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(IvwmError::ShapeMismatch {
                op: "group_norm affine",
                lhs: vec![c],
                rhs: gamma.shape().to_vec(),
            });
        }
        let v = group_norm_forward(
            &self.nodes[x.id].value,
            self.nodes[gamma.id].value.as_slice().unwrap(),
            self.nodes[beta.id].value.as_slice().unwrap(),
            groups,
            eps,
        );
        let rg = self.any_grad(&[x.id, gamma.id, beta.id]);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                eps,
            },
            rg,
        ))
    }

    /// Root-mean-square normalization over the last axis with learned gain.
    pub fn rms_norm(&mut self, x: &Tensor, gamma: &Tensor, eps: S) -> Result<Tensor> {
        let d = *x.shape().last().ok_or_else(|| IvwmError::invalid("rms_norm", "0-d input"))?;
        if gamma.shape() != [d] {
            return Err(IvwmError::ShapeMismatch {
                op: "rms_norm",
                lhs: vec![d],
                rhs: gamma.shape().to_vec(),
            });
        }
        let xv = &self.nodes[x.id].value;
        let g = self.nodes[gamma.id].value.as_slice().unwrap();
        let mut out = xv.as_slice().unwrap().to_vec();
        let dn = S::from_usize(d);
        for row in out.chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let inv = S::one() / (ms + eps).sqrt();
            for (v, &gi) in row.iter_mut().zip(g) {
                *v = *v * inv * gi;
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        let rg = self.any_grad(&[x.id, gamma.id]);
        Ok(self.push(v, Op::RmsNorm { x: x.id, gamma: gamma.id, eps }, rg))
    }

    // ---- activations ----

    pub fn silu(&mut self, x: &Tensor) -> Tensor {
        let v = self.nodes[x.id].value.mapv(|a| a * sigmoid_s(a));
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::Silu(x.id), rg)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let v = self.nodes[x.id].value.mapv(sigmoid_s);
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::Sigmoid(x.id), rg)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        let v = self.nodes[x.id].value.mapv(|a| a.tanh());
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::Tanh(x.id), rg)
    }

    pub fn abs(&mut self, x: &Tensor) -> Tensor {
        let v = self.nodes[x.id].value.mapv(|a| a.abs());
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::Abs(x.id), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Tensor) -> Tensor {
        let cols = *x.shape().last().expect("softmax input has an axis");
        let mut data = self.nodes[x.id].value.as_slice().unwrap().to_vec();
        kernels::softmax_rows_inplace(&mut data, cols);
        let v = ArrayD::from_shape_vec(self.nodes[x.id].value.raw_dim(), data).unwrap();
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::SoftmaxLast(x.id), rg)
    }

    // ---- indexing / shape ----

    /// Select `indices` along `axis` (duplicates allowed). Used for embedding
    /// lookups (axis 0) and gathering reward positions (axis 1).
    pub fn index_select(&mut self, x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= x.ndim() {
            return Err(IvwmError::invalid("index_select", format!("axis {axis}")));
        }
        let len = x.shape()[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(IvwmError::invalid(
                "index_select",
                format!("index {bad} out of range {len}"),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let src = self.nodes[x.id].value.as_slice().unwrap();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let base = (o * len + ix) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let rg = self.any_grad(&[x.id]);
        Ok(self.push(
            v,
            Op::IndexSelect {
                x: x.id,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(IvwmError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[x.id].value.as_slice().unwrap().to_vec();
        let v = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        let rg = self.any_grad(&[x.id]);
        Ok(self.push(v, Op::Reshape(x.id), rg))
    }

    pub fn permute(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true))
        {
            return Err(IvwmError::invalid("permute", format!("axes {axes:?}")));
        }
        let v = self.nodes[x.id]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.any_grad(&[x.id]);
        Ok(self.push(
            v,
            Op::Permute {
                x: x.id,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(IvwmError::invalid("concat", "no parts"));
        }
        let first = parts[0].shape();
        for p in parts {
            if p.ndim() != first.len()
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(IvwmError::ShapeMismatch {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let alen = p.shape()[axis];
                let src = self.nodes[p.id].value.as_slice().unwrap();
                let base = o * alen * inner;
                out.extend_from_slice(&src[base..base + alen * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total_axis;
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(v, Op::Concat { parts: ids, axis }, rg))
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(IvwmError::invalid(
                "slice",
                format!("axis {axis} range {start}..{} of {:?}", start + len, x.shape()),
            ));
        }
        let alen = x.shape()[axis];
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let src = self.nodes[x.id].value.as_slice().unwrap();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let rg = self.any_grad(&[x.id]);
        Ok(self.push(v, Op::Slice { x: x.id, axis, start }, rg))
    }

    /// Rotary position rotation on `[.., T, D]` (pairs split as
    /// first-half/second-half) with tables cos/sin of shape `[T, D/2]`.
    pub fn rotary(&mut self, x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
        let nd = x.ndim();
        if nd < 2 {
            return Err(IvwmError::invalid("rotary", "input rank < 2"));
        }
        let t = x.shape()[nd - 2];
        let d = x.shape()[nd - 1];
        if d % 2 != 0 || cos.shape() != [t, d / 2] || sin.shape() != [t, d / 2] {
            return Err(IvwmError::ShapeMismatch {
                op: "rotary",
                lhs: x.shape().to_vec(),
                rhs: cos.shape().to_vec(),
            });
        }
        let half = d / 2;
        let mut out = self.nodes[x.id].value.as_slice().unwrap().to_vec();
        let cv = self.nodes[cos.id].value.as_slice().unwrap();
        let sv = self.nodes[sin.id].value.as_slice().unwrap();
        for chunk in out.chunks_mut(t * d) {
            for ti in 0..t {
                let row = &mut chunk[ti * d..(ti + 1) * d];
                for i in 0..half {
                    let (c, s) = (cv[ti * half + i], sv[ti * half + i]);
                    let x1 = row[i];
                    let x2 = row[half + i];
                    row[i] = x1 * c - x2 * s;
                    row[half + i] = x2 * c + x1 * s;
                }
            }
        }
        let v = ArrayD::from_shape_vec(self.nodes[x.id].value.raw_dim(), out).unwrap();
        let rg = self.any_grad(&[x.id]);
        Ok(self.push(
            v,
            Op::Rotary {
                x: x.id,
                cos: cos.id,
                sin: sin.id,
            },
            rg,
        ))
    }

    // ---- reductions / losses ----

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = S::from_usize(x.numel().max(1));
        let total: S = self.nodes[x.id].value.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total / n);
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::MeanAll(x.id), rg)
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let total: S = self.nodes[x.id].value.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), total);
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::SumAll(x.id), rg)
    }

    /// Mean squared error between two same-shaped tensors (composite op).
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        Ok(self.mean_all(&sq))
    }

    /// Mean absolute error (composite op).
    pub fn l1(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let ab = self.abs(&d);
        Ok(self.mean_all(&ab))
    }

    /// Weighted mean cross-entropy from raw logits `[M,V]`.
    ///
    /// `weights[i]` scales row `i`; the loss is `sum_i w_i * ce_i / sum_i w_i`.
    pub fn cross_entropy(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
        weights: &[S],
    ) -> Result<Tensor> {
        if logits.ndim() != 2 || logits.shape()[0] != targets.len() || targets.len() != weights.len()
        {
            return Err(IvwmError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = logits.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(IvwmError::invalid(
                "cross_entropy",
                format!("target {bad} out of range {v}"),
            ));
        }
        let wsum: S = weights.iter().copied().sum();
        if wsum <= S::zero() {
            return Err(IvwmError::invalid("cross_entropy", "all weights zero"));
        }
        let data = self.nodes[logits.id].value.as_slice().unwrap();
        let mut total = S::zero();
        for (i, row) in data.chunks(v).enumerate() {
            if weights[i] == S::zero() {
                continue;
            }
            let mut max = row[0];
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += weights[i] * (lse - row[targets[i]]);
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total / wsum);
        let rg = self.any_grad(&[logits.id]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted-dropout. `rate == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: &Tensor, rate: f64, rng: &mut R) -> Tensor {
        if rate <= 0.0 {
            return x.clone();
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..x.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.nodes[x.id].value.as_slice().unwrap();
        let out: Vec<S> = xv.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = ArrayD::from_shape_vec(self.nodes[x.id].value.raw_dim(), out).unwrap();
        let rg = self.any_grad(&[x.id]);
        self.push(v, Op::Dropout { x: x.id, mask }, rg)
    }

    /// Identity whose gradient does not flow to the input.
    pub fn stop_grad(&mut self, x: &Tensor) -> Tensor {
        let v = self.nodes[x.id].value.clone();
        self.push(v, Op::StopGrad, false)
    }

    /// `x[b, positions[p], :] += src[b, p, :]` for 3-D `x` and `src`; all
    /// other rows pass through bit-identically.
    pub fn add_rows_at(&mut self, x: &Tensor, src: &Tensor, positions: &[usize]) -> Result<Tensor> {
        if x.ndim() != 3
            || src.ndim() != 3
            || src.shape()[0] != x.shape()[0]
            || src.shape()[1] != positions.len()
            || src.shape()[2] != x.shape()[2]
        {
            return Err(IvwmError::ShapeMismatch {
                op: "add_rows_at",
                lhs: x.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if let Some(&bad) = positions.iter().find(|&&p| p >= l) {
            return Err(IvwmError::invalid(
                "add_rows_at",
                format!("position {bad} out of range {l}"),
            ));
        }
        let mut out = self.nodes[x.id].value.as_slice().unwrap().to_vec();
        let sv = self.nodes[src.id].value.as_slice().unwrap();
        for bi in 0..b {
            for (p, &pos) in positions.iter().enumerate() {
                let dst = (bi * l + pos) * d;
                let s = (bi * positions.len() + p) * d;
                for i in 0..d {
                    out[dst + i] += sv[s + i];
                }
            }
        }
        let v = ArrayD::from_shape_vec(self.nodes[x.id].value.raw_dim(), out).unwrap();
        let rg = self.any_grad(&[x.id, src.id]);
        Ok(self.push(
            v,
            Op::AddRowsAt {
                x: x.id,
                src: src.id,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar loss. Gradients of every reachable
    /// node are retained for inspection until the next backward call.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(IvwmError::NonScalarLoss(loss.shape().to_vec()));
        }
        if !self.recording {
            return Err(IvwmError::invalid("backward", "graph is inference-only"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(ArrayD::from_elem(self.nodes[loss.id].value.raw_dim(), S::one()));
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.backward_op(id, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Move accumulated parameter-leaf gradients into the parameter set.
    pub fn apply_param_grads(&self, params: &mut ParameterSet<S>) {
        for (name, &id) in &self.param_ids {
            if let Some(Some(g)) = self.grads.get(id) {
                params.accumulate_grad(name, g);
            }
        }
    }

    fn backward_op(&self, id: usize, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let acc = |grads: &mut [Option<ArrayD<S>>], nodes: &[Node<S>], pid: usize, delta: ArrayD<S>| {
            if !nodes[pid].requires_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => existing.zip_mut_with(&delta, |a, &b| *a += b),
                None => grads[pid] = Some(delta),
            }
        };
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, nodes, *a, g.clone());
                acc(grads, nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, nodes, *a, g.clone());
                acc(grads, nodes, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, nodes, *a, g * &nodes[*b].value);
                acc(grads, nodes, *b, g * &nodes[*a].value);
            }
            Op::Neg(a) => acc(grads, nodes, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, nodes, *a, g.mapv(|x| x * c));
            }
            Op::AddScalar(a) => acc(grads, nodes, *a, g.clone()),
            Op::AddBroadcast { x, b } => {
                acc(grads, nodes, *x, g.clone());
                if nodes[*b].requires_grad {
                    let bshape = nodes[*b].value.shape().to_vec();
                    acc(grads, nodes, *b, reduce_to_shape(g, &bshape));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let n2 = nodes[*b].value.shape()[1];
                let gv = as2(g, m, n2);
                if nodes[*a].requires_grad {
                    let bv = as2(&nodes[*b].value, k, n2);
                    acc(grads, nodes, *a, gv.dot(&bv.t()).into_dyn());
                }
                if nodes[*b].requires_grad {
                    let av = as2(&nodes[*a].value, m, k);
                    acc(grads, nodes, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                self.backward_bmm(*a, *b, *trans_b, g, grads, &acc);
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                self.backward_conv2d(*x, *w, *bias, *stride, *pad, g, grads, &acc);
            }
            Op::ConvTranspose2d { x, w, bias, stride, pad } => {
                self.backward_conv_transpose2d(*x, *w, *bias, *stride, *pad, g, grads, &acc);
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                self.backward_group_norm(*x, *gamma, *beta, *groups, *eps, g, grads, &acc);
            }
            Op::RmsNorm { x, gamma, eps } => {
                self.backward_rms_norm(*x, *gamma, *eps, g, grads, &acc);
            }
            Op::Silu(a) => {
                let d = nodes[*a].value.mapv(|x| {
                    let s = sigmoid_s(x);
                    s * (S::one() + x * (S::one() - s))
                });
                acc(grads, nodes, *a, g * &d);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[id].value;
                let d = y.mapv(|s| s * (S::one() - s));
                acc(grads, nodes, *a, g * &d);
            }
            Op::Tanh(a) => {
                let y = &nodes[id].value;
                let d = y.mapv(|t| S::one() - t * t);
                acc(grads, nodes, *a, g * &d);
            }
            Op::Abs(a) => {
                let d = nodes[*a].value.mapv(|x| {
                    if x > S::zero() {
                        S::one()
                    } else if x < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                acc(grads, nodes, *a, g * &d);
            }
            Op::SoftmaxLast(a) => {
                let y = &nodes[id].value;
                let cols = *y.shape().last().unwrap();
                let ys = y.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut out = vec![S::zero(); ys.len()];
                for r in 0..ys.len() / cols {
                    let base = r * cols;
                    let mut dot = S::zero();
                    for i in 0..cols {
                        dot += gs[base + i] * ys[base + i];
                    }
                    for i in 0..cols {
                        out[base + i] = ys[base + i] * (gs[base + i] - dot);
                    }
                }
                acc(
                    grads,
                    nodes,
                    *a,
                    ArrayD::from_shape_vec(y.raw_dim(), out).unwrap(),
                );
            }
            Op::IndexSelect { x, axis, indices } => {
                if nodes[*x].requires_grad {
                    let xs = nodes[*x].value.shape();
                    let len = xs[*axis];
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let gs = g.as_slice().unwrap();
                    let mut out = vec![S::zero(); nodes[*x].value.len()];
                    for o in 0..outer {
                        for (j, &ix) in indices.iter().enumerate() {
                            let src = (o * indices.len() + j) * inner;
                            let dst = (o * len + ix) * inner;
                            for i in 0..inner {
                                out[dst + i] += gs[src + i];
                            }
                        }
                    }
                    acc(
                        grads,
                        nodes,
                        *x,
                        ArrayD::from_shape_vec(nodes[*x].value.raw_dim(), out).unwrap(),
                    );
                }
            }
            Op::Reshape(x) => {
                let data = g.as_slice().unwrap().to_vec();
                acc(
                    grads,
                    nodes,
                    *x,
                    ArrayD::from_shape_vec(nodes[*x].value.raw_dim(), data).unwrap(),
                );
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                acc(grads, nodes, *x, back);
            }
            Op::Concat { parts, axis } => {
                let gshape = nodes[id].value.shape();
                let outer: usize = gshape[..*axis].iter().product();
                let inner: usize = gshape[*axis + 1..].iter().product();
                let total = gshape[*axis];
                let gs = g.as_slice().unwrap();
                let mut offset = 0usize;
                for &pid in parts {
                    let alen = nodes[pid].value.shape()[*axis];
                    if nodes[pid].requires_grad {
                        let mut out = Vec::with_capacity(outer * alen * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&gs[base..base + alen * inner]);
                        }
                        acc(
                            grads,
                            nodes,
                            pid,
                            ArrayD::from_shape_vec(nodes[pid].value.raw_dim(), out).unwrap(),
                        );
                    }
                    offset += alen;
                }
            }
            Op::Slice { x, axis, start } => {
                if nodes[*x].requires_grad {
                    let xs = nodes[*x].value.shape();
                    let alen = xs[*axis];
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let len = nodes[id].value.shape()[*axis];
                    let gs = g.as_slice().unwrap();
                    let mut out = vec![S::zero(); nodes[*x].value.len()];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * alen + start) * inner;
                        out[dst..dst + len * inner].copy_from_slice(&gs[src..src + len * inner]);
                    }
                    acc(
                        grads,
                        nodes,
                        *x,
                        ArrayD::from_shape_vec(nodes[*x].value.raw_dim(), out).unwrap(),
                    );
                }
            }
            Op::Rotary { x, cos, sin } => {
                if nodes[*x].requires_grad {
                    let xs = nodes[*x].value.shape();
                    let nd = xs.len();
                    let t = xs[nd - 2];
                    let d = xs[nd - 1];
                    let half = d / 2;
                    let cv = nodes[*cos].value.as_slice().unwrap();
                    let sv = nodes[*sin].value.as_slice().unwrap();
                    let mut out = g.as_slice().unwrap().to_vec();
                    // inverse rotation
                    for chunk in out.chunks_mut(t * d) {
                        for ti in 0..t {
                            let row = &mut chunk[ti * d..(ti + 1) * d];
                            for i in 0..half {
                                let (c, s) = (cv[ti * half + i], sv[ti * half + i]);
                                let g1 = row[i];
                                let g2 = row[half + i];
                                row[i] = g1 * c + g2 * s;
                                row[half + i] = g2 * c - g1 * s;
                            }
                        }
                    }
                    acc(
                        grads,
                        nodes,
                        *x,
                        ArrayD::from_shape_vec(nodes[*x].value.raw_dim(), out).unwrap(),
                    );
                }
            }
            Op::MeanAll(x) => {
                let scale = g.first().copied().unwrap() / S::from_usize(nodes[*x].value.len().max(1));
                acc(
                    grads,
                    nodes,
                    *x,
                    ArrayD::from_elem(nodes[*x].value.raw_dim(), scale),
                );
            }
            Op::SumAll(x) => {
                let scale = g.first().copied().unwrap();
                acc(
                    grads,
                    nodes,
                    *x,
                    ArrayD::from_elem(nodes[*x].value.raw_dim(), scale),
                );
            }
            Op::CrossEntropy { logits, targets, weights } => {
                if nodes[*logits].requires_grad {
                    let lv = &nodes[*logits].value;
                    let v = lv.shape()[1];
                    let data = lv.as_slice().unwrap();
                    let wsum: S = weights.iter().copied().sum();
                    let gscale = g.first().copied().unwrap() / wsum;
                    let mut out = vec![S::zero(); data.len()];
                    for (i, row) in data.chunks(v).enumerate() {
                        if weights[i] == S::zero() {
                            continue;
                        }
                        let mut max = row[0];
                        for &x in row {
                            if x > max {
                                max = x;
                            }
                        }
                        let mut sum = S::zero();
                        let base = i * v;
                        for (j, &x) in row.iter().enumerate() {
                            let e = (x - max).exp();
                            out[base + j] = e;
                            sum += e;
                        }
                        let inv = weights[i] * gscale / sum;
                        for item in out[base..base + v].iter_mut() {
                            *item *= inv;
                        }
                        out[base + targets[i]] -= weights[i] * gscale;
                    }
                    acc(
                        grads,
                        nodes,
                        *logits,
                        ArrayD::from_shape_vec(lv.raw_dim(), out).unwrap(),
                    );
                }
            }
            Op::Dropout { x, mask } => {
                let gs = g.as_slice().unwrap();
                let out: Vec<S> = gs.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(
                    grads,
                    nodes,
                    *x,
                    ArrayD::from_shape_vec(nodes[*x].value.raw_dim(), out).unwrap(),
                );
            }
            Op::StopGrad => {}
            Op::AddRowsAt { x, src, positions } => {
                acc(grads, nodes, *x, g.clone());
                if nodes[*src].requires_grad {
                    let (b, l, d) = {
                        let s = nodes[*x].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let gs = g.as_slice().unwrap();
                    let mut out = vec![S::zero(); b * positions.len() * d];
                    for bi in 0..b {
                        for (p, &pos) in positions.iter().enumerate() {
                            let srcb = (bi * l + pos) * d;
                            let dst = (bi * positions.len() + p) * d;
                            out[dst..dst + d].copy_from_slice(&gs[srcb..srcb + d]);
                        }
                    }
                    acc(
                        grads,
                        nodes,
                        *src,
                        ArrayD::from_shape_vec(nodes[*src].value.raw_dim(), out).unwrap(),
                    );
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_bmm<F>(
        &self,
        a: usize,
        b: usize,
        trans_b: bool,
        g: &ArrayD<S>,
        grads: &mut [Option<ArrayD<S>>],
        acc: &F,
    ) where
        F: Fn(&mut [Option<ArrayD<S>>], &[Node<S>], usize, ArrayD<S>),
    {
        let nodes = &self.nodes;
        let ashape = nodes[a].value.shape();
        let d = ashape.len();
        let (m, k) = (ashape[d - 2], ashape[d - 1]);
        let n = nodes[b].value.shape()[if trans_b { d - 2 } else { d - 1 }];
        let batch: usize = ashape[..d - 2].iter().product();
        let a_sl = nodes[a].value.as_slice().unwrap();
        let b_sl = nodes[b].value.as_slice().unwrap();
        let g_sl = g.as_slice().unwrap();
        let (b_rows, b_cols) = if trans_b { (n, k) } else { (k, n) };
        if nodes[a].requires_grad {
            let mut out = Vec::with_capacity(batch * m * k);
            for i in 0..batch {
                let gm = ndarray::ArrayView2::from_shape((m, n), &g_sl[i * m * n..(i + 1) * m * n])
                    .unwrap();
                let bm = ndarray::ArrayView2::from_shape(
                    (b_rows, b_cols),
                    &b_sl[i * b_rows * b_cols..(i + 1) * b_rows * b_cols],
                )
                .unwrap();
                // dA = dY.B^T (or dY.B when B was transposed)
                let da = if trans_b { gm.dot(&bm) } else { gm.dot(&bm.t()) };
                out.extend(da.iter().copied());
            }
            acc(
                grads,
                nodes,
                a,
                ArrayD::from_shape_vec(nodes[a].value.raw_dim(), out).unwrap(),
            );
        }
        if nodes[b].requires_grad {
            let mut out = Vec::with_capacity(batch * b_rows * b_cols);
            for i in 0..batch {
                let gm = ndarray::ArrayView2::from_shape((m, n), &g_sl[i * m * n..(i + 1) * m * n])
                    .unwrap();
                let am = ndarray::ArrayView2::from_shape((m, k), &a_sl[i * m * k..(i + 1) * m * k])
                    .unwrap();
                // dB = A^T.dY (or dY^T.A when B was transposed)
                let db = if trans_b { gm.t().dot(&am) } else { am.t().dot(&gm) };
                out.extend(db.iter().copied());
            }
            acc(
                grads,
                nodes,
                b,
                ArrayD::from_shape_vec(nodes[b].value.raw_dim(), out).unwrap(),
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d<F>(
        &self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        g: &ArrayD<S>,
        grads: &mut [Option<ArrayD<S>>],
        acc: &F,
    ) where
        F: Fn(&mut [Option<ArrayD<S>>], &[Node<S>], usize, ArrayD<S>),
    {
        let nodes = &self.nodes;
        let xs = nodes[x].value.shape();
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = nodes[w].value.shape();
        let (cout, k) = (ws[0], ws[2]);
        let gs = g.shape();
        let (oh, ow) = (gs[2], gs[3]);
        // dY as rows [B*OH*OW, Cout]
        let g_rows = g
            .view()
            .permuted_axes(IxDyn(&[0, 2, 3, 1]))
            .as_standard_layout()
            .into_owned();
        let g2 = as2(&g_rows, b * oh * ow, cout);
        if nodes[w].requires_grad {
            let cols = kernels::im2col(
                nodes[x].value.as_slice().unwrap(),
                (b, c, h, wd),
                k,
                stride,
                pad,
                (oh, ow),
            );
            let dw = g2.t().dot(&cols); // [Cout, C*k*k]
            acc(
                grads,
                nodes,
                w,
                ArrayD::from_shape_vec(nodes[w].value.raw_dim(), dw.into_raw_vec_and_offset().0)
                    .unwrap(),
            );
        }
        if nodes[x].requires_grad {
            let w_mat = as2(&nodes[w].value, cout, c * k * k);
            let dcols = g2.dot(&w_mat); // [B*OH*OW, C*k*k]
            let dx = kernels::col2im(&dcols, (b, c, h, wd), k, stride, pad, (oh, ow));
            acc(
                grads,
                nodes,
                x,
                ArrayD::from_shape_vec(nodes[x].value.raw_dim(), dx).unwrap(),
            );
        }
        if let Some(bid) = bias {
            if nodes[bid].requires_grad {
                let mut db = vec![S::zero(); cout];
                for row in g_rows.as_slice().unwrap().chunks(cout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(
                    grads,
                    nodes,
                    bid,
                    ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap(),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv_transpose2d<F>(
        &self,
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        g: &ArrayD<S>,
        grads: &mut [Option<ArrayD<S>>],
        acc: &F,
    ) where
        F: Fn(&mut [Option<ArrayD<S>>], &[Node<S>], usize, ArrayD<S>),
    {
        let nodes = &self.nodes;
        let xs = nodes[x].value.shape();
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = nodes[w].value.shape();
        let (cout, k) = (ws[1], ws[2]);
        // dcols = im2col(dY) with the forward's scatter geometry: [B*H*W, Cout*k*k]
        let dcols = kernels::im2col(
            g.as_slice().unwrap(),
            (b, cout, g.shape()[2], g.shape()[3]),
            k,
            stride,
            pad,
            (h, wd),
        );
        if nodes[x].requires_grad {
            let w_mat = as2(&nodes[w].value, cin, cout * k * k);
            let dx_rows = dcols.dot(&w_mat.t()); // [B*H*W, Cin]
            let dx = ArrayD::from_shape_vec(IxDyn(&[b, h, wd, cin]), dx_rows.into_raw_vec_and_offset().0)
                .unwrap()
                .permuted_axes(IxDyn(&[0, 3, 1, 2]))
                .as_standard_layout()
                .into_owned();
            acc(grads, nodes, x, dx);
        }
        if nodes[w].requires_grad {
            let x_rows = nodes[x]
                .value
                .view()
                .permuted_axes(IxDyn(&[0, 2, 3, 1]))
                .as_standard_layout()
                .into_owned();
            let x2 = as2(&x_rows, b * h * wd, cin);
            let dw = x2.t().dot(&dcols); // [Cin, Cout*k*k]
            acc(
                grads,
                nodes,
                w,
                ArrayD::from_shape_vec(nodes[w].value.raw_dim(), dw.into_raw_vec_and_offset().0)
                    .unwrap(),
            );
        }
        if let Some(bid) = bias {
            if nodes[bid].requires_grad {
                let plane = g.shape()[2] * g.shape()[3];
                let gsl = g.as_slice().unwrap();
                let mut db = vec![S::zero(); cout];
                for bi in 0..b {
                    for (ci, item) in db.iter_mut().enumerate() {
                        let base = (bi * cout + ci) * plane;
                        for &v in &gsl[base..base + plane] {
                            *item += v;
                        }
                    }
                }
                acc(
                    grads,
                    nodes,
                    bid,
                    ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap(),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_group_norm<F>(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: S,
        g: &ArrayD<S>,
        grads: &mut [Option<ArrayD<S>>],
        acc: &F,
    ) where
        F: Fn(&mut [Option<ArrayD<S>>], &[Node<S>], usize, ArrayD<S>),
    {
        let nodes = &self.nodes;
        let xs = nodes[x].value.shape();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cg = c / groups;
        let m = cg * h * w;
        let mn = S::from_usize(m);
        let xv = nodes[x].value.as_slice().unwrap();
        let gv = g.as_slice().unwrap();
        let gam = nodes[gamma].value.as_slice().unwrap();
        let mut dx = vec![S::zero(); xv.len()];
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let plane = h * w;
        for bi in 0..b {
            for gi in 0..groups {
                let base = bi * c * plane + gi * cg * plane;
                let seg = &xv[base..base + m];
                let mut mean = S::zero();
                for &v in seg {
                    mean += v;
                }
                mean /= mn;
                let mut var = S::zero();
                for &v in seg {
                    let d = v - mean;
                    var += d * d;
                }
                var /= mn;
                let inv_std = S::one() / (var + eps).sqrt();
                // accumulate the two reductions over the group
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = base + ci * plane;
                    for p in 0..plane {
                        let xhat = (xv[off + p] - mean) * inv_std;
                        let go = gv[off + p];
                        dbeta[ch] += go;
                        dgamma[ch] += go * xhat;
                        let dxhat = go * gam[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                let mean_dxhat = sum_dxhat / mn;
                let mean_dxhat_xhat = sum_dxhat_xhat / mn;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let off = base + ci * plane;
                    for p in 0..plane {
                        let xhat = (xv[off + p] - mean) * inv_std;
                        let dxhat = gv[off + p] * gam[ch];
                        dx[off + p] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                    }
                }
            }
        }
        if nodes[x].requires_grad {
            acc(
                grads,
                nodes,
                x,
                ArrayD::from_shape_vec(nodes[x].value.raw_dim(), dx).unwrap(),
            );
        }
        if nodes[gamma].requires_grad {
            acc(
                grads,
                nodes,
                gamma,
                ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
            );
        }
        if nodes[beta].requires_grad {
            acc(
                grads,
                nodes,
                beta,
                ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
            );
        }
    }

    fn backward_rms_norm<F>(
        &self,
        x: usize,
        gamma: usize,
        eps: S,
        g: &ArrayD<S>,
        grads: &mut [Option<ArrayD<S>>],
        acc: &F,
    ) where
        F: Fn(&mut [Option<ArrayD<S>>], &[Node<S>], usize, ArrayD<S>),
    {
        let nodes = &self.nodes;
        let d = *nodes[x].value.shape().last().unwrap();
        let dn = S::from_usize(d);
        let xv = nodes[x].value.as_slice().unwrap();
        let gv = g.as_slice().unwrap();
        let gam = nodes[gamma].value.as_slice().unwrap();
        let rows = xv.len() / d;
        let mut dx = vec![S::zero(); xv.len()];
        let mut dgamma = vec![S::zero(); d];
        for r in 0..rows {
            let base = r * d;
            let seg = &xv[base..base + d];
            let ms = seg.iter().map(|&v| v * v).sum::<S>() / dn;
            let inv = S::one() / (ms + eps).sqrt();
            let mut dot = S::zero();
            for i in 0..d {
                let xhat = seg[i] * inv;
                let go = gv[base + i];
                dgamma[i] += go * xhat;
                dot += go * gam[i] * xhat;
            }
            let mean_dot = dot / dn;
            for i in 0..d {
                let xhat = seg[i] * inv;
                dx[base + i] = (gv[base + i] * gam[i] - xhat * mean_dot) * inv;
            }
        }
        if nodes[x].requires_grad {
            acc(
                grads,
                nodes,
                x,
                ArrayD::from_shape_vec(nodes[x].value.raw_dim(), dx).unwrap(),
            );
        }
        if nodes[gamma].requires_grad {
            acc(
                grads,
                nodes,
                gamma,
                ArrayD::from_shape_vec(IxDyn(&[d]), dgamma).unwrap(),
            );
        }
    }
}

/// GroupNorm forward on `[B,C,H,W]`: per-(sample, group) standardization
/// followed by a per-channel affine.
fn group_norm_forward<S: Scalar>(
    x: &ArrayD<S>,
    gamma: &[S],
    beta: &[S],
    groups: usize,
    eps: S,
) -> ArrayD<S> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cg = c / groups;
    let plane = h * w;
    let m = cg * plane;
    let mn = S::from_usize(m);
    let xv = x.as_slice().unwrap();
    let mut out = vec![S::zero(); xv.len()];
    for bi in 0..b {
        for gi in 0..groups {
            let base = bi * c * plane + gi * cg * plane;
            let seg = &xv[base..base + m];
            let mut mean = S::zero();
            for &v in seg {
                mean += v;
            }
            mean /= mn;
            let mut var = S::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var /= mn;
            let inv_std = S::one() / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let off = base + ci * plane;
                for p in 0..plane {
                    out[off + p] = (xv[off + p] - mean) * inv_std * gamma[ch] + beta[ch];
                }
            }
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
}

fn sigmoid_s<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Sum `g` down to `shape` (right-aligned broadcast reduction).
#[allow(clippy::needless_range_loop)]
fn reduce_to_shape<S: Scalar>(g: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(ndarray::Axis(0));
    }
    for axis in 0..shape.len() {
        if out.shape()[axis] != shape[axis] {
            // broadcast axis of extent 1: sum it back down
            let summed = out.sum_axis(ndarray::Axis(axis));
            out = summed.insert_axis(ndarray::Axis(axis));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(arr(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(arr(&[2, 2], vec![3.0, -1.0, 2.5, 7.0]));
        let y = g.matmul(&eye, &m).unwrap();
        assert_eq!(g.value(&y).as_slice().unwrap(), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[3], vec![0.0, 0.0, 0.0]));
        let y = g.softmax(&x);
        for &v in g.value(&y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(arr(&[1, 2], vec![0.0, 0.0]));
        let loss = g.cross_entropy(&logits, &[0], &[1.0]).unwrap();
        let v = g.value(&loss).iter().next().copied().unwrap();
        assert!((v - (2.0f64).ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(arr(&[3], vec![0.3, -0.2, 5.0]));
        let loss = g.sum_all(&p);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&p).unwrap().as_slice().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_half_square_is_identity_map() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(arr(&[2], vec![1.0, 2.0]));
        let sq = g.mul(&p, &p).unwrap();
        let s = g.sum_all(&sq);
        let loss = g.scale(&s, 0.5);
        g.backward(&loss).unwrap();
        assert_eq!(g.grad(&p).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_on_non_scalar_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(arr(&[2], vec![1.0, 2.0]));
        match g.backward(&p) {
            Err(crate::IvwmError::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("used", arr(&[2], vec![1.0, 2.0]));
        ps.insert("unused", arr(&[2], vec![3.0, 4.0]));
        let mut g = Graph::<f64>::new();
        let used = g.param(&ps, "used").unwrap();
        let _unused = g.param(&ps, "unused").unwrap();
        let loss = g.sum_all(&used);
        g.backward(&loss).unwrap();
        g.apply_param_grads(&mut ps);
        assert_eq!(ps.grad("used").unwrap().as_slice().unwrap(), &[1.0, 1.0]);
        assert_eq!(ps.grad("unused").unwrap().as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr(&[2, 3], vec![0.0; 6]));
        let b = g.constant(arr(&[3, 3], vec![0.0; 9]));
        match g.add(&a, &b) {
            Err(crate::IvwmError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn param_nodes_deduplicate_and_accumulate() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("w", arr(&[2], vec![1.0, 1.0]));
        let mut g = Graph::<f64>::new();
        let w1 = g.param(&ps, "w").unwrap();
        let w2 = g.param(&ps, "w").unwrap();
        assert_eq!(w1.id, w2.id);
        let s = g.add(&w1, &w2).unwrap();
        let loss = g.sum_all(&s);
        g.backward(&loss).unwrap();
        g.apply_param_grads(&mut ps);
        assert_eq!(ps.grad("w").unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(arr(&[2], vec![1.0, 2.0]));
        let frozen = g.stop_grad(&p);
        let y = g.mul(&p, &frozen).unwrap();
        let loss = g.sum_all(&y);
        g.backward(&loss).unwrap();
        // d/dp [p * stop(p)] = stop(p) only
        assert_eq!(g.grad(&p).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::<f64>::inference();
        let p = g.variable(arr(&[1], vec![1.0]));
        let loss = g.sum_all(&p);
        assert!(g.backward(&loss).is_err());
    }

    #[test]
    fn add_rows_at_touches_only_targets() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(arr(&[1, 3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let src = g.constant(arr(&[1, 1, 2], vec![10.0, 20.0]));
        let y = g.add_rows_at(&x, &src, &[1]).unwrap();
        assert_eq!(
            g.value(&y).as_slice().unwrap(),
            &[1.0, 1.0, 12.0, 22.0, 3.0, 3.0]
        );
    }
}
