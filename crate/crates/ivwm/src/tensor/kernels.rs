//! Raw array kernels shared by the forward and backward passes.

use super::Scalar;
use ndarray::{Array2, ArrayD, ArrayView2};

/// View a standard-layout dynamic array as a 2-D matrix.
pub fn as2<S: Scalar>(a: &ArrayD<S>, rows: usize, cols: usize) -> ArrayView2<'_, S> {
    debug_assert_eq!(a.len(), rows * cols);
    let slice = a.as_slice().expect("tensor values are standard layout");
    ArrayView2::from_shape((rows, cols), slice).expect("shape agrees with length")
}

pub fn matmul<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    a.dot(&b)
}

/// Output spatial extent of a convolution.
pub fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Output spatial extent of a transposed convolution.
pub fn conv_transpose_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent - 1) * stride + k - 2 * pad
}

/// Gather conv patches: x `[B,C,H,W]` -> cols `[B*OH*OW, C*k*k]`.
///
/// Out-of-bounds taps read as zero.
pub fn im2col<S: Scalar>(
    x: &[S],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Array2<S> {
    let mut cols = Array2::<S>::zeros((b * oh * ow, c * k * k));
    let cols_slice = cols.as_slice_mut().unwrap();
    let row_len = c * k * k;
    for bi in 0..b {
        let x_base = bi * c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ci in 0..c {
                    let x_ch = x_base + ci * h * w;
                    let col_ch = row + ci * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_ch + iy as usize * w;
                        let col_row = col_ch + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols_slice[col_row + kx] = x[x_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add conv patches back: cols `[B*OH*OW, C*k*k]` -> x `[B,C,H,W]`.
///
/// Exact adjoint of [`im2col`] with the same geometry.
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<S> {
    let mut x = vec![S::zero(); b * c * h * w];
    let cols_slice = cols.as_slice().unwrap();
    let row_len = c * k * k;
    for bi in 0..b {
        let x_base = bi * c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * row_len;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ci in 0..c {
                    let x_ch = x_base + ci * h * w;
                    let col_ch = row + ci * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_ch + iy as usize * w;
                        let col_row = col_ch + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[x_row + ix as usize] += cols_slice[col_row + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// In-place numerically stable softmax over the last axis of a flat buffer
/// viewed as `[rows, cols]`.
pub fn softmax_rows_inplace<S: Scalar>(data: &mut [S], cols: usize) {
    debug_assert_eq!(data.len() % cols, 0);
    for row in data.chunks_mut(cols) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
