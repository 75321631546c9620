//! Forward and backward kernels. Every backward takes the cached forward
//! inputs (or outputs, where cheaper) and the upstream gradient.

use crate::error::{Error, Result};
use crate::nn::tensor::Matrix;

/// `y = x W + b` with `W` stored row-major as `d_in x d_out`.
pub fn linear(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols != weight.rows || bias.len() != weight.cols {
        return Err(Error::ShapeMismatch {
            left: vec![x.rows, x.cols],
            right: vec![weight.rows, weight.cols, bias.len()],
        });
    }
    Ok(linear_raw(x, &weight.data, weight.cols, bias))
}

pub(crate) fn linear_raw(x: &Matrix, w: &[f64], d_out: usize, b: &[f64]) -> Matrix {
    let mut y = Matrix::zeros(x.rows, d_out);
    for i in 0..x.rows {
        let yr = y.row_mut(i);
        yr.copy_from_slice(b);
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * d_out..(k + 1) * d_out];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward(x: &Matrix, weight: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if x.cols != weight.rows || dy.cols != weight.cols || dy.rows != x.rows {
        return Err(Error::ShapeMismatch {
            left: vec![x.rows, x.cols, dy.rows, dy.cols],
            right: vec![weight.rows, weight.cols],
        });
    }
    let mut dw = vec![0.0; weight.data.len()];
    let mut db = vec![0.0; weight.cols];
    let dx = linear_backward_raw(x, &weight.data, weight.cols, dy, &mut dw, &mut db, true);
    Ok((
        dx.expect("input gradient requested"),
        Matrix::from_vec(weight.rows, weight.cols, dw)?,
        db,
    ))
}

/// Accumulates into `dw`/`db`; returns `dx` only when asked.
pub(crate) fn linear_backward_raw(
    x: &Matrix,
    w: &[f64],
    d_out: usize,
    dy: &Matrix,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Matrix> {
    let d_in = x.cols;
    let mut dx = want_dx.then(|| Matrix::zeros(x.rows, d_in));
    for i in 0..x.rows {
        let dyr = dy.row(i);
        for (g, &d) in db.iter_mut().zip(dyr) {
            *g += d;
        }
        for (k, &xv) in x.row(i).iter().enumerate() {
            let wr = &w[k * d_out..(k + 1) * d_out];
            if xv != 0.0 {
                let dwr = &mut dw[k * d_out..(k + 1) * d_out];
                for (g, &d) in dwr.iter_mut().zip(dyr) {
                    *g += xv * d;
                }
            }
            if let Some(dx) = dx.as_mut() {
                dx.data[i * d_in + k] = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// Takes the sigmoid output `y`.
pub fn sigmoid_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    zip_map(y, dy, |y, d| d * y * (1.0 - y))
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Takes the tanh output `y`.
pub fn tanh_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    zip_map(y, dy, |y, d| d * (1.0 - y * y))
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Takes the relu input `x`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    zip_map(x, dy, |x, d| if x > 0.0 { d } else { 0.0 })
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows {
        let r = out.row_mut(i);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in r.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Takes the softmax output `p`: `dx = p * (dp - <dp, p>)` per row.
pub fn softmax_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(p.rows, p.cols);
    for i in 0..p.rows {
        let (pr, dr) = (p.row(i), dp.row(i));
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in dx.row_mut(i).iter_mut().zip(pr.iter().zip(dr)) {
            *o = a * (b - dot);
        }
    }
    dx
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Point-to-segment assignment; every segment has at least one member.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub point_to_segment: Vec<usize>,
    pub counts: Vec<usize>,
}

impl SegmentMap {
    pub fn new(point_to_segment: Vec<usize>, num_segments: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_segments];
        for (i, &s) in point_to_segment.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::InvalidArgument(format!(
                    "point {i} maps to segment {s} of {num_segments}"
                )));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptySegment(empty));
        }
        Ok(Self {
            point_to_segment,
            counts,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.point_to_segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_to_segment.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Max,
}

/// Result of a segment reduction, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub values: Matrix,
    /// For max mode: index of the winning row per `(segment, channel)`.
    pub argmax: Option<Vec<usize>>,
}

pub fn segment_reduce(x: &Matrix, seg: &SegmentMap, mode: ReduceMode) -> Result<Reduced> {
    if x.rows != seg.len() {
        return Err(Error::shape(&x.shape(), &[seg.len()]));
    }
    let (m, d) = (seg.num_segments(), x.cols);
    match mode {
        ReduceMode::Mean => {
            let mut out = Matrix::zeros(m, d);
            for (i, &s) in seg.point_to_segment.iter().enumerate() {
                for (o, v) in out.row_mut(s).iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            for s in 0..m {
                let c = seg.counts[s] as f64;
                out.row_mut(s).iter_mut().for_each(|v| *v /= c);
            }
            Ok(Reduced {
                values: out,
                argmax: None,
            })
        }
        ReduceMode::Max => {
            let mut out = Matrix::filled(m, d, f64::NEG_INFINITY);
            let mut arg = vec![usize::MAX; m * d];
            for (i, &s) in seg.point_to_segment.iter().enumerate() {
                let xr = x.row(i);
                for c in 0..d {
                    // strict comparison keeps the first-encountered maximum
                    if xr[c] > out.data[s * d + c] || arg[s * d + c] == usize::MAX {
                        out.data[s * d + c] = xr[c];
                        arg[s * d + c] = i;
                    }
                }
            }
            Ok(Reduced {
                values: out,
                argmax: Some(arg),
            })
        }
    }
}

/// Gradient of [`segment_reduce`] with respect to its input rows.
pub fn segment_reduce_backward(reduced: &Reduced, seg: &SegmentMap, dy: &Matrix) -> Matrix {
    let d = dy.cols;
    let mut dx = Matrix::zeros(seg.len(), d);
    match &reduced.argmax {
        None => {
            for (i, &s) in seg.point_to_segment.iter().enumerate() {
                let c = seg.counts[s] as f64;
                for (o, g) in dx.row_mut(i).iter_mut().zip(dy.row(s)) {
                    *o = g / c;
                }
            }
        }
        Some(arg) => {
            for s in 0..seg.num_segments() {
                for c in 0..d {
                    dx.data[arg[s * d + c] * d + c] += dy.data[s * d + c];
                }
            }
        }
    }
    dx
}
