//! Forward kernels on plain tensors.
//!
//! These are the tape-free versions of every differentiable op. The tape in
//! [`crate::autodiff`] calls into them for its forward pass and records what
//! the backward pass needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gemm, im2col, ConvGeom, Layout};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Tanh,
    Softplus,
    Square,
    Neg,
    Sin,
    Cos,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Logistic sigmoid `e^t / (e^t + 1)`, evaluated without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Square => x * x,
            UnaryKind::Neg => -x,
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Neg => -1.0,
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Exp => y,
        }
    }
}

impl BinaryKind {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

pub fn ew_unary(kind: UnaryKind, x: &Tensor) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// Elementwise binary op with trailing-dimension broadcasting.
pub fn ew_binary(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op: kind.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    if kind == BinaryKind::Div && b.data().iter().any(|&v| v == 0.0) {
        return Err(Error::DivisionByZero { op: "div" });
    }
    let (ad, bd) = (a.data(), b.data());
    let data = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| kind.apply(x, y)).collect()
    } else if ad.len() == 1 {
        let x = ad[0];
        bd.iter().map(|&y| kind.apply(x, y)).collect()
    } else {
        let n: usize = out.iter().product();
        let mut data = vec![0.0; n];
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = kind.apply(ad[ia], bd[ib]));
        data
    };
    Tensor::new(&out, data)
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )))
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank("matmul", a, 2)?;
    require_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a.data(), Layout::Normal, b.data(), Layout::Normal, 0.0, &mut c);
    Tensor::new(&[m, n], c)
}

/// Stride, padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec {
        stride: 1,
        padding: 1,
        dilation: 1,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
        dilation: 1,
    };
}

pub(crate) fn conv_geometry(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<ConvGeom> {
    require_rank("conv2d input", x, 4)?;
    require_rank("conv2d weight", w, 4)?;
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::InvalidArgument("conv2d: stride and dilation must be positive".into()));
    }
    let ho = ConvGeom::out_extent(h, kh, spec.stride, spec.padding, spec.dilation);
    let wo = ConvGeom::out_extent(wd, kw, spec.stride, spec.padding, spec.dilation);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            n,
            c,
            h,
            w: wd,
            out_ch: o,
            kh,
            kw,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            ho,
            wo,
        }),
        _ => Err(Error::InvalidArgument(format!(
            "conv2d: non-positive output size for input {:?} and kernel {:?}",
            x.shape(),
            w.shape()
        ))),
    }
}

/// Batched cross-correlation (no kernel flip). Returns the output and, when
/// `keep_cols` is set, the unfolded input for the weight gradient.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: ConvSpec,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let g = conv_geometry(x, w, spec)?;
    if let Some(b) = b {
        if b.shape() != [g.out_ch] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![g.out_ch],
            });
        }
    }
    let (ck, p) = (g.patch(), g.positions());
    let in_size = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.out_ch * p];
    let mut saved = if keep_cols { vec![0.0; g.n * ck * p] } else { Vec::new() };
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; ck * p] };
    for s in 0..g.n {
        let cols: &mut [f64] = if keep_cols {
            &mut saved[s * ck * p..(s + 1) * ck * p]
        } else {
            &mut scratch
        };
        im2col(&x.data()[s * in_size..(s + 1) * in_size], &g, cols);
        let dst = &mut out[s * g.out_ch * p..(s + 1) * g.out_ch * p];
        if let Some(b) = b {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data()[o]);
            }
        }
        gemm(g.out_ch, ck, p, w.data(), Layout::Normal, cols, Layout::Normal, 1.0, dst);
    }
    let t = Tensor::new(&[g.n, g.out_ch, g.ho, g.wo], out)?;
    Ok((t, keep_cols.then_some(saved)))
}

/// Non-overlapping `k x k` max pooling on `[N, C, H, W]`. Also returns, per
/// output cell, the flat input index of the first maximal element.
pub(crate) fn max_pool2d_forward(x: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    require_rank("maxpool2d", x, 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2d: spatial extents {h}x{w} not divisible by {k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub(crate) fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    require_rank("global_avg_pool", x, 4)?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(&[n, c], data)
}

/// `x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank("linear input", x, 2)?;
    require_rank("linear weight", w, 2)?;
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let (fout, win) = (w.shape()[0], w.shape()[1]);
    if fin != win || b.shape() != [fout] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    gemm(n, fin, fout, x.data(), Layout::Normal, w.data(), Layout::Transposed, 1.0, &mut out);
    Tensor::new(&[n, fout], out)
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]`. Returns the
/// loss and the softmax probabilities.
pub(crate) fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    require_rank("softmax_cross_entropy", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 {
        return Err(Error::InvalidArgument("softmax_cross_entropy: need at least 2 classes".into()));
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "softmax_cross_entropy: {n} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "softmax_cross_entropy: label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for (row, (&label, p)) in logits
        .data()
        .chunks(k)
        .zip(labels.iter().zip(probs.chunks_mut(k)))
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pi, &l) in p.iter_mut().zip(row) {
            *pi = (l - max).exp();
            z += *pi;
        }
        p.iter_mut().for_each(|v| *v /= z);
        loss += -(row[label] - max - z.ln());
    }
    Ok((loss / n as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // e^10/(e^10+1)
        let e = 10f64.exp();
        assert!((sigmoid(10.0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((sigmoid(10.0) - 0.9999546).abs() < 1e-7);
        assert_eq!(UnaryKind::Relu.apply(-1.0), 0.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn binary_examples() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(ew_binary(BinaryKind::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);
        let v = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let two = Tensor::scalar(2.0);
        assert_eq!(ew_binary(BinaryKind::Mul, &two, &v).unwrap().data(), &[2.0, 4.0, 6.0]);
        let one = Tensor::new(&[1], vec![1.0]).unwrap();
        let zero = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(matches!(
            ew_binary(BinaryKind::Div, &one, &zero),
            Err(Error::DivisionByZero { .. })
        ));
        let bad = Tensor::new(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            ew_binary(BinaryKind::Add, &a, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let row = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let col = Tensor::new(&[2, 1], vec![5.0, 7.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[5.0]);
        assert!(matmul(&row, &row).is_err());
    }

    #[test]
    fn maxpool_first_max_on_ties() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0]).unwrap();
        let (y, arg) = max_pool2d_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
    }
}
