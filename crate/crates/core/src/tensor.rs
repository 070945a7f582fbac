//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is immutable once built: the buffer sits behind an `Arc`, so
//! clones are cheap and read-only sharing across threads is free. Every
//! operation that "changes" a tensor allocates a new one.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// buffer length equals the product of the extents.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ZeroExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect()).expect("from_fn: positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Takes the buffer out, copying only if it is shared.
    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ZeroExtent(shape.to_vec()));
        }
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Little-endian byte image of the buffer, used for digests and
    /// determinism checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape: broadcast
/// dimensions get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every index of `out` in row-major order together with the flat
/// offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, ia, ib);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= a_strides[d] * out[d];
            ib -= b_strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `values` (laid out in the broadcast shape `from`) down to `to`, the
/// adjoint of broadcasting `to` up to `from`.
pub(crate) fn sum_to_shape(values: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return values.to_vec();
    }
    let n: usize = to.iter().product();
    let mut acc = vec![0.0; n];
    let ts = broadcast_strides(to, from);
    let zeros = vec![0; from.len()];
    for_each_broadcast(from, &ts, &zeros, |flat, it, _| acc[it] += values[flat]);
    acc
}

/// Materializes `t` tiled up to the broadcast shape `out`.
pub fn broadcast_to(t: &Tensor, out: &[usize]) -> Result<Tensor> {
    match broadcast_shape(t.shape(), out) {
        Some(s) if s == out => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: out.to_vec(),
            })
        }
    }
    let n: usize = out.iter().product();
    let mut data = vec![0.0; n];
    let ts = broadcast_strides(t.shape(), out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &ts, &zeros, |flat, it, _| data[flat] = t.data()[it]);
    Tensor::new(out, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length_and_extents() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(&[2, 0], vec![]),
            Err(Error::ZeroExtent(_))
        ));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1, 5], &[4, 5]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn sum_to_is_adjoint_of_broadcast() {
        let t = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let big = broadcast_to(&t, &[3, 2, 4]).unwrap();
        assert_eq!(big.shape(), &[3, 2, 4]);
        let back = sum_to_shape(big.data(), &[3, 2, 4], &[2, 1]);
        assert_eq!(back, vec![12.0, 24.0]);
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4]).is_err());
    }
}
