//! Binary PGM (P5) and PPM (P6) writers, 8 bits per sample.
//!
//! A value `v` in `[0, 1]` is stored as `floor(v * 255 + 0.5)`, clamped to
//! `0..=255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidArgument(format!("expected an [H, W] image, got {s:?}"))),
    }
}

/// Encodes an `[H, W]` map as P5.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = hw(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encodes three `[H, W]` planes as P6.
pub fn encode_ppm(r: &Tensor, g: &Tensor, b: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = hw(r)?;
    if g.shape() != r.shape() || b.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            op: "ppm planes",
            lhs: r.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for k in 0..h * w {
        out.extend([quantize(r.data()[k]), quantize(g.data()[k]), quantize(b.data()[k])]);
    }
    Ok(out)
}

/// Grayscale image with `alpha` blending pure red over it.
pub fn encode_overlay(gray: &Tensor, alpha: &Tensor) -> Result<Vec<u8>> {
    if gray.shape() != alpha.shape() {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: gray.shape().to_vec(),
            rhs: alpha.shape().to_vec(),
        });
    }
    let a = |k: usize| alpha.data()[k].clamp(0.0, 1.0);
    let shape = gray.shape();
    let r = Tensor::from_fn(shape, |k| (1.0 - a(k)) * gray.data()[k] + a(k));
    let gb = Tensor::from_fn(shape, |k| (1.0 - a(k)) * gray.data()[k]);
    encode_ppm(&r, &gb, &gb)
}

/// Nearest-neighbour resize of an `[H, W]` map.
pub fn resize_nearest(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = hw(map)?;
    Ok(Tensor::from_fn(&[h, w], |k| {
        let (i, j) = (k / w, k % w);
        map.data()[(i * mh / h) * mw + j * mw / w]
    }))
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

pub fn write_overlay(path: &Path, gray: &Tensor, alpha: &Tensor) -> Result<()> {
    fs::write(path, encode_overlay(gray, alpha)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes() {
        let m = Tensor::new(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let b = encode_pgm(&m).unwrap();
        assert_eq!(b, b"P5\n3 1\n255\n\x00\x80\xff".to_vec());
        assert_eq!(quantize(1.0 / 255.0 * 0.5), 1);
    }
}
