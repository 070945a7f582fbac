//! Synthetic classification images with known attention rectangles.
//!
//! Each image is uniform noise in `[0, 0.4]` with one rotated rectangle
//! filled by a striped texture whose orientation and period identify the
//! class. The rectangle is recorded, so the ideal attention map of every
//! sample is known exactly.
//!
//! Dataset files are little-endian:
//!
//! ```text
//! "RADS"                          4 bytes
//! version                         u32 (= 1)
//! classes, channels, height, width, count   u32 each
//! seed                            u64
//! per sample:
//!   label                         u32
//!   rectangle                     5 x f64 (mu1, mu2, sigma1, sigma2, alpha)
//!   image                         channels*height*width x f64, row-major
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rect::{render_map, RectParams};
use crate::tensor::Tensor;
use crate::theory::{binarize, BinaryMask};

pub const MAGIC: &[u8; 4] = b"RADS";
pub const VERSION: u32 = 1;
/// Sharpness used to rasterize ground-truth rectangles.
pub const GT_SHARPNESS: f64 = 50.0;
const HEADER_LEN: usize = 4 + 4 + 5 * 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub gt_rect: RectParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
}

impl DatasetHeader {
    fn sample_bytes(&self) -> usize {
        4 + 5 * 8 + self.channels * self.height * self.width * 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SyntheticSample>,
}

/// Stripe orientation and period of a class.
pub fn class_texture(label: usize, classes: usize) -> (f64, f64) {
    let theta = label as f64 * PI / classes as f64;
    let period = 4.0 + 1.5 * (label % 3) as f64;
    (theta, period)
}

/// Rasterized ground truth: the rectangle rendered sharply and thresholded
/// at one half.
pub fn gt_mask(rect: &RectParams, h: usize, w: usize) -> BinaryMask {
    binarize(&render_map(rect, GT_SHARPNESS, h, w), 0.5).expect("rank-2 map")
}

/// Draws a rectangle with `mu` in `[0.25, 0.75]^2`, `sigma` in
/// `[0.12, 0.3]^2` and `alpha` in `(-pi/2, pi/2]`.
pub fn sample_rect(rng: &mut impl Rng) -> RectParams {
    let mu1 = rng.gen_range(0.25..=0.75);
    let mu2 = rng.gen_range(0.25..=0.75);
    let sigma1 = rng.gen_range(0.12..=0.3);
    let sigma2 = rng.gen_range(0.12..=0.3);
    // (-pi/2, pi/2]: reflect the open end of [-pi/2, pi/2)
    let a: f64 = rng.gen_range(-PI / 2.0..PI / 2.0);
    let alpha = if a == -PI / 2.0 { PI / 2.0 } else { a };
    RectParams {
        mu1,
        mu2,
        sigma1,
        sigma2,
        alpha,
    }
}

pub fn generate_sample(rng: &mut impl Rng, classes: usize, channels: usize, h: usize, w: usize) -> Result<SyntheticSample> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("images must be at least 16x16, got {h}x{w}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {channels}")));
    }
    let label = rng.gen_range(0..classes);
    let rect = sample_rect(rng);
    let (theta, period) = class_texture(label, classes);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (st, ct) = theta.sin_cos();
    let mask = gt_mask(&rect, h, w);
    let mut plane = vec![0.0; h * w];
    for (k, v) in plane.iter_mut().enumerate() {
        let noise = rng.gen_range(0.0..=0.4);
        *v = if mask.data()[k] == 1 {
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            let wave = (2.0 * PI * (i * ct + j * st) / period + phase).sin();
            0.55 + 0.45 * (0.5 + 0.5 * wave)
        } else {
            noise
        };
    }
    let data: Vec<f64> = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    Ok(SyntheticSample {
        image: Tensor::new(&[channels, h, w], data)?,
        label,
        gt_rect: rect,
    })
}

/// Random stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` samples, sample `i` drawn from its own stream so the result does
/// not depend on generation order.
pub fn generate_dataset(header: DatasetHeader) -> Result<Dataset> {
    if header.count == 0 {
        return Err(Error::InvalidArgument("dataset count must be positive".into()));
    }
    let samples = (0..header.count)
        .map(|i| {
            let mut rng = sample_rng(header.seed, i as u64);
            generate_sample(&mut rng, header.classes, header.channels, header.height, header.width)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header, samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if h.count != self.samples.len() {
            return Err(Error::Format(format!(
                "header count {} but {} samples",
                h.count,
                self.samples.len()
            )));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + h.count * h.sample_bytes());
        out.extend_from_slice(MAGIC);
        for v in [VERSION as usize, h.classes, h.channels, h.height, h.width, h.count] {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("header field {v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.seed.to_le_bytes());
        let shape = [h.channels, h.height, h.width];
        for s in &self.samples {
            if s.image.shape() != shape || s.label >= h.classes {
                return Err(Error::Format("sample does not match header".into()));
            }
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            for v in s.gt_rect.to_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.image.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("dataset truncated in header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4) as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let header = DatasetHeader {
            classes: u32_at(8),
            channels: u32_at(12),
            height: u32_at(16),
            width: u32_at(20),
            count: u32_at(24),
            seed: u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes")),
        };
        if header.count == 0 || header.classes < 2 || header.channels == 0 || header.height == 0 || header.width == 0 {
            return Err(Error::Format("dataset header has a zero or invalid field".into()));
        }
        let per = header.sample_bytes();
        let expected = header.count.checked_mul(per).and_then(|v| v.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::Format(format!(
                "header declares {} samples but payload is {} bytes",
                header.count,
                bytes.len() - HEADER_LEN
            )));
        }
        let pixels = header.channels * header.height * header.width;
        let shape = [header.channels, header.height, header.width];
        let mut samples = Vec::with_capacity(header.count);
        for i in 0..header.count {
            let o = HEADER_LEN + i * per;
            let label = u32_at(o);
            if label >= header.classes {
                return Err(Error::Format(format!("sample {i} has label {label} out of range")));
            }
            let rect: Vec<f64> = (0..5).map(|k| f64_at(o + 4 + 8 * k)).collect();
            let img = (0..pixels).map(|k| f64_at(o + 44 + 8 * k)).collect();
            samples.push(SyntheticSample {
                image: Tensor::new(&shape, img)?,
                label,
                gt_rect: RectParams::from_slice(&rect),
            });
        }
        Ok(Self { header, samples })
    }

    /// Hex SHA-256 of the serialized form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// `[N, C, H, W]` batch of the listed samples and their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let h = &self.header;
        let mut data = Vec::with_capacity(indices.len() * h.channels * h.height * h.width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        let t = Tensor::new(&[indices.len(), h.channels, h.height, h.width], data)?;
        Ok((t, labels))
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(count: usize, seed: u64) -> DatasetHeader {
        DatasetHeader {
            classes: 4,
            channels: 1,
            height: 16,
            width: 16,
            count,
            seed,
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let ds = generate_dataset(header(3, 9)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut more = bytes.clone();
        more[24] = 4;
        assert!(Dataset::from_bytes(&more).is_err());
    }

    #[test]
    fn full_frame_rectangle_mask() {
        let r = RectParams::new((0.5, 0.5), (0.75, 0.75), 0.0);
        assert_eq!(gt_mask(&r, 20, 20).support_size(), 400);
    }
}
