//! Rotated-rectangle attention.
//!
//! A rectangle is five numbers: a center `mu`, half-extents `sigma` and an
//! orientation `alpha`, all in normalized image coordinates where row
//! index maps to the first coordinate and column index to the second. The
//! soft indicator of the rectangle is a product of two sigmoid windows
//! evaluated in the rectangle's rotated frame.
//!
//! Every function exists twice: a plain `f64` version used for ground truth,
//! exports and oracles, and a tape version used in training. Both evaluate
//! the same formula.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{wrap_angle, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2dLayer, LinearLayer, ParamStore};
use crate::ops::{sigmoid, ConvSpec};
use crate::tensor::Tensor;

/// Guard on the map sum below which rescaling is refused.
pub const RESCALE_EPS: f64 = 1e-8;
/// Sharpness used in training.
pub const DEFAULT_SHARPNESS: f64 = 6.0;
/// Sharpness used for exported figures.
pub const FIGURE_SHARPNESS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub alpha: f64,
}

impl RectParams {
    pub fn new(mu: (f64, f64), sigma: (f64, f64), alpha: f64) -> Self {
        Self {
            mu1: mu.0,
            mu2: mu.1,
            sigma1: sigma.0,
            sigma2: sigma.1,
            alpha,
        }
    }

    pub fn mu(&self) -> (f64, f64) {
        (self.mu1, self.mu2)
    }

    pub fn sigma(&self) -> (f64, f64) {
        (self.sigma1, self.sigma2)
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.mu1, self.mu2, self.sigma1, self.sigma2, self.alpha]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            mu1: v[0],
            mu2: v[1],
            sigma1: v[2],
            sigma2: v[3],
            alpha: v[4],
        }
    }

    /// `mu` in `[0,1]^2`, `sigma` in `[lo, hi]`, `alpha` in `(-pi, pi]`.
    pub fn is_valid(&self, sigma_min: f64, sigma_max: f64) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let sig = |v: f64| v >= sigma_min && v <= sigma_max;
        unit(self.mu1)
            && unit(self.mu2)
            && sig(self.sigma1)
            && sig(self.sigma2)
            && self.alpha > -PI
            && self.alpha <= PI
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectAttentionConfig {
    pub sharpness: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub use_rescale: bool,
    pub use_residual: bool,
}

impl Default for RectAttentionConfig {
    fn default() -> Self {
        Self {
            sharpness: DEFAULT_SHARPNESS,
            sigma_min: 0.05,
            sigma_max: 1.0,
            use_rescale: true,
            use_residual: true,
        }
    }
}

impl RectAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpness > 0.0) {
            return Err(Error::InvalidArgument(format!("sharpness must be positive, got {}", self.sharpness)));
        }
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max && self.sigma_max <= 1.5) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max <= 1.5, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

fn window_unchecked(s: f64, t0: f64, sigma: f64, t: f64) -> f64 {
    let z = (t - t0) / sigma;
    sigmoid(s * (1.0 - z * z))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")))
    }
}

/// Soft interval indicator `sigmoid(s (1 - ((t - t0)/sigma)^2))`: near 1 on
/// `[t0 - sigma, t0 + sigma]`, exactly 0.5 at its ends.
pub fn window1d(s: f64, t0: f64, sigma: f64, t: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("sharpness must be positive, got {s}")));
    }
    Ok(window_unchecked(s, t0, sigma, t))
}

/// Axis-aligned soft rectangle: the product of two 1-D windows.
pub fn rect_window2d(s: f64, mu: (f64, f64), sigma: (f64, f64), t: (f64, f64)) -> Result<f64> {
    Ok(window1d(s, mu.0, sigma.0, t.0)? * window1d(s, mu.1, sigma.1, t.1)?)
}

/// `R_alpha (t - mu) + mu` with `R_alpha = [[cos, -sin], [sin, cos]]`.
pub fn rotate_point(alpha: f64, mu: (f64, f64), t: (f64, f64)) -> (f64, f64) {
    let (s, c) = alpha.sin_cos();
    let (d1, d2) = (t.0 - mu.0, t.1 - mu.1);
    (c * d1 - s * d2 + mu.0, s * d1 + c * d2 + mu.1)
}

/// The rotated rectangle: the axis-aligned window evaluated at
/// `R_{-alpha}` applied to `t` about the center.
pub fn rect_window_rotated(s: f64, p: &RectParams, t: (f64, f64)) -> f64 {
    let u = rotate_point(-p.alpha, p.mu(), t);
    window_unchecked(s, p.mu1, p.sigma1, u.0) * window_unchecked(s, p.mu2, p.sigma2, u.1)
}

/// Normalized coordinate of index `i` on an axis of `n` cells; 0.5 when the
/// axis is a single cell.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// `[H, W]` map of the rotated rectangle sampled on the normalized grid.
pub fn render_map(p: &RectParams, s: f64, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |k| {
        rect_window_rotated(s, p, (grid_coord(k / w, h), grid_coord(k % w, w)))
    })
}

/// `f * HW / sum(f)` so the map has mean 1.
pub fn rescale_map(f: &Tensor) -> Result<Tensor> {
    if f.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("rescale_map: negative entry".into()));
    }
    let sum = f.sum();
    if !(sum > RESCALE_EPS) {
        return Err(Error::DegenerateMap { sum });
    }
    let k = f.len() as f64 / sum;
    Ok(f.map(|v| v * k))
}

/// `x + g * x` (residual) or `g * x`, where `g` is `f` or its rescaled form,
/// broadcast across channels. `x` is `[C, H, W]`, `f` is `[H, W]`.
pub fn apply_attention(x: &Tensor, f: &Tensor, cfg: &RectAttentionConfig) -> Result<Tensor> {
    if x.rank() != 3 || f.rank() != 2 || x.shape()[1..] != *f.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_attention",
            lhs: x.shape().to_vec(),
            rhs: f.shape().to_vec(),
        });
    }
    let g = if cfg.use_rescale { rescale_map(f)? } else { f.clone() };
    let hw = g.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = g.data()[i % hw];
            if cfg.use_residual {
                v + m * v
            } else {
                m * v
            }
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Maps five raw predictor outputs to a valid rectangle.
pub fn squash_raw_params(raw: &[f64; 5], cfg: &RectAttentionConfig) -> RectParams {
    let span = cfg.sigma_max - cfg.sigma_min;
    RectParams {
        mu1: sigmoid(raw[0]),
        mu2: sigmoid(raw[1]),
        sigma1: cfg.sigma_min + span * sigmoid(raw[2]),
        sigma2: cfg.sigma_min + span * sigmoid(raw[3]),
        // tanh saturates to -1 in floating point; keep the open end open
        alpha: wrap_angle(PI * raw[4].tanh()),
    }
}

/// Tape version of [`squash_raw_params`] on a `[N, 5]` batch.
pub fn squash<'t>(raw: Var<'t>, cfg: &RectAttentionConfig) -> Result<Var<'t>> {
    let tape = raw.tape();
    let mu = raw.narrow(1, 0, 2)?.sigmoid();
    let sigma = raw
        .narrow(1, 2, 2)?
        .sigmoid()
        .scale(cfg.sigma_max - cfg.sigma_min)
        .shift(cfg.sigma_min);
    let alpha = raw.narrow(1, 4, 1)?.tanh().scale(PI).wrap_angle();
    tape.concat(&[mu, sigma, alpha], 1)
}

/// Splits a `[N, 5]` batch into per-sample rectangles.
pub fn params_from_batch(p: &Tensor) -> Vec<RectParams> {
    p.data().chunks(5).map(RectParams::from_slice).collect()
}

pub fn params_to_batch(ps: &[RectParams]) -> Tensor {
    let data = ps.iter().flat_map(|p| p.to_array()).collect();
    Tensor::new(&[ps.len(), 5], data).expect("non-empty parameter batch")
}

/// Tape version of [`render_map`]: `[N, 5]` rectangles to `[N, H, W]` maps.
pub fn render_maps<'t>(params: Var<'t>, s: f64, h: usize, w: usize) -> Result<Var<'t>> {
    let tape = params.tape();
    let n = params.shape()[0];
    let hw = h * w;
    let t1 = tape.constant(Tensor::from_fn(&[1, hw], |k| grid_coord(k / w, h)));
    let t2 = tape.constant(Tensor::from_fn(&[1, hw], |k| grid_coord(k % w, w)));
    let col = |k| params.narrow(1, k, 1);
    let (mu1, mu2, s1, s2, alpha) = (col(0)?, col(1)?, col(2)?, col(3)?, col(4)?);
    let d1 = t1.sub(mu1)?;
    let d2 = t2.sub(mu2)?;
    let (c, sn) = (alpha.cos(), alpha.sin());
    // R_{-alpha} (t - mu)
    let u = d1.mul(c)?.add(d2.mul(sn)?)?;
    let v = d2.mul(c)?.sub(d1.mul(sn)?)?;
    let win = |d: Var<'t>, sig: Var<'t>| -> Result<Var<'t>> {
        Ok(d.div(sig)?.square().neg().shift(1.0).scale(s).sigmoid())
    };
    win(u, s1)?.mul(win(v, s2)?)?.reshape(&[n, h, w])
}

/// Tape version of [`rescale_map`] on `[N, H, W]`, per sample.
pub fn rescale_maps<'t>(f: Var<'t>) -> Result<Var<'t>> {
    let shape = f.shape();
    let n = shape[0];
    let hw = (shape[1] * shape[2]) as f64;
    let sums = f.sum_to(&[n, 1, 1])?;
    if let Some(&bad) = sums.value().data().iter().find(|&&v| !(v > RESCALE_EPS)) {
        return Err(Error::DegenerateMap { sum: bad });
    }
    f.scale(hw).div(sums)
}

/// Tape version of [`apply_attention`]: `x` is `[N, C, H, W]`, `f` is
/// `[N, H, W]`.
pub fn apply_attention_batch<'t>(
    x: Var<'t>,
    f: Var<'t>,
    use_rescale: bool,
    use_residual: bool,
) -> Result<Var<'t>> {
    let xs = x.shape();
    let fs = f.shape();
    if xs.len() != 4 || fs.len() != 3 || xs[0] != fs[0] || xs[2..] != fs[1..] {
        return Err(Error::ShapeMismatch {
            op: "apply_attention",
            lhs: xs,
            rhs: fs,
        });
    }
    let g = if use_rescale { rescale_maps(f)? } else { f };
    let g = g.reshape(&[fs[0], 1, fs[1], fs[2]])?;
    let gx = x.mul(g)?;
    if use_residual {
        x.add(gx)
    } else {
        Ok(gx)
    }
}

/// Sub-sampling network predicting five raw rectangle outputs from a
/// feature map: three 3x3 convolutions with ReLU, 2x2 max pooling after the
/// first two, global average pooling and a zero-initialized linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorNet {
    pub convs: [Conv2dLayer; 3],
    pub head: LinearLayer,
}

impl PredictorNet {
    pub const DEFAULT_WIDTHS: [usize; 3] = [64, 128, 256];

    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, widths: [usize; 3], rng: &mut impl Rng) -> Self {
        let c0 = Conv2dLayer::new(store, &format!("{prefix}.conv0"), in_ch, widths[0], 3, ConvSpec::SAME3, rng);
        let c1 = Conv2dLayer::new(store, &format!("{prefix}.conv1"), widths[0], widths[1], 3, ConvSpec::SAME3, rng);
        let c2 = Conv2dLayer::new(store, &format!("{prefix}.conv2"), widths[1], widths[2], 3, ConvSpec::SAME3, rng);
        let head = LinearLayer::zeros(store, &format!("{prefix}.head"), widths[2], 5);
        Self {
            convs: [c0, c1, c2],
            head,
        }
    }

    /// `[N, C, H, W] -> [N, 5]` raw outputs.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(p, h)?.relu();
            if i < 2 {
                let s = h.shape();
                h = h.pad2d(s[2] % 2, s[3] % 2)?.max_pool2d(2)?;
            }
        }
        self.head.forward(p, h.global_avg_pool()?)
    }

    /// Biases the head so the start rectangle sits at `mu` with the given
    /// raw sigma output, independent of the input.
    pub fn set_head_bias(&self, store: &mut ParamStore, raw: [f64; 5]) -> Result<()> {
        store.set(self.head.bias, Tensor::new(&[5], raw.to_vec())?)?;
        store.set(self.head.weight, Tensor::zeros(store.get(self.head.weight).shape()))
    }

    /// Multiply-accumulates per sample for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let mut total = 0;
        let (mut h, mut w) = (h, w);
        for (i, conv) in self.convs.iter().enumerate() {
            total += conv.macs(h, w);
            if i < 2 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        total + self.head.in_features * 5
    }
}

/// Predictor plus rendering: the whole rectangle attention module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectAttention {
    pub predictor: PredictorNet,
    pub cfg: RectAttentionConfig,
}

/// Forward products of [`RectAttention::forward`].
pub struct RectOutput<'t> {
    pub out: Var<'t>,
    /// Squashed `[N, 5]` rectangles.
    pub params: Var<'t>,
    /// `[N, H, W]` maps before rescaling.
    pub map: Var<'t>,
}

impl RectAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        widths: [usize; 3],
        cfg: RectAttentionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            predictor: PredictorNet::new(store, prefix, in_ch, widths, rng),
            cfg,
        }
    }

    /// Squashed `[N, 5]` rectangles for `[N, C, H, W]` features.
    pub fn predict<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        squash(self.predictor.forward(p, x)?, &self.cfg)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<RectOutput<'t>> {
        let s = x.shape();
        let params = self.predict(p, x)?;
        let map = render_maps(params, self.cfg.sharpness, s[2], s[3])?;
        let out = apply_attention_batch(x, map, self.cfg.use_rescale, self.cfg.use_residual)?;
        Ok(RectOutput { out, params, map })
    }

    /// Rectangle for a single `[C, H, W]` input, without recording gradients.
    pub fn predict_params(&self, store: &ParamStore, x: &Tensor) -> Result<RectParams> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::InvalidArgument(format!("predict_params: expected [C, H, W], got {s:?}")));
        }
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let xv = tape.constant(x.reshape(&[1, s[0], s[1], s[2]])?);
        let p = self.predict(&bound, xv)?.value();
        Ok(RectParams::from_slice(p.data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_reference_values() {
        let e = 10f64.exp();
        let v = window1d(10.0, 0.0, 2.0, 0.0).unwrap();
        assert!((v - e / (e + 1.0)).abs() < 1e-15);
        assert!((v - 0.9999546).abs() < 1e-7);
        assert_eq!(window1d(10.0, 0.3, 0.2, 0.5).unwrap(), 0.5);
        assert!(window1d(10.0, 0.0, 0.0, 0.0).is_err());
        assert!(window1d(10.0, 0.0, 2.0, 3.0).unwrap() < 1e-5);
    }

    #[test]
    fn rotation_reference_values() {
        let (a, b) = rotate_point(PI / 2.0, (0.0, 0.0), (1.0, 0.0));
        assert!(a.abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn render_reference_values() {
        let p = RectParams::new((0.5, 0.5), (0.5, 0.5), 0.0);
        let m = render_map(&p, 6.0, 9, 9);
        let s6 = sigmoid(6.0);
        assert!((m.data()[4 * 9 + 4] - s6 * s6).abs() < 1e-15);
        assert!((m.data()[4 * 9 + 4] - 0.99506).abs() < 1e-5);
        assert_eq!(m.data()[0], 0.25);
    }

    #[test]
    fn squash_at_zero() {
        let cfg = RectAttentionConfig::default();
        let p = squash_raw_params(&[0.0; 5], &cfg);
        assert_eq!((p.mu1, p.mu2, p.alpha), (0.5, 0.5, 0.0));
        assert!((p.sigma1 - 0.525).abs() < 1e-15 && p.sigma1 == p.sigma2);
        assert!((squash_raw_params(&[0.0, 0.0, 0.0, 0.0, 40.0], &cfg).alpha - PI).abs() < 1e-12);
    }

    #[test]
    fn rescale_examples() {
        let ones = Tensor::ones(&[3, 4]);
        assert_eq!(rescale_map(&ones).unwrap(), ones);
        let c = Tensor::full(&[3, 4], 0.3);
        assert!(rescale_map(&c).unwrap().max_abs_diff(&ones).unwrap() < 1e-15);
        let half = Tensor::from_fn(&[2, 2], |i| (i % 2) as f64);
        assert_eq!(rescale_map(&half).unwrap().data(), &[0.0, 2.0, 0.0, 2.0]);
        assert!(matches!(rescale_map(&Tensor::zeros(&[2, 2])), Err(Error::DegenerateMap { .. })));
    }
}
