//! Rotation-scaling-translation transforms of images and of rectangle
//! parameters, and the penalty tying the two together.
//!
//! A [`TransformSpec`] acts on normalized coordinates as
//! `T(t) = ds * (R_da (t - c) + c) + dmu`: rotation by `da` about the center
//! `c`, scaling by `ds`, translation by `dmu`. Rectangle parameters transform
//! by the same map applied to the center, plus `da` added to the angle and
//! `ds` multiplying both half-extents. Images are resampled through `T^-1`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{wrap_angle, Var};
use crate::error::{Error, Result};
use crate::rect::{grid_coord, rotate_point, RectParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub delta_alpha: f64,
    pub delta_sigma: f64,
    pub delta_mu: [f64; 2],
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        delta_alpha: 0.0,
        delta_sigma: 1.0,
        delta_mu: [0.0, 0.0],
    };

    /// `T(t)` in normalized coordinates.
    pub fn forward_point(&self, c: (f64, f64), t: (f64, f64)) -> (f64, f64) {
        let r = rotate_point(self.delta_alpha, c, t);
        (
            self.delta_sigma * r.0 + self.delta_mu[0],
            self.delta_sigma * r.1 + self.delta_mu[1],
        )
    }

    /// `T^-1(t)`.
    pub fn inverse_point(&self, c: (f64, f64), t: (f64, f64)) -> (f64, f64) {
        let u = (
            (t.0 - self.delta_mu[0]) / self.delta_sigma,
            (t.1 - self.delta_mu[1]) / self.delta_sigma,
        );
        rotate_point(-self.delta_alpha, c, u)
    }

    /// The spec of `second` applied after `self`, about the same center.
    pub fn then(&self, second: &TransformSpec, c: (f64, f64)) -> TransformSpec {
        let ds = self.delta_sigma * second.delta_sigma;
        // the composite keeps the form ds (R (t - c) + c) + dmu; its offset
        // is whatever T2(T1(c)) leaves after removing ds * c.
        let img = second.forward_point(c, self.forward_point(c, c));
        TransformSpec {
            delta_alpha: wrap_angle(self.delta_alpha + second.delta_alpha),
            delta_sigma: ds,
            delta_mu: [img.0 - ds * c.0, img.1 - ds * c.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivarianceConfig {
    pub center: [f64; 2],
    pub lambda: f64,
    pub alpha_range: [f64; 2],
    pub sigma_range: [f64; 2],
    pub mu_range: [f64; 2],
}

impl Default for EquivarianceConfig {
    fn default() -> Self {
        Self {
            center: [0.5, 0.5],
            lambda: 0.1,
            alpha_range: [-PI / 4.0, PI / 4.0],
            sigma_range: [0.8, 1.25],
            mu_range: [-0.2, 0.2],
        }
    }
}

impl EquivarianceConfig {
    pub fn center(&self) -> (f64, f64) {
        (self.center[0], self.center[1])
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !ordered(self.alpha_range) || !ordered(self.sigma_range) || !ordered(self.mu_range) {
            return Err(Error::InvalidArgument("transform ranges must be finite and ordered".into()));
        }
        if self.sigma_range[0] <= 0.0 {
            return Err(Error::InvalidArgument("scale range must be positive".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Uniform draw of each component within its configured range.
pub fn sample_transform(rng: &mut impl Rng, cfg: &EquivarianceConfig) -> TransformSpec {
    let delta_alpha = draw(rng, cfg.alpha_range);
    let delta_sigma = draw(rng, cfg.sigma_range);
    let m0 = draw(rng, cfg.mu_range);
    let m1 = draw(rng, cfg.mu_range);
    TransformSpec {
        delta_alpha,
        delta_sigma,
        delta_mu: [m0, m1],
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let k = wy * wx;
            if k != 0.0 {
                v += k * at(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Resamples a `[C, H, W]` or `[H, W]` image so that content at `t` moves to
/// `T(t)`. Bilinear interpolation, zero outside the source frame.
pub fn warp_image(img: &Tensor, spec: &TransformSpec, c: (f64, f64)) -> Result<Tensor> {
    let s = img.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!("warp_image: need rank >= 2, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let hw = h * w;
    // source pixel coordinates for every output pixel, shared by all planes
    let src: Vec<(f64, f64)> = (0..hw)
        .map(|k| {
            let t = (grid_coord(k / w, h), grid_coord(k % w, w));
            let u = spec.inverse_point(c, t);
            let py = if h == 1 { 0.0 } else { u.0 * (h - 1) as f64 };
            let px = if w == 1 { 0.0 } else { u.1 * (w - 1) as f64 };
            (py, px)
        })
        .collect();
    let mut out = Vec::with_capacity(img.len());
    for plane in img.data().chunks(hw) {
        out.extend(src.iter().map(|&(py, px)| bilinear(plane, h, w, py, px)));
    }
    Tensor::new(s, out)
}

/// Applies [`warp_image`] to every image of an `[N, C, H, W]` batch.
pub fn warp_batch(x: &Tensor, spec: &TransformSpec, c: (f64, f64)) -> Result<Tensor> {
    warp_image(x, spec, c)
}

/// The parameter-space image of a transform, clamped to valid ranges.
pub fn transform_params(p: &RectParams, spec: &TransformSpec, c: (f64, f64), sigma_bounds: (f64, f64)) -> RectParams {
    let mu = spec.forward_point(c, p.mu());
    let (lo, hi) = sigma_bounds;
    RectParams {
        mu1: mu.0.clamp(0.0, 1.0),
        mu2: mu.1.clamp(0.0, 1.0),
        sigma1: (spec.delta_sigma * p.sigma1).clamp(lo, hi),
        sigma2: (spec.delta_sigma * p.sigma2).clamp(lo, hi),
        alpha: wrap_angle(p.alpha + spec.delta_alpha),
    }
}

/// Tape version of [`transform_params`] on `[N, 5]` rectangles.
pub fn transform_params_batch<'t>(
    p: Var<'t>,
    spec: &TransformSpec,
    c: (f64, f64),
    sigma_bounds: (f64, f64),
) -> Result<Var<'t>> {
    let tape = p.tape();
    let (sa, ca) = spec.delta_alpha.sin_cos();
    let ds = spec.delta_sigma;
    let d1 = p.narrow(1, 0, 1)?.shift(-c.0);
    let d2 = p.narrow(1, 1, 1)?.shift(-c.1);
    let mu1 = d1
        .scale(ca)
        .add(d2.scale(-sa))?
        .shift(c.0)
        .scale(ds)
        .shift(spec.delta_mu[0])
        .clamp(0.0, 1.0);
    let mu2 = d1
        .scale(sa)
        .add(d2.scale(ca))?
        .shift(c.1)
        .scale(ds)
        .shift(spec.delta_mu[1])
        .clamp(0.0, 1.0);
    let sigma = p.narrow(1, 2, 2)?.scale(ds).clamp(sigma_bounds.0, sigma_bounds.1);
    let alpha = p.narrow(1, 4, 1)?.shift(spec.delta_alpha).wrap_angle();
    tape.concat(&[mu1, mu2, sigma, alpha], 1)
}

/// Squared distance over centers and half-extents plus the squared wrapped
/// angle difference.
pub fn equivariance_loss(a: &RectParams, b: &RectParams) -> f64 {
    let sq = |x: f64| x * x;
    sq(a.mu1 - b.mu1)
        + sq(a.mu2 - b.mu2)
        + sq(a.sigma1 - b.sigma1)
        + sq(a.sigma2 - b.sigma2)
        + sq(wrap_angle(a.alpha - b.alpha))
}

/// Tape version of [`equivariance_loss`], averaged over the batch.
pub fn equivariance_loss_batch<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let n = a.shape()[0] as f64;
    let lin = a.narrow(1, 0, 4)?.sub(b.narrow(1, 0, 4)?)?.square().sum();
    let ang = a.narrow(1, 4, 1)?.sub(b.narrow(1, 4, 1)?)?.wrap_angle().square().sum();
    Ok(lin.add(ang)?.scale(1.0 / n))
}

/// `l_main + lambda * l_eq`.
pub fn combined_loss(l_main: f64, l_eq: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(l_main + lambda * l_eq)
}

/// Tape version of [`combined_loss`].
pub fn combined_loss_var<'t>(l_main: Var<'t>, l_eq: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    l_main.add(l_eq.scale(lambda))
}
