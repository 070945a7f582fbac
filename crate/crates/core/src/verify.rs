//! The numerical check battery: gradients, map rescaling, mask-agreement
//! identities, relevance monotonicity, Rademacher and generalization bounds,
//! the mixture separation bounds, equivariance consistency and injectivity.
//!
//! Every check draws from its own stream of the master seed, so the report
//! is a pure function of the seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check, wrap_angle, Tape, Var};
use crate::equivariance::{
    equivariance_loss_batch, sample_transform, transform_params, transform_params_batch, warp_image,
    EquivarianceConfig, TransformSpec,
};
use crate::error::Result;
use crate::nn::{Conv2dLayer, LinearLayer, ParamStore};
use crate::ops::{BinaryKind, ConvSpec, UnaryKind};
use crate::pw::PwModule;
use crate::rect::{
    apply_attention_batch, render_map, render_maps, rescale_map, rescale_maps, squash, RectAttention,
    RectAttentionConfig, RectParams,
};
use crate::tensor::Tensor;
use crate::theory::{
    binarize, bound_experiment, empirical_rademacher, fitting_rate, injectivity_binary_check, iou_bruteforce,
    rademacher_upper_bound, relevance_level, tv_lowerbound_check, BinaryMask, BoundTask, InjectivityOutcome,
    MaskFamily, MixtureSpec,
};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Grid for the equivariance consistency check; at 64x64 the boundary
/// pixels of the thinnest rectangles alone cost several points of IoU.
pub const CONSISTENCY_GRID: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Hex SHA-256 of the check's name, seed and fixed parameters.
    pub inputs_digest: String,
    pub values: BTreeMap<String, f64>,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Corrupts the rescaled maps so that one check fails.
    pub inject_fault: bool,
}

fn check(name: &str, seed: u64, params: &str, threshold: f64, values: &[(&str, f64)], pass: bool) -> CheckResult {
    let digest = Sha256::digest(format!("{name}|seed={seed}|{params}"));
    CheckResult {
        name: name.into(),
        inputs_digest: hex::encode(digest),
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        threshold,
        pass,
    }
}

/// Independent stream `k` of the master seed.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(out * w)` for fixed random weights `w`, so every output component
/// reaches the gradient with a distinct coefficient.
fn weighted<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    Ok(out.mul(out.tape().constant(w))?.sum())
}

/// Worst relative gradient error of `f` with respect to every parameter of
/// `store`, the others held fixed.
fn grad_check_store<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &crate::nn::Bound<'t>) -> Result<Var<'t>>,
{
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let e = grad_check(
            |tape, v| {
                let mut b = store.bind_frozen(tape);
                b.set(id, v);
                f(tape, &b)
            },
            store.get(id),
            GRAD_EPS,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Smallest distance of a test point to a kink, in units of the quantity
/// that crosses it. Central differences straddling a kink measure neither
/// one-sided derivative, so test points closer than this are redrawn.
const KINK_MARGIN: f64 = 1e-3;

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Smallest gap between the two largest entries of any 2x2 pooling window.
fn pool_tie_gap(t: &Tensor) -> f64 {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let mut gap = f64::INFINITY;
    for plane in t.data().chunks(h * w) {
        for i in (0..h - h % 2).step_by(2) {
            for j in (0..w - w % 2).step_by(2) {
                let mut v = [plane[i * w + j], plane[i * w + j + 1], plane[(i + 1) * w + j], plane[(i + 1) * w + j + 1]];
                v.sort_by(|a, b| b.total_cmp(a));
                // two zeros from ReLU tie harmlessly: both stay at zero
                if v[0] > 0.0 {
                    gap = gap.min(v[0] - v[1]);
                }
            }
        }
    }
    gap
}

fn pw_kink_margin(pw: &PwModule, store: &ParamStore, x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let b = store.bind_frozen(&tape);
    let mut h = tape.constant(x.clone());
    let mut margin = f64::INFINITY;
    for layer in [&pw.reduce, &pw.dilated[0], &pw.dilated[1]] {
        let pre = layer.forward(&b, h)?;
        margin = margin.min(min_abs(&pre.value()));
        h = pre.relu();
    }
    Ok(margin)
}

fn predictor_kink_margin(m: &RectAttention, store: &ParamStore, x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let b = store.bind_frozen(&tape);
    let mut h = tape.constant(x.clone());
    let mut margin = f64::INFINITY;
    for (i, conv) in m.predictor.convs.iter().enumerate() {
        let pre = conv.forward(&b, h)?;
        margin = margin.min(min_abs(&pre.value()));
        h = pre.relu();
        if i < 2 {
            margin = margin.min(pool_tie_gap(&h.value()));
            h = h.max_pool2d(2)?;
        }
    }
    Ok(margin)
}

/// Zero biases put every unit fed by an inactive channel exactly on the
/// ReLU kink, where central differences are meaningless.
fn randomize_biases(store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        let t = uniform(rng, store.get(id).shape(), -0.5, 0.5);
        store.set(id, t)?;
    }
    Ok(())
}

/// Named relative gradient errors of every differentiable primitive and
/// layer.
pub fn layer_gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = stream(seed, 100);
    let mut out: Vec<(String, f64)> = Vec::new();
    let x4 = uniform(&mut rng, &[2, 3, 6, 7], -1.0, 1.0);
    let m23 = uniform(&mut rng, &[2, 3], -2.0, 2.0);

    for kind in [
        UnaryKind::Sigmoid,
        UnaryKind::Relu,
        UnaryKind::Tanh,
        UnaryKind::Softplus,
        UnaryKind::Square,
        UnaryKind::Neg,
        UnaryKind::Sin,
        UnaryKind::Cos,
        UnaryKind::Exp,
    ] {
        let e = grad_check(|_, v| weighted(v.unary(kind), 1), &m23, GRAD_EPS)?;
        out.push((format!("unary_{kind:?}").to_lowercase(), e));
    }
    let b3 = uniform(&mut rng, &[3], 0.5, 2.0);
    for (name, kind) in [
        ("add", BinaryKind::Add),
        ("sub", BinaryKind::Sub),
        ("mul", BinaryKind::Mul),
        ("div", BinaryKind::Div),
    ] {
        let lhs = grad_check(|t, v| weighted(v.binary(kind, t.constant(b3.clone()))?, 2), &m23, GRAD_EPS)?;
        // the broadcast operand receives summed gradients
        let rhs = grad_check(|t, v| weighted(t.constant(m23.clone()).binary(kind, v)?, 2), &b3, GRAD_EPS)?;
        out.push((format!("binary_{name}"), lhs.max(rhs)));
    }
    let m34 = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let e = grad_check(|t, v| weighted(v.matmul(t.constant(m34.clone()))?, 3), &m23, GRAD_EPS)?.max(grad_check(
        |t, v| weighted(t.constant(m23.clone()).matmul(v)?, 3),
        &m34,
        GRAD_EPS,
    )?);
    out.push(("matmul".into(), e));
    let e = grad_check(|_, v| weighted(v.scale(-1.7).shift(0.3).reshape(&[3, 2])?, 4), &m23, GRAD_EPS)?;
    out.push(("scale_shift_reshape".into(), e));
    let e = grad_check(|_, v| Ok(v.sum().add(v.mean())?.square()), &m23, GRAD_EPS)?;
    out.push(("sum_mean".into(), e));
    let e = grad_check(|_, v| weighted(v.sum_to(&[1, 3])?, 5), &m23, GRAD_EPS)?;
    out.push(("sum_to".into(), e));
    let e = grad_check(
        |t, v| {
            let a = v.narrow(1, 0, 1)?;
            let b = v.narrow(1, 1, 2)?;
            weighted(t.concat(&[b, a, b], 1)?, 6)
        },
        &m23,
        GRAD_EPS,
    )?;
    out.push(("narrow_concat".into(), e));
    let e = grad_check(|_, v| weighted(v.clamp(-1.0, 1.0), 7), &m23, GRAD_EPS)?;
    out.push(("clamp".into(), e));
    let angles = uniform(&mut rng, &[2, 3], -3.0, 3.0).map(|a| a * 2.0);
    let e = grad_check(|_, v| weighted(v.wrap_angle(), 8), &angles, GRAD_EPS)?;
    out.push(("wrap_angle".into(), e));
    let e = grad_check(|_, v| weighted(v.pad2d(1, 1)?, 9), &x4, GRAD_EPS)?;
    out.push(("pad2d".into(), e));
    let even = uniform(&mut rng, &[2, 3, 6, 8], -1.0, 1.0);
    let e = grad_check(|_, v| weighted(v.max_pool2d(2)?, 10), &even, GRAD_EPS)?;
    out.push(("max_pool2d".into(), e));
    let e = grad_check(|_, v| weighted(v.global_avg_pool()?, 11), &x4, GRAD_EPS)?;
    out.push(("global_avg_pool".into(), e));
    let logits = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    let e = grad_check(|_, v| v.softmax_cross_entropy(&[0, 3, 4, 1]), &logits, GRAD_EPS)?;
    out.push(("softmax_cross_entropy".into(), e));

    let dilated = ConvSpec {
        stride: 1,
        padding: 4,
        dilation: 4,
    };
    let strided = ConvSpec {
        stride: 2,
        padding: 1,
        dilation: 1,
    };
    for (name, k, spec) in [
        ("conv2d_same3", 3, ConvSpec::SAME3),
        ("conv2d_pointwise", 1, ConvSpec::POINTWISE),
        ("conv2d_dilated", 3, dilated),
        ("conv2d_strided", 3, strided),
    ] {
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, "c", 3, 4, k, spec, &mut rng);
        store.set(layer.bias, uniform(&mut rng, &[4], -0.5, 0.5))?;
        let wrt_x = grad_check(|t, v| weighted(layer.forward(&store.bind_frozen(t), v)?, 12), &x4, GRAD_EPS)?;
        let xc = x4.clone();
        let wrt_w = grad_check_store(&store, |t, b| weighted(layer.forward(b, t.constant(xc.clone()))?, 12))?;
        out.push((name.into(), wrt_x.max(wrt_w)));
    }
    let mut store = ParamStore::new();
    let lin = LinearLayer::new(&mut store, "l", 3, 4, &mut rng);
    let wrt_x = grad_check(|t, v| weighted(lin.forward(&store.bind_frozen(t), v)?, 13), &m23, GRAD_EPS)?;
    let wrt_w = grad_check_store(&store, |t, b| weighted(lin.forward(b, t.constant(m23.clone()))?, 13))?;
    out.push(("linear".into(), wrt_x.max(wrt_w)));

    let cfg = RectAttentionConfig::default();
    let raw = uniform(&mut rng, &[2, 5], -1.5, 1.5);
    let e = grad_check(|_, v| weighted(squash(v, &cfg)?, 14), &raw, GRAD_EPS)?;
    out.push(("squash".into(), e));
    let rects = Tensor::new(
        &[2, 5],
        vec![0.45, 0.55, 0.3, 0.2, 0.4, 0.6, 0.4, 0.25, 0.35, -1.1],
    )?;
    let e = grad_check(|_, v| weighted(render_maps(v, 6.0, 6, 7)?, 15), &rects, GRAD_EPS)?;
    out.push(("render_maps".into(), e));
    let maps = uniform(&mut rng, &[2, 6, 7], 0.05, 1.0);
    let e = grad_check(|_, v| weighted(rescale_maps(v)?, 16), &maps, GRAD_EPS)?;
    out.push(("rescale_maps".into(), e));
    for (name, rescale, residual) in [
        ("apply_attention_residual_rescaled", true, true),
        ("apply_attention_plain", false, false),
    ] {
        let e = grad_check(
            |t, v| weighted(apply_attention_batch(t.constant(x4.clone()), v, rescale, residual)?, 17),
            &maps,
            GRAD_EPS,
        )?
        .max(grad_check(
            |t, v| weighted(apply_attention_batch(v, t.constant(maps.clone()), rescale, residual)?, 17),
            &x4,
            GRAD_EPS,
        )?);
        out.push((name.into(), e));
    }

    let (store, pw, small) = loop {
        let mut store = ParamStore::new();
        let pw = PwModule::with_width(&mut store, "pw", 3, 4, &mut rng);
        randomize_biases(&mut store, &mut rng)?;
        let small = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
        if pw_kink_margin(&pw, &store, &small)? > KINK_MARGIN {
            break (store, pw, small);
        }
    };
    let wrt_x = grad_check(|t, v| weighted(pw.forward(&store.bind_frozen(t), v)?, 18), &small, GRAD_EPS)?;
    let wrt_w = grad_check_store(&store, |t, b| weighted(pw.forward(b, t.constant(small.clone()))?, 18))?;
    out.push(("position_wise_module".into(), wrt_x.max(wrt_w)));

    let spec = TransformSpec {
        delta_alpha: 0.4,
        delta_sigma: 1.1,
        delta_mu: [0.05, -0.1],
    };
    let other = Tensor::new(&[2, 5], vec![0.5, 0.45, 0.3, 0.3, 0.1, 0.4, 0.5, 0.2, 0.3, 2.5])?;
    let e = grad_check(
        |t, v| {
            let hat = transform_params_batch(v, &spec, (0.5, 0.5), (0.05, 1.0))?;
            equivariance_loss_batch(t.constant(other.clone()), hat)
        },
        &rects,
        GRAD_EPS,
    )?;
    out.push(("transform_params_equivariance_loss".into(), e));
    Ok(out)
}

/// Relative gradient error of the whole rectangle pipeline (predictor,
/// squashing, rendering, rescaling, residual application) with respect to
/// the input and to every predictor weight.
pub fn pipeline_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 101);
    let (store, module, x) = loop {
        let mut store = ParamStore::new();
        let module = RectAttention::new(&mut store, "p", 3, [4, 4, 4], RectAttentionConfig::default(), &mut rng);
        // the zero-initialized head would block every upstream gradient
        let head = &module.predictor.head;
        store.set(head.weight, uniform(&mut rng, &[5, 4], -1.0, 1.0))?;
        randomize_biases(&mut store, &mut rng)?;
        let x = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        if predictor_kink_margin(&module, &store, &x)? > KINK_MARGIN {
            break (store, module, x);
        }
    };
    let wrt_x = grad_check(
        |t, v| weighted(module.forward(&store.bind_frozen(t), v)?.out, 20),
        &x,
        GRAD_EPS,
    )?;
    let wrt_w = grad_check_store(&store, |t, b| weighted(module.forward(b, t.constant(x.clone()))?.out, 20))?;
    Ok(wrt_x.max(wrt_w))
}

fn random_rect(rng: &mut impl Rng, mu: (f64, f64), sigma: (f64, f64)) -> RectParams {
    RectParams::new(
        (rng.gen_range(mu.0..mu.1), rng.gen_range(mu.0..mu.1)),
        (rng.gen_range(sigma.0..sigma.1), rng.gen_range(sigma.0..sigma.1)),
        rng.gen_range(-PI..PI),
    )
}

/// Largest `|sum(rescaled) - HW| / HW` over `count` random maps: half
/// rendered rectangles, half uniform noise.
pub fn rescale_worst(rng: &mut impl Rng, count: usize, corrupt: bool) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < count {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let f = if done % 2 == 0 {
            let p = random_rect(rng, (0.0, 1.0), (0.05, 1.0));
            render_map(&p, rng.gen_range(1.0..20.0), h, w)
        } else {
            uniform(rng, &[h, w], 0.0, 1.0)
        };
        if f.sum() <= crate::rect::RESCALE_EPS {
            continue;
        }
        let mut g = rescale_map(&f)?;
        if corrupt {
            g = g.map(|v| v * (1.0 + 1e-6));
        }
        let hw = (h * w) as f64;
        worst = worst.max((g.sum() - hw).abs() / hw);
        done += 1;
    }
    Ok(worst)
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.gen_range(0.0..1.0);
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

/// Largest `|fitting_rate - IoU|` over `count` random pairs on grids up to
/// 8x8, skipping pairs with two empty supports.
pub fn fitting_rate_worst(rng: &mut impl Rng, count: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < count {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (a, b) = (random_mask(rng, h, w), random_mask(rng, h, w));
        if a.support_size() == 0 && b.support_size() == 0 {
            continue;
        }
        worst = worst.max((fitting_rate(&a, &b)? - iou_bruteforce(&a, &b)?).abs());
        done += 1;
    }
    Ok(worst)
}

/// Counts violations of relevance monotonicity: growing either family
/// never raises the relevance level.
fn monotone_violations(nested: &[(MaskFamily, MaskFamily)], others: &[MaskFamily]) -> Result<(usize, usize)> {
    let (mut checked, mut bad) = (0, 0);
    for (small, big) in nested {
        for g in others {
            checked += 2;
            if relevance_level(big, g)? > relevance_level(small, g)? {
                bad += 1;
            }
            if relevance_level(g, big)? > relevance_level(g, small)? {
                bad += 1;
            }
        }
    }
    Ok((checked, bad))
}

/// Every nested pair among singletons, axis rectangles and all masks on a
/// 3x3 grid. Returns (comparisons, violations, mis-declared nestings).
pub fn relevance_families_3x3(rng: &mut impl Rng) -> Result<(usize, usize, usize)> {
    let axis = MaskFamily::AxisRectangles { h: 3, w: 3 };
    let all = MaskFamily::AllMasks { h: 3, w: 3 };
    let rect_singletons: Vec<MaskFamily> = axis.enumerate()?.into_iter().map(MaskFamily::Singleton).collect();
    let free_singletons: Vec<MaskFamily> = (0..8).map(|_| MaskFamily::Singleton(random_mask(rng, 3, 3))).collect();
    let mut nested = vec![(axis.clone(), all.clone())];
    for s in &rect_singletons {
        nested.push((s.clone(), axis.clone()));
        nested.push((s.clone(), all.clone()));
    }
    for s in &free_singletons {
        nested.push((s.clone(), all.clone()));
    }
    let mut families: Vec<MaskFamily> = vec![axis, all];
    families.extend(rect_singletons);
    families.extend(free_singletons);
    for f in &families {
        nested.push((f.clone(), f.clone()));
    }
    let mut misdeclared = 0;
    for (a, b) in &nested {
        if !matches!(b, MaskFamily::AllMasks { .. }) && !a.is_subset_of(b)? {
            misdeclared += 1;
        }
    }
    let (checked, bad) = monotone_violations(&nested, &families)?;
    Ok((checked, bad, misdeclared))
}

/// `count` random nested explicit families, each compared against a random
/// third family. Returns (comparisons, violations).
pub fn relevance_random_nested(rng: &mut impl Rng, count: usize) -> Result<(usize, usize)> {
    let (mut checked, mut bad) = (0, 0);
    for _ in 0..count {
        let n = rng.gen_range(3..=4);
        let big: Vec<BinaryMask> = (0..rng.gen_range(2..=8)).map(|_| random_mask(rng, n, n)).collect();
        let keep = rng.gen_range(1..=big.len());
        let small = big[..keep].to_vec();
        let g: Vec<BinaryMask> = (0..rng.gen_range(1..=5)).map(|_| random_mask(rng, n, n)).collect();
        let (c, b) = monotone_violations(
            &[(MaskFamily::Explicit(small), MaskFamily::Explicit(big))],
            &[MaskFamily::Explicit(g)],
        )?;
        checked += c;
        bad += b;
    }
    Ok((checked, bad))
}

/// Rectangle and spec drawn until both the rectangle and its image lie
/// inside the frame with margin and no clamping occurs.
pub fn moderate_pair(rng: &mut impl Rng) -> (RectParams, TransformSpec) {
    let eq = EquivarianceConfig::default();
    loop {
        let p = random_rect(rng, (0.3, 0.7), (0.08, 0.22));
        let spec = sample_transform(rng, &eq);
        let q = transform_params(&p, &spec, eq.center(), (0.05, 1.0));
        if inside_frame(&p, 0.03) && inside_frame(&q, 0.03) {
            return (p, spec);
        }
    }
}

fn inside_frame(p: &RectParams, margin: f64) -> bool {
    let (s, c) = p.alpha.sin_cos();
    [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)].iter().all(|(a, b)| {
        let (d1, d2) = (a * p.sigma1, b * p.sigma2);
        let t1 = p.mu1 + c * d1 - s * d2;
        let t2 = p.mu2 + s * d1 + c * d2;
        (margin..=1.0 - margin).contains(&t1) && (margin..=1.0 - margin).contains(&t2)
    })
}

/// IoU between the rendered transformed rectangle and the warped rendering
/// of the original, both thresholded at one half.
pub fn consistency_iou(p: &RectParams, spec: &TransformSpec, size: usize) -> Result<f64> {
    let c = (0.5, 0.5);
    let direct = binarize(&render_map(&transform_params(p, spec, c, (0.05, 1.0)), 10.0, size, size), 0.5)?;
    let src = binarize(&render_map(p, 10.0, size, size), 0.5)?;
    let indicator = Tensor::new(&[size, size], src.data().iter().map(|&v| if v == 1 { 1.0 } else { 0.0 }).collect())?;
    let warped = binarize(&warp_image(&indicator, spec, c)?, 0.5)?;
    iou_bruteforce(&direct, &warped)
}

/// Worst componentwise gap between applying two specs in turn and applying
/// their composite, over rectangles that avoid clamping.
pub fn composition_worst(rng: &mut impl Rng, count: usize) -> Result<f64> {
    let c = (0.5, 0.5);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < count {
        let p = random_rect(rng, (0.35, 0.65), (0.1, 0.3));
        let s1 = TransformSpec {
            delta_mu: [0.0, 0.0],
            ..sample_transform(rng, &EquivarianceConfig::default())
        };
        let s2 = sample_transform(rng, &EquivarianceConfig::default());
        let bounds = (1e-6, 10.0);
        let stepwise = transform_params(&transform_params(&p, &s1, c, bounds), &s2, c, bounds);
        let mu_ok = |q: &RectParams| (0.0..=1.0).contains(&q.mu1) && (0.0..=1.0).contains(&q.mu2);
        let mid = transform_params(&p, &s1, c, bounds);
        if !mu_ok(&mid) || !mu_ok(&stepwise) {
            continue;
        }
        let direct = transform_params(&p, &s1.then(&s2, c), c, bounds);
        let gaps = [
            stepwise.mu1 - direct.mu1,
            stepwise.mu2 - direct.mu2,
            stepwise.sigma1 - direct.sigma1,
            stepwise.sigma2 - direct.sigma2,
            wrap_angle(stepwise.alpha - direct.alpha),
        ];
        worst = gaps.iter().fold(worst, |m, g| m.max(g.abs()));
        done += 1;
    }
    Ok(worst)
}

/// Runs the battery.
pub fn run_all(opts: VerifyOptions) -> Result<VerifyReport> {
    let seed = opts.seed;
    let mut checks = Vec::new();

    let layers = layer_gradient_errors(seed)?;
    let worst = layers.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let values: Vec<(&str, f64)> = layers.iter().map(|(n, e)| (n.as_str(), *e)).collect();
    checks.push(check("gradient_layers", seed, "eps=1e-5", GRAD_TOL, &values, worst <= GRAD_TOL));

    let e = pipeline_gradient_error(seed)?;
    checks.push(check(
        "gradient_rect_pipeline",
        seed,
        "widths=4,4,4;input=2x3x8x8;eps=1e-5",
        GRAD_TOL,
        &[("max_relative_error", e)],
        e <= GRAD_TOL,
    ));

    let worst = rescale_worst(&mut stream(seed, 1), 1000, opts.inject_fault)?;
    checks.push(check(
        "rescale_sum",
        seed,
        "maps=1000;hw<=16",
        1e-9,
        &[("max_relative_sum_error", worst)],
        worst <= 1e-9,
    ));

    let worst = fitting_rate_worst(&mut stream(seed, 2), 1000)?;
    checks.push(check(
        "fitting_rate_equals_iou",
        seed,
        "pairs=1000;hw<=8",
        1e-12,
        &[("max_abs_gap", worst)],
        worst <= 1e-12,
    ));

    let (n, bad, mis) = relevance_families_3x3(&mut stream(seed, 3))?;
    checks.push(check(
        "relevance_monotone_families",
        seed,
        "grid=3x3;families=singleton,axis_rectangles,all_masks",
        0.0,
        &[("comparisons", n as f64), ("violations", bad as f64), ("misdeclared_nestings", mis as f64)],
        bad == 0 && mis == 0 && n > 0,
    ));

    let (n, bad) = relevance_random_nested(&mut stream(seed, 4), 100)?;
    checks.push(check(
        "relevance_monotone_explicit",
        seed,
        "pairs=100",
        0.0,
        &[("comparisons", n as f64), ("violations", bad as f64)],
        bad == 0,
    ));

    // the shortcut for all-mask families against the exhaustive minimum
    let mut rng = stream(seed, 5);
    let all = MaskFamily::AllMasks { h: 3, w: 3 };
    let g = MaskFamily::Explicit((0..4).map(|_| random_mask(&mut rng, 3, 3)).collect());
    let shortcut = relevance_level(&all, &g)?;
    let exhaustive = relevance_level(&MaskFamily::Explicit(all.enumerate()?), &g)?;
    checks.push(check(
        "relevance_all_masks",
        seed,
        "grid=3x3",
        0.0,
        &[("closed_form", shortcut), ("enumerated", exhaustive)],
        shortcut == -1.0 && exhaustive == -1.0,
    ));

    let mut rng = stream(seed, 6);
    let sample: Vec<(usize, BinaryMask)> = (0..50).map(|i| (i, random_mask(&mut rng, 4, 4))).collect();
    let est = empirical_rademacher(&all_masks(4), &sample, 10_000, &mut rng)?;
    let rho = relevance_level(
        &MaskFamily::Explicit(all_masks(3).enumerate()?),
        &MaskFamily::AxisRectangles { h: 3, w: 3 },
    )?;
    let cap = rademacher_upper_bound(rho) + 3.0 * est.stderr;
    checks.push(check(
        "rademacher_all_masks",
        seed,
        "n=50;grid=4x4;draws=10000",
        0.02,
        &[("estimate", est.mean), ("stderr", est.stderr), ("rho_enumerated", rho), ("cap", cap)],
        (est.mean - 0.5).abs() <= 0.02 && est.mean <= cap,
    ));

    let mut rng = stream(seed, 7);
    let axis = MaskFamily::AxisRectangles { h: 3, w: 3 };
    let gts: Vec<BinaryMask> = (0..30).map(|_| random_mask(&mut rng, 3, 3)).collect();
    let sample: Vec<(usize, BinaryMask)> = gts.iter().cloned().enumerate().collect();
    let est = empirical_rademacher(&axis, &sample, 2000, &mut rng)?;
    let rho = relevance_level(&axis, &MaskFamily::Explicit(gts))?;
    let cap = rademacher_upper_bound(rho) + 3.0 * est.stderr;
    checks.push(check(
        "rademacher_axis_rectangles",
        seed,
        "n=30;grid=3x3;draws=2000",
        cap,
        &[("estimate", est.mean), ("stderr", est.stderr), ("rho", rho)],
        est.mean <= cap,
    ));

    let mut rng = stream(seed, 8);
    let task = BoundTask::random(&mut rng, 12, 3, 3)?;
    let rep = bound_experiment(&task, &axis, 200, 50, 0.05, &mut rng)?;
    checks.push(check(
        "generalization_bound",
        seed,
        "inputs=12;grid=3x3;trials=200;n=50;delta=0.05",
        0.10,
        &[
            ("violation_fraction", rep.violation_fraction),
            ("rho", rep.rho),
            ("max_gap", rep.max_gap),
        ],
        rep.violation_fraction <= 0.10,
    ));

    let mut rng = stream(seed, 9);
    let (mut pairs, mut bad1, mut disjoint_pairs, mut bad2, mut min_slack) = (0, 0, 0, 0, f64::INFINITY);
    for i in 0..100 {
        let classes = rng.gen_range(2..=4);
        let n = rng.gen_range(classes.max(4)..=64);
        let spec = MixtureSpec::random(&mut rng, n, classes, i % 2 == 0)?;
        for y in 0..classes {
            for y2 in 0..classes {
                if y == y2 {
                    continue;
                }
                let r = tv_lowerbound_check(&spec, y, y2)?;
                pairs += 1;
                min_slack = min_slack.min(r.lhs - r.bound1);
                if r.lhs + 1e-12 < r.bound1 {
                    bad1 += 1;
                }
                if let Some(b2) = r.bound2 {
                    disjoint_pairs += 1;
                    if r.lhs + 1e-12 < b2 {
                        bad2 += 1;
                    }
                }
            }
        }
    }
    checks.push(check(
        "separation_bound_infimum",
        seed,
        "specs=100;support<=64",
        0.0,
        &[("pairs", pairs as f64), ("violations", bad1 as f64), ("min_slack", min_slack)],
        bad1 == 0,
    ));
    checks.push(check(
        "separation_bound_disjoint",
        seed,
        "specs=50 disjoint;support<=64",
        0.0,
        &[("pairs", disjoint_pairs as f64), ("violations", bad2 as f64)],
        bad2 == 0 && disjoint_pairs > 0,
    ));

    let mut rng = stream(seed, 10);
    let mut worst_iou: f64 = 1.0;
    let mut sum = 0.0;
    for _ in 0..200 {
        let (p, spec) = moderate_pair(&mut rng);
        let iou = consistency_iou(&p, &spec, CONSISTENCY_GRID)?;
        worst_iou = worst_iou.min(iou);
        sum += iou;
    }
    checks.push(check(
        "equivariance_consistency",
        seed,
        "pairs=200;grid=128x128",
        0.9,
        &[("min_iou", worst_iou), ("mean_iou", sum / 200.0)],
        worst_iou >= 0.9,
    ));

    let worst = composition_worst(&mut stream(seed, 11), 500)?;
    checks.push(check(
        "transform_composition",
        seed,
        "pairs=500",
        1e-12,
        &[("max_abs_gap", worst)],
        worst <= 1e-12,
    ));

    let mut rng = stream(seed, 12);
    let cases: Vec<_> = (0..200)
        .map(|_| {
            let x = uniform(&mut rng, &[2, 4, 4], -1.0, 1.0);
            let mut x2 = x.data().to_vec();
            let k = rng.gen_range(0..x2.len());
            x2[k] += rng.gen_range(0.1..1.0);
            let x2 = Tensor::new(x.shape(), x2).expect("same shape");
            (x, x2, random_mask(&mut rng, 4, 4), random_mask(&mut rng, 4, 4))
        })
        .collect();
    let outcomes = injectivity_binary_check(&cases)?;
    let applicable = outcomes
        .iter()
        .filter(|o| matches!(o, InjectivityOutcome::ConditionHolds { .. }))
        .count();
    let collisions = outcomes
        .iter()
        .filter(|o| **o == InjectivityOutcome::ConditionHolds { outputs_differ: false })
        .count();
    checks.push(check(
        "injectivity_binary",
        seed,
        "pairs=200;shape=2x4x4",
        0.0,
        &[("applicable", applicable as f64), ("collisions", collisions as f64)],
        collisions == 0 && applicable > 0,
    ));

    let mut rng = stream(seed, 13);
    let rect = random_rect(&mut rng, (0.3, 0.7), (0.1, 0.4));
    let map = render_map(&rect, 6.0, 6, 6);
    let max_f = map.data().iter().fold(0.0f64, |m, v| m.max(*v));
    let rep = crate::theory::contraction_check(|_| Ok(map.clone()), &[2, 6, 6], 0.5, 500, &mut rng)?;
    checks.push(check(
        "contraction",
        seed,
        "pairs=500;shape=2x6x6;delta=0.5",
        1.0,
        &[("max_ratio", rep.max_ratio), ("max_attention_squared", max_f * max_f)],
        rep.max_ratio < 1.0 && rep.max_ratio <= max_f * max_f + 1e-12 && rep.injective_on_sample,
    ));

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { seed, checks, all_pass })
}

fn all_masks(n: usize) -> MaskFamily {
    MaskFamily::AllMasks { h: n, w: n }
}
