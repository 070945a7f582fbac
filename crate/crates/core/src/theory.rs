//! Agreement rates between binary masks, hypothesis families of masks, and
//! the generalization and separation bounds built on them.
//!
//! Masks take values in `{-1, +1}`. The catching rate `psi` is the mean
//! elementwise product of two masks, the missing rate is `(1 - psi) / 2`,
//! and the fitting rate is the intersection-over-union of the `+1` supports,
//! computed from `psi` and the missing rate of the complements.

use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper limit on the number of masks any family may enumerate.
pub const MAX_ENUMERATION: usize = 1 << 16;
/// Upper limit on the universe size of a mixture checked for separation.
pub const MAX_SUPPORT: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<i8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<i8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::ZeroExtent(vec![h, w]));
        }
        if data.len() != h * w {
            return Err(Error::LengthMismatch {
                shape: vec![h, w],
                len: data.len(),
            });
        }
        if data.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::InvalidArgument("mask entries must be -1 or +1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|k| if f(k / w, k % w) { 1 } else { -1 }).collect();
        Self::new(h, w, data).expect("from_fn: positive extents")
    }

    pub fn full(h: usize, w: usize, positive: bool) -> Self {
        Self::from_fn(h, w, |_, _| positive)
    }

    /// Mask whose `+1` cells are the set bits of `bits`, row-major.
    pub fn from_bits(h: usize, w: usize, bits: u64) -> Self {
        Self::from_fn(h, w, |i, j| bits >> (i * w + j) & 1 == 1)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.data[i * self.w + j]
    }

    /// Number of `+1` cells.
    pub fn support_size(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn negate(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }

    fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "mask",
                lhs: vec![self.h, self.w],
                rhs: vec![other.h, other.w],
            })
        }
    }
}

/// `+1` where `f >= threshold`, `-1` elsewhere. `f` is `[H, W]`.
pub fn binarize(f: &Tensor, threshold: f64) -> Result<BinaryMask> {
    if f.rank() != 2 {
        return Err(Error::InvalidArgument(format!("binarize: expected [H, W], got {:?}", f.shape())));
    }
    let (h, w) = (f.shape()[0], f.shape()[1]);
    Ok(BinaryMask::from_fn(h, w, |i, j| f.data()[i * w + j] >= threshold))
}

/// Mean elementwise product of two equally sized real grids.
pub fn catching_rate_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "catching_rate",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64)
}

/// `(1 - psi(a, b)) / 2` on real grids.
pub fn missing_rate_values(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((1.0 - catching_rate_values(a, b)?) / 2.0)
}

/// Agreement in `[-1, 1]`; 1 iff the masks are equal.
pub fn catching_rate(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let s: i64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x * y) as i64).sum();
    Ok(s as f64 / a.data.len() as f64)
}

/// Fraction of disagreeing cells, `(1 - psi) / 2`.
pub fn missing_rate(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok((1.0 - catching_rate(a, b)?) / 2.0)
}

/// `psi((a+1)/2, (b+1)/2) / (2 phi((1-a)/2, (1-b)/2))`: the catching rate of
/// the support indicators over twice the missing rate of the complement
/// indicators.
pub fn fitting_rate(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let pos = |m: &BinaryMask| m.as_f64().iter().map(|v| (v + 1.0) / 2.0).collect::<Vec<_>>();
    let neg = |m: &BinaryMask| m.as_f64().iter().map(|v| (1.0 - v) / 2.0).collect::<Vec<_>>();
    let num = catching_rate_values(&pos(a), &pos(b))?;
    let den = 2.0 * missing_rate_values(&neg(a), &neg(b))?;
    if den <= 0.0 {
        return Err(Error::Undefined("fitting rate of two empty supports".into()));
    }
    Ok(num / den)
}

/// `|S_a n S_b| / |S_a u S_b|` by explicit set construction.
pub fn iou_bruteforce(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let support = |m: &BinaryMask| -> HashSet<(usize, usize)> {
        (0..m.h)
            .flat_map(|i| (0..m.w).map(move |j| (i, j)))
            .filter(|&(i, j)| m.get(i, j) == 1)
            .collect()
    };
    let (sa, sb) = (support(a), support(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return Err(Error::Undefined("IoU of two empty supports".into()));
    }
    Ok(sa.intersection(&sb).count() as f64 / union as f64)
}

/// A set of masks on a common grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    Explicit(Vec<BinaryMask>),
    AllMasks { h: usize, w: usize },
    /// Every non-empty axis-aligned rectangle of cells.
    AxisRectangles { h: usize, w: usize },
    Singleton(BinaryMask),
}

impl MaskFamily {
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self {
            MaskFamily::Explicit(ms) => {
                let first = ms.first().ok_or_else(|| Error::InvalidArgument("empty mask family".into()))?;
                if ms.iter().any(|m| m.dims() != first.dims()) {
                    return Err(Error::InvalidArgument("mask family members differ in size".into()));
                }
                Ok(first.dims())
            }
            MaskFamily::AllMasks { h, w } | MaskFamily::AxisRectangles { h, w } => Ok((*h, *w)),
            MaskFamily::Singleton(m) => Ok(m.dims()),
        }
    }

    /// Number of members, without enumerating.
    pub fn size(&self) -> Result<u128> {
        let (h, w) = self.dims()?;
        Ok(match self {
            MaskFamily::Explicit(ms) => ms.len() as u128,
            MaskFamily::AllMasks { .. } => {
                if h * w >= 128 {
                    u128::MAX
                } else {
                    1u128 << (h * w)
                }
            }
            MaskFamily::AxisRectangles { .. } => ((h * (h + 1) / 2) * (w * (w + 1) / 2)) as u128,
            MaskFamily::Singleton(_) => 1,
        })
    }

    /// Every member, in a fixed order.
    pub fn enumerate(&self) -> Result<Vec<BinaryMask>> {
        let (h, w) = self.dims()?;
        let size = self.size()?;
        if size > MAX_ENUMERATION as u128 {
            return Err(Error::EnumerationTooLarge {
                what: "mask family",
                size,
            });
        }
        Ok(match self {
            MaskFamily::Explicit(ms) => ms.clone(),
            MaskFamily::Singleton(m) => vec![m.clone()],
            MaskFamily::AllMasks { .. } => (0..size as u64).map(|b| BinaryMask::from_bits(h, w, b)).collect(),
            MaskFamily::AxisRectangles { .. } => {
                let mut out = Vec::with_capacity(size as usize);
                for r0 in 0..h {
                    for r1 in r0..h {
                        for c0 in 0..w {
                            for c1 in c0..w {
                                out.push(BinaryMask::from_fn(h, w, |i, j| {
                                    (r0..=r1).contains(&i) && (c0..=c1).contains(&j)
                                }));
                            }
                        }
                    }
                }
                out
            }
        })
    }

    pub fn contains(&self, m: &BinaryMask) -> Result<bool> {
        if self.dims()? != m.dims() {
            return Ok(false);
        }
        Ok(match self {
            MaskFamily::AllMasks { .. } => true,
            MaskFamily::Singleton(s) => s == m,
            MaskFamily::Explicit(ms) => ms.contains(m),
            MaskFamily::AxisRectangles { .. } => is_axis_rectangle(m),
        })
    }

    pub fn is_subset_of(&self, other: &MaskFamily) -> Result<bool> {
        for m in self.enumerate()? {
            if !other.contains(&m)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn is_all_masks(&self) -> bool {
        matches!(self, MaskFamily::AllMasks { .. })
    }
}

fn is_axis_rectangle(m: &BinaryMask) -> bool {
    let (h, w) = m.dims();
    let cells: Vec<(usize, usize)> = (0..h * w)
        .filter(|k| m.data[*k] == 1)
        .map(|k| (k / w, k % w))
        .collect();
    if cells.is_empty() {
        return false;
    }
    let r0 = cells.iter().map(|c| c.0).min().unwrap_or(0);
    let r1 = cells.iter().map(|c| c.0).max().unwrap_or(0);
    let c0 = cells.iter().map(|c| c.1).min().unwrap_or(0);
    let c1 = cells.iter().map(|c| c.1).max().unwrap_or(0);
    cells.len() == (r1 - r0 + 1) * (c1 - c0 + 1)
}

/// Worst-case catching rate between any output mask and any admissible
/// ground-truth mask. When either family holds every mask the value is -1
/// exactly, since it contains the negation of every mask of the other.
pub fn relevance_level(family_out: &MaskFamily, family_in: &MaskFamily) -> Result<f64> {
    if family_out.dims()? != family_in.dims()? {
        return Err(Error::InvalidArgument("relevance_level: families differ in grid size".into()));
    }
    if family_out.is_all_masks() || family_in.is_all_masks() {
        return Ok(-1.0);
    }
    let outs = family_out.enumerate()?;
    let ins = family_in.enumerate()?;
    let mut worst = f64::INFINITY;
    for a in &outs {
        for b in &ins {
            worst = worst.min(catching_rate(a, b)?);
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
}

/// Monte-Carlo estimate of the empirical Rademacher complexity of the
/// missing-rate losses of every function mapping inputs into the family.
///
/// `sample` pairs an input identifier with its ground-truth mask. Entries
/// with the same identifier must receive the same output mask; distinct
/// identifiers choose independently, so the supremum splits per input.
pub fn empirical_rademacher(
    family: &MaskFamily,
    sample: &[(usize, BinaryMask)],
    draws: usize,
    rng: &mut impl Rng,
) -> Result<RademacherEstimate> {
    if sample.is_empty() || draws == 0 {
        return Err(Error::InvalidArgument("empirical_rademacher: need samples and draws".into()));
    }
    let dims = family.dims()?;
    if sample.iter().any(|(_, m)| m.dims() != dims) {
        return Err(Error::InvalidArgument("empirical_rademacher: sample mask size differs from family".into()));
    }
    let n = sample.len();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (x, _)) in sample.iter().enumerate() {
        groups.entry(*x).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let members = if family.is_all_masks() { Vec::new() } else { family.enumerate()? };
    // phi[m][i] = missing rate of member m against sample i
    let phi: Vec<Vec<f64>> = members
        .iter()
        .map(|m| sample.iter().map(|(_, g)| missing_rate(m, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let hw = (dims.0 * dims.1) as f64;
    let mut values = Vec::with_capacity(draws);
    let mut sigma = vec![0.0; n];
    for _ in 0..draws {
        for s in sigma.iter_mut() {
            *s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let mut total = 0.0;
        for g in &groups {
            if family.is_all_masks() {
                // every cell is chosen independently: count the sigma mass
                // that disagrees with each choice and keep the larger
                for cell in 0..dims.0 * dims.1 {
                    let (mut plus, mut minus) = (0.0f64, 0.0f64);
                    for &i in g {
                        if sample[i].1.data[cell] == 1 {
                            minus += sigma[i];
                        } else {
                            plus += sigma[i];
                        }
                    }
                    total += plus.max(minus) / hw;
                }
            } else {
                total += phi
                    .iter()
                    .map(|row| g.iter().map(|&i| sigma[i] * row[i]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        values.push(total / n as f64);
    }
    let mean = values.iter().sum::<f64>() / draws as f64;
    let var = if draws > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64
    } else {
        0.0
    };
    Ok(RademacherEstimate {
        mean,
        stderr: (var / draws as f64).sqrt(),
        draws,
    })
}

/// Upper bound `(1 - rho) / 4` on the Rademacher complexity.
pub fn rademacher_upper_bound(rho: f64) -> f64 {
    (1.0 - rho) / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub delta: f64,
    pub empirical_error: f64,
    pub rho: f64,
}

/// `R_hat + (1 - rho)/2 + 3 sqrt(ln(2/delta) / (2N))`.
pub fn bound_rhs(b: &BoundInputs) -> Result<f64> {
    if b.n == 0 {
        return Err(Error::InvalidArgument("bound: N must be positive".into()));
    }
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return Err(Error::InvalidArgument(format!("bound: delta must lie in (0, 1), got {}", b.delta)));
    }
    if !(-1.0..=1.0).contains(&b.rho) {
        return Err(Error::InvalidArgument(format!("bound: rho must lie in [-1, 1], got {}", b.rho)));
    }
    if !(0.0..=1.0).contains(&b.empirical_error) {
        return Err(Error::InvalidArgument(format!(
            "bound: empirical error must lie in [0, 1], got {}",
            b.empirical_error
        )));
    }
    Ok(b.empirical_error + (1.0 - b.rho) / 2.0 + 3.0 * ((2.0 / b.delta).ln() / (2.0 * b.n as f64)).sqrt())
}

/// A finite task: inputs drawn with probabilities `probs`, input `x` having
/// ground-truth mask `gt[x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTask {
    pub probs: Vec<f64>,
    pub gt: Vec<BinaryMask>,
}

impl BoundTask {
    /// `inputs` inputs with random weights, each labelled with a random
    /// axis rectangle on an `h x w` grid.
    pub fn random(rng: &mut impl Rng, inputs: usize, h: usize, w: usize) -> Result<Self> {
        let rects = MaskFamily::AxisRectangles { h, w }.enumerate()?;
        let raw: Vec<f64> = (0..inputs).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            probs: raw.iter().map(|p| p / total).collect(),
            gt: (0..inputs).map(|_| rects[rng.gen_range(0..rects.len())].clone()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundExperimentReport {
    pub trials: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    pub rho: f64,
    /// Largest observed `R(f) - R_hat(f)` over all trials.
    pub max_gap: f64,
}

/// Draws `trials` training sets of size `n` and counts those in which some
/// function into `family` has true risk above [`bound_rhs`].
///
/// The task is finite, so the worst function is found exactly: each input
/// independently picks the member with the most (or least) missing rate,
/// depending on whether the sample under- or over-represents it.
pub fn bound_experiment(
    task: &BoundTask,
    family: &MaskFamily,
    trials: usize,
    n: usize,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<BoundExperimentReport> {
    if task.probs.len() != task.gt.len() || task.probs.is_empty() {
        return Err(Error::InvalidArgument("bound_experiment: task probabilities and masks disagree".into()));
    }
    let members = family.enumerate()?;
    let rho = relevance_level(family, &MaskFamily::Explicit(task.gt.clone()))?;
    let mut lo = Vec::with_capacity(task.gt.len());
    let mut hi = Vec::with_capacity(task.gt.len());
    for g in &task.gt {
        let phis = members.iter().map(|m| missing_rate(m, g)).collect::<Result<Vec<_>>>()?;
        lo.push(phis.iter().copied().fold(f64::INFINITY, f64::min));
        hi.push(phis.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let sampler = WeightedIndex::new(&task.probs).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for _ in 0..trials {
        let mut counts = vec![0usize; task.probs.len()];
        for _ in 0..n {
            counts[sampler.sample(rng)] += 1;
        }
        let (mut true_risk, mut emp_risk) = (0.0, 0.0);
        for x in 0..task.probs.len() {
            let p_hat = counts[x] as f64 / n as f64;
            let phi = if task.probs[x] >= p_hat { hi[x] } else { lo[x] };
            true_risk += task.probs[x] * phi;
            emp_risk += p_hat * phi;
        }
        max_gap = max_gap.max(true_risk - emp_risk);
        let rhs = bound_rhs(&BoundInputs {
            n,
            delta,
            empirical_error: emp_risk.clamp(0.0, 1.0),
            rho,
        })?;
        if true_risk > rhs {
            violations += 1;
        }
    }
    Ok(BoundExperimentReport {
        trials,
        violations,
        violation_fraction: violations as f64 / trials.max(1) as f64,
        rho,
        max_gap,
    })
}

/// Probability vector over a finite universe `0..len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("distribution needs finite non-negative weights".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("distribution sums to {s}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) {
            return Err(Error::InvalidArgument("weights must have positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / s).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i)
    }
}

/// Half the L1 distance, equal to the largest event-probability gap.
pub fn tv_distance(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "tv_distance",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Class-conditional densities as a pointwise mixture of a class-specific
/// pure part and a shared background, weighted by `lambda` per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub pure: Vec<DiscreteDist>,
    pub background: DiscreteDist,
    pub lambda: Vec<f64>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.background.len();
        if self.pure.is_empty() || self.pure.iter().any(|p| p.len() != n) || self.lambda.len() != n {
            return Err(Error::InvalidArgument("mixture: universes differ in size".into()));
        }
        if self.lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument("mixture: lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Background normalizer of class `y`.
    pub fn eta(&self, y: usize) -> Result<f64> {
        self.validate()?;
        let pure = self.pure.get(y).ok_or_else(|| Error::InvalidArgument(format!("no class {y}")))?;
        let dot = |d: &DiscreteDist| d.probs.iter().zip(&self.lambda).map(|(p, l)| p * l).sum::<f64>();
        let num = 1.0 - dot(pure);
        let den = 1.0 - dot(&self.background);
        if den.abs() <= 1e-15 {
            // the background term vanishes everywhere; any eta gives the same
            // density, provided the pure part alone is normalized
            if num.abs() <= 1e-12 {
                return Ok(1.0);
            }
            return Err(Error::Undefined(format!("background normalizer of class {y}")));
        }
        Ok(num / den)
    }

    /// Random spec with `classes` pure parts on a universe of `n` points,
    /// pure supports pairwise disjoint when `disjoint` is set, and lambda
    /// taken as the fitting rate of random rectangle pairs on a 4x4 grid.
    pub fn random(rng: &mut impl Rng, n: usize, classes: usize, disjoint: bool) -> Result<Self> {
        if n < classes || classes == 0 {
            return Err(Error::InvalidArgument("mixture: need at least one point per class".into()));
        }
        let rects = MaskFamily::AxisRectangles { h: 4, w: 4 }.enumerate()?;
        let owner: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.gen_range(0..classes) }).collect();
        let pure = (0..classes)
            .map(|c| {
                let w: Vec<f64> = (0..n)
                    .map(|i| {
                        let keep = !disjoint || owner[i] == c;
                        if keep && (owner[i] == c || rng.gen_bool(0.5)) {
                            rng.gen_range(0.05..1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                DiscreteDist::from_weights(&w)
            })
            .collect::<Result<Vec<_>>>()?;
        let bg: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let lambda = (0..n)
            .map(|_| {
                let a = &rects[rng.gen_range(0..rects.len())];
                let b = &rects[rng.gen_range(0..rects.len())];
                fitting_rate(a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pure,
            background: DiscreteDist::from_weights(&bg)?,
            lambda,
        })
    }
}

/// `p_y = lambda p_y_pure + eta_y (1 - lambda) p_background`, pointwise.
pub fn mixture_density(spec: &MixtureSpec, y: usize) -> Result<DiscreteDist> {
    let eta = spec.eta(y)?;
    let probs: Vec<f64> = (0..spec.background.len())
        .map(|i| {
            let l = spec.lambda[i];
            l * spec.pure[y].probs[i] + eta * (1.0 - l) * spec.background.probs[i]
        })
        .collect();
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Undefined(format!("mixture of class {y} sums to {s}")));
    }
    // absorb rounding so the result passes the strict constructor
    DiscreteDist::new(probs.iter().map(|p| p / s).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub lhs: f64,
    pub bound1: f64,
    pub bound2: Option<f64>,
    pub holds: bool,
}

/// Checks the two lower bounds on the separation of classes `y` and `y2`,
/// reading `spec.lambda` as the fitting rate at each point: the infimum
/// fitting rate times the pure separation, and, when the pure supports are
/// disjoint, the smaller pure-expected fitting rate.
pub fn tv_lowerbound_check(spec: &MixtureSpec, y: usize, y2: usize) -> Result<TvReport> {
    spec.validate()?;
    let n = spec.background.len();
    if n > MAX_SUPPORT {
        return Err(Error::EnumerationTooLarge {
            what: "mixture universe",
            size: n as u128,
        });
    }
    let (p, q) = (mixture_density(spec, y)?, mixture_density(spec, y2)?);
    let lhs = tv_distance(&p, &q)?;
    let inf_fit = spec.lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let bound1 = inf_fit * tv_distance(&spec.pure[y], &spec.pure[y2])?;
    let sy: HashSet<usize> = spec.pure[y].support().collect();
    let disjoint = spec.pure[y2].support().all(|i| !sy.contains(&i));
    let bound2 = disjoint.then(|| {
        let expect = |d: &DiscreteDist| d.probs.iter().zip(&spec.lambda).map(|(p, l)| p * l).sum::<f64>();
        expect(&spec.pure[y]).min(expect(&spec.pure[y2]))
    });
    // rounding slack: every quantity is a short sum of terms in [0, 1]
    const TOL: f64 = 1e-12;
    let holds = lhs + TOL >= bound1 && bound2.is_none_or(|b| lhs + TOL >= b);
    Ok(TvReport {
        lhs,
        bound1,
        bound2,
        holds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectivityOutcome {
    /// `x == x'`: nothing to check.
    NotApplicable,
    /// Some cell differs in `x` and has equal attention; the outputs were
    /// compared and `outputs_differ` records the result.
    ConditionHolds { outputs_differ: bool },
    /// Every differing cell gets different attention; no conclusion.
    ConditionFails,
}

/// `x + f * x` with `f` in `{0, 1}` read from a `+-1` mask; `x` is `[C, H, W]`.
pub fn binary_attention_output(x: &Tensor, f: &BinaryMask) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || (s[1], s[2]) != f.dims() {
        return Err(Error::ShapeMismatch {
            op: "binary attention",
            lhs: s.to_vec(),
            rhs: vec![f.h, f.w],
        });
    }
    let hw = s[1] * s[2];
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let m = if f.data[k % hw] == 1 { 1.0 } else { 0.0 };
            v + m * v
        })
        .collect();
    Tensor::new(s, data)
}

/// For each `(x, x', f(x), f(x'))`, tests whether some cell differs between
/// the inputs yet receives the same binary attention, and if so confirms the
/// attention outputs differ.
pub fn injectivity_binary_check(
    pairs: &[(Tensor, Tensor, BinaryMask, BinaryMask)],
) -> Result<Vec<InjectivityOutcome>> {
    pairs
        .iter()
        .map(|(x, x2, f, f2)| {
            if x.shape() != x2.shape() {
                return Err(Error::ShapeMismatch {
                    op: "injectivity",
                    lhs: x.shape().to_vec(),
                    rhs: x2.shape().to_vec(),
                });
            }
            if x == x2 {
                return Ok(InjectivityOutcome::NotApplicable);
            }
            let hw = f.h * f.w;
            let witness = x
                .data()
                .iter()
                .zip(x2.data())
                .enumerate()
                .any(|(k, (a, b))| a != b && f.data[k % hw] == f2.data[k % hw]);
            if !witness {
                return Ok(InjectivityOutcome::ConditionFails);
            }
            let y = binary_attention_output(x, f)?;
            let y2 = binary_attention_output(x2, f2)?;
            Ok(InjectivityOutcome::ConditionHolds { outputs_differ: y != y2 })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub max_ratio: f64,
    pub pairs: usize,
    /// `M(x) != M(x')` on every sampled pair.
    pub injective_on_sample: bool,
}

fn sample_in_ball(shape: &[usize], radius: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.gen_range(0.0..=1.0f64);
    Tensor::new(shape, v.iter().map(|a| a * r / norm).collect()).expect("positive extents")
}

/// Samples pairs in the ball of radius `delta` and reports the largest
/// `|H(x) - H(x')|^2 / |x - x'|^2` with `H(x) = f(x) * x`, where `attention`
/// maps a `[C, H, W]` input to its `[H, W]` map.
pub fn contraction_check(
    attention: impl Fn(&Tensor) -> Result<Tensor>,
    shape: &[usize],
    delta: f64,
    num_pairs: usize,
    rng: &mut impl Rng,
) -> Result<ContractionReport> {
    if !(delta > 0.0) || shape.len() != 3 {
        return Err(Error::InvalidArgument("contraction_check: need delta > 0 and a [C, H, W] shape".into()));
    }
    let hw = shape[1] * shape[2];
    let h_of = |x: &Tensor| -> Result<(Vec<f64>, Tensor)> {
        let f = attention(x)?;
        if f.len() != hw {
            return Err(Error::ShapeMismatch {
                op: "contraction_check",
                lhs: f.shape().to_vec(),
                rhs: shape[1..].to_vec(),
            });
        }
        let hx: Vec<f64> = x.data().iter().enumerate().map(|(k, v)| f.data()[k % hw] * v).collect();
        Ok((hx, f))
    };
    let mut max_ratio: f64 = 0.0;
    let mut injective = true;
    let mut done = 0;
    while done < num_pairs {
        let x = sample_in_ball(shape, delta, rng);
        let x2 = sample_in_ball(shape, delta, rng);
        let dx: f64 = x.data().iter().zip(x2.data()).map(|(a, b)| (a - b).powi(2)).sum();
        if dx == 0.0 {
            continue;
        }
        let (hx, _) = h_of(&x)?;
        let (hx2, _) = h_of(&x2)?;
        let dh: f64 = hx.iter().zip(&hx2).map(|(a, b)| (a - b).powi(2)).sum();
        max_ratio = max_ratio.max(dh / dx);
        let out_differs = x
            .data()
            .iter()
            .zip(&hx)
            .zip(x2.data().iter().zip(&hx2))
            .any(|((a, ha), (b, hb))| a + ha != b + hb);
        injective &= out_differs;
        done += 1;
    }
    Ok(ContractionReport {
        max_ratio,
        pairs: num_pairs,
        injective_on_sample: injective,
    })
}
