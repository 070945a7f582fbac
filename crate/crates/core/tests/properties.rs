//! Randomized invariants.

use std::f64::consts::PI;

use proptest::prelude::*;
use rectattn::autodiff::wrap_angle;
use rectattn::checkpoint::{read_params, write_params};
use rectattn::equivariance::{equivariance_loss, transform_params, warp_image, TransformSpec};
use rectattn::netpbm::{encode_pgm, quantize};
use rectattn::nn::ParamStore;
use rectattn::rect::{
    rect_window_rotated, render_map, rescale_map, squash_raw_params, window1d, RectAttentionConfig, RectParams,
};
use rectattn::synthdata::{generate_dataset, Dataset, DatasetHeader};
use rectattn::theory::*;
use rectattn::Tensor;

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::ANY, h * w).prop_map(move |bits| BinaryMask::from_fn(h, w, |i, j| bits[i * w + j]))
}

fn rect() -> impl Strategy<Value = RectParams> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.05..=1.0f64, 0.05..=1.0f64, -PI + 1e-9..=PI)
        .prop_map(|(a, b, c, d, e)| RectParams::new((a, b), (c, d), e))
}

fn spec() -> impl Strategy<Value = TransformSpec> {
    (-PI / 4.0..PI / 4.0, 0.8..1.25f64, -0.2..0.2f64, -0.2..0.2f64).prop_map(|(a, s, m0, m1)| TransformSpec {
        delta_alpha: a,
        delta_sigma: s,
        delta_mu: [m0, m1],
    })
}

fn dist(n: usize) -> impl Strategy<Value = DiscreteDist> {
    prop::collection::vec(0.0..1.0f64, n)
        .prop_filter("some mass", |w| w.iter().sum::<f64>() > 1e-3)
        .prop_map(|w| DiscreteDist::from_weights(&w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_is_open_unit_interval_and_symmetric(
        s in 0.5..20.0f64, t0 in -1.0..1.0f64, sigma in 0.01..1.0f64, d in 0.0..0.5f64,
    ) {
        let a = window1d(s, t0, sigma, t0 + d).unwrap();
        let b = window1d(s, t0, sigma, t0 - d).unwrap();
        // far outside the interval the logistic underflows to exactly 0
        prop_assert!((0.0..1.0).contains(&a));
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn rotated_window_has_half_turn_symmetry(p in rect(), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let q = RectParams { alpha: wrap_angle(p.alpha + PI), ..p };
        prop_assert!((rect_window_rotated(6.0, &p, (t1, t2)) - rect_window_rotated(6.0, &q, (t1, t2))).abs() <= 1e-12);
    }

    #[test]
    fn squash_yields_valid_rectangles(raw in prop::array::uniform5(-30.0..30.0f64)) {
        let cfg = RectAttentionConfig::default();
        let p = squash_raw_params(&raw, &cfg);
        prop_assert!(p.is_valid(cfg.sigma_min, cfg.sigma_max), "{:?}", p);
    }

    #[test]
    fn rescaled_map_sums_to_pixel_count(p in rect(), h in 2usize..12, w in 2usize..12) {
        let f = render_map(&p, 6.0, h, w);
        prop_assert!(f.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        prop_assume!(f.sum() > 1e-3);
        let r = rescale_map(&f).unwrap();
        let hw = (h * w) as f64;
        prop_assert!((r.sum() - hw).abs() <= 1e-9 * hw);
    }

    #[test]
    fn fitting_rate_is_set_iou(a in mask(3, 4), b in mask(3, 4)) {
        // two routes to the same ratio; they may round differently
        prop_assert!((fitting_rate(&a, &b).unwrap() - iou_bruteforce(&a, &b).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn catching_and_missing_rates_agree(a in mask(4, 3), b in mask(4, 3)) {
        let psi = catching_rate(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&psi));
        prop_assert_eq!(psi, catching_rate(&b, &a).unwrap());
        prop_assert!((missing_rate(&a, &b).unwrap() - (1.0 - psi) / 2.0).abs() <= 1e-15);
        prop_assert_eq!(catching_rate(&a, &b.negate()).unwrap(), -psi);
    }

    #[test]
    fn relevance_never_drops_when_the_outer_family_shrinks(
        pool in prop::collection::vec(mask(2, 3), 2..8),
        inner in prop::collection::vec(mask(2, 3), 1..4),
        keep in 1usize..8,
    ) {
        let small = MaskFamily::Explicit(pool[..keep.min(pool.len())].to_vec());
        let big = MaskFamily::Explicit(pool.clone());
        let inner = MaskFamily::Explicit(inner);
        prop_assert!(relevance_level(&small, &inner).unwrap() >= relevance_level(&big, &inner).unwrap());
    }

    #[test]
    fn equivariance_loss_is_symmetric_and_zero_only_on_equal(a in rect(), b in rect()) {
        let l = equivariance_loss(&a, &b);
        prop_assert_eq!(l, equivariance_loss(&b, &a));
        prop_assert_eq!(equivariance_loss(&a, &a), 0.0);
        if a != b {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn transforms_compose(p0 in rect(), s1 in spec(), s2 in spec()) {
        let c = (0.5, 0.5);
        let p = RectParams { mu1: 0.35 + 0.3 * p0.mu1, mu2: 0.35 + 0.3 * p0.mu2, ..p0 };
        let wide = (1e-6, 10.0);
        let mid = transform_params(&p, &s1, c, wide);
        let step = transform_params(&mid, &s2, c, wide);
        let inside = |q: &RectParams| [q.mu1, q.mu2].iter().all(|v| (0.0..=1.0).contains(v));
        prop_assume!(inside(&mid) && inside(&step));
        let direct = transform_params(&p, &s1.then(&s2, c), c, wide);
        prop_assert!(equivariance_loss(&step, &direct) <= 1e-20, "{:?} vs {:?}", step, direct);
    }

    #[test]
    fn inverse_point_undoes_forward_point(s in spec(), t1 in -1.0..2.0f64, t2 in -1.0..2.0f64) {
        let c = (0.5, 0.5);
        let back = s.inverse_point(c, s.forward_point(c, (t1, t2)));
        prop_assert!((back.0 - t1).abs() <= 1e-12 && (back.1 - t2).abs() <= 1e-12);
    }

    #[test]
    fn warp_keeps_shape_and_range(s in spec(), seed in 0u64..1000) {
        let img = Tensor::from_fn(&[2, 9, 7], |k| ((k as u64 * 2654435761 + seed) % 97) as f64 / 96.0);
        let out = warp_image(&img, &s, (0.5, 0.5)).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn wrapped_angles_land_in_half_open_interval(a in -50.0..50.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let k = ((a - w) / (2.0 * PI)).round();
        prop_assert!((a - w - 2.0 * PI * k).abs() <= 1e-9);
    }

    #[test]
    fn tv_is_a_metric_on_small_universes(p in dist(5), q in dist(5), r in dist(5)) {
        let pq = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
        prop_assert_eq!(pq, tv_distance(&q, &p).unwrap());
        prop_assert!(pq <= tv_distance(&p, &r).unwrap() + tv_distance(&r, &q).unwrap() + 1e-12);
    }

    #[test]
    fn mixtures_are_distributions_and_respect_both_bounds(seed in 0u64..10_000, disjoint in prop::bool::ANY) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spec = MixtureSpec::random(&mut rng, 10, 3, disjoint).unwrap();
        for y in 0..3 {
            let d = mixture_density(&spec, y).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let r = tv_lowerbound_check(&spec, 0, 1).unwrap();
        prop_assert!(r.holds, "{:?}", r);
        if disjoint {
            prop_assert!(r.bound2.is_some());
        }
    }

    #[test]
    fn quantization_is_monotone_and_hits_the_ends(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo) <= quantize(hi));
        prop_assert_eq!(quantize(0.0), 0);
        prop_assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn pgm_payload_matches_extent(h in 1usize..9, w in 1usize..9) {
        let m = Tensor::from_fn(&[h, w], |k| (k % 3) as f64 / 2.0);
        let b = encode_pgm(&m).unwrap();
        let header = format!("P5\n{w} {h}\n255\n");
        prop_assert_eq!(b.len(), header.len() + h * w);
        prop_assert!(b.starts_with(header.as_bytes()));
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e6..1e6f64, 1..40), split in 1usize..40) {
        let mut store = ParamStore::new();
        let k = split.min(values.len());
        store.add("a.weight", Tensor::new(&[k], values[..k].to_vec()).unwrap());
        if k < values.len() {
            store.add("b", Tensor::new(&[values.len() - k, 1], values[k..].to_vec()).unwrap());
        }
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();
        prop_assert_eq!(read_params(&mut buf.as_slice()).unwrap(), store);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn datasets_round_trip_bytes(seed in 0u64..1000, count in 1usize..5, classes in 2usize..6) {
        let ds = generate_dataset(DatasetHeader { classes, channels: 1, height: 16, width: 16, count, seed }).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.digest().unwrap(), ds.digest().unwrap());
        for s in &ds.samples {
            prop_assert!(s.label < classes);
            prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
