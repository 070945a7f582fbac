use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rectattn::nn::{init_uniform, AdamState, LinearLayer, ParamStore};
use rectattn::ops::ConvSpec;
use rectattn::{Tape, Tensor};

/// Cross-correlation written as six nested loops.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], spec: ConvSpec) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ext = |len: usize, k: usize| (len + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    let (ho, wo) = (ext(h, kh), ext(wd, kw));
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let y = (i * spec.stride + a * spec.dilation) as isize - spec.padding as isize;
                                let z = (j * spec.stride + bb * spec.dilation) as isize - spec.padding as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + y as usize) * wd + z as usize];
                                acc += xv * w.data()[((oi * c + ci) * kh + a) * kw + bb];
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

#[test]
fn conv_matches_the_six_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..40 {
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5));
        let k = [1, 3][rng.gen_range(0..2)];
        let spec = ConvSpec {
            stride: rng.gen_range(1..3),
            padding: rng.gen_range(0..3),
            dilation: rng.gen_range(1..3),
        };
        let (h, w) = (rng.gen_range(5..10), rng.gen_range(5..10));
        let x = init_uniform(&[n, c, h, w], 1, &mut rng);
        let wt = init_uniform(&[o, c, k, k], 1, &mut rng);
        let b: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let got = tape
            .constant(x.clone())
            .conv2d(tape.constant(wt.clone()), Some(tape.constant(Tensor::new(&[o], b.clone()).unwrap())), spec)
            .unwrap()
            .value();
        let want = naive_conv(&x, &wt, &b, spec);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12, "{spec:?}");
    }
}

#[test]
fn two_adam_steps_match_the_unrolled_update() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let g = Tensor::new(&[3], vec![0.3, -0.02, 0.0]).unwrap();
    let mut adam = AdamState::with_lr(&store, 0.01);
    adam.step(&mut store, &[Some(g.clone())]).unwrap();
    let first: Vec<f64> = store.get(id).data().to_vec();
    adam.step(&mut store, &[Some(g.clone())]).unwrap();

    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    for (k, &gk) in g.data().iter().enumerate() {
        let mut p = [0.5, -1.0, 2.0][k];
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * gk;
            v = b2 * v + (1.0 - b2) * gk * gk;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            if t == 1 {
                assert_eq!(p, first[k]);
                // bias correction makes the first move lr * sign(g)
                if gk != 0.0 {
                    assert!(((first[k] - [0.5, -1.0, 2.0][k]).abs() - lr).abs() <= 1e-6);
                }
            }
        }
        assert_eq!(store.get(id).data()[k], p);
    }
}

#[test]
fn separable_toy_loss_falls_for_ten_steps() {
    let mut monotone = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // two clusters either side of x0 + x1 = 0
        let n = 32;
        let mut x = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let s = if y == 1 { 1.0 } else { -1.0 };
            x.push(s * rng.gen_range(0.5..1.5));
            x.push(s * rng.gen_range(0.5..1.5));
            labels.push(y);
        }
        let x = Tensor::new(&[n, 2], x).unwrap();
        let mut store = ParamStore::new();
        let lin = LinearLayer::new(&mut store, "l", 2, 2, &mut rng);
        let mut adam = AdamState::new(&store);
        let mut losses = Vec::new();
        for _ in 0..=10 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let loss = lin.forward(&b, tape.constant(x.clone())).unwrap().softmax_cross_entropy(&labels).unwrap();
            losses.push(loss.value().item().unwrap());
            let grads = tape.backward(loss).unwrap();
            adam.step(&mut store, &b.collect(&grads)).unwrap();
        }
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 9, "{monotone}/10");
}
