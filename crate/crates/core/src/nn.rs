//! Trainable layers, parameter storage, initialization and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Total scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Substitutes `v` for parameter `id` in subsequent lookups.
    pub fn set(&mut self, id: ParamId, v: Var<'t>) {
        self.vars[id.0] = v;
    }

    /// Gradients in store order; `None` for parameters the loss did not reach.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]` initialization.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init: positive extents")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    /// Registers `{name}.weight` `[out, in, k, k]` and zero `{name}.bias`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            spec,
        }
    }

    /// `x` is `[N, C, H, W]` or a single `[C, H, W]` image.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        match shape.len() {
            4 => x.conv2d(p.get(self.weight), Some(p.get(self.bias)), self.spec),
            3 => {
                let y = x
                    .reshape(&[1, shape[0], shape[1], shape[2]])?
                    .conv2d(p.get(self.weight), Some(p.get(self.bias)), self.spec)?;
                let s = y.shape();
                y.reshape(&s[1..])
            }
            _ => Err(Error::InvalidArgument(format!("conv2d: expected rank 3 or 4, got {shape:?}"))),
        }
    }

    /// Output spatial extents for an `h x w` input, if positive.
    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let s = self.spec;
        let ho = ConvGeom::out_extent(h, self.kernel, s.stride, s.padding, s.dilation)?;
        let wo = ConvGeom::out_extent(w, self.kernel, s.stride, s.padding, s.dilation)?;
        Some((ho, wo))
    }

    /// Multiply-accumulates per sample for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = self.out_size(h, w).unwrap_or((0, 0));
        ho * wo * self.out_ch * self.in_ch * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    /// Registers `{name}.weight` `[out, in]` and zero `{name}.bias`.
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(&[fout, fin], fin, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self {
            weight,
            bias,
            in_features: fin,
            out_features: fout,
        }
    }

    /// Like [`LinearLayer::new`] with all weights and biases zero.
    pub fn zeros(store: &mut ParamStore, name: &str, fin: usize, fout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fout, fin]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self {
            weight,
            bias,
            in_features: fin,
            out_features: fout,
        }
    }

    /// `x` is `[N, in]` or a single `[in]` vector.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        match shape.len() {
            2 => x.linear(p.get(self.weight), p.get(self.bias)),
            1 => x
                .reshape(&[1, shape[0]])?
                .linear(p.get(self.weight), p.get(self.bias))?
                .reshape(&[self.out_features]),
            _ => Err(Error::InvalidArgument(format!("linear: expected rank 1 or 2, got {shape:?}"))),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    /// Zero moments shaped like `store`, default hyperparameters.
    pub fn new(store: &ParamStore) -> Self {
        Self::with_lr(store, Self::DEFAULT_LR)
    }

    pub fn with_lr(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. `grads` is in store order; parameters with `None` are
    /// left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} parameters, {} gradients, {} moments",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.tensors[i].shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        lhs: store.tensors[i].shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let mut m = std::mem::replace(&mut self.m[i], Tensor::scalar(0.0)).into_vec();
            let mut v = std::mem::replace(&mut self.v[i], Tensor::scalar(0.0)).into_vec();
            let mut p = store.tensors[i].data().to_vec();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(&mut m).zip(&mut v).zip(g.data()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *pj -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            let shape = g.shape().to_vec();
            self.m[i] = Tensor::new(&shape, m)?;
            self.v[i] = Tensor::new(&shape, v)?;
            store.tensors[i] = Tensor::new(&shape, p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_fn(&[3], |i| i as f64));
        let before = store.clone();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[Some(Tensor::zeros(&[3]))]).unwrap();
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[3]));
        let mut adam = AdamState::new(&store);
        let g = Tensor::new(&[3], vec![0.3, -2.0, 1e-3]).unwrap();
        adam.step(&mut store, &[Some(g)]).unwrap();
        for (p, s) in store.get(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 1e-4).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn init_bounds_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let mut c = ChaCha8Rng::seed_from_u64(2);
        let ta = init_uniform(&[8, 9], 9, &mut a);
        assert_eq!(ta, init_uniform(&[8, 9], 9, &mut b));
        assert_ne!(ta, init_uniform(&[8, 9], 9, &mut c));
        assert!(ta.data().iter().all(|v| v.abs() <= (1.0f64 / 9.0).sqrt()));
    }
}
