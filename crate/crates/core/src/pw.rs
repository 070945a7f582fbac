//! Position-wise spatial attention baseline: every map entry comes from a
//! small fully convolutional network, with no shape prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2dLayer, ParamStore};
use crate::ops::ConvSpec;
use crate::rect::{apply_attention, apply_attention_batch, RectAttentionConfig};
use crate::tensor::Tensor;

pub const PW_WIDTH: usize = 80;

const DILATED: ConvSpec = ConvSpec {
    stride: 1,
    padding: 4,
    dilation: 4,
};

/// 1x1 reduction, then three 3x3 dilation-4 convolutions (the last one to a
/// single channel), then sigmoid.
/// Every layer preserves the spatial size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwModule {
    pub reduce: Conv2dLayer,
    pub dilated: [Conv2dLayer; 2],
    pub head: Conv2dLayer,
}

impl PwModule {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, rng: &mut impl Rng) -> Self {
        Self::with_width(store, prefix, in_ch, PW_WIDTH, rng)
    }

    pub fn with_width(store: &mut ParamStore, prefix: &str, in_ch: usize, width: usize, rng: &mut impl Rng) -> Self {
        let reduce = Conv2dLayer::new(store, &format!("{prefix}.reduce"), in_ch, width, 1, ConvSpec::POINTWISE, rng);
        let d0 = Conv2dLayer::new(store, &format!("{prefix}.dilated0"), width, width, 3, DILATED, rng);
        let d1 = Conv2dLayer::new(store, &format!("{prefix}.dilated1"), width, width, 3, DILATED, rng);
        let head = Conv2dLayer::new(store, &format!("{prefix}.head"), width, 1, 3, DILATED, rng);
        Self {
            reduce,
            dilated: [d0, d1],
            head,
        }
    }

    /// `[N, C, H, W] -> [N, H, W]` map with entries in `(0, 1)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.reduce.in_ch {
            return Err(Error::ShapeMismatch {
                op: "pw_forward",
                lhs: s,
                rhs: vec![self.reduce.in_ch],
            });
        }
        let mut h = self.reduce.forward(p, x)?.relu();
        for d in &self.dilated {
            h = d.forward(p, h)?.relu();
        }
        self.head.forward(p, h)?.sigmoid().reshape(&[s[0], s[2], s[3]])
    }

    /// Multiply-accumulates per sample for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        [&self.reduce, &self.dilated[0], &self.dilated[1], &self.head]
            .iter()
            .map(|l| l.macs(h, w))
            .sum()
    }
}

/// `x + f * x` without rescaling, on a single `[C, H, W]` input.
pub fn pw_apply(x: &Tensor, f: &Tensor) -> Result<Tensor> {
    let cfg = RectAttentionConfig {
        use_rescale: false,
        use_residual: true,
        ..RectAttentionConfig::default()
    };
    apply_attention(x, f, &cfg)
}

/// Tape version of [`pw_apply`] on a batch.
pub fn pw_apply_batch<'t>(x: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
    apply_attention_batch(x, f, false, true)
}
