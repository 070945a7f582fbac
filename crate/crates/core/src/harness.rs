//! Training and evaluation of a small CNN trunk carrying one attention
//! module, plus the ablations built on it.
//!
//! Trunk layout:
//!
//! ```text
//! conv(16) - pool - conv(32) - pool - [shallow slot] - conv(64) - [deep slot]
//!   - global average pool - linear(64) - linear(K)
//! ```
//!
//! Every conv is 3x3 with same padding and ReLU; pooling is 2x2 max. At most
//! one slot holds an attention module. Pixels are standardized before the
//! first conv.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{wrap_angle, Tape, Var};
use crate::checkpoint;
use crate::equivariance::{
    combined_loss_var, equivariance_loss_batch, sample_transform, transform_params,
    transform_params_batch, warp_batch, warp_image, EquivarianceConfig, TransformSpec,
};
use crate::error::{Error, Result};
use crate::netpbm;
use crate::nn::{AdamState, Bound, Conv2dLayer, LinearLayer, ParamStore};
use crate::ops::ConvSpec;
use crate::pw::{PwModule, PW_WIDTH};
use crate::rect::{
    apply_attention_batch, params_from_batch, render_map, RectAttention, RectAttentionConfig,
    RectParams,
};
use crate::synthdata::{gt_mask, Dataset, DatasetHeader};
use crate::tensor::Tensor;
use crate::theory::{binarize, catching_rate, fitting_rate, missing_rate, BinaryMask};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,mean_psi,mean_eq_loss,wall_time";
/// Seed of the fixed transforms used to measure equivariance on held-out
/// data, shared by every run so checkpoints are compared on the same draws.
pub const VAL_TRANSFORM_SEED: u64 = 0x5EED_E0;
const EVAL_BATCH: usize = 100;
const TRUNK_WIDTHS: [usize; 3] = [16, 32, 64];
const HIDDEN: usize = 64;
/// Raw sigma output pinning the half-extent within 0.003 of its minimum.
const CORNER_RAW_SIGMA: f64 = -6.0;
const CORNER_MU: f64 = 0.1;
/// Pixels in `[0, 1]` enter the trunk as `(x - INPUT_CENTER) * INPUT_GAIN`,
/// roughly zero-mean with unit spread; unscaled inputs leave the first
/// epoch at chance level.
const INPUT_CENTER: f64 = 0.5;
const INPUT_GAIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    PositionWise,
    Rectangular,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::PositionWise => "position_wise",
            AttentionKind::Rectangular => "rectangular",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionDepth {
    Shallow,
    Deep,
}

impl InsertionDepth {
    pub fn name(self) -> &'static str {
        match self {
            InsertionDepth::Shallow => "shallow",
            InsertionDepth::Deep => "deep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub attention_kind: AttentionKind,
    pub lambda_eq: f64,
    pub use_residual: bool,
    pub use_rescale: bool,
    pub insertion_depth: InsertionDepth,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub sharpness: f64,
    pub predictor_widths: [usize; 3],
    pub pw_width: usize,
    /// Start the rectangle pinned to the top-left corner at minimal size.
    pub adversarial_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            attention_kind: AttentionKind::Rectangular,
            lambda_eq: 0.1,
            use_residual: true,
            use_rescale: true,
            insertion_depth: InsertionDepth::Shallow,
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            sharpness: crate::rect::DEFAULT_SHARPNESS,
            predictor_widths: [16, 32, 64],
            pw_width: PW_WIDTH,
            adversarial_init: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_eq >= 0.0 && self.lambda_eq.is_finite()) {
            return bad(format!("lambda_eq must be >= 0, got {}", self.lambda_eq));
        }
        if self.predictor_widths.contains(&0) || self.pw_width == 0 {
            return bad("layer widths must be positive".into());
        }
        self.rect_config().validate()
    }

    pub fn rect_config(&self) -> RectAttentionConfig {
        RectAttentionConfig {
            sharpness: self.sharpness,
            use_rescale: self.use_rescale,
            use_residual: self.use_residual,
            ..RectAttentionConfig::default()
        }
    }

    pub fn equivariance_config(&self) -> EquivarianceConfig {
        EquivarianceConfig {
            lambda: self.lambda_eq,
            ..EquivarianceConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttentionModule {
    Rect(RectAttention),
    Pw(PwModule),
}

/// Trunk CNN with an optional attention module in one slot. Serializes to
/// the JSON sidecar stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input: [usize; 3],
    pub classes: usize,
    pub convs: [Conv2dLayer; 3],
    pub fc: LinearLayer,
    pub out: LinearLayer,
    pub depth: InsertionDepth,
    pub use_residual: bool,
    pub attention: Option<AttentionModule>,
}

/// Products of one forward pass.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Squashed `[N, 5]` rectangles, rectangular attention only.
    pub params: Option<Var<'t>>,
    /// `[N, h, w]` map at the slot resolution, before rescaling.
    pub map: Option<Var<'t>>,
}

fn pool2<'t>(h: Var<'t>) -> Result<Var<'t>> {
    let s = h.shape();
    h.pad2d(s[2] % 2, s[3] % 2)?.max_pool2d(2)
}

fn standardize(x: Var<'_>) -> Var<'_> {
    x.shift(-INPUT_CENTER).scale(INPUT_GAIN)
}

impl Model {
    /// Builds a model for `header`-shaped data, drawing weights from `seed`.
    pub fn new(cfg: &TrainConfig, header: &DatasetHeader, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let rng = &mut rng;
        let [w0, w1, w2] = TRUNK_WIDTHS;
        let c = header.channels;
        let convs = [
            Conv2dLayer::new(store, "trunk.conv0", c, w0, 3, ConvSpec::SAME3, rng),
            Conv2dLayer::new(store, "trunk.conv1", w0, w1, 3, ConvSpec::SAME3, rng),
            Conv2dLayer::new(store, "trunk.conv2", w1, w2, 3, ConvSpec::SAME3, rng),
        ];
        let fc = LinearLayer::new(store, "trunk.fc", w2, HIDDEN, rng);
        let out = LinearLayer::new(store, "trunk.out", HIDDEN, header.classes, rng);
        let slot_ch = match cfg.insertion_depth {
            InsertionDepth::Shallow => w1,
            InsertionDepth::Deep => w2,
        };
        let attention = match cfg.attention_kind {
            AttentionKind::None => None,
            AttentionKind::PositionWise => Some(AttentionModule::Pw(PwModule::with_width(
                store,
                "attn",
                slot_ch,
                cfg.pw_width,
                rng,
            ))),
            AttentionKind::Rectangular => {
                let m = RectAttention::new(store, "attn", slot_ch, cfg.predictor_widths, cfg.rect_config(), rng);
                if cfg.adversarial_init {
                    let mu = (CORNER_MU / (1.0 - CORNER_MU)).ln();
                    m.predictor.set_head_bias(store, [mu, mu, CORNER_RAW_SIGMA, CORNER_RAW_SIGMA, 0.0])?;
                }
                Some(AttentionModule::Rect(m))
            }
        };
        Ok(Self {
            input: [header.channels, header.height, header.width],
            classes: header.classes,
            convs,
            fc,
            out,
            depth: cfg.insertion_depth,
            use_residual: cfg.use_residual,
            attention,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self.attention {
            None => AttentionKind::None,
            Some(AttentionModule::Pw(_)) => AttentionKind::PositionWise,
            Some(AttentionModule::Rect(_)) => AttentionKind::Rectangular,
        }
    }

    /// Spatial size of the feature map at either slot.
    pub fn slot_size(&self) -> (usize, usize) {
        let half = |n: usize| n.div_ceil(2);
        (half(half(self.input[1])), half(half(self.input[2])))
    }

    /// Errors unless `header` describes data this model accepts.
    pub fn check_dataset(&self, header: &DatasetHeader) -> Result<()> {
        if [header.channels, header.height, header.width] != self.input || header.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "model vs dataset",
                lhs: vec![self.classes, self.input[0], self.input[1], self.input[2]],
                rhs: vec![header.classes, header.channels, header.height, header.width],
            });
        }
        Ok(())
    }

    fn conv<'t>(&self, p: &Bound<'t>, i: usize, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.convs[i].forward(p, x)?.relu())
    }

    /// Trunk features entering the active slot (the shallow slot when there
    /// is no module).
    pub fn slot_features<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = pool2(self.conv(p, 0, standardize(x))?)?;
        let h = pool2(self.conv(p, 1, h)?)?;
        match self.depth {
            InsertionDepth::Shallow => Ok(h),
            InsertionDepth::Deep => self.conv(p, 2, h),
        }
    }

    /// Squashed rectangles for `[N, C, H, W]` inputs; rectangular kind only.
    pub fn predict_rects<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.attention {
            Some(AttentionModule::Rect(m)) => m.predict(p, self.slot_features(p, x)?),
            _ => Err(Error::InvalidArgument("model has no rectangular attention".into())),
        }
    }

    fn attend<'t>(&self, p: &Bound<'t>, h: Var<'t>, fixed_map: Option<Var<'t>>) -> Result<(Var<'t>, Forward<'t>)> {
        let none = |h| {
            (
                h,
                Forward {
                    logits: h,
                    params: None,
                    map: None,
                },
            )
        };
        if let Some(f) = fixed_map {
            let out = apply_attention_batch(h, f, false, self.use_residual)?;
            return Ok((
                out,
                Forward {
                    logits: out,
                    params: None,
                    map: Some(f),
                },
            ));
        }
        Ok(match &self.attention {
            None => none(h),
            Some(AttentionModule::Rect(m)) => {
                let r = m.forward(p, h)?;
                (
                    r.out,
                    Forward {
                        logits: r.out,
                        params: Some(r.params),
                        map: Some(r.map),
                    },
                )
            }
            Some(AttentionModule::Pw(m)) => {
                let f = m.forward(p, h)?;
                let out = apply_attention_batch(h, f, false, self.use_residual)?;
                (
                    out,
                    Forward {
                        logits: out,
                        params: None,
                        map: Some(f),
                    },
                )
            }
        })
    }

    fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>, fixed_map: Option<Var<'t>>) -> Result<Forward<'t>> {
        let h = pool2(self.conv(p, 0, standardize(x))?)?;
        let h = pool2(self.conv(p, 1, h)?)?;
        let (h, mut fwd) = match self.depth {
            InsertionDepth::Shallow => {
                let (h, f) = self.attend(p, h, fixed_map)?;
                (self.conv(p, 2, h)?, f)
            }
            InsertionDepth::Deep => {
                let h = self.conv(p, 2, h)?;
                self.attend(p, h, fixed_map)?
            }
        };
        let h = self.fc.forward(p, h.global_avg_pool()?)?.relu();
        fwd.logits = self.out.forward(p, h)?;
        Ok(fwd)
    }

    /// `[N, C, H, W]` inputs to `[N, K]` logits.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Forward<'t>> {
        self.run(p, x, None)
    }

    /// Forward pass with the slot's attention map replaced by `map`
    /// (`[N, h, w]`), applied without rescaling.
    pub fn forward_with_map<'t>(&self, p: &Bound<'t>, x: Var<'t>, map: Var<'t>) -> Result<Forward<'t>> {
        self.run(p, x, Some(map))
    }

    /// Saves parameters to `path` and the model description to
    /// `path` + `.json`.
    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        checkpoint::save(path, store)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Model, ParamStore)> {
        let store = checkpoint::load(path)?;
        let model: Model = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        model.check_store(&store)?;
        Ok((model, store))
    }

    /// Rebuilds the parameter layout and compares it with `store`.
    fn check_store(&self, store: &ParamStore) -> Result<()> {
        let cfg = self.train_config_like();
        let header = DatasetHeader {
            classes: self.classes,
            channels: self.input[0],
            height: self.input[1],
            width: self.input[2],
            count: 1,
            seed: 0,
        };
        let mut fresh = ParamStore::new();
        let rebuilt = Model::new(&cfg, &header, &mut fresh)?;
        let same_layout = fresh.len() == store.len()
            && fresh.iter().zip(store.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same_layout || rebuilt.convs != self.convs || rebuilt.fc != self.fc || rebuilt.out != self.out {
            return Err(Error::Format("checkpoint does not match its model description".into()));
        }
        Ok(())
    }

    fn train_config_like(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            insertion_depth: self.depth,
            use_residual: self.use_residual,
            attention_kind: self.kind(),
            ..TrainConfig::default()
        };
        match &self.attention {
            Some(AttentionModule::Rect(m)) => {
                let c = m.predictor.convs.each_ref().map(|l| l.out_ch);
                cfg.predictor_widths = c;
                cfg.sharpness = m.cfg.sharpness;
                cfg.use_rescale = m.cfg.use_rescale;
            }
            Some(AttentionModule::Pw(m)) => cfg.pw_width = m.reduce.out_ch,
            None => {}
        }
        cfg
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training batches.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub mean_psi: f64,
    pub mean_eq_loss: f64,
    /// Seconds spent in the epoch.
    pub wall_time: f64,
}

/// CSV with [`METRICS_HEADER`]. Wall times are written as 0 unless
/// `with_wall_time`, which keeps reruns byte-identical.
pub fn metrics_csv(rows: &[MetricsRow], with_wall_time: bool) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let wt = if with_wall_time { r.wall_time } else { 0.0 };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc, r.mean_psi, r.mean_eq_loss, wt
        );
    }
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_psi: f64,
    pub mean_phi: f64,
    pub mean_fitting_rate: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub metrics: Vec<MetricsRow>,
    /// Per-epoch mean missing rate of the predicted maps on training batches.
    pub train_phi: Vec<f64>,
    /// Pearson correlation of per-epoch training loss and training missing
    /// rate; `None` when either series is constant.
    pub h1_correlation: Option<f64>,
}

/// Predicted binary mask of one sample at image resolution. Rectangles are
/// rendered exactly; position-wise maps are upsampled; without a module the
/// map is identically one.
fn predicted_mask(model: &Model, fwd: &Forward<'_>, n: usize) -> Result<Vec<BinaryMask>> {
    let (h, w) = (model.input[1], model.input[2]);
    if let Some(p) = &fwd.params {
        return params_from_batch(&p.value())
            .iter()
            .map(|r| binarize(&render_map(r, crate::rect::DEFAULT_SHARPNESS, h, w), 0.5))
            .collect();
    }
    match &fwd.map {
        Some(m) => {
            let m = m.value();
            let (mh, mw) = (m.shape()[1], m.shape()[2]);
            m.data()
                .chunks(mh * mw)
                .map(|c| binarize(&netpbm::resize_nearest(&Tensor::new(&[mh, mw], c.to_vec())?, h, w)?, 0.5))
                .collect()
        }
        None => Ok(vec![BinaryMask::full(h, w, true); n]),
    }
}

fn argmax_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == y
        })
        .count()
}

/// Accuracy and mask agreement of the predicted maps with ground truth.
pub fn evaluate(model: &Model, store: &ParamStore, ds: &Dataset) -> Result<EvalReport> {
    model.check_dataset(&ds.header)?;
    let (h, w) = (model.input[1], model.input[2]);
    let gts: Vec<BinaryMask> = ds.samples.iter().map(|s| gt_mask(&s.gt_rect, h, w)).collect();
    let mut sums = [0.0; 4];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = ds.batch(chunk)?;
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let fwd = model.forward(&bound, tape.constant(x))?;
        sums[0] += argmax_correct(&fwd.logits.value(), &labels) as f64;
        for (m, &i) in predicted_mask(model, &fwd, chunk.len())?.iter().zip(chunk) {
            sums[1] += catching_rate(m, &gts[i])?;
            sums[2] += missing_rate(m, &gts[i])?;
            sums[3] += fitting_rate(m, &gts[i])?;
        }
    }
    let n = ds.len() as f64;
    Ok(EvalReport {
        accuracy: sums[0] / n,
        mean_psi: sums[1] / n,
        mean_phi: sums[2] / n,
        mean_fitting_rate: sums[3] / n,
    })
}

/// Validation equivariance loss split by parameter group; the three parts
/// sum to [`EqBreakdown::total`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EqBreakdown {
    pub center: f64,
    pub extent: f64,
    pub angle: f64,
}

impl EqBreakdown {
    pub fn total(&self) -> f64 {
        self.center + self.extent + self.angle
    }
}

/// Mean equivariance loss over `ds`, each sample under its own transform
/// drawn from [`VAL_TRANSFORM_SEED`]. Zero for models without rectangles.
pub fn validation_eq_loss(model: &Model, store: &ParamStore, ds: &Dataset) -> Result<f64> {
    Ok(validation_eq_breakdown(model, store, ds)?.total())
}

/// [`validation_eq_loss`] per parameter group.
pub fn validation_eq_breakdown(model: &Model, store: &ParamStore, ds: &Dataset) -> Result<EqBreakdown> {
    let cfg = match &model.attention {
        Some(AttentionModule::Rect(m)) => m.cfg,
        _ => return Ok(EqBreakdown::default()),
    };
    model.check_dataset(&ds.header)?;
    let eq = EquivarianceConfig::default();
    let c = eq.center();
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_TRANSFORM_SEED);
    let specs: Vec<TransformSpec> = (0..ds.len()).map(|_| sample_transform(&mut rng, &eq)).collect();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut sums = [0.0; 3];
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk)?;
        let mut warped = Vec::with_capacity(x.len());
        for &i in chunk {
            warped.extend_from_slice(warp_image(&ds.samples[i].image, &specs[i], c)?.data());
        }
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let p = params_from_batch(&model.predict_rects(&bound, tape.constant(x.clone()))?.value());
        let xw = Tensor::new(x.shape(), warped)?;
        let pw = params_from_batch(&model.predict_rects(&bound, tape.constant(xw))?.value());
        for (k, &i) in chunk.iter().enumerate() {
            let (a, b) = (&pw[k], transform_params(&p[k], &specs[i], c, (cfg.sigma_min, cfg.sigma_max)));
            sums[0] += (a.mu1 - b.mu1).powi(2) + (a.mu2 - b.mu2).powi(2);
            sums[1] += (a.sigma1 - b.sigma1).powi(2) + (a.sigma2 - b.sigma2).powi(2);
            sums[2] += wrap_angle(a.alpha - b.alpha).powi(2);
        }
    }
    let n = ds.len() as f64;
    Ok(EqBreakdown {
        center: sums[0] / n,
        extent: sums[1] / n,
        angle: sums[2] / n,
    })
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn check_datasets(a: &DatasetHeader, b: &DatasetHeader) -> Result<()> {
    if (a.classes, a.channels, a.height, a.width) != (b.classes, b.channels, b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op: "train vs validation set",
            lhs: vec![a.classes, a.channels, a.height, a.width],
            rhs: vec![b.classes, b.channels, b.height, b.width],
        });
    }
    Ok(())
}

/// Trains a fresh model. Deterministic given `cfg.seed`: the seed drives
/// initialization, batch order and equivariance transforms.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_datasets(&train_set.header, &val_set.header)?;
    let mut store = ParamStore::new();
    let model = Model::new(cfg, &train_set.header, &mut store)?;
    let mut adam = AdamState::with_lr(&store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // transforms get their own stream so batch order does not depend on lambda
    let mut eq_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eq_rng.set_stream(2);
    let eq = cfg.equivariance_config();
    let rect_cfg = cfg.rect_config();
    let use_eq = model.kind() == AttentionKind::Rectangular && cfg.lambda_eq > 0.0;
    let (h, w) = (model.input[1], model.input[2]);
    let gts: Vec<BinaryMask> = train_set.samples.iter().map(|s| gt_mask(&s.gt_rect, h, w)).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut train_phi = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        // indexed by sample so the epoch mean does not depend on batch order
        let mut phi = vec![0.0; train_set.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let fwd = model.forward(&bound, tape.constant(x.clone()))?;
            let ce = fwd.logits.softmax_cross_entropy(&labels)?;
            let loss = match fwd.params {
                Some(p) if use_eq => {
                    let spec = sample_transform(&mut eq_rng, &eq);
                    let c = eq.center();
                    let xw = warp_batch(&x, &spec, c)?;
                    let tilde = model.predict_rects(&bound, tape.constant(xw))?;
                    let hat = transform_params_batch(p, &spec, c, (rect_cfg.sigma_min, rect_cfg.sigma_max))?;
                    combined_loss_var(ce, equivariance_loss_batch(tilde, hat)?, cfg.lambda_eq)?
                }
                _ => ce,
            };
            let grads = tape.backward(loss)?;
            let loss_value = ce.value().item()?;
            if !loss_value.is_finite() {
                return Err(Error::InvalidArgument(format!("training diverged at epoch {epoch}")));
            }
            loss_sum += loss_value * chunk.len() as f64;
            correct += argmax_correct(&fwd.logits.value(), &labels);
            for (m, &i) in predicted_mask(&model, &fwd, chunk.len())?.iter().zip(chunk) {
                phi[i] = missing_rate(m, &gts[i])?;
            }
            adam.step(&mut store, &bound.collect(&grads))?;
        }
        let n = train_set.len() as f64;
        let val = evaluate(&model, &store, val_set)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc: val.accuracy,
            mean_psi: val.mean_psi,
            mean_eq_loss: validation_eq_loss(&model, &store, val_set)?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        metrics.push(row);
        train_phi.push(phi.iter().sum::<f64>() / n);
    }
    let losses: Vec<f64> = metrics.iter().map(|r| r.train_loss).collect();
    let h1_correlation = pearson(&losses, &train_phi);
    Ok(TrainOutcome {
        model,
        store,
        metrics,
        train_phi,
        h1_correlation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub use_residual: bool,
    /// Mean catching rate against ground truth before any update.
    pub initial_psi: f64,
    pub train_losses: Vec<f64>,
    pub final_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run(&self, seed: u64, use_residual: bool) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.seed == seed && r.use_residual == use_residual)
    }
}

/// Trains rectangular attention from a corner-pinned start with and without
/// the residual path, for every seed.
pub fn ablation_residual(base: &TrainConfig, train_set: &Dataset, val_set: &Dataset, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for use_residual in [true, false] {
            let cfg = TrainConfig {
                attention_kind: AttentionKind::Rectangular,
                adversarial_init: true,
                use_residual,
                seed,
                ..base.clone()
            };
            let mut store = ParamStore::new();
            let initial = Model::new(&cfg, &train_set.header, &mut store)?;
            let initial_psi = evaluate(&initial, &store, val_set)?.mean_psi;
            let out = train(&cfg, train_set, val_set)?;
            runs.push(AblationRun {
                seed,
                use_residual,
                initial_psi,
                train_losses: out.metrics.iter().map(|r| r.train_loss).collect(),
                final_val_acc: out.metrics.last().map_or(0.0, |r| r.val_acc),
            });
        }
    }
    Ok(AblationReport { runs })
}

/// Largest absolute gradient over the two trunk convolutions upstream of the
/// shallow slot, after a forward pass whose attention map is identically
/// zero. Without the residual path the map multiplies every upstream signal
/// by zero, so the result is exactly 0.
pub fn zero_map_upstream_gradient(model: &Model, store: &ParamStore, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if model.depth != InsertionDepth::Shallow {
        return Err(Error::InvalidArgument("zero-map probe needs the shallow slot".into()));
    }
    let (sh, sw) = model.slot_size();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let zero = tape.constant(Tensor::zeros(&[x.shape()[0], sh, sw]));
    let fwd = model.forward_with_map(&bound, tape.constant(x.clone()), zero)?;
    let grads = tape.backward(fwd.logits.softmax_cross_entropy(labels)?)?;
    let mut worst: f64 = 0.0;
    for conv in &model.convs[..2] {
        for id in [conv.weight, conv.bias] {
            if let Some(g) = grads.get(bound.get(id)) {
                worst = worst.max(g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleStability {
    pub sigmas: Vec<f64>,
    /// Mean absolute activation with the map replaced by ones.
    pub reference: f64,
    pub rescaled: Vec<f64>,
    pub raw: Vec<f64>,
}

impl RescaleStability {
    /// Rescaled means within `tol` relative of the reference.
    pub fn rescaled_within(&self, tol: f64) -> bool {
        self.rescaled.iter().all(|v| ((v - self.reference) / self.reference).abs() <= tol)
    }

    /// Raw means strictly increasing in sigma.
    pub fn raw_monotone(&self) -> bool {
        self.raw.windows(2).all(|w| w[0] < w[1])
    }
}

/// Mean absolute residual-attention output on random positive inputs for
/// centered square rectangles of each half-extent, with and without
/// rescaling. The reference uses the constant map 1, the mean-preserving
/// fixed point of rescaling.
pub fn rescale_stability(rng: &mut impl rand::Rng, sigmas: &[f64], c: usize, h: usize, w: usize) -> Result<RescaleStability> {
    let x = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0));
    let mean_abs = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64;
    let base = RectAttentionConfig::default();
    let reference = mean_abs(&crate::rect::apply_attention(
        &x,
        &Tensor::ones(&[h, w]),
        &RectAttentionConfig {
            use_rescale: false,
            ..base
        },
    )?);
    let (mut rescaled, mut raw) = (Vec::new(), Vec::new());
    for &s in sigmas {
        let f = render_map(&RectParams::new((0.5, 0.5), (s, s), 0.0), base.sharpness, h, w);
        rescaled.push(mean_abs(&crate::rect::apply_attention(&x, &f, &base)?));
        raw.push(mean_abs(&crate::rect::apply_attention(
            &x,
            &f,
            &RectAttentionConfig {
                use_rescale: false,
                ..base
            },
        )?));
    }
    Ok(RescaleStability {
        sigmas: sigmas.to_vec(),
        reference,
        rescaled,
        raw,
    })
}

/// Attention map of one `[C, H, W]` image at the slot resolution, plus the
/// rectangle when the module is rectangular. `None` without a module.
pub fn attention_map(model: &Model, store: &ParamStore, image: &Tensor) -> Result<Option<(Tensor, Option<RectParams>)>> {
    if model.attention.is_none() {
        return Ok(None);
    }
    let s = image.shape();
    if s != model.input {
        return Err(Error::ShapeMismatch {
            op: "attention_map",
            lhs: model.input.to_vec(),
            rhs: s.to_vec(),
        });
    }
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    let fwd = model.forward(&bound, tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?))?;
    let map = fwd.map.expect("module present").value();
    let (mh, mw) = (map.shape()[1], map.shape()[2]);
    let rect = fwd.params.map(|p| RectParams::from_slice(p.value().data()));
    Ok(Some((map.reshape(&[mh, mw])?, rect)))
}

/// Rectangle rendered at image resolution, or the map upsampled to it.
pub fn image_resolution_map(model: &Model, map: &Tensor, rect: Option<&RectParams>) -> Result<Tensor> {
    let (h, w) = (model.input[1], model.input[2]);
    match (rect, &model.attention) {
        (Some(r), Some(AttentionModule::Rect(m))) => Ok(render_map(r, m.cfg.sharpness, h, w)),
        _ => netpbm::resize_nearest(map, h, w),
    }
}

/// Writes `{index}_{kind}_{depth}.pgm` slot-resolution maps for every
/// listed image and every model. Returns the paths in writing order.
pub fn depth_comparison(models: &[(&Model, &ParamStore)], ds: &Dataset, indices: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for &i in indices {
        let sample = ds
            .samples
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
        for (model, store) in models {
            let Some((map, _)) = attention_map(model, store, &sample.image)? else {
                return Err(Error::InvalidArgument("depth comparison needs attention models".into()));
            };
            let path = out_dir.join(format!("{i:04}_{}_{}.pgm", model.kind().name(), model.depth.name()));
            netpbm::write_pgm(&path, &map)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
