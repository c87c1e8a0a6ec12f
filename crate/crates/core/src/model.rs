//! The end-to-end network: a stride-4 encoder-decoder backbone, center
//! heatmap / radius / offset heads, and the contour deformation network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_circle_contour, Circle, Contour, DEFAULT_VERTICES};
use crate::heatmap::{decode_circles, DetectionTargets, DEFAULT_DOWNSAMPLE, TRAIN_CT_SCORE};
use crate::losses::{detection_loss, focal_loss, iter_loss, offset_loss, radius_loss, LossBreakdown, LossWeights};
use crate::nn::{apply_bn_updates, Builder, Conv2d, ConvBnRelu, Ctx};
use crate::snake::{deform, SnakeConfig, SnakeNetwork};
use crate::tensor::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, MultiStepSchedule, ParamStore, Real,
    Tensor, Var,
};

/// Input sides are padded to a multiple of this (three stride-2 stages below
/// the output stride).
pub const INPUT_MULTIPLE: usize = 16;
/// Initial bias of the heatmap logits, `−ln((1 − 0.1) / 0.1)`.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel widths at strides 4, 8 and 16.
    pub widths: [usize; 3],
    /// Hidden width of each prediction head.
    pub head_conv: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128], head_conv: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadWidths {
    pub ct_hm: usize,
    pub radius: usize,
    pub reg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub heads: HeadWidths,
    pub vertices: usize,
    pub iterations: usize,
    pub downsample: usize,
    pub backbone: BackboneConfig,
    pub snake_width: usize,
    pub snake_fusion: usize,
    pub snake_head: [usize; 2],
    pub ct_score: f64,
    pub top_n: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Relative jitter of the ground-truth circles used as training proposals.
    pub proposal_jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let classes = 4;
        Self {
            classes,
            heads: HeadWidths { ct_hm: classes, radius: 1, reg: 2 },
            vertices: DEFAULT_VERTICES,
            iterations: 3,
            downsample: DEFAULT_DOWNSAMPLE,
            backbone: BackboneConfig::default(),
            snake_width: 128,
            snake_fusion: 256,
            snake_head: [256, 64],
            ct_score: TRAIN_CT_SCORE,
            top_n: 100,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: 200,
            milestones: vec![60, 80, 100, 150],
            gamma: 0.5,
            batch_size: 1,
            seed: 0,
            proposal_jitter: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 {
            return bad("class count must be positive".into());
        }
        if self.heads.ct_hm != self.classes {
            return bad(format!("heatmap head width {} differs from class count {}", self.heads.ct_hm, self.classes));
        }
        if self.heads.radius != 1 || self.heads.reg != 2 {
            return bad(format!("radius and offset heads must be 1 and 2 wide, got {} and {}", self.heads.radius, self.heads.reg));
        }
        if self.downsample != DEFAULT_DOWNSAMPLE {
            return bad(format!("the backbone produces stride {DEFAULT_DOWNSAMPLE}, config asks for {}", self.downsample));
        }
        if self.vertices <= crate::snake::SNAKE_KERNEL || self.iterations == 0 {
            return bad(format!("contours need more than {} vertices and at least one iteration", crate::snake::SNAKE_KERNEL));
        }
        if self.batch_size == 0 || self.top_n == 0 {
            return bad("batch_size and top_n must be positive".into());
        }
        if !(0.0..1.0).contains(&self.proposal_jitter) {
            return bad(format!("proposal_jitter {} outside [0, 1)", self.proposal_jitter));
        }
        if self.backbone.widths.contains(&0) || self.backbone.head_conv == 0 {
            return bad("backbone widths must be positive".into());
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> MultiStepSchedule {
        MultiStepSchedule { base_lr: self.adam.lr, milestones: self.milestones.clone(), gamma: self.gamma }
    }

    fn snake_config(&self) -> SnakeConfig {
        SnakeConfig {
            feature_channels: self.backbone.widths[0],
            width: self.snake_width,
            fusion_width: self.snake_fusion,
            head_widths: self.snake_head,
            iterations: self.iterations,
        }
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: ConvBnRelu,
    down: [[ConvBnRelu; 2]; 3],
    up_proj: [ConvBnRelu; 2],
    up_conv: [ConvBnRelu; 2],
}

impl Backbone {
    fn build<T: Real>(b: &mut Builder<T>, cfg: &BackboneConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        let stage = |b: &mut Builder<T>, i: usize, cin: usize, cout: usize| -> Result<[ConvBnRelu; 2]> {
            Ok([
                ConvBnRelu::build(b, &format!("backbone.down{i}.0"), cin, cout, 3, 2)?,
                ConvBnRelu::build(b, &format!("backbone.down{i}.1"), cout, cout, 3, 1)?,
            ])
        };
        Ok(Self {
            stem: ConvBnRelu::build(b, "backbone.stem", 3, w0, 3, 2)?,
            down: [stage(b, 0, w0, w0)?, stage(b, 1, w0, w1)?, stage(b, 2, w1, w2)?],
            up_proj: [
                ConvBnRelu::build(b, "backbone.up0.proj", w2, w1, 1, 1)?,
                ConvBnRelu::build(b, "backbone.up1.proj", w1, w0, 1, 1)?,
            ],
            up_conv: [
                ConvBnRelu::build(b, "backbone.up0.conv", w1, w1, 3, 1)?,
                ConvBnRelu::build(b, "backbone.up1.conv", w0, w0, 3, 1)?,
            ],
        })
    }

    /// `[B,3,H,W] → [B,w0,H/4,W/4]`.
    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut x = self.stem.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(3);
        for [a, b] in &self.down {
            x = a.forward(ctx, x)?;
            x = b.forward(ctx, x)?;
            skips.push(x);
        }
        for (i, (proj, conv)) in self.up_proj.iter().zip(&self.up_conv).enumerate() {
            let u = ctx.g.upsample2x(x)?;
            let u = proj.forward(ctx, u)?;
            let u = ctx.g.add(u, skips[1 - i])?;
            x = conv.forward(ctx, u)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Conv2d,
    out: Conv2d,
}

impl Head {
    fn build<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, width: usize, cout: usize, bias: f64) -> Result<Self> {
        let hidden = Conv2d::build(b, &format!("head.{name}.0"), cin, width, 3, 1, true)?;
        let out = Conv2d::build(b, &format!("head.{name}.1"), width, cout, 1, 1, true)?;
        if let Some(id) = out.bias {
            b.store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = T::of(bias));
        }
        Ok(Self { hidden, out })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.g.relu(h);
        self.out.forward(ctx, h)
    }
}

/// Raw head outputs for one image, at output-grid resolution.
#[derive(Clone, Debug)]
pub struct HeadMaps<T: Real> {
    /// `[C,h,w]` clamped-sigmoid probabilities.
    pub heatmap: Tensor<T>,
    /// `[1,h,w]` in grid units.
    pub radius: Tensor<T>,
    /// `[2,h,w]`.
    pub offset: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub circle: Circle,
    pub contour: Contour,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub ct_score: f64,
    pub top_n: usize,
    /// `false` returns the circle proposals undeformed.
    pub deform: bool,
}

/// One training image with its encoded targets.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `[3,H,W]`, sides multiples of [`INPUT_MULTIPLE`].
    pub image: Tensor<f32>,
    pub targets: DetectionTargets,
    pub circles: Vec<Circle>,
    /// Ground-truth contours with the model's vertex count, paired with `circles`.
    pub contours: Vec<Contour>,
}

pub struct CircleSnake<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Backbone,
    heads: [Head; 3],
    snake: SnakeNetwork,
}

impl<T: Real> CircleSnake<T> {
    /// Builds a freshly initialized network from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (backbone, heads) = {
            let mut b = Builder::new(&mut store, &mut rng);
            let backbone = Backbone::build(&mut b, &config.backbone)?;
            let w0 = config.backbone.widths[0];
            let hc = config.backbone.head_conv;
            let heads = [
                Head::build(&mut b, "ct_hm", w0, hc, config.heads.ct_hm, HEATMAP_PRIOR_BIAS)?,
                Head::build(&mut b, "radius", w0, hc, config.heads.radius, 0.0)?,
                Head::build(&mut b, "reg", w0, hc, config.heads.reg, 0.0)?,
            ];
            (backbone, heads)
        };
        let snake = SnakeNetwork::build(&mut store, &mut rng, config.snake_config())?;
        Ok(Self { config, store, backbone, heads, snake })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Backbone features and the three head outputs for `[B,3,H,W]`.
    fn forward_maps(&self, ctx: &mut Ctx<T>, images: Var) -> Result<(Var, [Var; 3])> {
        let features = self.backbone.forward(ctx, images)?;
        let logits = self.heads[0].forward(ctx, features)?;
        let hm = ctx.g.clamped_sigmoid(logits);
        let radius = self.heads[1].forward(ctx, features)?;
        let offset = self.heads[2].forward(ctx, features)?;
        Ok((features, [hm, radius, offset]))
    }

    /// Detects and segments the objects of one `[3,H,W]` image.
    pub fn predict(&self, image: &Tensor<T>, opts: &PredictOptions) -> Result<(HeadMaps<T>, Vec<InstancePrediction>)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::contract(format!("expected a [3,H,W] image, got {s:?}")));
        }
        let padded = pad_image(image, INPUT_MULTIPLE)?;
        let ps = padded.shape().to_vec();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, false);
        let x = ctx.g.leaf(padded.reshaped(vec![1, 3, ps[1], ps[2]])?);
        let (features, [hm, radius, offset]) = self.forward_maps(&mut ctx, x)?;
        let take = |v: Var, ctx: &Ctx<T>| -> Result<Tensor<T>> {
            let sh = ctx.g.shape(v)[1..].to_vec();
            Tensor::new(sh, ctx.g.data(v).to_vec())
        };
        let maps = HeadMaps { heatmap: take(hm, &ctx)?, radius: take(radius, &ctx)?, offset: take(offset, &ctx)? };
        let detections = decode_circles(
            &maps.heatmap,
            &maps.radius,
            &maps.offset,
            opts.top_n,
            opts.ct_score,
            self.config.downsample,
        )?;
        let circles: Vec<Circle> = detections.circles.into_iter().map(|c| Circle { r: c.r.max(1.0), ..c }).collect();
        let proposals = circles
            .iter()
            .map(|c| sample_circle_contour(c, self.config.vertices).map(|ct| (0, ct)))
            .collect::<Result<Vec<_>>>()?;
        let contours = if opts.deform && !proposals.is_empty() {
            deform(&mut ctx, &self.snake, features, &proposals, self.config.iterations, self.config.downsample as f64)?
                .contours
        } else {
            proposals.into_iter().map(|(_, c)| c).collect()
        };
        let preds = circles
            .into_iter()
            .zip(contours)
            .map(|(circle, contour)| InstancePrediction { score: circle.score, circle, contour })
            .collect();
        Ok((maps, preds))
    }

    pub fn save(&self, path: &Path, adam: &AdamState<T>, epoch: Option<usize>) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "epoch": epoch });
        save_checkpoint(path, &self.store, adam, &meta)
    }

    /// Restores a model and its optimizer state, plus the saved epoch.
    pub fn load(path: &Path) -> Result<(Self, AdamState<T>, Option<usize>)> {
        let ck = load_checkpoint::<T>(path)?;
        let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let config: ModelConfig = serde_json::from_value(ck.metadata["config"].clone())
            .map_err(|e| fail(format!("model config missing or invalid: {e}")))?;
        let epoch = ck.metadata["epoch"].as_u64().map(|e| e as usize);
        let mut model = Self::new(config)?;
        if model.store.len() != ck.params.len() {
            return Err(fail(format!("{} tensors stored, the model has {}", ck.params.len(), model.store.len())));
        }
        model.store.copy_values_from(&ck.params).map_err(|e| fail(e.to_string()))?;
        Ok((model, ck.adam, epoch))
    }
}

/// Zero-pads `[C,H,W]` on the bottom and right to multiples of `multiple`.
pub fn pad_image<T: Real>(image: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, ph, pw], out)
}

/// Optimizer, schedule and step counter around a [`CircleSnake`].
pub struct Trainer<T: Real = f32> {
    pub model: CircleSnake<T>,
    pub adam: AdamState<T>,
    pub schedule: MultiStepSchedule,
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: CircleSnake<T>) -> Self {
        let adam = AdamState::new(&model.store, model.config.adam);
        Self::resume(model, adam)
    }

    pub fn resume(model: CircleSnake<T>, adam: AdamState<T>) -> Self {
        let schedule = model.config.schedule();
        let step = adam.step_count;
        Self { model, adam, schedule, step }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.adam.set_lr(self.schedule.lr_at(epoch));
    }

    pub fn lr(&self) -> f64 {
        self.adam.lr()
    }

    /// Proposal contours: ground-truth circles with center and radius
    /// perturbed by up to `proposal_jitter · r`, drawn from a stream keyed by
    /// the step counter.
    fn proposals(&self, batch: &[&TrainSample]) -> Result<Vec<(usize, Contour)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed ^ 0x5eed_c0de);
        rng.set_stream(self.step);
        let j = self.model.config.proposal_jitter;
        let mut out = Vec::new();
        for (b, s) in batch.iter().enumerate() {
            for c in &s.circles {
                let (dx, dy, dr): (f64, f64, f64) = if j > 0.0 {
                    (rng.gen_range(-j..=j), rng.gen_range(-j..=j), rng.gen_range(-j..=j))
                } else {
                    (0.0, 0.0, 0.0)
                };
                let jittered = Circle { cx: c.cx + dx * c.r, cy: c.cy + dy * c.r, r: c.r * (1.0 + dr), ..*c };
                out.push((b, sample_circle_contour(&jittered, self.model.config.vertices)?));
            }
        }
        Ok(out)
    }

    /// One optimizer step on `batch`. With `deform` off the contour network
    /// is left out of the loss and receives zero gradients.
    pub fn train_step(&mut self, batch: &[&TrainSample], deform_stage: bool) -> Result<LossBreakdown> {
        let first = batch.first().ok_or_else(|| Error::contract("empty training batch"))?;
        let is = first.image.shape().to_vec();
        if is.len() != 3 || is[0] != 3 || is[1] % INPUT_MULTIPLE != 0 || is[2] % INPUT_MULTIPLE != 0 {
            return Err(Error::contract(format!("training images must be [3,H,W] padded to {INPUT_MULTIPLE}, got {is:?}")));
        }
        let mut data = Vec::with_capacity(batch.len() * first.image.len());
        for s in batch {
            if s.image.shape() != is.as_slice() {
                return Err(Error::contract("training images in one batch must share a size"));
            }
            if s.contours.len() != s.circles.len() || s.contours.iter().any(|c| c.len() != self.model.config.vertices) {
                return Err(Error::contract("every ground-truth circle needs a contour with the model's vertex count"));
            }
            data.extend(s.image.data().iter().map(|&v| T::of(v as f64)));
        }
        let proposals = if deform_stage { self.proposals(batch)? } else { Vec::new() };
        let targets: Vec<&DetectionTargets> = batch.iter().map(|s| &s.targets).collect();
        let cfg = &self.model.config;

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.model.store, true);
        let x = ctx.g.leaf(Tensor::new(vec![batch.len(), 3, is[1], is[2]], data)?);
        let (features, [hm, radius, offset]) = self.model.forward_maps(&mut ctx, x)?;
        let lf = focal_loss(ctx.g, hm, &targets, cfg.loss.alpha, cfg.loss.beta)?;
        let lr = radius_loss(ctx.g, radius, &targets)?;
        let lo = offset_loss(ctx.g, offset, &targets)?;
        let mut total = detection_loss(ctx.g, lf, lr, lo, &cfg.loss)?;
        let mut l_iter = 0.0;
        if !proposals.is_empty() {
            let gts: Vec<&Contour> = batch.iter().flat_map(|s| s.contours.iter()).collect();
            let d = deform(&mut ctx, &self.model.snake, features, &proposals, cfg.iterations, cfg.downsample as f64)?;
            for v in d.iterations {
                let li = iter_loss(ctx.g, v, &gts)?;
                l_iter += ctx.g.value(li).item().as_f64();
                total = ctx.g.add(total, li)?;
            }
        }
        let value = |v: Var| ctx.g.value(v).item().as_f64();
        let breakdown = LossBreakdown::compose(value(lf), value(lr), value(lo), l_iter, &cfg.loss);
        if !breakdown.is_finite() {
            return Err(Error::NonFinite { what: format!("loss at step {} ({breakdown:?})", self.step), index: 0 });
        }
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        g.backward(total)?;
        let store = &mut self.model.store;
        store.zero_grad();
        g.accumulate_into(store);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_trainable(id) && store.tensor(id).grad().is_none() {
                let n = store.tensor(id).len();
                store.tensor_mut(id).accumulate_grad(&vec![T::zero(); n]);
            }
        }
        adam_step(store, &mut self.adam)?;
        apply_bn_updates(store, &bn_updates);
        self.step += 1;
        Ok(breakdown)
    }

    /// Gradients of one batch without an optimizer step, by parameter name.
    pub fn gradients(&mut self, batch: &[&TrainSample]) -> Result<Vec<(String, Vec<T>)>> {
        let saved = self.model.store.clone();
        let adam = self.adam.clone();
        let step = self.step;
        self.adam.set_lr(0.0);
        let result = self.train_step(batch, true);
        let grads = self
            .model
            .store
            .ids()
            .filter(|&id| self.model.store.is_trainable(id))
            .map(|id| {
                let t = self.model.store.tensor(id);
                (self.model.store.name(id).to_string(), t.grad().map(<[T]>::to_vec).unwrap_or_default())
            })
            .collect();
        self.model.store = saved;
        self.adam = adam;
        self.step = step;
        result.map(|_| grads)
    }
}

/// The fixed-order training log record of one step.
pub fn log_line(epoch: usize, step: u64, b: &LossBreakdown, lr: f64) -> String {
    format!(
        "step={step} epoch={epoch} l_focal={:.6} l_radius={:.6} l_offset={:.6} l_det={:.6} l_iter={:.6} lr={lr:.3e}",
        b.l_focal, b.l_radius, b.l_offset, b.l_det, b.l_iter
    )
}
