//! The training loop: batch assembly, optimization, LR schedule, checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::encoder::{self, Architecture, EncoderParams, Gradients};
use crate::error::{Error, Result};
use crate::imaging::{self, ContentParams, ImageTensor, ProbabilityMap};
use crate::math::{self, Real};
use crate::objective::{self, LossConfig, PrototypeBank, ScoreQueue, TargetSet, Targets};
use crate::regions::{self, RegionTree};
use crate::seed;
use crate::superpixel::{self, SlicParams, SuperpixelMap};
use crate::viewgen::{self, ViewBatch, ViewConfig};

/// How images are cut into regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decomposition {
    Superpixel,
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub images_per_batch: usize,
    pub views: usize,
    pub view_size: (usize, usize),
    pub decomposition: Decomposition,
    /// SLIC region size or grid cell side, in pixels.
    pub region_size: usize,
    pub slic_compactness: f64,
    pub slic_iterations: usize,
    pub mask_coverage: f64,
    /// Whether the view that supplies the assignment targets is masked too.
    pub mask_primary_view: bool,
    pub beta_range: (f64, f64),
    pub max_offset: Option<f64>,
    pub min_region_pixels: usize,
    pub color_strength: f32,
    pub blur_sigma_max: f64,
    pub content: ContentParams,
    pub embed_dim: usize,
    pub concepts: usize,
    pub arch: Architecture,
    pub queue_capacity: usize,
    pub loss: LossConfig,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// LARS trust coefficient; `None` is plain SGD.
    pub lars: Option<f64>,
    /// Prototypes stay fixed for this many initial steps.
    pub freeze_prototypes_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            images_per_batch: 4,
            views: 5,
            view_size: (64, 64),
            decomposition: Decomposition::Superpixel,
            region_size: 8,
            slic_compactness: 10.0,
            slic_iterations: 10,
            mask_coverage: 0.25,
            mask_primary_view: true,
            beta_range: (0.5, 2.0),
            max_offset: None,
            min_region_pixels: 4,
            color_strength: 0.5,
            blur_sigma_max: 1.5,
            content: ContentParams::default(),
            embed_dim: 64,
            concepts: 32,
            arch: Architecture::unet(1),
            queue_capacity: 512,
            loss: LossConfig::default(),
            base_lr: 0.01,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 1e-6,
            momentum: 0.9,
            lars: None,
            freeze_prototypes_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.images_per_batch == 0 || self.views < 2 {
            return bad(format!("need >= 1 image and >= 2 views per batch, got {}×{}", self.images_per_batch, self.views));
        }
        if self.embed_dim == 0 || self.concepts == 0 || self.region_size == 0 || self.total_steps == 0 {
            return bad("embed_dim, concepts, region_size and total_steps must be >= 1".into());
        }
        let d = self.arch.downsampling();
        if self.view_size.0 == 0 || self.view_size.0 % d != 0 || self.view_size.1 % d != 0 {
            return bad(format!("view size {:?} must be a positive multiple of {d}", self.view_size));
        }
        if !(0.0..=1.0).contains(&self.mask_coverage) {
            return bad(format!("mask_coverage {} outside [0, 1]", self.mask_coverage));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        let (lo, hi) = self.beta_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("beta range {:?} must satisfy 0 < lo <= hi", self.beta_range));
        }
        if let Some(eta) = self.lars {
            if !(eta > 0.0) {
                return bad("lars coefficient must be positive".into());
            }
        }
        self.loss.validate()
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            views: self.views,
            view_size: self.view_size,
            beta_range: self.beta_range,
            max_offset: self.max_offset,
            flip: true,
            min_region_pixels: self.min_region_pixels,
            retries: 10,
        }
    }

    pub fn layout(&self) -> BatchLayout {
        BatchLayout { images: self.images_per_batch, views: self.views }
    }
}

/// `b ↔ (n, m)` for the `N·M` views of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLayout {
    pub images: usize,
    pub views: usize,
}

impl BatchLayout {
    pub fn len(&self) -> usize {
        self.images * self.views
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self, b: usize) -> (usize, usize) {
        (b / self.views, b % self.views)
    }

    pub fn flat(&self, n: usize, m: usize) -> usize {
        n * self.views + m
    }
}

/// Linear warmup from 0 then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.base_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + math::cos(core::f64::consts::PI * progress))
}

/// An image with its cached decomposition and center-sampling map.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub image: ImageTensor,
    pub map: SuperpixelMap,
    pub pmap: ProbabilityMap,
}

pub fn decompose(img: &ImageTensor, cfg: &TrainConfig) -> Result<SuperpixelMap> {
    match cfg.decomposition {
        Decomposition::Grid => superpixel::grid_decompose(img.height(), img.width(), cfg.region_size),
        Decomposition::Superpixel => {
            if cfg.region_size == 1 {
                return superpixel::grid_decompose(img.height(), img.width(), 1);
            }
            let params = SlicParams { region_size: cfg.region_size, compactness: cfg.slic_compactness, iterations: cfg.slic_iterations };
            superpixel::slic(img, params)
        }
    }
}

pub fn prepare_image(img: ImageTensor, cfg: &TrainConfig) -> Result<PreparedImage> {
    let map = decompose(&img, cfg)?;
    let pmap = imaging::content_probability(&img, cfg.content);
    Ok(PreparedImage { image: img, map, pmap })
}

const TAG_VIEWS: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_AUG: u64 = 3;
const TAG_EPOCH: u64 = 4;
const TAG_INIT: u64 = 5;
const TAG_BANK: u64 = 6;

/// Views of one image for `step`, masked, augmented and normalized.
pub fn make_views(img: &PreparedImage, image_id: usize, step: u64, cfg: &TrainConfig) -> Result<ViewBatch> {
    let base = seed::derive(cfg.seed, &[step, image_id as u64]);
    let raw = viewgen::gen_views(&img.image, &img.map, &img.pmap, &cfg.view_config(), seed::derive(base, &[TAG_VIEWS]), image_id)?;
    let mut masked = viewgen::mask_views(&raw, cfg.mask_coverage, seed::derive(base, &[TAG_MASK]));
    if !cfg.mask_primary_view {
        masked.views[objective::PRIMARY_VIEW] = raw.views[objective::PRIMARY_VIEW].clone();
    }
    let mut out = viewgen::appearance_aug(&masked, cfg.color_strength, cfg.blur_sigma_max, seed::derive(base, &[TAG_AUG]));
    for v in &mut out.views {
        v.image = v.image.normalize();
    }
    Ok(out)
}

/// Dataset indices for the `images_per_batch` slots of `step`, walking a
/// fresh permutation every epoch.
pub fn batch_indices(dataset_len: usize, step: u64, cfg: &TrainConfig) -> Vec<usize> {
    let n = cfg.images_per_batch as u64;
    let len = dataset_len as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..n)
        .map(|j| {
            let g = step * n + j;
            let epoch = g / len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                perm.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[TAG_EPOCH, epoch])));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[(g % len) as usize]
        })
        .collect()
}

/// Loss and gradients of one batch of views.
#[derive(Debug, Clone)]
pub struct BatchEval<R> {
    pub loss: f64,
    pub grads: Gradients<R>,
    pub bank_grad: Vec<f64>,
    pub targets: TargetSet,
    pub scores: RegionTree<Vec<f64>>,
    pub regions: usize,
}

/// Forward, pool, score, assign and backpropagate one batch. With `fixed`
/// targets, the assignment step is skipped.
pub fn evaluate_batch<R: Real>(
    params: &EncoderParams<R>,
    bank: &PrototypeBank,
    queue: &ScoreQueue,
    batches: &[ViewBatch],
    loss_cfg: &LossConfig,
    fixed: Option<&Targets>,
) -> Result<BatchEval<R>> {
    let mut tree = RegionTree::new();
    let mut caches = Vec::new();
    for (n, batch) in batches.iter().enumerate() {
        for (m, view) in batch.views.iter().enumerate() {
            let (emb, cache) = encoder::forward_cached(params, &view.image)?;
            regions::build_tree(&emb, &view.labels, n, m, &mut tree)?;
            caches.push((n, m, emb.pixels(), cache));
        }
    }
    let pooled = regions::pool_means(&tree);
    let scores = objective::score_tree(&pooled, bank);
    let targets = match fixed {
        Some(t) => TargetSet { targets: t.clone(), primary_scores: Vec::new(), queue_rows: 0 },
        None => objective::compute_targets(&scores, queue, loss_cfg)?,
    };
    let step = objective::loss_with_targets(&pooled, bank, &targets.targets, loss_cfg)?;
    let mut grads = Gradients::zeros_like(params);
    for (n, m, pixels, cache) in &caches {
        if step.mean_grads.region_count(*n, *m) == 0 {
            continue;
        }
        let up = regions::pool_backward(&tree, &pooled, &step.mean_grads, *n, *m, params.embed_dim, *pixels);
        let up: Vec<R> = up.into_iter().map(R::from_f64).collect();
        grads.add_assign(&encoder::backward(params, cache, &up)?);
    }
    Ok(BatchEval { loss: step.loss, grads, bank_grad: step.bank_grad, targets, scores, regions: pooled.len() })
}

/// Momentum buffers for the encoder and the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub params: Vec<Vec<f32>>,
    pub bank: Vec<f64>,
}

/// Everything a run carries from step to step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams<f32>,
    pub bank: PrototypeBank,
    pub queue: ScoreQueue,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = encoder::init_params::<f32>(seed::derive(cfg.seed, &[TAG_INIT]), cfg.embed_dim, cfg.arch)?;
        let bank = PrototypeBank::init(seed::derive(cfg.seed, &[TAG_BANK]), cfg.embed_dim, cfg.concepts)?;
        let optimizer = OptimizerState {
            params: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            bank: vec![0.0; bank.data.len()],
        };
        Ok(Self { params, bank, queue: ScoreQueue::new(cfg.queue_capacity, cfg.concepts), optimizer, step: 0 })
    }
}

/// What one step reports to the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub queue_fill: f64,
    pub concept_entropy: f64,
    pub regions: usize,
}

fn trust_ratio(w_norm: f64, g_norm: f64, eta: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        eta * w_norm / g_norm
    } else {
        1.0
    }
}

/// SGD with momentum and decoupled-into-gradient weight decay, optional
/// per-tensor LARS scaling.
fn sgd_update<R: Real>(w: &mut [R], g: &[R], v: &mut [R], lr: f64, cfg: &TrainConfig) {
    let wd = cfg.weight_decay;
    let scale = match cfg.lars {
        Some(eta) => {
            let wn = math::sqrt(w.iter().map(|x| x.to_f64() * x.to_f64()).sum());
            let gn = math::sqrt(g.iter().zip(w.iter()).map(|(gi, wi)| {
                let t = gi.to_f64() + wd * wi.to_f64();
                t * t
            }).sum());
            trust_ratio(wn, gn, eta)
        }
        None => 1.0,
    };
    let mu = R::from_f64(cfg.momentum);
    let step = R::from_f64(lr * scale);
    let wd = R::from_f64(wd);
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mu * *vi + gi + wd * *wi;
        *wi -= step * *vi;
    }
}

/// One optimization step on the images `ids` of `dataset`.
pub fn train_step(state: &mut TrainState, dataset: &[PreparedImage], ids: &[usize], cfg: &TrainConfig) -> Result<StepReport> {
    let step = state.step;
    let mut batches = Vec::with_capacity(ids.len());
    for &id in ids {
        batches.push(make_views(&dataset[id], id, step, cfg)?);
    }
    let eval = evaluate_batch(&state.params, &state.bank, &state.queue, &batches, &cfg.loss, None)?;
    if !eval.loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("loss {} over {} regions", eval.loss, eval.regions) });
    }
    if !eval.bank_grad.iter().all(|v| v.is_finite()) || !eval.grads.tensors.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss { step, detail: "non-finite gradient".into() });
    }
    let lr = lr_at(step, cfg);
    if lr > 0.0 {
        for ((t, g), v) in state.params.tensors.iter_mut().zip(&eval.grads.tensors).zip(&mut state.optimizer.params) {
            sgd_update(&mut t.data, g, v, lr, cfg);
        }
        if step >= cfg.freeze_prototypes_steps {
            sgd_update(&mut state.bank.data, &eval.bank_grad, &mut state.optimizer.bank, lr, cfg);
            state.bank.renormalize();
        }
    }
    state.queue.push_all(&eval.targets.primary_scores)?;
    let concept_entropy = objective::concept_entropy(eval.scores.iter().map(|(_, _, _, s)| s), cfg.loss.temperature);
    state.step += 1;
    Ok(StepReport {
        step,
        lr,
        loss: eval.loss,
        queue_fill: state.queue.fill_ratio(),
        concept_entropy,
        regions: eval.regions,
    })
}

/// Concept-usage entropy of `state` on `images`, using views drawn with a
/// seed unrelated to any training step.
pub fn usage_entropy(state: &TrainState, dataset: &[PreparedImage], cfg: &TrainConfig, probe_seed: u64) -> Result<f64> {
    let probe = TrainConfig { seed: seed::derive(cfg.seed, &[probe_seed]), ..cfg.clone() };
    let mut rows = Vec::new();
    for (id, img) in dataset.iter().enumerate() {
        let batch = make_views(img, id, 0, &probe)?;
        for view in &batch.views {
            let emb = encoder::forward(&state.params, &view.image)?;
            let mut tree = RegionTree::new();
            regions::build_tree(&emb, &view.labels, 0, 0, &mut tree)?;
            let pooled = regions::pool_means(&tree);
            rows.extend(objective::score_tree(&pooled, &state.bank).iter().map(|(_, _, _, s)| s.clone()));
        }
    }
    Ok(objective::concept_entropy(&rows, cfg.loss.temperature))
}

const MAGIC: &[u8; 8] = b"VICECKPT";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, expected: usize, what: &str) -> Result<usize> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Checkpoint(format!("{what}: expected {expected} values, found {n}")));
        }
        Ok(n)
    }
    fn f32s(&mut self, expected: usize, what: &str) -> Result<Vec<f32>> {
        let n = self.len(expected, what)?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let n = self.len(expected, what)?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Serializes the full training state, little endian.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    match state.params.arch {
        Architecture::SingleConv { kernel } => {
            w.u32(0);
            w.u64(kernel as u64);
        }
        Architecture::UNet { widths } => {
            w.u32(1);
            widths.iter().for_each(|&x| w.u64(x as u64));
        }
    }
    w.u64(state.params.embed_dim as u64);
    w.u64(state.bank.concepts as u64);
    w.u64(state.step);
    w.u64(state.params.tensors.len() as u64);
    for t in &state.params.tensors {
        w.u64(t.shape.len() as u64);
        t.shape.iter().for_each(|&d| w.u64(d as u64));
        w.f32s(&t.data);
    }
    state.optimizer.params.iter().for_each(|v| w.f32s(v));
    w.f64s(&state.bank.data);
    w.f64s(&state.optimizer.bank);
    w.u64(state.queue.capacity() as u64);
    w.u64(state.queue.len() as u64);
    state.queue.iter().for_each(|r| w.f64s(r));
    let total = w.0.len() as u64 + 8;
    w.u64(total);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let arch = match r.u32()? {
        0 => Architecture::SingleConv { kernel: r.u64()? as usize },
        1 => {
            let mut widths = [0usize; 4];
            for x in &mut widths {
                *x = r.u64()? as usize;
            }
            Architecture::UNet { widths }
        }
        t => return Err(Error::Checkpoint(format!("unknown architecture tag {t}"))),
    };
    let embed_dim = r.u64()? as usize;
    let concepts = r.u64()? as usize;
    let step = r.u64()?;
    let mut params = EncoderParams::<f32>::zeros(arch, embed_dim);
    let count = r.u64()? as usize;
    if count != params.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} parameter tensors, found {count}", params.tensors.len())));
    }
    for t in &mut params.tensors {
        let ndim = r.u64()? as usize;
        let mut shape = Vec::new();
        for _ in 0..ndim.min(8) {
            shape.push(r.u64()? as usize);
        }
        if shape != t.shape {
            return Err(Error::Checkpoint(format!("{}: shape {:?} does not match {:?}", t.name, shape, t.shape)));
        }
        t.data = r.f32s(t.data.len(), &t.name)?;
    }
    let mut momentum = Vec::new();
    for t in &params.tensors {
        momentum.push(r.f32s(t.data.len(), "momentum")?);
    }
    let bank_data = r.f64s(embed_dim * concepts, "bank")?;
    let bank_momentum = r.f64s(embed_dim * concepts, "bank momentum")?;
    let capacity = r.u64()? as usize;
    let len = r.u64()? as usize;
    if len > capacity {
        return Err(Error::Checkpoint(format!("queue holds {len} rows but capacity is {capacity}")));
    }
    let mut queue = ScoreQueue::new(capacity, concepts);
    for _ in 0..len {
        queue.push(&r.f64s(concepts, "queue row")?)?;
    }
    let total = r.u64()?;
    if total != bytes.len() as u64 || r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("length field {total} does not match {} bytes", bytes.len())));
    }
    Ok(TrainState {
        params,
        bank: PrototypeBank { dim: embed_dim, concepts, data: bank_data },
        queue,
        optimizer: OptimizerState { params: momentum, bank: bank_momentum },
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn striped(h: usize, w: usize, phase: usize) -> ImageTensor {
        let mut img = ImageTensor::filled(h, w, [0.2, 0.3, 0.4]);
        for y in 0..h {
            for x in 0..w {
                let band = ((x + phase) / 8 + y / 16) % 3;
                let rgb = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.2, 0.2, 0.9]][band];
                let tex = ((x * 7 + y * 3) % 5) as f32 * 0.02;
                for c in 0..3 {
                    img.set(c, y, x, (rgb[c] + tex).min(1.0));
                }
            }
        }
        img
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            images_per_batch: 2,
            views: 3,
            view_size: (16, 16),
            region_size: 6,
            embed_dim: 8,
            concepts: 6,
            arch: Architecture::unet(1),
            queue_capacity: 16,
            warmup_steps: 2,
            total_steps: 20,
            base_lr: 0.05,
            ..TrainConfig::default()
        }
    }

    fn dataset(cfg: &TrainConfig) -> Vec<PreparedImage> {
        (0..3).map(|i| prepare_image(striped(32, 32, i * 5), cfg).unwrap()).collect()
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { base_lr: 0.5, warmup_steps: 10, total_steps: 110, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(1, &cfg) - 0.05).abs() < 1e-15);
        assert!((lr_at(10, &cfg) - 0.5).abs() < 1e-15);
        assert!((lr_at(60, &cfg) - 0.25).abs() < 1e-12);
        assert!(lr_at(110, &cfg) < 0.5 * 1e-6);
        for s in 10..110 {
            assert!(lr_at(s + 1, &cfg) <= lr_at(s, &cfg));
        }
    }

    #[test]
    fn layout_is_a_bijection() {
        let l = BatchLayout { images: 3, views: 5 };
        for b in 0..l.len() {
            let (n, m) = l.split(b);
            assert!(n < 3 && m < 5);
            assert_eq!(l.flat(n, m), b);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { views: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { view_size: (60, 64), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { mask_coverage: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let cfg = TrainConfig { images_per_batch: 2, ..TrainConfig::default() };
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(6, s, &cfg)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn zero_lr_changes_nothing_but_the_queue() {
        let cfg = TrainConfig { warmup_steps: 5, ..small_cfg() };
        let data = dataset(&cfg);
        let mut state = TrainState::init(&cfg).unwrap();
        let before = state.clone();
        let report = train_step(&mut state, &data, &[0, 1], &cfg).unwrap();
        assert_eq!(report.lr, 0.0);
        assert_eq!(state.params, before.params);
        assert_eq!(state.bank, before.bank);
        assert!(state.queue.len() > 0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = small_cfg();
        let data = dataset(&cfg);
        let run = || {
            let mut s = TrainState::init(&cfg).unwrap();
            (0..4).map(|k| train_step(&mut s, &data, &batch_indices(data.len(), k, &cfg), &cfg).unwrap().loss.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_step_lowers_the_loss_on_fixed_targets() {
        let cfg = small_cfg();
        let data = dataset(&cfg);
        let mut state = TrainState::init(&cfg).unwrap();
        let batches: Vec<ViewBatch> = (0..2).map(|i| make_views(&data[i], i, 0, &cfg).unwrap()).collect();
        let eval = evaluate_batch(&state.params, &state.bank, &state.queue, &batches, &cfg.loss, None).unwrap();
        let lr = 0.01;
        let plain = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..cfg.clone() };
        for ((t, g), v) in state.params.tensors.iter_mut().zip(&eval.grads.tensors).zip(&mut state.optimizer.params) {
            sgd_update(&mut t.data, g, v, lr, &plain);
        }
        sgd_update(&mut state.bank.data, &eval.bank_grad, &mut state.optimizer.bank, lr, &plain);
        let after = evaluate_batch(&state.params, &state.bank, &state.queue, &batches, &cfg.loss, Some(&eval.targets.targets)).unwrap();
        assert!(after.loss < eval.loss, "{} -> {}", eval.loss, after.loss);
    }

    #[test]
    fn bank_stays_unit_norm() {
        let cfg = small_cfg();
        let data = dataset(&cfg);
        let mut state = TrainState::init(&cfg).unwrap();
        for k in 0..4 {
            train_step(&mut state, &data, &batch_indices(data.len(), k, &cfg), &cfg).unwrap();
            assert!(state.bank.column_norms().iter().all(|n| (n - 1.0).abs() < 1e-5));
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let cfg = small_cfg();
        let data = dataset(&cfg);
        let mut state = TrainState::init(&cfg).unwrap();
        for k in 0..3 {
            train_step(&mut state, &data, &batch_indices(data.len(), k, &cfg), &cfg).unwrap();
        }
        let bytes = encode_checkpoint(&state);
        let mut restored = decode_checkpoint(&bytes).unwrap();
        assert_eq!(restored, state);
        let ids = batch_indices(data.len(), 3, &cfg);
        let a = train_step(&mut state, &data, &ids, &cfg).unwrap();
        let b = train_step(&mut restored, &data, &ids, &cfg).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(encode_checkpoint(&state), encode_checkpoint(&restored));
    }

    #[test]
    fn step_zero_checkpoint_holds_init_params() {
        let cfg = small_cfg();
        let state = TrainState::init(&cfg).unwrap();
        let fresh = encoder::init_params::<f32>(seed::derive(cfg.seed, &[TAG_INIT]), cfg.embed_dim, cfg.arch).unwrap();
        let decoded = decode_checkpoint(&encode_checkpoint(&state)).unwrap();
        for (a, b) in decoded.params.tensors.iter().zip(&fresh.tensors) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_or_foreign_checkpoints_fail() {
        let state = TrainState::init(&small_cfg()).unwrap();
        let bytes = encode_checkpoint(&state);
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
