//! The subcommands behind the `vice` binary, callable from tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vice_core::encoder::{self, EncoderParams};
use vice_core::evaluation::{self, kmeans, pca_visualize, ProbeConfig, SegMetrics};
use vice_core::imaging::{self, ImageTensor};
use vice_core::seed;
use vice_core::training::{self, Decomposition, PreparedImage, TrainConfig, TrainState};
use vice_core::viewgen::SENTINEL;

use crate::config::{EvalMode, RunConfig};
use crate::dataset::{self, Dataset, Manifest, Split};
use crate::error::{Result, ViceError};
use crate::io;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn gen_dataset(cfg: &RunConfig) -> Result<Manifest> {
    dataset::write_synthetic(&cfg.data.dir, &cfg.dataset_spec())
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub queue_fill: f64,
    pub concept_entropy: f64,
    pub regions: usize,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

fn check_compatible(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    if state.params.arch != cfg.arch || state.params.embed_dim != cfg.embed_dim || state.bank.concepts != cfg.concepts {
        return Err(ViceError::data(path, "checkpoint architecture, embed_dim or concepts differ from the config"));
    }
    if state.queue.capacity() != cfg.queue_capacity {
        return Err(ViceError::data(path, "checkpoint queue capacity differs from the config"));
    }
    Ok(())
}

/// Trains on the train split. With `resume`, continues from that checkpoint
/// and appends to the existing metrics log.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let ds = Dataset::open(&cfg.data.dir)?;
    let train_names = ds.names(Split::Train).to_vec();
    if train_names.is_empty() {
        return Err(ViceError::data(ds.dir.join(dataset::MANIFEST), "train split is empty"));
    }
    let tcfg = cfg.train_config(train_names.len())?;
    let mut state = match resume {
        Some(p) => {
            let s = io::load_checkpoint(p)?;
            check_compatible(&s, &tcfg, p)?;
            s
        }
        None => TrainState::init(&tcfg)?,
    };
    let mut prepared = Vec::with_capacity(train_names.len());
    for name in &train_names {
        let img = ds.load_image(name)?;
        prepared.push(training::prepare_image(img, &tcfg).map_err(|e| ViceError::data(ds.image_path(name), e.to_string()))?);
    }

    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| ViceError::io(out, e))?;
    io::write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut log = io::JsonLines::create(&out.join(METRICS_FILE), resume.is_some())?;
    let per_epoch = cfg.steps_per_epoch(train_names.len());
    let every = cfg.train.checkpoint_every_epochs * per_epoch;
    let t0 = Instant::now();
    let mut records = Vec::new();
    while state.step < tcfg.total_steps {
        let ids = training::batch_indices(prepared.len(), state.step, &tcfg);
        let r = training::train_step(&mut state, &prepared, &ids, &tcfg)?;
        let rec = StepRecord {
            step: r.step,
            epoch: r.step / per_epoch,
            lr: r.lr,
            loss: r.loss,
            queue_fill: r.queue_fill,
            concept_entropy: r.concept_entropy,
            regions: r.regions,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log.write(&rec)?;
        records.push(rec);
        if state.step % every == 0 && state.step < tcfg.total_steps {
            let epoch = state.step / per_epoch;
            io::save_checkpoint(&out.join(format!("epoch_{epoch:04}.ckpt")), &state)?;
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    io::save_checkpoint(&final_checkpoint, &state)?;
    Ok(TrainOutcome { state, records, final_checkpoint })
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsJson {
    pub miou: f64,
    pub accuracy: f64,
    /// `null` for classes absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
}

impl From<&SegMetrics> for MetricsJson {
    fn from(m: &SegMetrics) -> Self {
        Self { miou: m.miou, accuracy: m.accuracy, iou: m.iou.clone() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterJson {
    pub k_eval: usize,
    pub random_baseline_miou: f64,
    pub greedy: MetricsJson,
    pub hungarian: MetricsJson,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearJson {
    pub epochs: usize,
    pub lr: f64,
    pub train_pixels: usize,
    pub metrics: MetricsJson,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutcome {
    pub cluster: Option<ClusterJson>,
    pub linear: Option<LinearJson>,
}

fn embed_split(params: &EncoderParams<f32>, samples: &[dataset::Sample]) -> Result<(Vec<f64>, Vec<u32>)> {
    let mut rows = Vec::new();
    let mut gt = Vec::new();
    for s in samples {
        rows.extend(evaluation::embed_rows(params, &s.image)?);
        gt.extend_from_slice(&s.labels);
    }
    Ok((rows, gt))
}

/// Cluster and/or linear-probe evaluation of `checkpoint` on the validation
/// split; writes `eval_cluster.json`, `eval_linear.json` and `eval.csv`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, mode: EvalMode) -> Result<EvalOutcome> {
    let ds = Dataset::open(&cfg.data.dir)?;
    let state = io::load_checkpoint(checkpoint)?;
    let classes = ds.manifest.classes;
    let val = ds.load_split(Split::Val)?;
    let train = if mode != EvalMode::Cluster { ds.load_split(Split::Train)? } else { Vec::new() };
    let dim = state.params.embed_dim;
    let (rows, gt) = embed_split(&state.params, &val)?;
    let e = &cfg.eval;
    let mut out = EvalOutcome::default();
    let mut csv = String::from("evaluation,assignment,miou,accuracy\n");
    if mode != EvalMode::Linear {
        let r = evaluation::cluster_eval(&rows, dim, &gt, classes, e.k_eval, e.kmeans_iterations, cfg.seed, None)
            .map_err(|err| ViceError::Config(err.to_string()))?;
        let baseline = evaluation::random_baseline_miou(&evaluation::class_histogram(&gt, classes));
        writeln!(csv, "cluster,greedy,{},{}", r.greedy.miou, r.greedy.accuracy).unwrap();
        writeln!(csv, "cluster,hungarian,{},{}", r.hungarian.miou, r.hungarian.accuracy).unwrap();
        out.cluster = Some(ClusterJson {
            k_eval: e.k_eval,
            random_baseline_miou: baseline,
            greedy: (&r.greedy).into(),
            hungarian: (&r.hungarian).into(),
        });
    }
    if mode != EvalMode::Cluster {
        let mut trows = Vec::new();
        let mut tgt = Vec::new();
        for s in &train {
            let emb = evaluation::embed_rows(&state.params, &s.image)?;
            for (p, x) in emb.chunks(dim).enumerate().step_by(e.probe_pixel_stride) {
                trows.extend_from_slice(x);
                tgt.push(s.labels[p]);
            }
        }
        let pcfg = ProbeConfig { epochs: e.probe_epochs, lr: e.probe_lr, seed: cfg.seed, ..ProbeConfig::default() };
        let (_, m) = evaluation::probe_eval(&trows, &tgt, &rows, &gt, dim, classes, &pcfg)?;
        writeln!(csv, "linear,probe,{},{}", m.miou, m.accuracy).unwrap();
        out.linear = Some(LinearJson { epochs: e.probe_epochs, lr: e.probe_lr, train_pixels: tgt.len(), metrics: (&m).into() });
    }
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|err| ViceError::io(dir, err))?;
    if let Some(c) = &out.cluster {
        io::write_json(&dir.join("eval_cluster.json"), c)?;
    }
    if let Some(l) = &out.linear {
        io::write_json(&dir.join("eval_linear.json"), l)?;
    }
    io::write_text(&dir.join("eval.csv"), &csv)?;
    Ok(out)
}

/// `k` well-spread colors, fixed for a given `k`.
pub fn palette(k: usize) -> Vec<[u8; 3]> {
    (0..k)
        .map(|i| {
            let h = (i as f32 * 0.618_034).fract();
            let v = if i % 2 == 0 { 0.95 } else { 0.7 };
            let rgb = imaging::hsv_to_rgb(h, 0.75, v);
            rgb.map(|c| (c * 255.0).round() as u8)
        })
        .collect()
}

/// Writes `<stem>_viz.png` per image: input, k-means cluster colors and
/// PCA colors side by side. Clusters are fitted jointly over all images.
pub fn visualize(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let state = io::load_checkpoint(checkpoint)?;
    let inputs = images.iter().map(|p| io::read_image(p)).collect::<Result<Vec<_>>>()?;
    let dim = state.params.embed_dim;
    let mut maps = Vec::with_capacity(inputs.len());
    for img in &inputs {
        maps.push(encoder::forward(&state.params, &img.normalize())?);
    }
    let rows: Vec<f64> = maps.iter().flat_map(|m| m.to_rows()).collect();
    let fit = evaluation::stride_subsample(&rows, dim, evaluation::MAX_FIT_VECTORS);
    let km = kmeans(&fit, dim, cfg.eval.k_eval, cfg.eval.kmeans_iterations, cfg.seed).map_err(|e| ViceError::Config(e.to_string()))?;
    let colors = palette(cfg.eval.k_eval);
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).map_err(|e| ViceError::io(dir, e))?;
    let mut written = Vec::new();
    for ((path, img), emb) in images.iter().zip(&inputs).zip(&maps) {
        let (h, w) = (img.height(), img.width());
        let input = img.to_rgb8();
        let clusters = km.predict(&emb.to_rows());
        let pca = pca_visualize(emb);
        let mut out = vec![0u8; h * w * 9];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let base = (y * 3 * w + x) * 3;
                out[base..base + 3].copy_from_slice(&input[p * 3..p * 3 + 3]);
                out[base + 3 * w..base + 3 * w + 3].copy_from_slice(&colors[clusters[p]]);
                out[base + 6 * w..base + 6 * w + 3].copy_from_slice(&pca[p * 3..p * 3 + 3]);
            }
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let target = dir.join(format!("{stem}_viz.png"));
        io::write_png_rgb(&target, 3 * w, h, &out)?;
        written.push(target);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub method: &'static str,
    pub size: usize,
    pub regions: usize,
    pub millis: f64,
}

/// Times superpixel and grid decomposition of the first `limit` dataset
/// images at each element size; writes `bench_decompose.csv`.
pub fn bench_decompose(cfg: &RunConfig, sizes: &[usize], limit: usize) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(ViceError::Config("bench sizes must be a non-empty list of positive integers".into()));
    }
    let ds = Dataset::open(&cfg.data.dir)?;
    let base = cfg.train_config(1)?;
    let names: Vec<String> = ds.manifest.train.iter().chain(&ds.manifest.val).take(limit).cloned().collect();
    let mut rows = Vec::new();
    for name in &names {
        let img = ds.load_image(name)?;
        for (method, decomposition) in [("superpixel", Decomposition::Superpixel), ("grid", Decomposition::Grid)] {
            for &size in sizes {
                let tcfg = TrainConfig { decomposition, region_size: size, ..base.clone() };
                let t = Instant::now();
                let map = training::decompose(&img, &tcfg)?;
                let millis = t.elapsed().as_secs_f64() * 1e3;
                rows.push(BenchRow { image: name.clone(), method, size, regions: map.region_count(), millis });
            }
        }
    }
    let mut csv = String::from("image,method,size,regions,ms\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{:.3}", r.image, r.method, r.size, r.regions, r.millis).unwrap();
    }
    io::write_text(&cfg.output.dir.join("bench_decompose.csv"), &csv)?;
    Ok(rows)
}

/// Debug dump of the views of one training image at `step`: each view, its
/// mutual-region map in random colors, and the view centers drawn on the
/// center-sampling map.
pub fn dump_views(cfg: &RunConfig, image: &str, step: u64) -> Result<Vec<PathBuf>> {
    let ds = Dataset::open(&cfg.data.dir)?;
    let id = ds.manifest.train.iter().position(|n| n == image).ok_or_else(|| ViceError::data(&ds.dir, format!("no training image named {image}")))?;
    let tcfg = cfg.train_config(ds.manifest.train.len())?;
    let prepared: PreparedImage = training::prepare_image(ds.load_image(image)?, &tcfg)?;
    let batch = training::make_views(&prepared, id, step, &tcfg)?;
    let dir = cfg.output.dir.join(format!("views_{image}_{step}"));
    let mut written = Vec::new();
    let color_of = |r: i32| -> [u8; 3] {
        if r == SENTINEL {
            return [0, 0, 0];
        }
        let v = seed::derive(cfg.seed, &[r as u64]);
        [(v >> 8) as u8, (v >> 24) as u8, (v >> 40) as u8]
    };
    for (m, view) in batch.views.iter().enumerate() {
        let img = denormalize(&view.image);
        let p = dir.join(format!("view_{m}.png"));
        io::write_png_image(&p, &img)?;
        written.push(p);
        let rgb: Vec<u8> = view.labels.labels().iter().flat_map(|&r| color_of(r)).collect();
        let p = dir.join(format!("view_{m}_regions.png"));
        io::write_png_rgb(&p, view.labels.width(), view.labels.height(), &rgb)?;
        written.push(p);
    }
    let pm = &prepared.pmap;
    let (h, w) = (pm.height(), pm.width());
    let peak = pm.data().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut rgb: Vec<u8> = pm.data().iter().flat_map(|&v| [((v / peak).sqrt() * 255.0) as u8; 3]).collect();
    for view in &batch.views {
        let (cx, cy) = (view.spec.center.0 as i64, view.spec.center.1 as i64);
        for d in -2..=2i64 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                    let i = (y as usize * w + x as usize) * 3;
                    rgb[i..i + 3].copy_from_slice(&[255, 0, 0]);
                }
            }
        }
    }
    let p = dir.join("centers.png");
    io::write_png_rgb(&p, w, h, &rgb)?;
    written.push(p);
    Ok(written)
}

/// Undoes per-channel normalization for display by min-max scaling.
fn denormalize(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let plane = img.height() * img.width();
    for c in 0..3 {
        let ch = &mut out.data_mut()[c * plane..(c + 1) * plane];
        let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-6);
        ch.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
    out
}
