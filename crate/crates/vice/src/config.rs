//! Run configuration: TOML with one table per concern, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vice_core::encoder::Architecture;
use vice_core::objective::LossConfig;
use vice_core::synth::SyntheticDatasetSpec;
use vice_core::training::{Decomposition, TrainConfig};

use crate::error::{Result, ViceError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("data/synth") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub images: usize,
    pub size: usize,
    pub classes: usize,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = SyntheticDatasetSpec::default();
        Self { images: d.images, size: d.size, classes: d.classes, val_fraction: d.val_fraction }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecompositionName {
    Superpixel,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub images_per_batch: usize,
    pub views: usize,
    pub view_size: usize,
    pub decomposition: DecompositionName,
    pub region_size: usize,
    pub slic_compactness: f64,
    pub mask_coverage: f64,
    pub mask_primary_view: bool,
    pub beta_min: f64,
    pub beta_max: f64,
    pub min_region_pixels: usize,
    pub color_strength: f32,
    pub blur_sigma_max: f64,
    pub embed_dim: usize,
    pub concepts: usize,
    pub width_multiplier: usize,
    pub queue_capacity: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Either `steps` or `epochs` fixes the run length.
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub checkpoint_every_epochs: u64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lars: Option<f64>,
    pub freeze_prototypes_steps: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            images_per_batch: t.images_per_batch,
            views: t.views,
            view_size: t.view_size.0,
            decomposition: DecompositionName::Superpixel,
            region_size: t.region_size,
            slic_compactness: t.slic_compactness,
            mask_coverage: t.mask_coverage,
            mask_primary_view: t.mask_primary_view,
            beta_min: t.beta_range.0,
            beta_max: t.beta_range.1,
            min_region_pixels: t.min_region_pixels,
            color_strength: t.color_strength,
            blur_sigma_max: t.blur_sigma_max,
            embed_dim: t.embed_dim,
            concepts: t.concepts,
            width_multiplier: 1,
            queue_capacity: t.queue_capacity,
            temperature: t.loss.temperature,
            epsilon: t.loss.epsilon,
            sinkhorn_iterations: t.loss.sinkhorn_iterations,
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            steps: None,
            epochs: None,
            checkpoint_every_epochs: 1,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            lars: t.lars,
            freeze_prototypes_steps: t.freeze_prototypes_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Cluster,
    Linear,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub k_eval: usize,
    pub kmeans_iterations: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Every n-th training pixel feeds the probe.
    pub probe_pixel_stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { mode: EvalMode::Both, k_eval: 12, kmeans_iterations: 30, probe_epochs: 20, probe_lr: 0.1, probe_pixel_stride: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ViceError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            ViceError::Config(msg) => ViceError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ViceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            images: self.dataset.images,
            size: self.dataset.size,
            classes: self.dataset.classes,
            seed: self.seed,
            val_fraction: self.dataset.val_fraction,
        }
    }

    /// Core training config for a training split of `train_images` images.
    pub fn train_config(&self, train_images: usize) -> Result<TrainConfig> {
        let t = &self.train;
        let steps_per_epoch = train_images.div_ceil(t.images_per_batch.max(1)).max(1) as u64;
        let total_steps = match (t.steps, t.epochs) {
            (Some(_), Some(_)) => return Err(ViceError::Config("set train.steps or train.epochs, not both".into())),
            (Some(s), None) => s,
            (None, Some(e)) => e * steps_per_epoch,
            (None, None) => TrainConfig::default().total_steps,
        };
        let cfg = TrainConfig {
            images_per_batch: t.images_per_batch,
            views: t.views,
            view_size: (t.view_size, t.view_size),
            decomposition: match t.decomposition {
                DecompositionName::Superpixel => Decomposition::Superpixel,
                DecompositionName::Grid => Decomposition::Grid,
            },
            region_size: t.region_size,
            slic_compactness: t.slic_compactness,
            mask_coverage: t.mask_coverage,
            mask_primary_view: t.mask_primary_view,
            beta_range: (t.beta_min, t.beta_max),
            min_region_pixels: t.min_region_pixels,
            color_strength: t.color_strength,
            blur_sigma_max: t.blur_sigma_max,
            embed_dim: t.embed_dim,
            concepts: t.concepts,
            arch: Architecture::unet(t.width_multiplier),
            queue_capacity: t.queue_capacity,
            loss: LossConfig { temperature: t.temperature, epsilon: t.epsilon, sinkhorn_iterations: t.sinkhorn_iterations },
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            total_steps,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            lars: t.lars,
            freeze_prototypes_steps: t.freeze_prototypes_steps,
            seed: self.seed,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| ViceError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn steps_per_epoch(&self, train_images: usize) -> u64 {
        train_images.div_ceil(self.train.images_per_batch.max(1)).max(1) as u64
    }

    /// Everything that can be checked without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate().map_err(|e| ViceError::Config(e.to_string()))?;
        if self.train.width_multiplier == 0 {
            return Err(ViceError::Config("train.width_multiplier must be >= 1".into()));
        }
        if self.train.checkpoint_every_epochs == 0 {
            return Err(ViceError::Config("train.checkpoint_every_epochs must be >= 1".into()));
        }
        if self.eval.k_eval == 0 || self.eval.probe_pixel_stride == 0 {
            return Err(ViceError::Config("eval.k_eval and eval.probe_pixel_stride must be >= 1".into()));
        }
        if !(self.eval.probe_lr > 0.0) {
            return Err(ViceError::Config("eval.probe_lr must be positive".into()));
        }
        // Dataset size only affects the step count, which validation ignores.
        self.train_config(1).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, ViceError::Config(_)));
        assert!(RunConfig::parse("colour = 1\n").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::parse("seed = 7\n[train]\nconcepts = 16\nsteps = 10\n").unwrap();
        let t = cfg.train_config(12).unwrap();
        assert_eq!((t.seed, t.concepts, t.total_steps), (7, 16, 10));
        assert_eq!(t.images_per_batch, 4);
    }

    #[test]
    fn epochs_convert_to_steps() {
        let cfg = RunConfig::parse("[train]\nepochs = 3\nimages_per_batch = 4\n").unwrap();
        assert_eq!(cfg.train_config(10).unwrap().total_steps, 9);
        assert!(RunConfig::parse("[train]\nepochs = 3\nsteps = 4\n").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("[train]\nmask_coverage = 2.0\n"), Err(ViceError::Config(_))));
        assert!(matches!(RunConfig::parse("[train]\nview_size = 60\n"), Err(ViceError::Config(_))));
        assert!(matches!(RunConfig::parse("[dataset]\nclasses = 1\n"), Err(ViceError::Config(_))));
        assert!(matches!(RunConfig::parse("[train]\ndecomposition = \"hexagons\"\n"), Err(ViceError::Config(_))));
    }
}
