//! On-disk dataset layout: `images/NNNN.png`, `labels/NNNN.png` and a
//! `manifest.json` naming the train and validation splits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vice_core::imaging::ImageTensor;
use vice_core::synth::{self, SyntheticDatasetSpec};

use crate::error::{Result, ViceError};
use crate::io;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// One image with its per-pixel class ids.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: ImageTensor,
    pub labels: Vec<u32>,
}

fn name(i: usize) -> String {
    format!("{i:04}")
}

/// Renders `spec` into `dir`. Re-running with the same spec rewrites
/// byte-identical files.
pub fn write_synthetic(dir: &Path, spec: &SyntheticDatasetSpec) -> Result<Manifest> {
    spec.validate().map_err(|e| ViceError::Config(e.to_string()))?;
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| ViceError::io(&d, e))?;
    }
    let train = spec.train_count();
    for i in 0..spec.images {
        let s = synth::render_sample(spec, i);
        let n = name(i);
        io::write_png_image(&dir.join("images").join(format!("{n}.png")), &s.image)?;
        let labels: Vec<u32> = s.labels.iter().map(|&l| l as u32).collect();
        io::write_label_png(&dir.join("labels").join(format!("{n}.png")), spec.size, spec.size, &labels)?;
    }
    let manifest = Manifest {
        classes: spec.classes,
        size: spec.size,
        seed: spec.seed,
        train: (0..train).map(name).collect(),
        val: (train..spec.images).map(name).collect(),
    };
    io::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| ViceError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ViceError::data(&path, e.to_string()))?;
        if manifest.classes < 2 {
            return Err(ViceError::data(&path, "manifest needs at least two classes"));
        }
        Ok(Self { dir: dir.into(), manifest })
    }

    pub fn names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.train,
            Split::Val => &self.manifest.val,
        }
    }

    pub fn image_path(&self, name: &str) -> PathBuf {
        self.dir.join("images").join(format!("{name}.png"))
    }

    pub fn label_path(&self, name: &str) -> PathBuf {
        self.dir.join("labels").join(format!("{name}.png"))
    }

    pub fn load_image(&self, name: &str) -> Result<ImageTensor> {
        io::read_png_image(&self.image_path(name))
    }

    pub fn load_sample(&self, name: &str) -> Result<Sample> {
        let image = self.load_image(name)?;
        let path = self.label_path(name);
        let (h, w, labels) = io::read_label_png(&path)?;
        if (h, w) != (image.height(), image.width()) {
            return Err(ViceError::data(&path, format!("label map {w}x{h} does not match image {}x{}", image.width(), image.height())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.manifest.classes) {
            return Err(ViceError::data(&path, format!("class id {bad} outside [0, {})", self.manifest.classes)));
        }
        Ok(Sample { name: name.into(), image, labels })
    }

    /// Every sample of `split`; an empty split is a data error.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let names = self.names(split);
        if names.is_empty() {
            let which = if split == Split::Train { "train" } else { "val" };
            return Err(ViceError::data(self.dir.join(MANIFEST), format!("{which} split is empty")));
        }
        names.iter().map(|n| self.load_sample(n)).collect()
    }
}
