//! Samples, the procedural glass-scene generator, dataset I/O and the
//! paired geometric transforms.

mod augment;
mod io;
mod scene;

pub use augment::{augment_flip, flip, resize_pair};
pub use io::{list_dataset, load_dataset, load_sample, save_sample, write_manifest, DatasetManifest, ManifestEntry};
pub use scene::{generate_scene, render_background, render_scene, sample_seed, SceneParams, SceneSpec, TextureFamily};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor, Normalization};

/// One image with its glass mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub id: String,
}

impl Sample {
    pub fn new(image: ImageTensor, mask: BinaryMask, id: impl Into<String>) -> Result<Self> {
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} with mask {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(Self { image, mask, id: id.into() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Square side every sample is resized to; must be a multiple of 32.
    pub image_side: usize,
    pub train_dirs: Vec<String>,
    pub val_dirs: Vec<String>,
    pub normalization: Normalization,
    pub scene: SceneParams,
    pub train_count: usize,
    pub val_count: usize,
    /// Evaluate against the mask at its stored resolution instead of the resized one.
    pub native_resolution_eval: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_side: 128,
            train_dirs: vec!["data/train".into()],
            val_dirs: vec!["data/val".into()],
            normalization: Normalization::default(),
            scene: SceneParams::default(),
            train_count: 512,
            val_count: 128,
            native_resolution_eval: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % 32 != 0 {
            return Err(Error::NotDivisible { side: self.image_side, divisor: 32 });
        }
        self.normalization.validate()?;
        self.scene.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Dataset seed of this split, so splits drawn from one experiment seed
    /// never share scenes.
    pub fn seed(self, seed: u64) -> u64 {
        sample_seed(seed, u64::MAX - self as u64)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}")))
    }
}

/// Specs of the first `count` scenes of `split`.
pub fn scene_specs(cfg: &DataConfig, seed: u64, split: Split, count: usize) -> Vec<SceneSpec> {
    let ds = split.seed(seed);
    (0..count as u64).map(|i| SceneSpec::from_params(cfg.image_side, &cfg.scene, sample_seed(ds, i))).collect()
}

/// Renders `count` scenes of `split` in memory.
pub fn synthesize(cfg: &DataConfig, seed: u64, split: Split, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    scene_specs(cfg, seed, split, count).iter().map(|s| generate_scene(s, &cfg.normalization)).collect()
}
