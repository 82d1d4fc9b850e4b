use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Sample, SceneParams, TextureFamily};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ImageTensor, Normalization};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decodes an RGB image and its 8-bit mask (`>= 128` is glass).
pub fn load_sample(image_path: &Path, mask_path: &Path, norm: &Normalization) -> Result<Sample> {
    for p in [image_path, mask_path] {
        if !p.is_file() {
            return Err(Error::Missing(p.to_path_buf()));
        }
    }
    let rgb = image::open(image_path)?.to_rgb8();
    let gray = image::open(mask_path)?.to_luma8();
    if rgb.dimensions() != gray.dimensions() {
        let ((iw, ih), (mw, mh)) = (rgb.dimensions(), gray.dimensions());
        return Err(Error::ShapeMismatch(format!("image {ih}x{iw} but mask {mh}x{mw}")));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let image = ImageTensor::from_rgb8(h, w, rgb.as_raw(), norm)?;
    let mask = BinaryMask::new(h, w, gray.as_raw().iter().map(|&v| u8::from(v >= 128)).collect())?;
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Sample::new(image, mask, id)
}

/// Writes `images/<id>.png` and `masks/<id>.png` (glass = 255) under `dir`.
pub fn save_sample(dir: &Path, id: &str, rgb: &[u8], mask: &BinaryMask) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let (w, h) = (mask.width as u32, mask.height as u32);
    image::save_buffer(images.join(format!("{id}.png")), rgb, w, h, image::ExtendedColorType::Rgb8)?;
    image::save_buffer(masks.join(format!("{id}.png")), &mask.to_gray8(), w, h, image::ExtendedColorType::L8)?;
    Ok(())
}

/// `(id, image path, mask path)` triples of a dataset directory, sorted by id.
pub fn list_dataset(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Err(Error::Missing(images));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&images)? {
        let path = entry?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mask = dir.join("masks").join(format!("{id}.png"));
        if !mask.is_file() {
            return Err(Error::Missing(mask));
        }
        out.push((id, path, mask));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Loads and concatenates every listed directory, in order.
pub fn load_dataset<P: AsRef<Path>>(dirs: &[P], norm: &Normalization) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for dir in dirs {
        for (_, image, mask) in list_dataset(dir.as_ref())? {
            out.push(load_sample(&image, &mask, norm)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub background: TextureFamily,
}

/// Record of a generated dataset, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub dataset_seed: u64,
    pub split: String,
    pub canvas_size: usize,
    pub rng: String,
    pub scene: SceneParams,
    pub entries: Vec<ManifestEntry>,
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}
