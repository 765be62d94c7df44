pub mod synthetic;

pub use synthetic::generate_synthetic;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::LabelSet;
use crate::metrics::IGNORE_LABEL;
use crate::real::Real;

/// Dataset layout on disk:
///   <dir>/manifest.json
///   <dir>/labels.jsonl      one {"id", "labels"} record per line, in order
///   <dir>/images/<id>.png   RGB
///   <dir>/masks/<id>.png    8-bit gray, class index per pixel, 255 = ignore
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub image_size: usize,
    /// Per-channel mean/std of the stored (quantized) pixels in [0, 1].
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub seed: u64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// (image_size, image_size, 3) pixels in [0, 1].
    pub image: Array3<f32>,
    pub labels: LabelSet,
    /// Ground-truth segmentation, present for synthetic data.
    pub gt_mask: Option<Array2<u8>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Image normalized with the manifest's per-channel statistics, in the
    /// element type the model runs in.
    pub fn normalized_image<F: Real>(&self, sample: &Sample) -> Array3<F> {
        let mean = self.manifest.mean.map(F::of);
        let std = self.manifest.std.map(F::of);
        let (h, w, _) = sample.image.dim();
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            (F::of(sample.image[(y, x, c)] as f64) - mean[c]) / std[c]
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Classes whose visible pixel count reaches `min_fraction` of the full image
/// area. This is exactly the rule the synthetic generator enforces, so stored
/// labels and derived labels agree.
pub fn derive_image_labels(mask: &Array2<u8>, num_classes: usize, min_fraction: f64) -> LabelSet {
    let mut counts = vec![0usize; num_classes];
    for &v in mask.iter() {
        if v != IGNORE_LABEL {
            let c = v as usize;
            if c < num_classes {
                counts[c] += 1;
            }
        }
    }
    let threshold = min_fraction * mask.len() as f64;
    LabelSet::new(
        (0..num_classes).filter(|&c| counts[c] as f64 >= threshold),
    )
}

pub fn save_image_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, ch) = image.dim();
    assert_eq!(ch, 3);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([image[(y, x, 0)], image[(y, x, 1)], image[(y, x, 2)]]),
            );
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_image_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

pub fn save_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([mask[(y, x)]]));
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_labels_jsonl(path: &Path, records: &[(String, &LabelSet)]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, labels) in records {
        let record = LabelRecord { id: id.clone(), labels: labels.as_slice().to_vec() };
        let line = serde_json::to_string(&record).map_err(|e| Error::json(path, e))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads a dataset directory. Sample order follows labels.jsonl. Masks are
/// optional per sample; images are required.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.num_classes == 0 {
        return Err(Error::Input(format!("{}: manifest has zero classes", dir.display())));
    }
    for c in 0..3 {
        if !(manifest.std[c].is_finite() && manifest.std[c] > 0.0) {
            return Err(Error::Input(format!(
                "{}: manifest std[{c}] must be positive",
                dir.display()
            )));
        }
    }
    let labels_path = dir.join("labels.jsonl");
    let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut samples = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&labels_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(&labels_path, format!("line {}: {e}", line_no + 1)))?;
        if let Some(&bad) = record.labels.iter().find(|&&c| c >= manifest.num_classes) {
            return Err(Error::Input(format!(
                "{}: label {bad} out of range for {} classes (line {})",
                labels_path.display(),
                manifest.num_classes,
                line_no + 1
            )));
        }
        let image_path = dir.join("images").join(format!("{}.png", record.id));
        let image = load_image_png(&image_path)?;
        let (h, w, _) = image.dim();
        if h != manifest.image_size || w != manifest.image_size {
            return Err(Error::Input(format!(
                "{}: image is {w}x{h}, manifest says {size}x{size}",
                image_path.display(),
                size = manifest.image_size
            )));
        }
        let mask_path = dir.join("masks").join(format!("{}.png", record.id));
        let gt_mask = if mask_path.exists() { Some(load_mask_png(&mask_path)?) } else { None };
        samples.push(Sample {
            id: record.id,
            image,
            labels: LabelSet::new(record.labels),
            gt_mask,
        });
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("{}: dataset has no samples", dir.display())));
    }
    Ok(Dataset { manifest, samples })
}

/// Collects `<id>.png` or `<id>_mask.png` files from a directory into
/// (id, path) pairs sorted by id.
pub fn list_mask_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        let id = stem.strip_suffix("_mask").unwrap_or(&stem).to_string();
        out.push((id, path));
    }
    out.sort();
    Ok(out)
}
