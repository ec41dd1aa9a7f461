use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

pub const TABLE3_CLASSES: [&str; 4] = ["COVID-19", "Lung Opacity", "Normal", "Viral Pneumonia"];

/// Background intensity before noise.
const BACKGROUND: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Balanced, well-separated blobs.
    Easy,
    /// Real-data class ratios divided by 50, with fainter blobs and more noise.
    Imbalanced,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::Imbalanced => "imbalanced",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Preset::Easy),
            "imbalanced" => Ok(Preset::Imbalanced),
            other => Err(Error::config(format!("unknown preset {other:?}; expected easy or imbalanced"))),
        }
    }
}

/// Class `c` draws a bright Gaussian blob in quadrant `c` (row-major:
/// top-left, top-right, bottom-left, bottom-right) over Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub image_size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub blob_amplitude: f64,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    pub seed: u64,
}


impl SyntheticSpec {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let class_names = TABLE3_CLASSES.iter().map(|s| s.to_string()).collect();
        match preset {
            Preset::Easy => Self {
                class_names,
                counts: vec![80; 4],
                image_size: 64,
                noise: 0.08,
                blob_amplitude: 0.7,
                blob_sigma: 6.0,
                seed,
            },
            Preset::Imbalanced => Self {
                class_names,
                counts: vec![74, 120, 204, 27],
                image_size: 32,
                noise: 0.25,
                blob_amplitude: 0.35,
                blob_sigma: 3.0,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() || self.class_names.len() > 4 {
            return Err(Error::config(format!("synthetic data needs 1 to 4 classes, got {}", self.class_names.len())));
        }
        if self.counts.len() != self.class_names.len() {
            return Err(Error::config(format!(
                "{} counts for {} classes",
                self.counts.len(),
                self.class_names.len()
            )));
        }
        if let Some(c) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("class {:?} has a sample count of 0", self.class_names[c])));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!("synthetic image size must be at least 16, got {}", self.image_size)));
        }
        let mut sorted = self.class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.class_names {
            return Err(Error::config("synthetic class names must be unique and sorted so labels match quadrants"));
        }
        for (what, v) in [("noise", self.noise), ("blob amplitude", self.blob_amplitude), ("blob sigma", self.blob_sigma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{what} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Quadrant center `(row, col)` for class `class` on a `size×size` image.
pub fn quadrant_center(class: usize, size: usize) -> (f64, f64) {
    let q = size as f64 / 4.0;
    let row = if class < 2 { q } else { 3.0 * q };
    let col = if class.is_multiple_of(2) { q } else { 3.0 * q };
    (row - 0.5, col - 0.5)
}

/// Renders sample `index` of class `class` as 8-bit gray pixels, returning
/// the pixels and the blob center `(row, col)`.
pub fn render_sample(spec: &SyntheticSpec, class: usize, index: usize) -> (Vec<u8>, (f64, f64)) {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    let jitter = size as f64 / 8.0;
    let (qr, qc) = quadrant_center(class, size);
    let center = (qr + rng.random_range(-jitter..jitter), qc + rng.random_range(-jitter..jitter));
    let two_var = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - center.0).powi(2) + (x as f64 - center.1).powi(2);
            let blob = if two_var > 0.0 { spec.blob_amplitude * (-d2 / two_var).exp() } else { 0.0 };
            let n: f64 = StandardNormal.sample(&mut rng);
            let v = (BACKGROUND + blob + spec.noise * n).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    (pixels, center)
}

#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub manifest: DatasetManifest,
    /// Blob center `(row, col)` per manifest entry.
    pub centers: Vec<(f64, f64)>,
}

/// Writes `<root>/<class>/<index>.png` for every sample plus
/// `<root>/manifest.csv`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticOutput> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.total());
    let mut centers = Vec::with_capacity(spec.total());
    let size = spec.image_size as u32;
    for (class, (name, &count)) in spec.class_names.iter().zip(&spec.counts).enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..count {
            let (pixels, center) = render_sample(spec, class, index);
            let file = format!("{index:05}.png");
            let path = dir.join(&file);
            image::save_buffer_with_format(&path, &pixels, size, size, image::ExtendedColorType::L8, image::ImageFormat::Png)
                .map_err(|e| Error::Image { path: path.clone(), message: e.to_string() })?;
            entries.push(ManifestEntry { path: format!("{name}/{file}"), label: class });
            centers.push(center);
        }
    }
    let manifest = DatasetManifest { root: root.to_path_buf(), class_names: spec.class_names.clone(), entries, skipped: Vec::new() };
    manifest.write_csv(&root.join("manifest.csv"))?;
    Ok(SyntheticOutput { manifest, centers })
}
