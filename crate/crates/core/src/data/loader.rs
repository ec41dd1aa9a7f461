use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Single-channel image with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(format!("{} pixels for a {height}x{width} image", data.len())));
        }
        Ok(Self { data, height, width })
    }

    pub fn resized(&self, height: usize, width: usize) -> GrayImage {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let data = kernels::resize_bilinear(&self.data, self.height, self.width, height, width);
        GrayImage { data, height, width }
    }
}

/// Decodes any supported image and converts it to luma.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    GrayImage::new(h as usize, w as usize, luma.into_raw())
}

/// Per-channel standardization applied after scaling pixels to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.25 }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::config(format!("invalid normalization mean {} std {}", self.mean, self.std)));
        }
        Ok(())
    }

    pub fn apply(&self, v: f32) -> f32 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f32) -> f32 {
        v * self.std + self.mean
    }
}

/// Resizes to `size×size` and standardizes; returns one plane.
pub fn preprocess(img: &GrayImage, size: usize, norm: Normalization) -> Vec<f32> {
    img.resized(size, size).data.into_iter().map(|v| norm.apply(v)).collect()
}

fn stack_planes(planes: &[Arc<Vec<f32>>], size: usize) -> Result<Tensor<f32>> {
    let plane = size * size;
    let mut out = Vec::with_capacity(planes.len() * 3 * plane);
    for p in planes {
        for _ in 0..3 {
            out.extend_from_slice(p);
        }
    }
    Tensor::from_vec(&[planes.len(), 3, size, size], out)
}

/// Loads `indices` of `manifest` as an `[N,3,size,size]` batch plus labels.
pub fn load_batch(
    manifest: &DatasetManifest,
    indices: &[usize],
    size: usize,
    norm: Normalization,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let planes = indices
        .iter()
        .map(|&i| Ok(Arc::new(preprocess(&load_gray(&manifest.full_path(i))?, size, norm))))
        .collect::<Result<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| manifest.entries[i].label).collect();
    Ok((stack_planes(&planes, size)?, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_p: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: false, flip_p: 0.5, max_rotation_deg: 10.0 }
    }
}

/// Mirrors every image left to right.
pub fn hflip(batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [_, _, _, w] = batch.dims4("hflip input")?;
    let mut out = batch.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Rotates one plane about its center with bilinear sampling; samples
/// outside the image clamp to the nearest edge pixel.
fn rotate_plane(src: &[f32], h: usize, w: usize, degrees: f64, dst: &mut [f32]) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[y * w + x] as f64
    };
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            dst[y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
}

/// Seeded per-sample flip and rotation. Returns the batch unchanged when
/// augmentation is disabled.
pub fn augment(batch: &Tensor<f32>, config: &AugmentConfig, seed: u64) -> Result<Tensor<f32>> {
    if !config.enabled {
        return Ok(batch.clone());
    }
    let [n, c, h, w] = batch.dims4("augment input")?;
    let mut out = batch.clone();
    let sample = c * h * w;
    let mut scratch = vec![0f32; h * w];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let flip = rng.random::<f64>() < config.flip_p;
        let angle = if config.max_rotation_deg > 0.0 {
            rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg)
        } else {
            0.0
        };
        for plane in out.data_mut()[i * sample..(i + 1) * sample].chunks_mut(h * w) {
            if flip {
                for row in plane.chunks_mut(w) {
                    row.reverse();
                }
            }
            if angle != 0.0 {
                rotate_plane(plane, h, w, angle, &mut scratch);
                plane.copy_from_slice(&scratch);
            }
        }
    }
    Ok(out)
}

/// A manifest bound to a target size and normalization, with preprocessed
/// planes cached in memory when they fit the budget.
pub struct Dataset {
    manifest: DatasetManifest,
    size: usize,
    norm: Normalization,
    cache: Option<Mutex<Vec<Option<Arc<Vec<f32>>>>>>,
}

impl Dataset {
    /// Cache budget in bytes.
    pub const CACHE_BYTES: usize = 1 << 30;

    pub fn new(manifest: DatasetManifest, size: usize, norm: Normalization) -> Result<Self> {
        norm.validate()?;
        if size == 0 {
            return Err(Error::config("image size must be positive"));
        }
        let bytes = manifest.len() * size * size * std::mem::size_of::<f32>();
        let cache = (bytes <= Self::CACHE_BYTES).then(|| Mutex::new(vec![None; manifest.len()]));
        Ok(Self { manifest, size, norm, cache })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn label(&self, index: usize) -> usize {
        self.manifest.entries[index].label
    }

    fn plane(&self, index: usize) -> Result<Arc<Vec<f32>>> {
        if let Some(cache) = &self.cache {
            if let Some(p) = &cache.lock().expect("cache lock")[index] {
                return Ok(p.clone());
            }
        }
        let p = Arc::new(preprocess(&load_gray(&self.manifest.full_path(index))?, self.size, self.norm));
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock")[index] = Some(p.clone());
        }
        Ok(p)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let planes = indices.iter().map(|&i| self.plane(i)).collect::<Result<Vec<_>>>()?;
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((stack_planes(&planes, self.size)?, labels))
    }
}
