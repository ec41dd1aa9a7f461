//! Grad-CAM heatmaps and overlay export.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::model::{block_output_tap, Model};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{kernels, Element, Tensor};

/// Blend weight of the colormap at full heat.
pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapResult {
    /// Non-negative map at the target layer's resolution.
    pub raw: Vec<f64>,
    pub raw_height: usize,
    pub raw_width: usize,
    /// Bilinear upsampling of `raw` to the input resolution, scaled to [0, 1].
    pub upsampled: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub layer: String,
    pub logits: Vec<f64>,
}

impl HeatmapResult {
    pub fn predicted_class(&self) -> usize {
        crate::metrics::argmax_rows(&self.logits, self.logits.len())[0]
    }

    /// Fraction of upsampled heat inside rows `r0..r1` and columns `c0..c1`.
    pub fn mass_fraction(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
        let total: f64 = self.upsampled.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let inside: f64 = rows
            .flat_map(|r| cols.clone().map(move |c| (r, c)))
            .map(|(r, c)| self.upsampled[r * self.width + c])
            .sum();
        inside / total
    }

    /// Upsampled heatmap as CSV, one image row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.upsampled.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }
}

/// Default Grad-CAM layer: the last block's output, after attention.
pub fn default_layer<T: Element>(model: &Model<T>) -> String {
    block_output_tap(model.config().block_layout.len())
}

/// Grad-CAM for `model` on `image: [1, C, H, W]`; `layer` defaults to
/// [`default_layer`].
pub fn grad_cam<T: Element>(model: &mut Model<T>, image: &Tensor<T>, class: usize, layer: Option<&str>) -> Result<HeatmapResult> {
    let layer = layer.map_or_else(|| default_layer(model), str::to_string);
    let (arch, store) = model.parts();
    grad_cam_with(store, |f, x| arch.forward(f, x), image, class, &layer)
}

/// Grad-CAM over any forward function that taps `layer` and returns
/// `[1, K]` logits. Parameters stay constant; the pass runs in eval mode.
pub fn grad_cam_with<T: Element>(
    store: &mut ParamStore<T>,
    forward: impl FnOnce(&mut Forward<'_, T>, Var) -> Result<Var>,
    image: &Tensor<T>,
    class: usize,
    layer: &str,
) -> Result<HeatmapResult> {
    let [n, _, height, width] = image.dims4("Grad-CAM input")?;
    if n != 1 {
        return Err(Error::contract(format!("Grad-CAM takes one image, got a batch of {n}")));
    }
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, store, Mode::Eval, false);
    f.retain_tap(layer);
    // A variable input makes every activation require a gradient.
    let x = f.graph.variable(image.clone());
    let logits = forward(&mut f, x)?;
    let Some(feature) = f.find_tap(layer) else {
        let names: Vec<&str> = f.taps().iter().map(|(n, _)| n.as_str()).collect();
        return Err(Error::contract(format!("unknown Grad-CAM layer {layer:?}; available: {}", names.join(", "))));
    };
    let [_, k] = f.graph.value(logits).dims2("logits")?;
    if class >= k {
        return Err(Error::contract(format!("class {class} out of range for {k} classes")));
    }
    let fshape = f.graph.value(feature).shape().to_vec();
    if fshape.len() != 4 {
        return Err(Error::contract(format!("layer {layer:?} is not a 4-D feature map: {fshape:?}")));
    }
    let onehot = Tensor::from_fn(&[1, k], |i| if i == class { T::one() } else { T::zero() });
    let score = f.graph.weighted_sum(logits, onehot)?;
    let grads = f.graph.backward(score)?;
    let dfeat = grads.get(feature).ok_or_else(|| Error::contract(format!("no gradient reached layer {layer:?}")))?;
    let (c, h, w) = (fshape[1], fshape[2], fshape[3]);
    let plane = h * w;
    let fvals = f.graph.value(feature).data();
    let mut raw = vec![0.0f64; plane];
    for ch in 0..c {
        let gs = &dfeat.data()[ch * plane..(ch + 1) * plane];
        let weight = gs.iter().map(|v| v.widen()).sum::<f64>() / plane as f64;
        for (r, a) in raw.iter_mut().zip(&fvals[ch * plane..(ch + 1) * plane]) {
            *r += weight * a.widen();
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let logits = f.graph.value(logits).data().iter().map(|v| v.widen()).collect();
    let upsampled = normalize(upsample(&raw, h, w, height, width));
    Ok(HeatmapResult {
        raw,
        raw_height: h,
        raw_width: w,
        upsampled,
        height,
        width,
        target_class: class,
        layer: layer.to_string(),
        logits,
    })
}

fn upsample(raw: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src: Vec<f32> = raw.iter().map(|&v| v as f32).collect();
    kernels::resize_bilinear(&src, h, w, oh, ow).into_iter().map(f64::from).collect()
}

/// Per-image min-max scaling. An all-zero map stays zero and a constant
/// positive map becomes all ones.
fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if max - min <= 1e-12 * max {
        v.iter_mut().for_each(|x| *x = 1.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - min) / (max - min));
    }
    v
}

/// Jet colormap: dark blue at 0, through cyan, yellow, to dark red at 1.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// RGB blend of `image` with the jet-colored heatmap. Each pixel mixes in
/// the colormap with weight `OVERLAY_ALPHA * heat`, so cold pixels keep the
/// grayscale value. The heatmap is resampled when sizes differ.
pub fn overlay(image: &GrayImage, heatmap: &[f64], heat_height: usize, heat_width: usize) -> Result<Vec<u8>> {
    if heatmap.len() != heat_height * heat_width {
        return Err(Error::shape(format!("{} heat values for {heat_height}x{heat_width}", heatmap.len())));
    }
    let heat = if (heat_height, heat_width) == (image.height, image.width) {
        heatmap.to_vec()
    } else {
        upsample(heatmap, heat_height, heat_width, image.height, image.width)
    };
    let mut out = Vec::with_capacity(image.data.len() * 3);
    for (&g, &h) in image.data.iter().zip(&heat) {
        let g = (g as f64).clamp(0.0, 1.0);
        let a = OVERLAY_ALPHA * h.clamp(0.0, 1.0);
        for c in jet(h) {
            out.push((((1.0 - a) * g + a * c) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes [`overlay`] as an RGB PNG.
pub fn export_overlay(image: &GrayImage, heatmap: &[f64], heat_height: usize, heat_width: usize, path: &Path) -> Result<()> {
    let rgb = overlay(image, heatmap, heat_height, heat_width)?;
    image::save_buffer_with_format(
        path,
        &rgb,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    })
}
