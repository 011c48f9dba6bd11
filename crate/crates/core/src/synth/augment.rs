//! Weak and strong views with exact pixel correspondences.
//!
//! Every view stores two maps. `to_source` sends each view pixel to the
//! scene pixel it was sampled from (total). `from_source` sends each scene
//! pixel to the view pixel that shows it, or [`SENTINEL_INVALID`] when the
//! pixel was cropped away. Resampling is nearest-neighbour, so labels
//! transported through either map stay exact.

use super::{Mask, SyntheticScene};
use crate::numcore::RngStream;
use crate::Tensor64;

pub const SENTINEL_INVALID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub kind: ViewKind,
    pub height: usize,
    pub width: usize,
    /// `[3, height, width]`.
    pub image: Tensor64,
    pub to_source: Vec<u32>,
    pub from_source: Vec<u32>,
    pub source_height: usize,
    pub source_width: usize,
}

/// Nearest index when resampling an axis of `src` samples onto `dst`.
#[inline]
fn nearest(i: usize, dst: usize, src: usize) -> usize {
    let pos = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    (pos.round().max(0.0) as usize).min(src - 1)
}

impl AugmentedView {
    pub fn source_of(&self, y: usize, x: usize) -> (usize, usize) {
        let s = self.to_source[y * self.width + x] as usize;
        (s / self.source_width, s % self.source_width)
    }

    /// View pixel showing scene pixel `(y, x)`, if it survived.
    pub fn view_of(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        match self.from_source[y * self.source_width + x] {
            SENTINEL_INVALID => None,
            t => Some((t as usize / self.width, t as usize % self.width)),
        }
    }

    /// Fraction of scene pixels that appear in this view.
    pub fn source_coverage(&self) -> f64 {
        let valid = self.from_source.iter().filter(|&&t| t != SENTINEL_INVALID).count();
        valid as f64 / self.from_source.len() as f64
    }

    /// Scene pixel under the centre of each `stride x stride` feature cell.
    pub fn feature_sources(&self, stride: usize) -> Vec<usize> {
        let (fh, fw) = (self.height / stride, self.width / stride);
        let c = stride / 2;
        (0..fh * fw)
            .map(|i| self.to_source[(i / fw * stride + c) * self.width + i % fw * stride + c] as usize)
            .collect()
    }

    /// Feature cell of this view that shows scene pixel `src`, if any.
    pub fn feature_cell_of(&self, src: usize, stride: usize) -> Option<usize> {
        match self.from_source[src] {
            SENTINEL_INVALID => None,
            t => {
                let (y, x) = (t as usize / self.width, t as usize % self.width);
                Some(y / stride * (self.width / stride) + x / stride)
            }
        }
    }

    /// Transports a scene-grid mask onto the view grid.
    pub fn warp_mask(&self, mask: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.to_source.iter().map(|&s| mask.bits[s as usize]).collect(),
        }
    }

    /// Transports per-pixel scene ids onto the view grid.
    pub fn warp_ids(&self, ids: &[u32]) -> Vec<u32> {
        self.to_source.iter().map(|&s| ids[s as usize]).collect()
    }
}

/// For each feature cell of `weak`, the feature cell of `strong` showing
/// the same scene pixel, or `None` where the strong crop lost it.
pub fn feature_correspondence(weak: &AugmentedView, strong: &AugmentedView, stride: usize) -> Vec<Option<usize>> {
    weak.feature_sources(stride)
        .into_iter()
        .map(|src| strong.feature_cell_of(src, stride))
        .collect()
}

fn resample(scene: &SyntheticScene, to_source: &[u32], h: usize, w: usize) -> Tensor64 {
    let src_plane = scene.height * scene.width;
    let plane = h * w;
    let mut img = Tensor64::zeros(&[3, h, w]);
    for (t, &s) in to_source.iter().enumerate() {
        for c in 0..3 {
            img.data_mut()[c * plane + t] = scene.image.data()[c * src_plane + s as usize];
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakParams {
    pub flip: bool,
    pub scale: f64,
}

impl WeakParams {
    pub fn sample(rng: &mut RngStream) -> Self {
        let flip = rng.bernoulli(0.5);
        let scale = rng.uniform_range(0.8, 1.2);
        Self { flip, scale }
    }

    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
        }
    }
}

/// Output extent for a resize, rounded to a multiple of 4 (the encoder stride).
fn scaled_extent(n: usize, scale: f64) -> usize {
    (((n as f64 * scale) / 4.0).round() as usize * 4).max(4)
}

pub fn weak_augment(scene: &SyntheticScene, rng: &mut RngStream) -> AugmentedView {
    weak_augment_with(scene, WeakParams::sample(rng))
}

/// Horizontal flip and uniform resize.
pub fn weak_augment_with(scene: &SyntheticScene, p: WeakParams) -> AugmentedView {
    let (sh, sw) = (scene.height, scene.width);
    let (h, w) = (scaled_extent(sh, p.scale), scaled_extent(sw, p.scale));
    let mut to_source = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = nearest(y, h, sh);
        for x in 0..w {
            let xf = if p.flip { w - 1 - x } else { x };
            to_source.push((sy * sw + nearest(xf, w, sw)) as u32);
        }
    }
    let mut from_source = Vec::with_capacity(sh * sw);
    for sy in 0..sh {
        let y = nearest(sy, sh, h);
        for sx in 0..sw {
            let x = nearest(sx, sw, w);
            let x = if p.flip { w - 1 - x } else { x };
            from_source.push((y * w + x) as u32);
        }
    }
    let image = resample(scene, &to_source, h, w);
    AugmentedView {
        kind: ViewKind::Weak,
        height: h,
        width: w,
        image,
        to_source,
        from_source,
        source_height: sh,
        source_width: sw,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    /// Brightness, contrast and saturation factors.
    pub jitter: Option<[f64; 3]>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

impl StrongParams {
    pub fn sample(rng: &mut RngStream, height: usize, width: usize) -> Self {
        let area = rng.uniform_range(0.5, 1.0);
        let log_ratio = rng.uniform_range((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let total = area * (height * width) as f64;
        let mut ch = ((area / ratio).sqrt() * height as f64).round().clamp(1.0, height as f64) as usize;
        let mut cw = (total / ch as f64).round().max(1.0) as usize;
        if cw > width {
            cw = width;
            ch = (total / width as f64).round().clamp(1.0, height as f64) as usize;
        }
        let crop_top = rng.int_range(0, height - ch);
        let crop_left = rng.int_range(0, width - cw);
        let jitter = rng.bernoulli(0.8).then(|| {
            [
                rng.uniform_range(0.6, 1.4),
                rng.uniform_range(0.6, 1.4),
                rng.uniform_range(0.6, 1.4),
            ]
        });
        let grayscale = rng.bernoulli(0.2);
        let blur_sigma = rng.bernoulli(0.5).then(|| rng.uniform_range(0.1, 1.5));
        Self {
            crop_top,
            crop_left,
            crop_height: ch,
            crop_width: cw,
            jitter,
            grayscale,
            blur_sigma,
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop_top: 0,
            crop_left: 0,
            crop_height: height,
            crop_width: width,
            jitter: None,
            grayscale: false,
            blur_sigma: None,
        }
    }
}

pub fn strong_augment(scene: &SyntheticScene, rng: &mut RngStream) -> AugmentedView {
    let p = StrongParams::sample(rng, scene.height, scene.width);
    strong_augment_with(scene, p)
}

/// Random resized crop back to the scene extent, then photometric noise.
pub fn strong_augment_with(scene: &SyntheticScene, p: StrongParams) -> AugmentedView {
    let (h, w) = (scene.height, scene.width);
    let mut to_source = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = p.crop_top + nearest(y, h, p.crop_height);
        for x in 0..w {
            let sx = p.crop_left + nearest(x, w, p.crop_width);
            to_source.push((sy * w + sx) as u32);
        }
    }
    let mut from_source = vec![SENTINEL_INVALID; h * w];
    for cy in 0..p.crop_height {
        let y = nearest(cy, p.crop_height, h);
        for cx in 0..p.crop_width {
            let x = nearest(cx, p.crop_width, w);
            from_source[(p.crop_top + cy) * w + p.crop_left + cx] = (y * w + x) as u32;
        }
    }
    let mut image = resample(scene, &to_source, h, w);
    if let Some(j) = p.jitter {
        color_jitter(&mut image, j);
    }
    if p.grayscale {
        to_grayscale(&mut image);
    }
    if let Some(sigma) = p.blur_sigma {
        gaussian_blur(&mut image, sigma);
    }
    AugmentedView {
        kind: ViewKind::Strong,
        height: h,
        width: w,
        image,
        to_source,
        from_source,
        source_height: h,
        source_width: w,
    }
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter(img: &mut Tensor64, [brightness, contrast, saturation]: [f64; 3]) {
    let plane = img.len() / 3;
    let d = img.data_mut();
    d.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let mean = (0..plane)
        .map(|p| luminance(d[p], d[plane + p], d[2 * plane + p]))
        .sum::<f64>()
        / plane as f64;
    d.iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    for p in 0..plane {
        let gray = luminance(d[p], d[plane + p], d[2 * plane + p]);
        for c in 0..3 {
            let v = &mut d[c * plane + p];
            *v = (gray + (*v - gray) * saturation).clamp(0.0, 1.0);
        }
    }
}

fn to_grayscale(img: &mut Tensor64) {
    let plane = img.len() / 3;
    let d = img.data_mut();
    for p in 0..plane {
        let gray = luminance(d[p], d[plane + p], d[2 * plane + p]);
        for c in 0..3 {
            d[c * plane + p] = gray;
        }
    }
}

fn gaussian_blur(img: &mut Tensor64, sigma: f64) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for c in 0..3 {
        let plane = &mut img.data_mut()[c * h * w..(c + 1) * h * w];
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + clampi(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
}
