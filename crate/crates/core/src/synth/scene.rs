use serde::{Deserialize, Serialize};

use super::{Instance, Mask, Split, SyntheticScene};
use crate::error::{Error, Result};
use crate::numcore::RngStream;
use crate::Tensor64;

/// Appearance knobs. Two styles with different values form a source and a
/// target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainStyle {
    pub background: f64,
    pub background_noise: f64,
    /// Rotation of every class hue, as a fraction of the colour wheel.
    pub hue_shift: f64,
    pub saturation: f64,
    pub color_jitter: f64,
    pub texture: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self {
            background: 0.25,
            background_noise: 0.05,
            hue_shift: 0.0,
            saturation: 0.75,
            color_jitter: 0.06,
            texture: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub num_classes: usize,
    /// Shape bounding-box extent range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum background gap between instances.
    pub gap: usize,
    /// Probability of forcing two instances to share a class.
    pub shared_class_prob: f64,
    pub max_retries: usize,
    pub style: DomainStyle,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_instances: 2,
            max_instances: 6,
            num_classes: 4,
            min_size: 10,
            max_size: 22,
            gap: 1,
            shared_class_prob: 0.5,
            max_retries: 200,
            style: DomainStyle::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("scene height and width must be >= 16"));
        }
        if self.num_classes < 1 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::config("min_instances > max_instances"));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(Error::config("shape size range invalid"));
        }
        if self.max_size > self.height.min(self.width) {
            return Err(Error::config("max_size exceeds scene extent"));
        }
        Ok(())
    }

    /// RGB of a class under this config's style.
    pub fn class_color(&self, class_id: usize) -> [f64; 3] {
        let hue = ((class_id - 1) as f64 / self.num_classes as f64 + self.style.hue_shift)
            .rem_euclid(1.0);
        hsv_to_rgb(hue, self.style.saturation, 0.9)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle(u8),
}

fn rasterize(shape: Shape, h: usize, w: usize) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    dx * dx + dy * dy <= 1.0
                }
                Shape::Triangle(orient) => {
                    // apex at one side, base on the opposite side
                    let (u, v, len_u, len_v) = match orient {
                        0 => (y as f64 + 0.5, x as f64 + 0.5 - w as f64 / 2.0, h as f64, rx),
                        1 => (h as f64 - y as f64 - 0.5, x as f64 + 0.5 - w as f64 / 2.0, h as f64, rx),
                        2 => (x as f64 + 0.5, y as f64 + 0.5 - h as f64 / 2.0, w as f64, ry),
                        _ => (w as f64 - x as f64 - 0.5, y as f64 + 0.5 - h as f64 / 2.0, w as f64, ry),
                    };
                    v.abs() <= len_v * u / len_u + 0.5
                }
            };
            bits[y * w + x] = inside;
        }
    }
    bits
}

/// Generates one scene. Scenes are fully determined by `(cfg, rng)`.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut RngStream) -> Result<SyntheticScene> {
    cfg.validate()?;
    const SCENE_ATTEMPTS: usize = 10;
    for _ in 0..SCENE_ATTEMPTS {
        if let Some(scene) = try_generate(cfg, rng) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "could not pack {}..{} instances of size {}..{} into {}x{} after {} attempts",
        cfg.min_instances,
        cfg.max_instances,
        cfg.min_size,
        cfg.max_size,
        cfg.height,
        cfg.width,
        SCENE_ATTEMPTS
    )))
}

fn try_generate(cfg: &SceneConfig, rng: &mut RngStream) -> Option<SyntheticScene> {
    let (hh, ww) = (cfg.height, cfg.width);
    let n = rng.int_range(cfg.min_instances, cfg.max_instances);
    let mut classes: Vec<usize> = (0..n).map(|_| rng.int_range(1, cfg.num_classes)).collect();
    if n >= 2 && rng.bernoulli(cfg.shared_class_prob) {
        classes[1] = classes[0];
    }

    // occupied cells including the gap halo
    let mut blocked = vec![false; hh * ww];
    let mut ids = vec![0u32; hh * ww];
    let mut instances = Vec::with_capacity(n);
    for (idx, &class_id) in classes.iter().enumerate() {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let h = rng.int_range(cfg.min_size, cfg.max_size);
            let w = rng.int_range(cfg.min_size, cfg.max_size);
            let shape = match rng.int_range(0, 2) {
                0 => Shape::Rect,
                1 => Shape::Ellipse,
                _ => Shape::Triangle(rng.int_range(0, 3) as u8),
            };
            let top = rng.int_range(0, hh - h);
            let left = rng.int_range(0, ww - w);
            let local = rasterize(shape, h, w);
            let collides = (0..h).any(|y| {
                (0..w).any(|x| local[y * w + x] && blocked[(top + y) * ww + left + x])
            });
            if collides {
                continue;
            }
            let mut mask = Mask::empty(hh, ww);
            for y in 0..h {
                for x in 0..w {
                    if local[y * w + x] {
                        let p = (top + y) * ww + left + x;
                        mask.bits[p] = true;
                        ids[p] = idx as u32 + 1;
                    }
                }
            }
            if mask.area() == 0 {
                continue;
            }
            let g = cfg.gap as isize;
            for y in 0..hh {
                for x in 0..ww {
                    if !mask.bits[y * ww + x] {
                        continue;
                    }
                    for dy in -g..=g {
                        for dx in -g..=g {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < hh && (xx as usize) < ww {
                                blocked[yy as usize * ww + xx as usize] = true;
                            }
                        }
                    }
                }
            }
            instances.push(Instance { mask, class_id });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    let style = &cfg.style;
    let mut image = Tensor64::zeros(&[3, hh, ww]);
    let plane = hh * ww;
    for p in 0..plane {
        let v = style.background + style.background_noise * rng.normal();
        for c in 0..3 {
            image.data_mut()[c * plane + p] = v;
        }
    }
    for inst in &instances {
        let base = cfg.class_color(inst.class_id);
        let tint: Vec<f64> = (0..3)
            .map(|c| base[c] + style.color_jitter * (2.0 * rng.uniform() - 1.0))
            .collect();
        for p in 0..plane {
            if inst.mask.bits[p] {
                let t = style.texture * rng.normal();
                for c in 0..3 {
                    image.data_mut()[c * plane + p] = tint[c] + t;
                }
            }
        }
    }
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Some(SyntheticScene {
        height: hh,
        width: ww,
        image,
        instances,
        pixel_instance_id: ids,
        split: Split::Unlabeled,
    })
}
