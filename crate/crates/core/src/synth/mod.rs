//! Procedural instance-segmentation scenes and their augmented views.

mod augment;
mod dataset;
mod scene;

pub use augment::{
    feature_correspondence, strong_augment, strong_augment_with, weak_augment, weak_augment_with, AugmentedView,
    StrongParams, ViewKind, WeakParams, SENTINEL_INVALID,
};
pub use dataset::{make_splits, Dataset};
pub use scene::{generate_scene, DomainStyle, SceneConfig};

use serde::{Deserialize, Serialize};

use crate::Tensor64;

/// Binary mask over an `height x width` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_tensor(&self) -> Tensor64 {
        Tensor64::from_fn(&[self.height, self.width], |i| {
            if self.bits[i] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// One ground-truth (or pseudo-labelled) object.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    /// Foreground class in `1..=C`.
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor64,
    pub instances: Vec<Instance>,
    /// Per pixel: 0 for background, otherwise `1 + index into instances`.
    pub pixel_instance_id: Vec<u32>,
    pub split: Split,
}

impl SyntheticScene {
    /// Checks disjointness, id consistency and non-empty masks.
    pub fn validate(&self) -> crate::Result<()> {
        let n = self.height * self.width;
        if self.pixel_instance_id.len() != n || self.image.shape() != [3, self.height, self.width] {
            return Err(crate::Error::Data("scene extents inconsistent".into()));
        }
        let mut cover = vec![0u32; n];
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.area() == 0 {
                return Err(crate::Error::Data(format!("instance {i} has no pixels")));
            }
            for (p, &b) in inst.mask.bits.iter().enumerate() {
                if b {
                    if cover[p] != 0 {
                        return Err(crate::Error::Data(format!("instances overlap at pixel {p}")));
                    }
                    cover[p] = i as u32 + 1;
                }
            }
        }
        if cover != self.pixel_instance_id {
            return Err(crate::Error::Data("pixel_instance_id disagrees with masks".into()));
        }
        Ok(())
    }
}
