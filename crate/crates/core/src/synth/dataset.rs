//! Collections of scenes with a labeled/unlabeled split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_scene, Instance, Mask, SceneConfig, Split, SyntheticScene};
use crate::codec::Container;
use crate::error::{Error, Result};
use crate::numcore::RngStream;
use crate::Tensor64;

/// Stream tag reserved for the split assignment.
const SPLIT_TAG: u64 = u64::MAX;

/// Marks exactly `round(label_fraction * n)` of `n` scenes as labeled.
pub fn make_splits(n_scenes: usize, label_fraction: f64, rng: &mut RngStream) -> Result<Vec<Split>> {
    if n_scenes == 0 {
        return Err(Error::arg("need at least one scene"));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::arg(format!(
            "label fraction must lie in (0, 1], got {label_fraction}"
        )));
    }
    let n_labeled = (label_fraction * n_scenes as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_scenes).collect();
    rng.shuffle(&mut order);
    let mut splits = vec![Split::Unlabeled; n_scenes];
    for &i in &order[..n_labeled] {
        splits[i] = Split::Labeled;
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SceneConfig,
    pub seed: u64,
    pub label_fraction: f64,
    /// Stream id each scene was generated from (scene `i` uses `derive(i)`).
    pub scene_streams: Vec<u64>,
    pub splits: Vec<Split>,
    pub classes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub seed: u64,
    pub label_fraction: f64,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, n_scenes: usize, label_fraction: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(seed, 0);
        let splits = make_splits(n_scenes, label_fraction, &mut root.derive(SPLIT_TAG))?;
        let scenes = splits
            .into_iter()
            .enumerate()
            .map(|(i, split)| {
                let mut s = generate_scene(cfg, &mut root.derive(i as u64))?;
                s.split = split;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            seed,
            label_fraction,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn labeled(&self) -> Vec<&SyntheticScene> {
        self.scenes.iter().filter(|s| s.split == Split::Labeled).collect()
    }

    pub fn unlabeled(&self) -> Vec<&SyntheticScene> {
        self.scenes.iter().filter(|s| s.split == Split::Unlabeled).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            config: self.config.clone(),
            seed: self.seed,
            label_fraction: self.label_fraction,
            scene_streams: (0..self.scenes.len() as u64).collect(),
            splits: self.scenes.iter().map(|s| s.split).collect(),
            classes: self
                .scenes
                .iter()
                .map(|s| s.instances.iter().map(|i| i.class_id).collect())
                .collect(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::to_value(self.manifest()).expect("manifest serializes");
        let mut c = Container::new("dataset", meta);
        for (i, s) in self.scenes.iter().enumerate() {
            c.push(format!("scene{i}/image"), s.image.clone());
            let ids = s.pixel_instance_id.iter().map(|&v| v as f64).collect();
            c.push(
                format!("scene{i}/ids"),
                Tensor64::new(vec![s.height, s.width], ids).expect("id grid"),
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "dataset" {
            return Err(Error::format(format!("expected a dataset file, found '{}'", c.kind)));
        }
        let m: DatasetManifest = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::format(format!("dataset manifest: {e}")))?;
        if m.splits.len() != m.classes.len() || c.tensors.len() != 2 * m.splits.len() {
            return Err(Error::format("dataset manifest disagrees with payload"));
        }
        let mut scenes = Vec::with_capacity(m.splits.len());
        for (i, (split, classes)) in m.splits.iter().zip(&m.classes).enumerate() {
            let image = c.tensors[2 * i].1.clone();
            let ids_t = &c.tensors[2 * i + 1].1;
            if ids_t.rank() != 2 || image.shape() != [3, ids_t.shape()[0], ids_t.shape()[1]] {
                return Err(Error::format(format!("scene {i} has inconsistent tensors")));
            }
            let (h, w) = (ids_t.shape()[0], ids_t.shape()[1]);
            let ids: Vec<u32> = ids_t.data().iter().map(|&v| v as u32).collect();
            let instances = classes
                .iter()
                .enumerate()
                .map(|(k, &class_id)| Instance {
                    mask: Mask {
                        height: h,
                        width: w,
                        bits: ids.iter().map(|&v| v == k as u32 + 1).collect(),
                    },
                    class_id,
                })
                .collect();
            let scene = SyntheticScene {
                height: h,
                width: w,
                image,
                instances,
                pixel_instance_id: ids,
                split: *split,
            };
            scene.validate().map_err(|e| Error::format(format!("scene {i}: {e}")))?;
            scenes.push(scene);
        }
        Ok(Self {
            config: m.config,
            seed: m.seed,
            label_fraction: m.label_fraction,
            scenes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(s: &[Split]) -> usize {
        s.iter().filter(|&&x| x == Split::Labeled).count()
    }

    #[test]
    fn split_counts() {
        let mut rng = RngStream::new(1, 2);
        assert_eq!(count(&make_splits(100, 0.10, &mut rng).unwrap()), 10);
        assert_eq!(count(&make_splits(20, 0.05, &mut rng).unwrap()), 1);
        assert_eq!(count(&make_splits(7, 1.0, &mut rng).unwrap()), 7);
    }

    #[test]
    fn split_fraction_validated() {
        let mut rng = RngStream::new(1, 2);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(make_splits(10, f, &mut rng), Err(Error::Argument(_))));
        }
        assert!(make_splits(0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn splits_deterministic() {
        let a = make_splits(50, 0.3, &mut RngStream::new(9, 9)).unwrap();
        let b = make_splits(50, 0.3, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            min_size: 6,
            max_size: 12,
            max_instances: 4,
            ..SceneConfig::default()
        };
        let ds = Dataset::generate(&cfg, 6, 0.5, 11).unwrap();
        assert_eq!(ds.labeled().len(), 3);
        let bytes = ds.to_container().encode().unwrap();
        let back = Dataset::from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_container().encode().unwrap(), bytes);
    }
}
