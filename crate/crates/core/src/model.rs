//! Query-based segmentation network.
//!
//! A stack of 3x3 conv + relu stages turns the image (plus two coordinate
//! channels) into a feature map at a quarter of the input resolution.
//! Learned slot queries dot against every feature pixel to give mask
//! logits; each query is refined by the mask-weighted mean of the features
//! and mapped to class logits. A two-layer projection head produces the
//! unit-norm pixel embeddings used by the contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{softmax, RngStream, Tape, Tensor, Var};
use crate::Scalar;

/// Spatial downsampling between the image and the feature map.
pub const STRIDE: usize = 4;
/// Extra input channels carrying normalized x and y coordinates.
pub const COORD_CHANNELS: usize = 2;
pub const IMAGE_CHANNELS: usize = 3;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Output channels of each conv stage; the last one is the feature dim.
    pub widths: Vec<usize>,
    pub num_slots: usize,
    pub num_classes: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl ArchConfig {
    pub fn student(num_slots: usize, num_classes: usize) -> Self {
        Self {
            widths: vec![12, 24],
            num_slots,
            num_classes,
            proj_hidden: 24,
            proj_dim: 16,
        }
    }

    pub fn teacher(num_slots: usize, num_classes: usize) -> Self {
        Self {
            widths: vec![24, 48, 64],
            num_slots,
            num_classes,
            proj_hidden: 64,
            proj_dim: 16,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::arg("encoder needs at least one stage"));
        }
        if self.widths.contains(&0) {
            return Err(Error::arg("encoder widths must be positive"));
        }
        for (name, v) in [
            ("num_slots", self.num_slots),
            ("num_classes", self.num_classes),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = IMAGE_CHANNELS + COORD_CHANNELS;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), vec![w, cin, 3, 3]));
            out.push((format!("encoder.{i}.bias"), vec![w]));
            cin = w;
        }
        let d = self.feature_dim();
        let c1 = self.num_classes + 1;
        out.push(("queries".into(), vec![self.num_slots, d]));
        out.push(("class_head.weight".into(), vec![d, c1]));
        out.push(("class_head.bias".into(), vec![c1]));
        out.push(("proj.0.weight".into(), vec![d, self.proj_hidden]));
        out.push(("proj.0.bias".into(), vec![self.proj_hidden]));
        out.push(("proj.1.weight".into(), vec![self.proj_hidden, self.proj_dim]));
        out.push(("proj.1.bias".into(), vec![self.proj_dim]));
        out
    }
}

/// Parameter count of an affine map `fan_in -> fan_out` (weights and bias).
pub fn affine_param_count(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub arch: ArchConfig,
    /// Named tensors in [`ArchConfig::layout`] order.
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            tensors: arch
                .layout()
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(&s)))
                .collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    /// Records every tensor as a leaf; trainable leaves receive gradients.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Fan-in scaled uniform initialization. Biases start at zero.
pub fn init_params<S: Scalar>(arch: &ArchConfig, rng: &mut RngStream) -> Result<ModelParams<S>> {
    let mut params = ModelParams::zeros(arch)?;
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with(".bias") {
            continue;
        }
        let shape = t.shape().to_vec();
        let fan_in = match shape.len() {
            4 => shape[1] * 9,
            _ if name == "queries" => shape[1],
            _ => shape[0],
        };
        let gain = if name.starts_with("encoder") || name == "proj.0.weight" || name == "queries" {
            6.0
        } else {
            3.0
        };
        let bound = (gain / fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = S::lit(rng.uniform_range(-bound, bound));
        }
    }
    Ok(params)
}

pub fn count_params<S: Scalar>(params: &ModelParams<S>) -> usize {
    params.tensors.iter().map(|(_, t)| t.len()).sum()
}

/// Forward values for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<S> {
    /// Feature grid extent.
    pub height: usize,
    pub width: usize,
    /// `[N, D_proj]`, unit rows (zero rows pass through the guard).
    pub z: Tensor<S>,
    /// `[K, h, w]`.
    pub mask_logits: Tensor<S>,
    /// `[K, C + 1]`, class 0 is background.
    pub class_logits: Tensor<S>,
}

impl<S: Scalar> ModelOutput<S> {
    /// Per-pixel softmax over slots, `[K, h, w]`.
    pub fn mask_probs(&self) -> Tensor<S> {
        softmax(&self.mask_logits, 0).expect("slot axis")
    }

    /// Per-slot softmax over classes, `[K, C + 1]`.
    pub fn class_probs(&self) -> Tensor<S> {
        softmax(&self.class_logits, 1).expect("class axis")
    }

    pub fn num_slots(&self) -> usize {
        self.mask_logits.shape()[0]
    }
}

/// Tape handles for one image's outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub height: usize,
    pub width: usize,
    /// `[N, D_proj]`.
    pub z: Var,
    /// `[K, N]`.
    pub mask_logits: Var,
    /// `[K, C + 1]`.
    pub class_logits: Var,
}

impl OutputVars {
    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> ModelOutput<S> {
        let k = tape.shape(self.mask_logits)[0];
        ModelOutput {
            height: self.height,
            width: self.width,
            z: tape.value(self.z).clone(),
            mask_logits: tape
                .value(self.mask_logits)
                .clone()
                .reshape(&[k, self.height, self.width])
                .expect("mask grid"),
            class_logits: tape.value(self.class_logits).clone(),
        }
    }
}

/// Image plus coordinate channels, `[5, H, W]`.
fn with_coords<S: Scalar>(image: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let coord = |i: usize, n: usize| {
        if n > 1 {
            S::lit(2.0 * i as f64 / (n - 1) as f64 - 1.0)
        } else {
            S::zero()
        }
    };
    Tensor::from_fn(&[IMAGE_CHANNELS + COORD_CHANNELS, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        match c {
            0..IMAGE_CHANNELS => image.data()[i],
            IMAGE_CHANNELS => coord(p % w, w),
            _ => coord(p / w, h),
        }
    })
}

fn check_image<S: Scalar>(arch: &ArchConfig, image: &Tensor<S>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != IMAGE_CHANNELS {
        return Err(Error::arg(format!("expected a [3, H, W] image, got {s:?}")));
    }
    if s[1] % STRIDE != 0 || s[2] % STRIDE != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::arg(format!(
            "image extent {}x{} is not a positive multiple of {STRIDE}",
            s[1], s[2]
        )));
    }
    arch.validate()
}

/// Records the forward pass of one image on `tape`, using parameter
/// handles from [`ModelParams::register`].
pub fn forward_vars<S: Scalar>(
    arch: &ArchConfig,
    vars: &[Var],
    image: &Tensor<S>,
    tape: &mut Tape<S>,
) -> Result<OutputVars> {
    check_image(arch, image)?;
    if vars.len() != arch.layout().len() {
        return Err(Error::arg("parameter handles do not match the architecture"));
    }
    let depth = arch.widths.len();
    let mut x = tape.constant(with_coords(image));
    for i in 0..depth {
        let c = tape.conv3x3(x, vars[2 * i], vars[2 * i + 1]);
        x = tape.relu(c);
        let pools = match (depth, i) {
            (1, 0) => 2,
            (_, 0) | (_, 1) => 1,
            _ => 0,
        };
        for _ in 0..pools {
            x = tape.avg_pool2(x);
        }
    }
    let (d, h, w) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let n = h * w;
    let p = 2 * depth;
    let (queries, cls_w, cls_b) = (vars[p], vars[p + 1], vars[p + 2]);
    let (p0w, p0b, p1w, p1b) = (vars[p + 3], vars[p + 4], vars[p + 5], vars[p + 6]);

    let feats = tape.reshape(x, &[d, n]);
    let mask_logits = tape.matmul(queries, feats);

    let attn = tape.softmax(mask_logits, 0);
    let feats_t = tape.transpose(feats);
    let weighted = tape.matmul(attn, feats_t);
    let mass = tape.sum_axis(attn, 1);
    let mass = tape.shift(mass, S::lit(NORM_EPS));
    let mass = tape.broadcast_cols(mass, d);
    let pooled = tape.div(weighted, mass);
    let refined = tape.add(queries, pooled);
    let class_logits = tape.affine(refined, cls_w, cls_b);

    let hidden = tape.affine(feats_t, p0w, p0b);
    let hidden = tape.relu(hidden);
    let proj = tape.affine(hidden, p1w, p1b);
    let z = tape.l2_normalize_rows(proj, S::lit(NORM_EPS));

    Ok(OutputVars {
        height: h,
        width: w,
        z,
        mask_logits,
        class_logits,
    })
}

/// Forward pass. With a tape, parameters are recorded as trainable leaves
/// so the caller can differentiate any scalar of the outputs.
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    image: &Tensor<S>,
    tape: Option<&mut Tape<S>>,
) -> Result<ModelOutput<S>> {
    let mut local = Tape::new();
    let (tape, trainable) = match tape {
        Some(t) => (t, true),
        None => (&mut local, false),
    };
    let vars = params.register(tape, trainable);
    let out = forward_vars(&params.arch, &vars, image, tape)?;
    Ok(out.values(tape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchConfig {
        ArchConfig {
            widths: vec![6, 8],
            num_slots: 8,
            num_classes: 4,
            proj_hidden: 10,
            proj_dim: 16,
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 0);
        Tensor::from_fn(&[3, h, w], |_| rng.uniform())
    }

    #[test]
    fn init_is_deterministic() {
        let a: ModelParams<f64> = init_params(&arch(), &mut RngStream::new(1, 1)).unwrap();
        let b: ModelParams<f64> = init_params(&arch(), &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("class_head.bias").unwrap().shape(), &[5]);
    }

    #[test]
    fn zero_depth_rejected() {
        let mut a = arch();
        a.widths.clear();
        assert!(matches!(
            init_params::<f64>(&a, &mut RngStream::new(0, 0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn output_shapes() {
        let p: ModelParams<f64> = init_params(&arch(), &mut RngStream::new(2, 0)).unwrap();
        let out = forward(&p, &image(64, 64, 3), None).unwrap();
        assert_eq!(out.z.shape(), &[256, 16]);
        assert_eq!(out.mask_logits.shape(), &[8, 16, 16]);
        assert_eq!(out.class_logits.shape(), &[8, 5]);
        for r in 0..256 {
            let n: f64 = out.z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
        }
    }

    #[test]
    fn single_stage_still_reaches_stride() {
        let mut a = arch();
        a.widths = vec![4];
        let p: ModelParams<f64> = init_params(&a, &mut RngStream::new(2, 0)).unwrap();
        let out = forward(&p, &image(16, 24, 3), None).unwrap();
        assert_eq!((out.height, out.width), (4, 6));
    }

    #[test]
    fn zero_weights_give_uniform_slots() {
        let p = ModelParams::<f64>::zeros(&arch()).unwrap();
        let out = forward(&p, &image(16, 16, 3), None).unwrap();
        assert!(out.z.data().iter().all(|&v| v == 0.0));
        assert!(out.mask_logits.data().iter().all(|&v| v == 0.0));
        assert!(out.mask_probs().data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn bad_extent_rejected() {
        let p = ModelParams::<f64>::zeros(&arch()).unwrap();
        assert!(forward(&p, &image(18, 16, 0), None).is_err());
        assert!(forward(&p, &Tensor::zeros(&[2, 16, 16]), None).is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(affine_param_count(8, 5), 45);
        let mut a = arch();
        let p = ModelParams::<f64>::zeros(&a).unwrap();
        let conv = |p: &ModelParams<f64>| p.get("encoder.1.weight").unwrap().len();
        let before = conv(&p);
        a.widths = a.widths.iter().map(|w| 2 * w).collect();
        let q = ModelParams::<f64>::zeros(&a).unwrap();
        assert_eq!(conv(&q), 4 * before);
        let t = count_params(&ModelParams::<f64>::zeros(&ArchConfig::teacher(8, 4)).unwrap());
        let s = count_params(&ModelParams::<f64>::zeros(&ArchConfig::student(8, 4)).unwrap());
        assert!(t > 5 * s, "teacher {t} vs student {s}");
    }

    #[test]
    fn slot_permutation_equivariance() {
        let p: ModelParams<f64> = init_params(&arch(), &mut RngStream::new(5, 0)).unwrap();
        let mut q = p.clone();
        let perm = [3usize, 0, 7, 1, 2, 6, 5, 4];
        let d = arch().feature_dim();
        let src = p.get("queries").unwrap().clone();
        let qi = q.tensors.iter().position(|(n, _)| n == "queries").unwrap();
        for (k, &pk) in perm.iter().enumerate() {
            for j in 0..d {
                q.tensors[qi].1.set(&[k, j], src.at(&[pk, j]));
            }
        }
        let img = image(16, 16, 9);
        let a = forward(&p, &img, None).unwrap();
        let b = forward(&q, &img, None).unwrap();
        let plane = 16;
        for (k, &pk) in perm.iter().enumerate() {
            for i in 0..plane {
                let x = b.mask_logits.data()[k * plane + i];
                let y = a.mask_logits.data()[pk * plane + i];
                assert!((x - y).abs() < 1e-12);
            }
            for c in 0..5 {
                assert!((b.class_logits.at(&[k, c]) - a.class_logits.at(&[pk, c])).abs() < 1e-12);
            }
        }
    }
}
