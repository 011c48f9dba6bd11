//! Debiased negative sampling from fused mask and class score maps.
//!
//! Every pixel gets a joint pseudo-probability embedding: its slot
//! probabilities followed by its expected class distribution. Two pixels
//! whose embeddings point the same way probably belong to the same
//! instance, so candidate negatives are drawn in proportion to
//! `max(0, 1 - cos)` between the anchor's embedding and theirs.
//!
//! Images in a batch may have different feature extents, so per-pixel
//! quantities are stored as one flat row block with per-image offsets.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::numcore::{dot, RngStream, Tensor};
use crate::Scalar;

const NORM_EPS: f64 = 1e-12;

/// Slot and class probabilities for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps<S> {
    /// Per image `[K, N_b]`, softmax over slots per pixel.
    pub mask_probs: Vec<Tensor<S>>,
    /// Per image `[K, C + 1]`, softmax over classes per slot.
    pub class_probs: Vec<Tensor<S>>,
}

impl<S: Scalar> ScoreMaps<S> {
    pub fn from_outputs(outputs: &[&ModelOutput<S>]) -> Self {
        let mask_probs = outputs
            .iter()
            .map(|o| {
                let k = o.num_slots();
                o.mask_probs().reshape(&[k, o.height * o.width]).expect("slot grid")
            })
            .collect();
        let class_probs = outputs.iter().map(|o| o.class_probs()).collect();
        Self {
            mask_probs,
            class_probs,
        }
    }

    /// From dense `[B, K, h, w]` and `[B, K, C + 1]` arrays.
    pub fn from_dense(p_m: &Tensor<S>, p_c: &Tensor<S>) -> Result<Self> {
        if p_m.rank() != 4 || p_c.rank() != 3 || p_m.shape()[..2] != p_c.shape()[..2] {
            return Err(Error::arg(format!(
                "score map shapes {:?} and {:?} disagree",
                p_m.shape(),
                p_c.shape()
            )));
        }
        let (b, k, n) = (p_m.shape()[0], p_m.shape()[1], p_m.shape()[2] * p_m.shape()[3]);
        let c1 = p_c.shape()[2];
        let slice = |t: &Tensor<S>, i: usize, len: usize, shape: &[usize]| {
            Tensor::new(shape.to_vec(), t.data()[i * len..(i + 1) * len].to_vec()).expect("slice")
        };
        Ok(Self {
            mask_probs: (0..b).map(|i| slice(p_m, i, k * n, &[k, n])).collect(),
            class_probs: (0..b).map(|i| slice(p_c, i, k * c1, &[k, c1])).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.mask_probs.len()
    }

    pub fn num_slots(&self) -> usize {
        self.mask_probs.first().map_or(0, |t| t.shape()[0])
    }

    pub fn num_class_outputs(&self) -> usize {
        self.class_probs.first().map_or(0, |t| t.shape()[1])
    }

    /// Checks that every slot and class distribution sums to one.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (pm, pc) in self.mask_probs.iter().zip(&self.class_probs) {
            let (k, n) = (pm.shape()[0], pm.shape()[1]);
            for p in 0..n {
                let s: f64 = (0..k).map(|j| pm.data()[j * n + p].as_f64()).sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::arg(format!("slot probabilities sum to {s} at pixel {p}")));
                }
            }
            for j in 0..k {
                let s: f64 = pc.row(j).iter().map(|v| v.as_f64()).sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::arg(format!("class probabilities sum to {s} in slot {j}")));
                }
            }
        }
        Ok(())
    }
}

/// `F_c[p, c] = sum_k P_m[k, p] P_c[k, c]`, per image `[N_b, C + 1]`.
pub fn expected_class_distribution<S: Scalar>(sm: &ScoreMaps<S>) -> Vec<Tensor<S>> {
    sm.mask_probs
        .iter()
        .zip(&sm.class_probs)
        .map(|(pm, pc)| {
            let (k, n) = (pm.shape()[0], pm.shape()[1]);
            let c1 = pc.shape()[1];
            let mut out = Tensor::zeros(&[n, c1]);
            for p in 0..n {
                for c in 0..c1 {
                    let terms: Vec<S> = (0..k)
                        .map(|j| pm.data()[j * n + p] * pc.data()[j * c1 + c])
                        .collect();
                    out.data_mut()[p * c1 + c] = terms.iter().copied().sum();
                }
            }
            out
        })
        .collect()
}

/// Flat per-pixel joint embeddings for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding<S> {
    /// `[N_total, K + C + 1]`: slot probabilities then expected classes.
    pub y: Tensor<S>,
    /// Same rows scaled to unit norm (zero rows stay zero).
    pub y_normalized: Tensor<S>,
    /// Image `b` owns rows `offsets[b]..offsets[b + 1]`.
    pub offsets: Vec<usize>,
    pub num_slots: usize,
}

fn normalize_row<S: Scalar>(row: &mut [S]) {
    let n = dot(row, row).sqrt();
    if n.as_f64() >= NORM_EPS {
        row.iter_mut().for_each(|v| *v /= n);
    }
}

pub fn joint_embedding<S: Scalar>(sm: &ScoreMaps<S>, f_c: &[Tensor<S>]) -> JointEmbedding<S> {
    let k = sm.num_slots();
    let c1 = sm.num_class_outputs();
    let width = k + c1;
    let mut offsets = vec![0];
    let mut data = Vec::new();
    for (pm, fc) in sm.mask_probs.iter().zip(f_c) {
        let n = pm.shape()[1];
        for p in 0..n {
            data.extend((0..k).map(|j| pm.data()[j * n + p]));
            data.extend_from_slice(fc.row(p));
        }
        offsets.push(offsets.last().unwrap() + n);
    }
    let total = *offsets.last().unwrap();
    let y = Tensor::new(vec![total, width], data).expect("joint rows");
    let mut y_normalized = y.clone();
    if width > 0 {
        y_normalized.data_mut().chunks_mut(width).for_each(normalize_row);
    }
    JointEmbedding {
        y,
        y_normalized,
        offsets,
        num_slots: k,
    }
}

impl<S: Scalar> JointEmbedding<S> {
    pub fn from_scores(sm: &ScoreMaps<S>) -> Self {
        joint_embedding(sm, &expected_class_distribution(sm))
    }

    pub fn len(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image owning global row `g`.
    pub fn image_of(&self, g: usize) -> usize {
        self.offsets.partition_point(|&o| o <= g) - 1
    }

    /// Unit rows of the block a sampler variant scores with.
    pub fn scoring_rows(&self, variant: SamplerVariant) -> Tensor<S> {
        project_rows(&self.y_normalized, self.num_slots, variant)
    }
}

/// Restricts unit joint rows to the block `variant` uses and renormalizes.
fn project_rows<S: Scalar>(rows: &Tensor<S>, k: usize, variant: SamplerVariant) -> Tensor<S> {
    let (n, width) = (rows.shape()[0], rows.shape()[1]);
    let range = match variant {
        SamplerVariant::Uniform | SamplerVariant::Fusion => 0..width,
        SamplerVariant::MaskOnly => 0..k,
        SamplerVariant::ClassOnly => k..width,
    };
    let dim = range.len();
    let mut data = Vec::with_capacity(n * dim);
    for r in 0..n {
        let start = data.len();
        data.extend_from_slice(&rows.row(r)[range.clone()]);
        if variant != SamplerVariant::Fusion {
            normalize_row(&mut data[start..]);
        }
    }
    Tensor::new(vec![n, dim], data).expect("projected rows")
}

/// `max(0, 1 - <a, b>)` for unit rows.
pub fn debias_score<S: Scalar>(a: &[S], b: &[S]) -> S {
    (S::one() - dot(a, b)).max(S::zero())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerVariant {
    Uniform,
    #[serde(rename = "mask")]
    MaskOnly,
    #[serde(rename = "class")]
    ClassOnly,
    #[default]
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DebiasExponent {
    #[default]
    Linear,
    Squared,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingScope {
    #[default]
    Batch,
    Bank,
}

keyword_enum!(SamplerVariant, "sampler",
    "uniform" => SamplerVariant::Uniform,
    "mask" => SamplerVariant::MaskOnly,
    "class" => SamplerVariant::ClassOnly,
    "fusion" => SamplerVariant::Fusion,
);
keyword_enum!(DebiasExponent, "debias exponent",
    "linear" => DebiasExponent::Linear,
    "squared" => DebiasExponent::Squared,
    "sqrt" => DebiasExponent::Sqrt,
);
keyword_enum!(SamplingScope, "sampling scope",
    "batch" => SamplingScope::Batch,
    "bank" => SamplingScope::Bank,
);

impl DebiasExponent {
    pub fn apply(self, s: f64) -> f64 {
        match self {
            DebiasExponent::Linear => s,
            DebiasExponent::Squared => s * s,
            DebiasExponent::Sqrt => s.sqrt(),
        }
    }
}

/// Turns raw scores into sampling probabilities. All-zero scores fall back
/// to uniform.
pub fn normalize_scores(scores: &[f64], variant: SamplerVariant, exponent: DebiasExponent) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::arg("empty candidate pool"));
    }
    let uniform = || vec![1.0 / scores.len() as f64; scores.len()];
    if variant == SamplerVariant::Uniform {
        return Ok(uniform());
    }
    let w: Vec<f64> = scores.iter().map(|&s| exponent.apply(s.max(0.0))).collect();
    let total = crate::tree_sum(&w);
    if total <= 0.0 || !total.is_finite() {
        log::debug!("all candidate scores are zero; sampling uniformly");
        return Ok(uniform());
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Candidates for one anchor and the probability of drawing each.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingDistribution {
    pub candidates: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Distribution over every row of `je` (optionally only rows flagged in
/// `eligible`) except the anchor itself.
pub fn build_sampling_distribution<S: Scalar>(
    anchor: usize,
    je: &JointEmbedding<S>,
    variant: SamplerVariant,
    exponent: DebiasExponent,
    eligible: Option<&[bool]>,
) -> Result<SamplingDistribution> {
    let rows = je.scoring_rows(variant);
    distribution_from_rows(anchor, &rows, variant, exponent, eligible)
}

fn distribution_from_rows<S: Scalar>(
    anchor: usize,
    rows: &Tensor<S>,
    variant: SamplerVariant,
    exponent: DebiasExponent,
    eligible: Option<&[bool]>,
) -> Result<SamplingDistribution> {
    let n = rows.shape()[0];
    if anchor >= n {
        return Err(Error::arg(format!("anchor {anchor} outside {n} rows")));
    }
    let candidates: Vec<usize> = (0..n)
        .filter(|&q| q != anchor && eligible.is_none_or(|e| e[q]))
        .collect();
    let a = rows.row(anchor);
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&q| debias_score(a, rows.row(q)).as_f64())
        .collect();
    let probs = normalize_scores(&scores, variant, exponent)?;
    Ok(SamplingDistribution { candidates, probs })
}

/// `r` i.i.d. draws (with replacement) of positions into `probs`.
pub fn sample_negatives(probs: &[f64], r: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cum.push(acc);
    }
    let last_positive = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (0..r)
        .map(|_| {
            let u = rng.uniform() * acc;
            cum.partition_point(|&c| c <= u).min(last_positive)
        })
        .collect()
}

/// Identifies an object instance across a batch or a bank.
/// `id == 0` is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceKey {
    pub image: u64,
    pub id: u32,
}

impl InstanceKey {
    /// Whether a negative with key `other` is a false negative for an
    /// anchor with key `self`.
    pub fn same_object(&self, other: &InstanceKey) -> bool {
        match (self.id, other.id) {
            (0, 0) => true,
            (0, _) | (_, 0) => false,
            (a, b) => a == b && self.image == other.image,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSource {
    Batch,
    Bank,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Negative {
    pub source: NegativeSource,
    /// Global batch row or bank slot.
    pub index: usize,
    pub probability: f64,
    pub instance: Option<InstanceKey>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    /// Global batch rows.
    pub anchors: Vec<usize>,
    pub anchor_instances: Vec<Option<InstanceKey>>,
    pub negatives: Vec<Vec<Negative>>,
    pub variant: SamplerVariant,
    pub exponent: DebiasExponent,
}

impl SamplingPlan {
    pub fn num_negatives(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub z: Vec<f64>,
    /// Unit joint embedding row, frozen at push time.
    pub y: Vec<f64>,
    pub instance: Option<InstanceKey>,
}

/// FIFO store of past pixel embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

pub const DEFAULT_BANK_CAPACITY: usize = 10_000;

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::arg("memory bank capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&BankEntry> {
        self.entries.get(i)
    }

    /// Appends an entry, evicting the oldest beyond capacity.
    pub fn push(&mut self, entry: BankEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Draws `r` bank slots scored against `anchor_y`, or `None` when the
    /// bank is empty.
    pub fn sample(
        &self,
        anchor_y: &[f64],
        num_slots: usize,
        variant: SamplerVariant,
        exponent: DebiasExponent,
        r: usize,
        rng: &mut RngStream,
    ) -> Result<Option<Vec<(usize, f64)>>> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let width = anchor_y.len();
        let mut data = Vec::with_capacity((self.len() + 1) * width);
        data.extend_from_slice(anchor_y);
        for e in &self.entries {
            data.extend_from_slice(&e.y);
        }
        let rows = Tensor::new(vec![self.len() + 1, width], data)?;
        let rows = project_rows(&rows, num_slots, variant);
        let dist = distribution_from_rows(0, &rows, variant, exponent, None)?;
        let draws = sample_negatives(&dist.probs, r, rng);
        Ok(Some(
            draws
                .into_iter()
                .map(|i| (dist.candidates[i] - 1, dist.probs[i]))
                .collect(),
        ))
    }
}

/// Convenience wrappers with the argument order of the rest of the crate.
pub fn bank_push(bank: &mut MemoryBank, entry: BankEntry) {
    bank.push(entry);
}

pub fn bank_sample(
    bank: &MemoryBank,
    anchor_y: &[f64],
    num_slots: usize,
    variant: SamplerVariant,
    exponent: DebiasExponent,
    r: usize,
    rng: &mut RngStream,
) -> Result<Option<Vec<(usize, f64)>>> {
    bank.sample(anchor_y, num_slots, variant, exponent, r, rng)
}

/// Settings for [`plan_negatives`].
#[derive(Clone, Copy, Debug)]
pub struct PlanSettings {
    pub variant: SamplerVariant,
    pub exponent: DebiasExponent,
    pub negatives: usize,
}

/// Samples `settings.negatives` negatives for each anchor.
///
/// Batch candidates are the rows flagged in `eligible`, minus the anchor.
/// With a non-empty bank, candidates come from the bank instead.
pub fn plan_negatives<S: Scalar>(
    je: &JointEmbedding<S>,
    anchors: &[usize],
    eligible: &[bool],
    instances: Option<&[InstanceKey]>,
    settings: PlanSettings,
    bank: Option<&MemoryBank>,
    rng: &mut RngStream,
) -> Result<SamplingPlan> {
    if settings.negatives == 0 {
        return Err(Error::arg("need at least one negative per anchor"));
    }
    let rows = je.scoring_rows(settings.variant);
    let bank = bank.filter(|b| {
        if b.is_empty() {
            log::debug!("memory bank empty; sampling from the mini-batch");
        }
        !b.is_empty()
    });
    let mut negatives = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let negs = match bank {
            Some(bank) => {
                let y: Vec<f64> = je.y_normalized.row(a).iter().map(|v| v.as_f64()).collect();
                let draws = bank
                    .sample(&y, je.num_slots, settings.variant, settings.exponent, settings.negatives, rng)?
                    .expect("bank checked non-empty");
                draws
                    .into_iter()
                    .map(|(i, p)| Negative {
                        source: NegativeSource::Bank,
                        index: i,
                        probability: p,
                        instance: bank.get(i).and_then(|e| e.instance),
                    })
                    .collect()
            }
            None => {
                let dist = distribution_from_rows(a, &rows, settings.variant, settings.exponent, Some(eligible))?;
                sample_negatives(&dist.probs, settings.negatives, rng)
                    .into_iter()
                    .map(|i| {
                        let q = dist.candidates[i];
                        Negative {
                            source: NegativeSource::Batch,
                            index: q,
                            probability: dist.probs[i],
                            instance: instances.map(|ids| ids[q]),
                        }
                    })
                    .collect()
            }
        };
        negatives.push(negs);
    }
    Ok(SamplingPlan {
        anchors: anchors.to_vec(),
        anchor_instances: anchors.iter().map(|&a| instances.map(|ids| ids[a])).collect(),
        negatives,
        variant: settings.variant,
        exponent: settings.exponent,
    })
}
