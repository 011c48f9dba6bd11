//! Pixel-wise contrastive losses.
//!
//! Anchors live on the weak view's feature grid. The positive for an anchor
//! is the strong-view embedding of the same scene pixel; negatives come
//! from a [`SamplingPlan`]. Two losses are provided: NT-Xent and a hinge on
//! raw cosines. Each has a plain evaluation over a [`SimilaritySet`] and a
//! tape version used for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Tape, Tensor, Var};
use crate::sampler::{MemoryBank, NegativeSource, SamplingPlan};
use crate::{tree_sum, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    #[default]
    Ntxent,
    Hinge,
}

keyword_enum!(LossVariant, "loss",
    "ntxent" => LossVariant::Ntxent,
    "hinge" => LossVariant::Hinge,
);

/// Weak and strong embeddings aligned on the weak feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelEmbeddings<S> {
    /// `[N_total, D]`.
    pub z_weak: Tensor<S>,
    /// `[N_total, D]`; row `g` is the strong embedding of the scene pixel
    /// under weak row `g` (zero where `valid[g]` is false).
    pub z_strong: Tensor<S>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> PixelEmbeddings<S> {
    pub fn new(z_weak: Tensor<S>, z_strong: Tensor<S>, valid: Vec<bool>) -> Result<Self> {
        if z_weak.shape() != z_strong.shape() || z_weak.rank() != 2 || valid.len() != z_weak.shape()[0] {
            return Err(Error::arg("weak/strong embeddings and validity flags disagree"));
        }
        Ok(Self {
            z_weak,
            z_strong,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("temperature must be positive, got {t}")))
    }
}

pub fn positive_similarity<S: Scalar>(pe: &PixelEmbeddings<S>, anchor: usize, t: f64) -> Result<f64> {
    check_temperature(t)?;
    if !pe.valid.get(anchor).copied().unwrap_or(false) {
        return Err(Error::arg(format!("anchor {anchor} has no strong-view counterpart")));
    }
    Ok(dot(pe.z_weak.row(anchor), pe.z_strong.row(anchor)).as_f64() / t)
}

/// Similarities of `anchor` against its planned negatives, divided by `t`.
pub fn negative_similarities<S: Scalar>(
    pe: &PixelEmbeddings<S>,
    anchor: usize,
    plan: &SamplingPlan,
    bank: Option<&MemoryBank>,
    t: f64,
) -> Result<Vec<f64>> {
    check_temperature(t)?;
    let slot = plan
        .anchors
        .iter()
        .position(|&a| a == anchor)
        .ok_or_else(|| Error::arg(format!("anchor {anchor} is not in the plan")))?;
    let za = pe.z_weak.row(anchor);
    plan.negatives[slot]
        .iter()
        .map(|n| {
            let cos = match n.source {
                NegativeSource::Batch => {
                    if n.index >= pe.len() {
                        return Err(Error::Internal(format!("negative row {} out of range", n.index)));
                    }
                    dot(za, pe.z_strong.row(n.index)).as_f64()
                }
                NegativeSource::Bank => {
                    let e = bank
                        .and_then(|b| b.get(n.index))
                        .ok_or_else(|| Error::Internal(format!("bank slot {} missing", n.index)))?;
                    za.iter().zip(&e.z).map(|(a, b)| a.as_f64() * b).sum()
                }
            };
            Ok(cos / t)
        })
        .collect()
}

/// Scaled similarities for a set of anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySet {
    pub s_plus: Vec<f64>,
    pub s_neg: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl SimilaritySet {
    pub fn from_plan<S: Scalar>(
        pe: &PixelEmbeddings<S>,
        plan: &SamplingPlan,
        bank: Option<&MemoryBank>,
        t: f64,
    ) -> Result<Self> {
        let mut s_plus = Vec::with_capacity(plan.anchors.len());
        let mut s_neg = Vec::with_capacity(plan.anchors.len());
        for &a in &plan.anchors {
            s_plus.push(positive_similarity(pe, a, t)?);
            s_neg.push(negative_similarities(pe, a, plan, bank, t)?);
        }
        Ok(Self {
            s_plus,
            s_neg,
            temperature: t,
        })
    }

    pub fn len(&self) -> usize {
        self.s_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_plus.is_empty()
    }
}

/// `ln(e^{s+} + sum_r e^{s-_r}) - s+` with the max subtracted first.
pub fn ntxent_anchor_loss(s_plus: f64, s_neg: &[f64]) -> f64 {
    let m = s_neg.iter().fold(s_plus, |m, &v| m.max(v));
    let mut terms = Vec::with_capacity(s_neg.len() + 1);
    terms.push((s_plus - m).exp());
    terms.extend(s_neg.iter().map(|&v| (v - m).exp()));
    tree_sum(&terms).ln() + m - s_plus
}

/// Mean NT-Xent loss over the anchors of `ss`.
pub fn ntxent_loss(ss: &SimilaritySet) -> f64 {
    let per: Vec<f64> = ss
        .s_plus
        .iter()
        .zip(&ss.s_neg)
        .map(|(&p, n)| ntxent_anchor_loss(p, n))
        .collect();
    tree_sum(&per) / per.len().max(1) as f64
}

/// Mean over anchors and negatives of `max(0, m + cos- - cos+)`.
pub fn hinge_loss(ss: &SimilaritySet, m: f64) -> f64 {
    let t = ss.temperature;
    let per: Vec<f64> = ss
        .s_plus
        .iter()
        .zip(&ss.s_neg)
        .map(|(&p, negs)| {
            let h: Vec<f64> = negs.iter().map(|&n| (m + n * t - p * t).max(0.0)).collect();
            tree_sum(&h) / h.len().max(1) as f64
        })
        .collect();
    tree_sum(&per) / per.len().max(1) as f64
}

/// Softmax weights of one anchor's negatives: `alpha_r = e^{s-_r} / Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorWeights {
    pub s_plus: f64,
    pub s_neg: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `e^{s+} / Z`.
    pub positive_weight: f64,
}

impl AnchorWeights {
    pub fn sum_alpha(&self) -> f64 {
        tree_sum(&self.alpha)
    }
}

pub fn anchor_weights(z_a: &[f64], z_plus: &[f64], z_negs: &[&[f64]], t: f64) -> AnchorWeights {
    let s_plus = dot(z_a, z_plus) / t;
    let s_neg: Vec<f64> = z_negs.iter().map(|n| dot(z_a, n) / t).collect();
    let m = s_neg.iter().fold(s_plus, |m, &v| m.max(v));
    let e_plus = (s_plus - m).exp();
    let e_neg: Vec<f64> = s_neg.iter().map(|&v| (v - m).exp()).collect();
    let z = e_plus + tree_sum(&e_neg);
    AnchorWeights {
        s_plus,
        s_neg,
        alpha: e_neg.iter().map(|e| e / z).collect(),
        positive_weight: e_plus / z,
    }
}

/// Gradient of the single-anchor NT-Xent loss with respect to the anchor
/// embedding: `(1/T) sum_r alpha_r (z-_r - z+)`.
pub fn ntxent_grad_anchor(z_a: &[f64], z_plus: &[f64], z_negs: &[&[f64]], t: f64) -> Vec<f64> {
    let w = anchor_weights(z_a, z_plus, z_negs, t);
    debug_assert!((1.0 - w.positive_weight - w.sum_alpha()).abs() < 1e-12);
    let mut g = vec![0.0; z_a.len()];
    for (alpha, neg) in w.alpha.iter().zip(z_negs) {
        for ((gi, &n), &p) in g.iter_mut().zip(neg.iter()).zip(z_plus) {
            *gi += alpha * (n - p);
        }
    }
    g.iter_mut().for_each(|v| *v /= t);
    g
}

/// Change in the positive and probe cosines after one gradient step of
/// size `lambda` on the anchor (no re-projection onto the sphere).
#[derive(Clone, Debug, PartialEq)]
pub struct MarginDelta {
    pub ds_plus: f64,
    /// One entry per probe negative.
    pub ds_minus: Vec<f64>,
    /// `(lambda/T) sum_r alpha_r (1 - <z-_r, z+>)`.
    pub ds_plus_closed_form: f64,
    pub sum_alpha: f64,
    /// `1 - e^{s+}/Z`, equal to `sum_alpha`.
    pub sum_alpha_identity: f64,
}

pub fn one_step_margin_delta(
    z_a: &[f64],
    z_plus: &[f64],
    z_negs: &[&[f64]],
    probes: &[&[f64]],
    t: f64,
    lambda: f64,
) -> MarginDelta {
    let w = anchor_weights(z_a, z_plus, z_negs, t);
    let g = ntxent_grad_anchor(z_a, z_plus, z_negs, t);
    let step: Vec<f64> = g.iter().map(|v| -lambda * v).collect();
    let ds_plus = dot(&step, z_plus);
    let ds_minus = probes.iter().map(|p| dot(&step, p)).collect();
    let closed: Vec<f64> = w
        .alpha
        .iter()
        .zip(z_negs)
        .map(|(a, n)| a * (dot(z_plus, z_plus) - dot(n, z_plus)))
        .collect();
    MarginDelta {
        ds_plus,
        ds_minus,
        ds_plus_closed_form: lambda / t * tree_sum(&closed),
        sum_alpha: w.sum_alpha(),
        sum_alpha_identity: 1.0 - w.positive_weight,
    }
}

/// Loss settings for [`pixel_loss_on_tape`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLossSettings {
    pub variant: LossVariant,
    pub temperature: f64,
    pub margin: f64,
}

/// Records the mean pixel-wise loss over the anchors of `plan`.
///
/// `z_weak` and `z_strong` are `[N_total, D]` values on the weak grid.
/// Bank negatives enter as constants.
pub fn pixel_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    z_weak: Var,
    z_strong: Var,
    plan: &SamplingPlan,
    bank: Option<&MemoryBank>,
    settings: PixelLossSettings,
) -> Result<Var> {
    check_temperature(settings.temperature)?;
    let a = plan.anchors.len();
    if a == 0 {
        return Err(Error::arg("pixel loss needs at least one anchor"));
    }
    let r = plan.negatives[0].len();
    if r == 0 || plan.negatives.iter().any(|n| n.len() != r) {
        return Err(Error::Internal("every anchor needs the same number of negatives".into()));
    }
    let d = tape.shape(z_weak)[1];
    let rows = |idx: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
        idx.flat_map(|i| i * d..(i + 1) * d).collect()
    };

    let za = tape.gather(z_weak, rows(&mut plan.anchors.iter().copied()), &[a, d]);
    let zp = tape.gather(z_strong, rows(&mut plan.anchors.iter().copied()), &[a, d]);
    let pos = tape.mul(za, zp);
    let pos = tape.sum_axis(pos, 1);

    let first = plan.negatives[0][0].source;
    if plan.negatives.iter().flatten().any(|n| n.source != first) {
        return Err(Error::Internal("mixed negative sources in one plan".into()));
    }
    let neg_source = match first {
        NegativeSource::Batch => z_strong,
        NegativeSource::Bank => {
            let bank = bank.ok_or_else(|| Error::Internal("plan refers to a missing bank".into()))?;
            let mut data = Vec::with_capacity(bank.len() * d);
            for e in bank.entries() {
                data.extend(e.z.iter().map(|&v| S::lit(v)));
            }
            tape.constant(Tensor::new(vec![bank.len(), d], data)?)
        }
    };
    let za_rep = tape.gather(
        z_weak,
        rows(&mut plan.anchors.iter().flat_map(|&i| std::iter::repeat_n(i, r))),
        &[a * r, d],
    );
    let zn = tape.gather(
        neg_source,
        rows(&mut plan.negatives.iter().flatten().map(|n| n.index)),
        &[a * r, d],
    );
    let neg = tape.mul(za_rep, zn);
    let neg = tape.sum_axis(neg, 1);
    let neg = tape.reshape(neg, &[a, r]);

    let t = S::lit(settings.temperature);
    let per_anchor = match settings.variant {
        LossVariant::Ntxent => {
            // Cosines are at most 1, so 1/T bounds every logit.
            let c = S::one() / t;
            let sp = tape.scale(pos, S::one() / t);
            let sn = tape.scale(neg, S::one() / t);
            let ep = tape.shift(sp, -c);
            let ep = tape.exp(ep);
            let en = tape.shift(sn, -c);
            let en = tape.exp(en);
            let en = tape.sum_axis(en, 1);
            let z = tape.add(ep, en);
            let lz = tape.ln(z);
            let lz = tape.shift(lz, c);
            tape.sub(lz, sp)
        }
        LossVariant::Hinge => {
            let pb = tape.broadcast_cols(pos, r);
            let diff = tape.sub(neg, pb);
            let diff = tape.shift(diff, S::lit(settings.margin));
            let h = tape.relu(diff);
            tape.mean_axis(h, 1)
        }
    };
    Ok(tape.mean(per_anchor))
}
