//! False negative rate, empirical margin, mask AP and the metric CSV.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::contrastive::SimilaritySet;
use crate::error::{Error, Result};
use crate::synth::{Instance, Mask};
use crate::tree_sum;
use crate::sampler::SamplingPlan;

/// Fraction of sampled negatives that belong to their anchor's instance.
/// Background negatives count as the same object only for background
/// anchors.
pub fn fnr(plan: &SamplingPlan) -> Result<f64> {
    let mut total = 0usize;
    let mut same = 0usize;
    for (anchor, negs) in plan.anchor_instances.iter().zip(&plan.negatives) {
        let a = anchor.ok_or_else(|| Error::arg("plan lacks anchor instance ids"))?;
        for n in negs {
            let k = n.instance.ok_or_else(|| Error::arg("plan lacks negative instance ids"))?;
            total += 1;
            if a.same_object(&k) {
                same += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::arg("plan has no negatives"));
    }
    Ok(same as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margin {
    pub pos_mean: f64,
    pub neg_mean: f64,
    /// `pos_mean - neg_mean`.
    pub margin: f64,
}

/// Means of the raw positive and negative cosines.
pub fn empirical_margin(sets: &[&SimilaritySet]) -> Result<Margin> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in sets {
        let t = s.temperature;
        pos.extend(s.s_plus.iter().map(|v| v * t));
        neg.extend(s.s_neg.iter().flatten().map(|v| v * t));
    }
    if pos.is_empty() {
        return Err(Error::arg("empirical margin needs at least one anchor"));
    }
    let pos_mean = tree_sum(&pos) / pos.len() as f64;
    let neg_mean = if neg.is_empty() { 0.0 } else { tree_sum(&neg) / neg.len() as f64 };
    Ok(Margin {
        pos_mean,
        neg_mean,
        margin: pos_mean - neg_mean,
    })
}

/// A scored instance prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub mask: Mask,
    pub class_id: usize,
    pub score: f64,
    /// Tie-break among equal scores (lower first).
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    /// Per foreground class with at least one ground-truth instance:
    /// `(class, AP, AP50)`.
    pub per_class: Vec<(usize, f64, f64)>,
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Area under the 101-point interpolated precision/recall curve.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let samples: Vec<f64> = (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            let i = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    tree_sum(&samples) / 101.0
}

/// Greedy matching in descending score order for one class at one IoU
/// threshold. Returns per-prediction true-positive flags.
fn match_class(preds: &[(usize, &ScoredMask)], gts: &[(usize, &Mask)], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (gimg, g)) in gts.iter().enumerate() {
                if taken[j] || gimg != img {
                    continue;
                }
                let iou = p.mask.iou(g);
                if iou >= thr - 1e-12 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// COCO-style mask AP over a set of images.
pub fn mask_ap(preds: &[Vec<ScoredMask>], gts: &[Vec<Instance>], iou_thresholds: &[f64]) -> Result<ApReport> {
    if preds.len() != gts.len() {
        return Err(Error::arg("predictions and ground truth cover different image counts"));
    }
    if iou_thresholds.is_empty() {
        return Err(Error::arg("need at least one IoU threshold"));
    }
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for &c in &classes {
        let gt: Vec<(usize, &Mask)> = gts
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.iter().filter(|x| x.class_id == c).map(move |x| (i, &x.mask)))
            .collect();
        let mut pr: Vec<(usize, &ScoredMask)> = preds
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.iter().filter(|x| x.class_id == c).map(move |x| (i, x)))
            .collect();
        pr.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.0.cmp(&b.0))
                .then(a.1.slot.cmp(&b.1.slot))
        });
        let aps: Vec<f64> = iou_thresholds
            .iter()
            .map(|&t| interpolated_ap(&match_class(&pr, &gt, t), gt.len()))
            .collect();
        let ap50 = interpolated_ap(&match_class(&pr, &gt, 0.5), gt.len());
        per_class.push((c, tree_sum(&aps) / aps.len() as f64, ap50));
    }
    let n = per_class.len().max(1) as f64;
    Ok(ApReport {
        ap: per_class.iter().map(|x| x.1).sum::<f64>() / n,
        ap50: per_class.iter().map(|x| x.2).sum::<f64>() / n,
        per_class,
    })
}

/// One line of the metric CSV. Absent values are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub fnr: Option<f64>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    pub margin: Option<f64>,
    pub loss_pxl: Option<f64>,
    pub loss_sup: Option<f64>,
    pub loss_semi: Option<f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

pub const METRIC_HEADER: &str = "step,fnr,pos_mean,neg_mean,margin,loss_pxl,loss_sup,loss_semi,ap,ap50";

impl MetricRow {
    pub fn set_margin(&mut self, m: Margin) {
        self.pos_mean = Some(m.pos_mean);
        self.neg_mean = Some(m.neg_mean);
        self.margin = Some(m.margin);
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            f(self.fnr),
            f(self.pos_mean),
            f(self.neg_mean),
            f(self.margin),
            f(self.loss_pxl),
            f(self.loss_sup),
            f(self.loss_semi),
            f(self.ap),
            f(self.ap50)
        )
    }
}

/// Renders rows under the fixed header.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}
