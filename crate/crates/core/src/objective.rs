//! The unified training objective
//! `J = L_sup + lambda_semi * L_semi + lambda_pxl * L_pxl`.
//!
//! `L_sup` and `L_semi` share one set-prediction loss: slots are matched to
//! target instances by the Hungarian algorithm, matched slots pay a mask
//! loss (BCE plus soft Dice on the slot probabilities at image resolution)
//! and a class cross-entropy, and unmatched slots are pushed to background.
//! `L_pxl` is the pixel-wise contrastive loss with debiased negatives.

use serde::{Deserialize, Serialize};

use crate::contrastive::{pixel_loss_on_tape, LossVariant, PixelEmbeddings, PixelLossSettings, SimilaritySet};
use crate::error::{Error, Result};
use crate::model::{forward, forward_vars, ArchConfig, ModelOutput, OutputVars, STRIDE};
use crate::numcore::{bilinear_resize, softmax, RngStream, Tape, Tensor, Var};
use crate::sampler::{
    plan_negatives, BankEntry, DebiasExponent, InstanceKey, JointEmbedding, MemoryBank, PlanSettings,
    SamplerVariant, SamplingPlan, SamplingScope, ScoreMaps, DEFAULT_BANK_CAPACITY,
};
use crate::synth::{feature_correspondence, weak_augment, strong_augment, AugmentedView, Instance, Mask, SyntheticScene};
use crate::{Params64, Tape64, Tensor64};

/// Guards the logarithms of the mask BCE.
const BCE_EPS: f64 = 1e-9;
/// Additive smoothing of the soft Dice ratio.
const DICE_SMOOTH: f64 = 1.0;
/// Stream tag for negative sampling.
const PXL_TAG: u64 = 0x5058_4c00;
const ANCHOR_TAG: u64 = 0x5058_4c01;

/// Which model's score maps drive negative sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    #[serde(rename = "self")]
    Own,
    Teacher,
}

keyword_enum!(ScoreSource, "sampler source",
    "self" => ScoreSource::Own,
    "teacher" => ScoreSource::Teacher,
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub lambda_semi: f64,
    pub lambda_pxl: f64,
    pub temperature: f64,
    /// Negatives per anchor (R).
    pub negatives: usize,
    pub pseudo_threshold: f64,
    pub w_mask: f64,
    pub w_class: f64,
    pub sampler: SamplerVariant,
    pub debias_exponent: DebiasExponent,
    pub scope: SamplingScope,
    pub bank_capacity: usize,
    pub loss: LossVariant,
    pub margin: f64,
    /// Restrict anchors to pixels covered by a target instance.
    pub foreground_anchors: bool,
    pub sampler_source: ScoreSource,
    /// Random subset of anchors per step (all valid pixels when absent).
    pub max_anchors: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lambda_semi: 1.0,
            lambda_pxl: 0.2,
            temperature: 0.2,
            negatives: 256,
            pseudo_threshold: 0.3,
            w_mask: 5.0,
            w_class: 2.0,
            sampler: SamplerVariant::Fusion,
            debias_exponent: DebiasExponent::Linear,
            scope: SamplingScope::Batch,
            bank_capacity: DEFAULT_BANK_CAPACITY,
            loss: LossVariant::Ntxent,
            margin: 0.2,
            foreground_anchors: false,
            sampler_source: ScoreSource::Own,
            max_anchors: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_semi", self.lambda_semi),
            ("lambda_pxl", self.lambda_pxl),
            ("w_mask", self.w_mask),
            ("w_class", self.w_class),
            ("margin", self.margin),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::config("pseudo_threshold must lie in (0, 1)"));
        }
        if self.negatives == 0 || self.bank_capacity == 0 || self.max_anchors == Some(0) {
            return Err(Error::config("negatives, bank_capacity and max_anchors must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("stage config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn pixel_settings(&self) -> PixelLossSettings {
        PixelLossSettings {
            variant: self.loss,
            temperature: self.temperature,
            margin: self.margin,
        }
    }
}

// ---- matching --------------------------------------------------------------

/// Minimum-cost assignment of columns to rows for a `rows x cols` matrix
/// with `cols <= rows`. Returns, per row, the assigned column.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::arg("ragged cost matrix"));
    }
    if cols > rows {
        return Err(Error::Data(format!("{cols} targets cannot be matched to {rows} slots")));
    }
    if cols == 0 {
        return Ok(vec![None; rows]);
    }
    // Potentials formulation with targets as the smaller side.
    let (n, m) = (cols, rows);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=m {
        if p[j] != 0 {
            out[j - 1] = Some(p[j] - 1);
        }
    }
    Ok(out)
}

/// Sum of the assigned entries, in row order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(k, g)| g.map(|g| cost[k][g]))
        .sum()
}

fn soft_dice(p: &[f64], mask: &Mask) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    for (&pv, &b) in p.iter().zip(&mask.bits) {
        psum += pv;
        if b {
            inter += pv;
        }
    }
    (2.0 * inter + DICE_SMOOTH) / (psum + mask.area() as f64 + DICE_SMOOTH)
}

/// Matching cost `w_mask (1 - softDice) + w_class (1 - p_class)`.
///
/// `mask_probs` is `[K, H*W]` at the targets' resolution, `class_probs`
/// is `[K, C + 1]`.
pub fn matching_cost(mask_probs: &Tensor64, class_probs: &Tensor64, targets: &[Instance], cfg: &StageConfig) -> Vec<Vec<f64>> {
    let k = mask_probs.shape()[0];
    (0..k)
        .map(|s| {
            targets
                .iter()
                .map(|t| {
                    cfg.w_mask * (1.0 - soft_dice(mask_probs.row(s), &t.mask))
                        + cfg.w_class * (1.0 - class_probs.row(s)[t.class_id])
                })
                .collect()
        })
        .collect()
}

/// Slot probabilities upsampled to `h x w`, `[K, h*w]`.
pub fn upsampled_mask_probs(out: &ModelOutput<f64>, h: usize, w: usize) -> Result<Tensor64> {
    let k = out.num_slots();
    let logits = out.mask_logits.clone().reshape(&[1, k, out.height, out.width])?;
    let up = bilinear_resize(&logits, h, w)?.reshape(&[k, h * w])?;
    softmax(&up, 0)
}

/// Assignment of slots to targets (`None` for unmatched slots).
pub fn hungarian_match(pred: &ModelOutput<f64>, targets: &[Instance], cfg: &StageConfig) -> Result<Vec<Option<usize>>> {
    let Some(first) = targets.first() else {
        return Ok(vec![None; pred.num_slots()]);
    };
    let probs = upsampled_mask_probs(pred, first.mask.height, first.mask.width)?;
    hungarian(&matching_cost(&probs, &pred.class_probs(), targets, cfg))
}

// ---- set-prediction loss ---------------------------------------------------

/// Tape handles of one image's set-prediction loss.
#[derive(Clone, Debug)]
pub struct SupervisedTerms {
    pub total: Var,
    /// Unweighted `sum over matched slots of (BCE + Dice) / 2`, divided by K.
    pub mask: Option<Var>,
    /// Unweighted class cross-entropy summed over slots, divided by K.
    pub class: Var,
    pub assignment: Vec<Option<usize>>,
}

/// Records the set-prediction loss of one image's outputs against targets
/// on an `h x w` grid.
pub fn supervised_loss_on_tape(
    tape: &mut Tape64,
    out: &OutputVars,
    targets: &[Instance],
    grid: (usize, usize),
    cfg: &StageConfig,
) -> Result<SupervisedTerms> {
    let (h, w) = grid;
    let k = tape.shape(out.mask_logits)[0];
    let c1 = tape.shape(out.class_logits)[1];
    if targets.len() > k {
        return Err(Error::Data(format!("{} targets exceed {k} slots", targets.len())));
    }
    if let Some(t) = targets.iter().find(|t| (t.mask.height, t.mask.width) != grid || t.class_id >= c1) {
        return Err(Error::Data(format!(
            "target of class {} on a {}x{} grid does not fit a {h}x{w} output with {c1} classes",
            t.class_id, t.mask.height, t.mask.width
        )));
    }
    let hw = h * w;
    let logits = tape.reshape(out.mask_logits, &[1, k, out.height, out.width]);
    let up = tape.bilinear(logits, h, w);
    let up = tape.reshape(up, &[k, hw]);
    let probs = tape.softmax(up, 0);

    let class_logits = tape.value(out.class_logits).clone();
    let class_probs = softmax(&class_logits, 1)?;
    let assignment = hungarian(&matching_cost(tape.value(probs), &class_probs, targets, cfg))?;
    let kf = k as f64;

    let matched: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .filter_map(|(s, g)| g.map(|g| (s, g)))
        .collect();

    let mask = if matched.is_empty() {
        None
    } else {
        let m = matched.len();
        let index = matched.iter().flat_map(|&(s, _)| s * hw..(s + 1) * hw).collect();
        let p = tape.gather(probs, index, &[m, hw]);
        let y: Vec<f64> = matched
            .iter()
            .flat_map(|&(_, g)| targets[g].mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        let y = Tensor::new(vec![m, hw], y)?;
        let y_area: Vec<f64> = matched.iter().map(|&(_, g)| targets[g].mask.area() as f64).collect();
        let not_y = y.map(|v| 1.0 - v);
        let yv = tape.constant(y);
        let nyv = tape.constant(not_y);

        // BCE, shifted so a perfect prediction scores exactly zero.
        let lp = tape.shift(p, BCE_EPS);
        let lp = tape.ln(lp);
        let q = tape.scale(p, -1.0);
        let q = tape.shift(q, 1.0 + BCE_EPS);
        let lq = tape.ln(q);
        let pos = tape.mul(yv, lp);
        let neg = tape.mul(nyv, lq);
        let ll = tape.add(pos, neg);
        let ll = tape.sum_axis(ll, 1);
        let bce = tape.scale(ll, -1.0 / hw as f64);
        let bce = tape.shift(bce, (1.0 + BCE_EPS).ln());

        let inter = tape.mul(p, yv);
        let inter = tape.sum_axis(inter, 1);
        let num = tape.scale(inter, 2.0);
        let num = tape.shift(num, DICE_SMOOTH);
        let psum = tape.sum_axis(p, 1);
        let area = tape.constant(Tensor::new(vec![m], y_area)?);
        let den = tape.add(psum, area);
        let den = tape.shift(den, DICE_SMOOTH);
        let ratio = tape.div(num, den);
        let dice = tape.scale(ratio, -1.0);
        let dice = tape.shift(dice, 1.0);

        let both = tape.add(bce, dice);
        let s = tape.sum(both);
        Some(tape.scale(s, 0.5 / kf))
    };

    let mut target_class = vec![0usize; k];
    for &(s, g) in &matched {
        target_class[s] = targets[g].class_id;
    }
    let lse = tape.log_sum_exp_rows(out.class_logits);
    let picked = tape.gather(
        out.class_logits,
        target_class.iter().enumerate().map(|(s, &c)| s * c1 + c).collect(),
        &[k],
    );
    let ce = tape.sub(lse, picked);
    let ce = tape.sum(ce);
    let class = tape.scale(ce, 1.0 / kf);

    let weighted_class = tape.scale(class, cfg.w_class);
    let total = match mask {
        Some(m) => {
            let wm = tape.scale(m, cfg.w_mask);
            tape.add(wm, weighted_class)
        }
        None => weighted_class,
    };
    Ok(SupervisedTerms {
        total,
        mask,
        class,
        assignment,
    })
}

/// Plain-value breakdown of [`supervised_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedBreakdown {
    pub total: f64,
    /// Weighted mask component.
    pub mask: f64,
    /// Weighted class component.
    pub class: f64,
    pub assignment: Vec<Option<usize>>,
}

pub fn supervised_loss(pred: &ModelOutput<f64>, targets: &[Instance], grid: (usize, usize), cfg: &StageConfig) -> Result<SupervisedBreakdown> {
    let mut tape = Tape::new();
    let k = pred.num_slots();
    let vars = OutputVars {
        height: pred.height,
        width: pred.width,
        z: tape.constant(pred.z.clone()),
        mask_logits: tape.constant(pred.mask_logits.clone().reshape(&[k, pred.height * pred.width])?),
        class_logits: tape.constant(pred.class_logits.clone()),
    };
    let t = supervised_loss_on_tape(&mut tape, &vars, targets, grid, cfg)?;
    let val = |v: Var| tape.value(v).data()[0];
    Ok(SupervisedBreakdown {
        total: val(t.total),
        mask: t.mask.map_or(0.0, |m| cfg.w_mask * val(m)),
        class: cfg.w_class * val(t.class),
        assignment: t.assignment,
    })
}

// ---- pseudo-labels ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInstance {
    pub mask: Mask,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub instances: Vec<PseudoInstance>,
    pub source: String,
}

impl PseudoLabel {
    pub fn to_instances(&self) -> Vec<Instance> {
        self.instances
            .iter()
            .map(|p| Instance {
                mask: p.mask.clone(),
                class_id: p.class_id,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Per slot: confidence is the largest foreground class probability.
/// Slots whose argmax is background or whose confidence is below the
/// threshold are dropped; masks are the pixels where the slot's
/// probability exceeds 0.5 at `h x w`.
pub fn generate_pseudo_labels(
    teacher_out: &ModelOutput<f64>,
    grid: (usize, usize),
    cfg: &StageConfig,
    source: &str,
) -> Result<PseudoLabel> {
    let (h, w) = grid;
    let probs = upsampled_mask_probs(teacher_out, h, w)?;
    let class_probs = teacher_out.class_probs();
    let mut instances = Vec::new();
    for k in 0..teacher_out.num_slots() {
        let row = class_probs.row(k);
        let (best, conf) = row
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        if best == 0 || conf < cfg.pseudo_threshold || row[0] > conf {
            continue;
        }
        let mask = Mask {
            height: h,
            width: w,
            bits: probs.row(k).iter().map(|&p| p > 0.5).collect(),
        };
        if mask.area() == 0 {
            continue;
        }
        instances.push(PseudoInstance {
            mask,
            class_id: best,
            confidence: conf,
        });
    }
    Ok(PseudoLabel {
        instances,
        source: source.to_string(),
    })
}

// ---- training samples ------------------------------------------------------

/// One scene with its two views and targets on the weak view.
#[derive(Clone, Debug)]
pub struct TrainSample<'a> {
    pub scene: &'a SyntheticScene,
    /// Stable identifier of the scene (dataset index).
    pub key: u64,
    pub weak: AugmentedView,
    pub strong: AugmentedView,
    pub targets: Vec<Instance>,
}

impl<'a> TrainSample<'a> {
    /// Draws both views; `targets` are given on the scene grid.
    pub fn new(scene: &'a SyntheticScene, key: u64, targets: &[Instance], rng: &mut RngStream) -> Self {
        let weak = weak_augment(scene, rng);
        let strong = strong_augment(scene, rng);
        Self::with_views(scene, key, targets, weak, strong)
    }

    pub fn with_views(
        scene: &'a SyntheticScene,
        key: u64,
        targets: &[Instance],
        weak: AugmentedView,
        strong: AugmentedView,
    ) -> Self {
        let targets = targets
            .iter()
            .map(|t| Instance {
                mask: weak.warp_mask(&t.mask),
                class_id: t.class_id,
            })
            .filter(|t| t.mask.area() > 0)
            .collect();
        Self {
            scene,
            key,
            weak,
            strong,
            targets,
        }
    }

    fn grid(&self) -> (usize, usize) {
        (self.weak.height, self.weak.width)
    }
}

// ---- unified objective -----------------------------------------------------

/// Optional collaborators of [`unified_objective`].
#[derive(Default)]
pub struct ObjectiveContext<'a> {
    /// Parameters whose score maps drive sampling when the config asks for
    /// the teacher.
    pub teacher: Option<&'a Params64>,
    pub bank: Option<&'a mut MemoryBank>,
}

/// Diagnostics of the contrastive term.
#[derive(Clone, Debug)]
pub struct PixelDiagnostics {
    pub plan: SamplingPlan,
    pub similarities: SimilaritySet,
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: Var,
    pub loss_sup: Option<f64>,
    pub loss_semi: Option<f64>,
    pub loss_pxl: Option<f64>,
    pub pixel: Option<PixelDiagnostics>,
}

impl ObjectiveValue {
    pub fn total_value(&self, tape: &Tape64) -> f64 {
        tape.value(self.total).data()[0]
    }
}

fn mean_of(tape: &mut Tape64, terms: &[Var]) -> Option<Var> {
    let first = *terms.first()?;
    let s = terms[1..].iter().fold(first, |acc, &t| tape.add(acc, t));
    Some(tape.scale(s, 1.0 / terms.len() as f64))
}

/// Records `J` for one step. Parameters are the handles `vars` registered
/// on `tape` for `arch`.
#[allow(clippy::too_many_arguments)]
pub fn unified_objective(
    tape: &mut Tape64,
    arch: &ArchConfig,
    vars: &[Var],
    labeled: &[TrainSample],
    unlabeled: &[TrainSample],
    cfg: &StageConfig,
    ctx: ObjectiveContext,
    rng: &RngStream,
) -> Result<ObjectiveValue> {
    cfg.validate()?;
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::arg("objective needs at least one labeled or unlabeled sample"));
    }
    let all: Vec<&TrainSample> = labeled.iter().chain(unlabeled).collect();
    let weak_out = all
        .iter()
        .map(|s| forward_vars(arch, vars, &s.weak.image, tape))
        .collect::<Result<Vec<_>>>()?;

    let mut sup_terms = Vec::new();
    for (s, out) in labeled.iter().zip(&weak_out) {
        sup_terms.push(supervised_loss_on_tape(tape, out, &s.targets, s.grid(), cfg)?.total);
    }
    let mut semi_terms = Vec::new();
    if cfg.lambda_semi > 0.0 {
        for (s, out) in unlabeled.iter().zip(&weak_out[labeled.len()..]) {
            if !s.targets.is_empty() {
                semi_terms.push(supervised_loss_on_tape(tape, out, &s.targets, s.grid(), cfg)?.total);
            }
        }
    }
    let sup = mean_of(tape, &sup_terms);
    let semi = mean_of(tape, &semi_terms);

    let (pxl, pixel) = if cfg.lambda_pxl > 0.0 {
        let (v, d) = pixel_term(tape, arch, vars, &all, &weak_out, cfg, ctx, rng)?;
        (Some(v), Some(d))
    } else {
        (None, None)
    };

    let mut total = sup;
    for (term, lambda) in [(semi, cfg.lambda_semi), (pxl, cfg.lambda_pxl)] {
        if let Some(t) = term {
            let scaled = tape.scale(t, lambda);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled),
                None => scaled,
            });
        }
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let val = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
    Ok(ObjectiveValue {
        total,
        loss_sup: val(sup),
        loss_semi: val(semi),
        loss_pxl: val(pxl),
        pixel,
    })
}

#[allow(clippy::too_many_arguments)]
fn pixel_term(
    tape: &mut Tape64,
    arch: &ArchConfig,
    vars: &[Var],
    samples: &[&TrainSample],
    weak_out: &[OutputVars],
    cfg: &StageConfig,
    ctx: ObjectiveContext,
    rng: &RngStream,
) -> Result<(Var, PixelDiagnostics)> {
    let mut weak_z = Vec::new();
    let mut strong_z = Vec::new();
    let mut valid = Vec::new();
    let mut keys = Vec::new();
    let mut foreground = Vec::new();
    let mut score_outputs = Vec::new();
    for (s, wo) in samples.iter().zip(weak_out) {
        let so = forward_vars(arch, vars, &s.strong.image, tape)?;
        let corr = feature_correspondence(&s.weak, &s.strong, STRIDE);
        let d = tape.shape(so.z)[1];
        let index = corr
            .iter()
            .flat_map(|c| {
                let r = c.unwrap_or(0);
                r * d..(r + 1) * d
            })
            .collect();
        strong_z.push(tape.gather(so.z, index, &[corr.len(), d]));
        weak_z.push(wo.z);
        valid.extend(corr.iter().map(Option::is_some));
        let sources = s.weak.feature_sources(STRIDE);
        let covered = |src: usize| s.targets.iter().any(|t| t.mask.bits[src]);
        keys.extend(sources.iter().map(|&src| InstanceKey {
            image: s.key,
            id: s.scene.pixel_instance_id[src],
        }));
        let c = STRIDE / 2;
        foreground.extend((0..corr.len()).map(|i| {
            let (y, x) = (i / wo.width * STRIDE + c, i % wo.width * STRIDE + c);
            covered(y * s.weak.width + x)
        }));
        score_outputs.push(match (cfg.sampler_source, ctx.teacher) {
            (ScoreSource::Teacher, Some(t)) => forward(t, &s.weak.image, None)?,
            (ScoreSource::Teacher, None) => {
                return Err(Error::config("teacher score maps requested without a teacher"));
            }
            (ScoreSource::Own, _) => wo.values(tape),
        });
    }
    let zw = tape.concat(&weak_z);
    let zs = tape.concat(&strong_z);

    let refs: Vec<&ModelOutput<f64>> = score_outputs.iter().collect();
    let je = JointEmbedding::from_scores(&ScoreMaps::from_outputs(&refs));

    let mut anchors: Vec<usize> = (0..valid.len())
        .filter(|&g| valid[g] && (!cfg.foreground_anchors || foreground[g]))
        .collect();
    if let Some(cap) = cfg.max_anchors {
        if anchors.len() > cap {
            rng.derive(ANCHOR_TAG).shuffle(&mut anchors);
            anchors.truncate(cap);
            anchors.sort_unstable();
        }
    }
    if anchors.is_empty() {
        return Err(Error::Data("no valid anchor pixels in the batch".into()));
    }
    let bank = match (cfg.scope, ctx.bank) {
        (SamplingScope::Bank, Some(b)) => Some(b),
        (SamplingScope::Bank, None) => {
            log::warn!("bank scope requested without a bank; sampling from the mini-batch");
            None
        }
        (SamplingScope::Batch, _) => None,
    };
    let settings = PlanSettings {
        variant: cfg.sampler,
        exponent: cfg.debias_exponent,
        negatives: cfg.negatives,
    };
    let plan = plan_negatives(
        &je,
        &anchors,
        &valid,
        Some(&keys),
        settings,
        bank.as_deref(),
        &mut rng.derive(PXL_TAG),
    )?;
    let loss = pixel_loss_on_tape(tape, zw, zs, &plan, bank.as_deref(), cfg.pixel_settings())?;
    let pe = PixelEmbeddings::new(tape.value(zw).clone(), tape.value(zs).clone(), valid.clone())?;
    let similarities = SimilaritySet::from_plan(&pe, &plan, bank.as_deref(), cfg.temperature)?;

    if let Some(bank) = bank {
        for (g, &ok) in valid.iter().enumerate() {
            if ok {
                bank.push(BankEntry {
                    z: pe.z_strong.row(g).to_vec(),
                    y: je.y_normalized.row(g).to_vec(),
                    instance: Some(keys[g]),
                });
            }
        }
    }
    Ok((loss, PixelDiagnostics { plan, similarities }))
}

/// Convenience: evaluates `J` at `params` without keeping gradients.
pub fn evaluate_objective(
    params: &Params64,
    labeled: &[TrainSample],
    unlabeled: &[TrainSample],
    cfg: &StageConfig,
    ctx: ObjectiveContext,
    rng: &RngStream,
) -> Result<(f64, ObjectiveValue)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let v = unified_objective(&mut tape, &params.arch, &vars, labeled, unlabeled, cfg, ctx, rng)?;
    Ok((v.total_value(&tape), v))
}

/// Targets of a scene as a plain instance list.
pub fn ground_truth(scene: &SyntheticScene) -> Vec<Instance> {
    scene.instances.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let k = cost.len();
        let g = cost.first().map_or(0, Vec::len);
        fn rec(cost: &[Vec<f64>], g: usize, j: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if j == g {
                *best = best.min(acc);
                return;
            }
            for s in 0..cost.len() {
                if !used[s] {
                    used[s] = true;
                    rec(cost, g, j + 1, used, acc + cost[s][j], best);
                    used[s] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, g, 0, &mut vec![false; k], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_example() {
        let cost = vec![vec![0.0, 9.0], vec![9.0, 0.0], vec![5.0, 5.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, vec![Some(0), Some(1), None]);
        assert_eq!(hungarian(&[vec![], vec![]]).unwrap(), vec![None, None]);
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = RngStream::new(42, 0);
        for _ in 0..100 {
            let g = rng.int_range(1, 5);
            let k = rng.int_range(g, 6);
            let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..g).map(|_| rng.uniform() * 10.0).collect()).collect();
            let a = hungarian(&cost).unwrap();
            let mut seen = vec![false; g];
            for x in a.iter().flatten() {
                assert!(!seen[*x]);
                seen[*x] = true;
            }
            assert!(seen.iter().all(|&s| s));
            assert!((assignment_cost(&cost, &a) - brute_force(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn stage_config_defaults_and_json() {
        let c = StageConfig::default();
        assert_eq!((c.lambda_pxl, c.pseudo_threshold, c.w_mask, c.w_class), (0.2, 0.3, 5.0, 2.0));
        assert_eq!(c.temperature, 0.2);
        let parsed = StageConfig::from_json(r#"{"lambda_pxl": 0.1, "sampler": "mask", "sampler_source": "teacher"}"#).unwrap();
        assert_eq!(parsed.sampler, SamplerVariant::MaskOnly);
        assert_eq!(parsed.sampler_source, ScoreSource::Teacher);
        assert!(matches!(StageConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(StageConfig::from_json(r#"{"temperature": 0}"#).is_err());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(StageConfig::from_json(&text).unwrap(), c);
    }
}
