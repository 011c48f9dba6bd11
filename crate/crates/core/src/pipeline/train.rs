use std::sync::mpsc::sync_channel;

use super::optim::{Optimizer, OptimizerConfig};
use crate::error::{Error, Result};
use crate::metrics::{empirical_margin, fnr, mask_ap, ApReport, MetricRow, ScoredMask, IOU_THRESHOLDS};
use crate::model::{forward, ModelOutput, STRIDE};
use crate::numcore::{RngStream, Tape};
use crate::objective::{
    generate_pseudo_labels, supervised_loss, unified_objective, upsampled_mask_probs, ObjectiveContext, StageConfig,
    TrainSample,
};
use crate::sampler::{plan_negatives, InstanceKey, JointEmbedding, MemoryBank, PlanSettings, SamplingScope, ScoreMaps};
use crate::synth::{weak_augment_with, Instance, Mask, SyntheticScene, WeakParams};
use crate::{tree_sum, Params64, Tensor64};

const BATCH_TAG: u64 = 0x4241_5443;
const OBJECTIVE_TAG: u64 = 0x4f42_4a00;

/// A scene with the targets it is trained against.
#[derive(Clone, Debug)]
pub struct PoolItem<'a> {
    pub scene: &'a SyntheticScene,
    /// Dataset index, used to tell instances of different scenes apart.
    pub key: u64,
    /// Scene-grid targets: ground truth or frozen pseudo-labels.
    pub targets: Vec<Instance>,
}

pub struct TrainJob<'a> {
    pub labeled: &'a [PoolItem<'a>],
    pub unlabeled: &'a [PoolItem<'a>],
    pub cfg: &'a StageConfig,
    pub steps: usize,
    pub optimizer: &'a OptimizerConfig,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Score maps for negative sampling when the config selects the teacher.
    pub teacher: Option<&'a Params64>,
    pub eval: Option<&'a [SyntheticScene]>,
    pub log_every: usize,
    pub eval_every: usize,
    pub prefetch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub rows: Vec<MetricRow>,
    /// Objective value of the last step.
    pub final_loss: Option<f64>,
}

struct Batch<'a> {
    labeled: Vec<TrainSample<'a>>,
    unlabeled: Vec<TrainSample<'a>>,
}

fn assemble<'a>(job: &TrainJob<'a>, step_rng: &RngStream) -> Batch<'a> {
    let mut rng = step_rng.derive(BATCH_TAG);
    fn draw<'a>(pool: &'a [PoolItem<'a>], n: usize, rng: &mut RngStream) -> Vec<TrainSample<'a>> {
        if pool.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let it = &pool[rng.int_range(0, pool.len() - 1)];
                TrainSample::new(it.scene, it.key, &it.targets, rng)
            })
            .collect()
    }
    let uses_unlabeled = (job.cfg.lambda_semi > 0.0 || job.cfg.lambda_pxl > 0.0) && !job.unlabeled.is_empty();
    // labeled-only training fills the whole batch with labeled samples
    let n_labeled = if uses_unlabeled { job.batch_labeled } else { job.batch_labeled + job.batch_unlabeled };
    let labeled = draw(job.labeled, n_labeled, &mut rng);
    let unlabeled = if uses_unlabeled {
        draw(job.unlabeled, job.batch_unlabeled, &mut rng)
    } else {
        Vec::new()
    };
    Batch { labeled, unlabeled }
}

/// Runs `job.steps` updates on `params`. Batches depend only on
/// `(rng, step)`, so prefetch depth does not change the result.
pub fn train(params: &mut Params64, job: &TrainJob, rng: &RngStream) -> Result<TrainOutcome> {
    if job.labeled.is_empty() && job.unlabeled.is_empty() {
        return Err(Error::config("training needs a non-empty pool"));
    }
    let mut opt = Optimizer::new(job.optimizer.clone(), params)?;
    let mut bank = match job.cfg.scope {
        SamplingScope::Bank => Some(MemoryBank::new(job.cfg.bank_capacity)?),
        SamplingScope::Batch => None,
    };
    let mut out = TrainOutcome::default();

    let mut update = |step: usize, batch: Batch, params: &mut Params64, out: &mut TrainOutcome| -> Result<()> {
        let step_rng = rng.derive(step as u64);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let ctx = ObjectiveContext {
            teacher: job.teacher,
            bank: bank.as_mut(),
        };
        let value = unified_objective(
            &mut tape,
            &params.arch,
            &vars,
            &batch.labeled,
            &batch.unlabeled,
            job.cfg,
            ctx,
            &step_rng.derive(OBJECTIVE_TAG),
        )?;
        let loss = value.total_value(&tape);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("objective is {loss} at step {step}")));
        }
        let grads = tape.backward(value.total);
        let g: Vec<Tensor64> = vars
            .iter()
            .zip(&params.tensors)
            .map(|(v, (_, t))| grads.get(*v).cloned().unwrap_or_else(|| Tensor64::zeros(t.shape())))
            .collect();
        opt.step(params, &g, job.optimizer.lr_at(step, job.steps))?;
        out.final_loss = Some(loss);

        let done = step + 1;
        let log = done % job.log_every == 0 || done == job.steps;
        let eval = done == job.steps || (job.eval_every > 0 && done % job.eval_every == 0);
        if log || eval {
            let mut row = MetricRow {
                step: done as u64,
                loss_sup: value.loss_sup,
                loss_semi: value.loss_semi,
                loss_pxl: value.loss_pxl,
                ..MetricRow::default()
            };
            if let Some(px) = &value.pixel {
                row.fnr = fnr(&px.plan).ok();
                row.set_margin(empirical_margin(&[&px.similarities])?);
            }
            if eval {
                if let Some(scenes) = job.eval {
                    let ap = evaluate(params, scenes)?;
                    row.ap = Some(ap.ap);
                    row.ap50 = Some(ap.ap50);
                }
            }
            out.rows.push(row);
        }
        Ok(())
    };

    if job.prefetch == 0 {
        for step in 0..job.steps {
            let batch = assemble(job, &rng.derive(step as u64));
            update(step, batch, params, &mut out)?;
        }
    } else {
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel(job.prefetch);
            s.spawn(move || {
                for step in 0..job.steps {
                    if tx.send(assemble(job, &rng.derive(step as u64))).is_err() {
                        break;
                    }
                }
            });
            for step in 0..job.steps {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::Internal("batch producer stopped early".into()))?;
                update(step, batch, params, &mut out)?;
            }
            Ok(())
        })?;
    }
    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(out)
}

/// Scored instance predictions on the scene grid, one per slot with a
/// non-empty mask. The score is the slot's best foreground probability.
pub fn predict(params: &Params64, scene: &SyntheticScene) -> Result<Vec<ScoredMask>> {
    let out = forward(params, &scene.image, None)?;
    let probs = upsampled_mask_probs(&out, scene.height, scene.width)?;
    let class_probs = out.class_probs();
    let mut preds = Vec::new();
    for k in 0..out.num_slots() {
        let row = class_probs.row(k);
        let (class_id, score) = row
            .iter()
            .enumerate()
            .skip(1)
            .fold((1, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        let mask = Mask {
            height: scene.height,
            width: scene.width,
            bits: probs.row(k).iter().map(|&p| p > 0.5).collect(),
        };
        if mask.area() > 0 {
            preds.push(ScoredMask {
                mask,
                class_id,
                score,
                slot: k,
            });
        }
    }
    Ok(preds)
}

/// Mask AP of `params` on `scenes` against their ground truth.
pub fn evaluate(params: &Params64, scenes: &[SyntheticScene]) -> Result<ApReport> {
    let preds = scenes.iter().map(|s| predict(params, s)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Instance>> = scenes.iter().map(|s| s.instances.clone()).collect();
    mask_ap(&preds, &gts, &IOU_THRESHOLDS)
}

/// Frozen pseudo-labels of `teacher` for every scene, on the scene grid.
pub fn pseudo_label_scenes(
    teacher: &Params64,
    scenes: &[&SyntheticScene],
    cfg: &StageConfig,
    source: &str,
) -> Result<Vec<Vec<Instance>>> {
    scenes
        .iter()
        .map(|s| {
            let out = forward(teacher, &s.image, None)?;
            Ok(generate_pseudo_labels(&out, (s.height, s.width), cfg, source)?.to_instances())
        })
        .collect()
}

/// Mean supervised loss on un-augmented views.
pub fn pool_loss(params: &Params64, items: &[PoolItem], cfg: &StageConfig) -> Result<f64> {
    let losses = items
        .iter()
        .map(|it| {
            let out = forward(params, &it.scene.image, None)?;
            Ok(supervised_loss(&out, &it.targets, (it.scene.height, it.scene.width), cfg)?.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(tree_sum(&losses) / losses.len().max(1) as f64)
}

/// Pooled false negative rate of negatives drawn for every feature cell of
/// `scenes`, scored by `params` on un-augmented views. Scenes are grouped
/// into pools of `pool` images.
pub fn sampler_fnr(
    params: &Params64,
    scenes: &[&SyntheticScene],
    settings: PlanSettings,
    pool: usize,
    rng: &RngStream,
) -> Result<f64> {
    if scenes.is_empty() || pool == 0 {
        return Err(Error::arg("sampler_fnr needs scenes and a positive pool size"));
    }
    let mut same = 0.0;
    let mut total = 0.0;
    for (ci, chunk) in scenes.chunks(pool).enumerate() {
        let mut outs = Vec::new();
        let mut keys = Vec::new();
        for (j, s) in chunk.iter().enumerate() {
            let out = forward(params, &s.image, None)?;
            let view = weak_augment_with(s, WeakParams::identity());
            keys.extend(view.feature_sources(STRIDE).into_iter().map(|src| InstanceKey {
                image: (ci * pool + j) as u64,
                id: s.pixel_instance_id[src],
            }));
            outs.push(out);
        }
        let refs: Vec<&ModelOutput<f64>> = outs.iter().collect();
        let je = JointEmbedding::from_scores(&ScoreMaps::from_outputs(&refs));
        let anchors: Vec<usize> = (0..je.len()).collect();
        let eligible = vec![true; je.len()];
        let plan = plan_negatives(&je, &anchors, &eligible, Some(&keys), settings, None, &mut rng.derive(ci as u64))?;
        let n = plan.num_negatives() as f64;
        same += fnr(&plan)? * n;
        total += n;
    }
    Ok(same / total)
}
