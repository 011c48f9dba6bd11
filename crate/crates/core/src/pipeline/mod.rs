//! Three-stage training: teacher adaptation (fine-tune, then self-train
//! from a fresh copy of the initial weights), distillation into a smaller
//! student, and supervised refinement of the student.
//!
//! The initial teacher stands in for a large pretrained model: it is
//! trained on a fully labeled source domain whose appearance differs from
//! the target scenes.

mod checkpoint;
mod optim;
mod plan;
mod train;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, params_hash, save_checkpoint, Checkpoint};
pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use plan::{DataSpec, DistillLabels, PhaseSpec, PretrainSpec, RunPlan, Stage, PRESETS};
pub use train::{
    evaluate, pool_loss, predict, pseudo_label_scenes, sampler_fnr, train, PoolItem, TrainJob, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::metrics::{write_metrics_csv, MetricRow};
use crate::model::{count_params, init_params};
use crate::numcore::RngStream;
use crate::objective::{ScoreSource, StageConfig};
use crate::synth::{Dataset, SceneConfig, Split, SyntheticScene};
use crate::Params64;

const PIPE_STREAM: u64 = 0x5049_5045;
const PRETRAIN_INIT_TAG: u64 = 1;
const PRETRAIN_TAG: u64 = 2;
const FINETUNE_TAG: u64 = 3;
const SELFTRAIN_TAG: u64 = 4;
const STUDENT_INIT_TAG: u64 = 5;
const DISTILL_TAG: u64 = 6;
const REFINE_TAG: u64 = 7;
const EVAL_SEED_SALT: u64 = 0x4556_414c_0000_0000;
const SOURCE_SEED_SALT: u64 = 0x534f_5552_0000_0000;

fn root_rng(plan: &RunPlan) -> RngStream {
    RngStream::new(plan.seed, PIPE_STREAM)
}

/// Training scenes plus the held-out evaluation scenes.
#[derive(Clone, Debug)]
pub struct RunData {
    pub dataset: Dataset,
    pub eval: Vec<SyntheticScene>,
}

impl RunData {
    pub fn prepare(plan: &RunPlan) -> Result<Self> {
        let dataset = match &plan.data.path {
            Some(p) => Dataset::read(Path::new(p))?,
            None => Dataset::generate(
                &plan.data.scene,
                plan.data.scenes,
                plan.data.label_fraction,
                plan.data_seed(),
            )?,
        };
        let eval = if plan.data.eval_scenes == 0 {
            Vec::new()
        } else {
            Dataset::generate(&dataset.config, plan.data.eval_scenes, 1.0, dataset.seed ^ EVAL_SEED_SALT)?.scenes
        };
        Ok(Self { dataset, eval })
    }

    pub fn labeled_items(&self) -> Vec<PoolItem<'_>> {
        self.items(Split::Labeled)
            .into_iter()
            .map(|(key, scene)| PoolItem {
                scene,
                key,
                targets: scene.instances.clone(),
            })
            .collect()
    }

    fn items(&self, split: Split) -> Vec<(u64, &SyntheticScene)> {
        self.dataset
            .scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, s)| (i as u64, s))
            .collect()
    }

    /// Unlabeled scenes with frozen pseudo-labels of `teacher`.
    pub fn pseudo_items(&self, teacher: &Params64, cfg: &StageConfig, source: &str) -> Result<Vec<PoolItem<'_>>> {
        let items = self.items(Split::Unlabeled);
        let scenes: Vec<&SyntheticScene> = items.iter().map(|(_, s)| *s).collect();
        let labels = pseudo_label_scenes(teacher, &scenes, cfg, source)?;
        Ok(items
            .into_iter()
            .zip(labels)
            .map(|((key, scene), targets)| PoolItem { scene, key, targets })
            .collect())
    }

    fn eval_set(&self) -> Option<&[SyntheticScene]> {
        (!self.eval.is_empty()).then_some(self.eval.as_slice())
    }
}

/// Summary of one trained stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub params_hash: String,
    /// Stage-specific checks (hashes, monitored losses, label counts).
    pub notes: serde_json::Value,
    pub metrics_csv: Option<String>,
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub rows: Vec<MetricRow>,
}

fn finish(
    stage: &str,
    steps: usize,
    params: Params64,
    outcome: TrainOutcome,
    data: &RunData,
    plan: &RunPlan,
    notes: serde_json::Value,
) -> Result<(Checkpoint, StageReport)> {
    let ap = data.eval_set().map(|e| evaluate(&params, e)).transpose()?;
    let report = StageReport {
        stage: stage.to_string(),
        steps,
        final_loss: outcome.final_loss,
        ap: ap.as_ref().map(|a| a.ap),
        ap50: ap.as_ref().map(|a| a.ap50),
        params_hash: params_hash(&params),
        notes,
        metrics_csv: None,
        checkpoint: None,
        rows: outcome.rows,
    };
    let ckpt = Checkpoint {
        params,
        step: steps as u64,
        rng: Some(root_rng(plan).state()),
        extra: serde_json::json!({ "stage": stage }),
    };
    Ok((ckpt, report))
}

fn job<'a>(
    plan: &'a RunPlan,
    labeled: &'a [PoolItem<'a>],
    unlabeled: &'a [PoolItem<'a>],
    cfg: &'a StageConfig,
    steps: usize,
    optimizer: &'a OptimizerConfig,
    eval: Option<&'a [SyntheticScene]>,
) -> TrainJob<'a> {
    TrainJob {
        labeled,
        unlabeled,
        cfg,
        steps,
        optimizer,
        batch_labeled: plan.batch_labeled,
        batch_unlabeled: plan.batch_unlabeled,
        teacher: None,
        eval,
        log_every: plan.log_every,
        eval_every: plan.eval_every,
        prefetch: plan.prefetch,
    }
}

/// Trains the initial teacher on a fully labeled source-domain dataset,
/// or loads it when the plan names a checkpoint.
pub fn pretrain_teacher(data: &RunData, plan: &RunPlan) -> Result<(Checkpoint, StageReport)> {
    let arch = plan.teacher_arch();
    if let Some(path) = &plan.pretrain.checkpoint {
        let ckpt = load_checkpoint(Path::new(path))?;
        let params = ckpt.params_for(&arch)?;
        return finish("teacher_pretrain", 0, params, TrainOutcome::default(), data, plan, serde_json::json!({ "loaded": path }));
    }
    let spec = &plan.pretrain;
    let source_cfg = SceneConfig {
        style: spec.style.clone(),
        ..data.dataset.config.clone()
    };
    let source = Dataset::generate(&source_cfg, spec.scenes, 1.0, spec.seed ^ SOURCE_SEED_SALT)?;
    let src = RunData {
        dataset: source,
        eval: Vec::new(),
    };
    let labeled = src.labeled_items();
    let root = RngStream::new(spec.seed, PIPE_STREAM);
    let mut params = init_params(&arch, &mut root.derive(PRETRAIN_INIT_TAG))?;
    let optimizer = spec.optimizer.as_ref().unwrap_or(plan.teacher_optimizer());
    let mut j = job(plan, &labeled, &[], &spec.config, spec.steps, optimizer, None);
    j.batch_labeled = spec.batch;
    j.batch_unlabeled = 0;
    let outcome = train(&mut params, &j, &root.derive(PRETRAIN_TAG))?;
    finish("teacher_pretrain", spec.steps, params, outcome, data, plan, serde_json::json!({ "source_scenes": spec.scenes }))
}

fn require_labeled<'a>(data: &'a RunData) -> Result<Vec<PoolItem<'a>>> {
    let labeled = data.labeled_items();
    if labeled.is_empty() {
        return Err(Error::config("the labeled pool is empty"));
    }
    Ok(labeled)
}

/// Phase 1: supervised fine-tuning of the initial teacher on the labeled
/// pool, with the contrastive term but no unlabeled data.
pub fn finetune_teacher(data: &RunData, theta0: &Checkpoint, plan: &RunPlan) -> Result<(Checkpoint, StageReport)> {
    let labeled = require_labeled(data)?;
    let spec = &plan.teacher_finetune;
    let cfg = StageConfig {
        lambda_semi: 0.0,
        ..spec.config.clone()
    };
    let steps = plan.steps(Stage::TeacherFinetune);
    let mut params = theta0.params_for(&plan.teacher_arch())?;
    let outcome = train(&mut params, &job(plan, &labeled, &[], &cfg, steps, plan.optimizer_for(Stage::TeacherFinetune), data.eval_set()), &root_rng(plan).derive(FINETUNE_TAG))?;
    finish("teacher_finetune", steps, params, outcome, data, plan, serde_json::json!({}))
}

/// Phase 2: pseudo-labels from the fine-tuned teacher, then training on
/// both pools restarted from the initial weights.
pub fn selftrain_teacher(
    data: &RunData,
    theta0: &Checkpoint,
    finetuned: &Checkpoint,
    plan: &RunPlan,
) -> Result<(Checkpoint, StageReport)> {
    let labeled = require_labeled(data)?;
    let spec = &plan.teacher_selftrain;
    let unlabeled = data.pseudo_items(&finetuned.params, &spec.config, "teacher_finetune")?;
    let steps = plan.steps(Stage::TeacherSelftrain);
    let mut params = theta0.params_for(&plan.teacher_arch())?;
    let start = params_hash(&params);
    if start != params_hash(&theta0.params) {
        return Err(Error::Internal("self-training did not restart from the initial teacher".into()));
    }
    let outcome = train(
        &mut params,
        &job(plan, &labeled, &unlabeled, &spec.config, steps, plan.optimizer_for(Stage::TeacherSelftrain), data.eval_set()),
        &root_rng(plan).derive(SELFTRAIN_TAG),
    )?;
    let notes = serde_json::json!({
        "start_hash": start,
        "pseudo_instances": unlabeled.iter().map(|u| u.targets.len()).sum::<usize>(),
    });
    finish("teacher_selftrain", steps, params, outcome, data, plan, notes)
}

/// Both teacher phases. Returns the self-trained teacher.
pub fn adapt_teacher(data: &RunData, theta0: &Checkpoint, plan: &RunPlan) -> Result<(Checkpoint, Vec<StageReport>)> {
    let (ft, r1) = finetune_teacher(data, theta0, plan)?;
    let (st, r2) = selftrain_teacher(data, theta0, &ft, plan)?;
    Ok((st, vec![r1, r2]))
}

/// Trains a fresh student on the labeled pool and on the unlabeled pool
/// pseudo-labelled by the frozen `teacher`.
pub fn distill_student(data: &RunData, teacher: Option<&Checkpoint>, plan: &RunPlan) -> Result<(Checkpoint, StageReport)> {
    let teacher = teacher.ok_or_else(|| Error::config("distillation needs a teacher checkpoint"))?;
    let spec = &plan.distill;
    let labeled = data.labeled_items();
    let before = params_hash(&teacher.params);
    let unlabeled = data.pseudo_items(&teacher.params, &spec.config, "teacher")?;
    let arch = plan.student_arch();
    let root = root_rng(plan);
    let mut params = init_params(&arch, &mut root.derive(STUDENT_INIT_TAG))?;
    if count_params(&params) >= count_params(&teacher.params) {
        log::warn!("student is not smaller than its teacher");
    }
    let steps = plan.steps(Stage::Distill);
    let mut j = job(plan, &labeled, &unlabeled, &spec.config, steps, plan.optimizer_for(Stage::Distill), data.eval_set());
    if spec.config.sampler_source == ScoreSource::Teacher {
        j.teacher = Some(&teacher.params);
    }
    let outcome = train(&mut params, &j, &root.derive(DISTILL_TAG))?;
    let after = params_hash(&teacher.params);
    if before != after {
        return Err(Error::Internal("teacher parameters changed during distillation".into()));
    }
    let notes = serde_json::json!({
        "teacher_hash": before,
        "pseudo_instances": unlabeled.iter().map(|u| u.targets.len()).sum::<usize>(),
    });
    finish("distill", steps, params, outcome, data, plan, notes)
}

/// Supervised fine-tuning of the student on the labeled pool only.
pub fn refine_student(data: &RunData, student: &Checkpoint, plan: &RunPlan) -> Result<(Checkpoint, StageReport)> {
    let labeled = require_labeled(data)?;
    let cfg = StageConfig {
        lambda_semi: 0.0,
        lambda_pxl: 0.0,
        ..plan.refine.config.clone()
    };
    let steps = plan.steps(Stage::Refine);
    let mut params = student.params_for(&plan.student_arch())?;
    let loss_before = pool_loss(&params, &labeled, &cfg)?;
    let outcome = train(&mut params, &job(plan, &labeled, &[], &cfg, steps, plan.optimizer_for(Stage::Refine), data.eval_set()), &root_rng(plan).derive(REFINE_TAG))?;
    let loss_after = pool_loss(&params, &labeled, &cfg)?;
    let notes = serde_json::json!({ "labeled_loss_before": loss_before, "labeled_loss_after": loss_after });
    finish("refine", steps, params, outcome, data, plan, notes)
}

/// Result of [`run_plan`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub plan: RunPlan,
    pub stages: Vec<StageReport>,
    /// AP of the teacher used for distillation (or the last teacher).
    pub teacher_ap: Option<f64>,
    pub student_ap: Option<f64>,
    pub student_ap50: Option<f64>,
}

/// Memoizes stage outputs across plans that share their upstream
/// settings, so ablations reuse teachers and students.
#[derive(Default)]
pub struct RunCache {
    entries: HashMap<String, (Checkpoint, StageReport)>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get_or(
        &mut self,
        key: &str,
        f: impl FnOnce() -> Result<(Checkpoint, StageReport)>,
    ) -> Result<(Checkpoint, StageReport)> {
        if let Some(hit) = self.entries.get(key) {
            return Ok(hit.clone());
        }
        let v = f()?;
        self.entries.insert(key.to_string(), v.clone());
        Ok(v)
    }
}

fn key_of(parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_string().as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn js<T: Serialize + ?Sized>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).expect("plan parts serialize")
}

/// Executes the plan's stages in order. Metric CSVs, checkpoints and the
/// report are written under `out` when given.
pub fn run_plan(plan: &RunPlan, out: Option<&Path>, cache: Option<&mut RunCache>) -> Result<RunReport> {
    plan.validate()?;
    let mut local = RunCache::new();
    let cache = cache.unwrap_or(&mut local);
    let data = RunData::prepare(plan)?;
    let mut produced: Vec<(Checkpoint, StageReport)> = Vec::new();

    // the initial teacher does not depend on the plan seed or target data
    let key_theta0 = key_of(&[
        js(&data.dataset.config),
        js(&plan.pretrain),
        js(&plan.teacher_arch()),
        js(plan.pretrain.optimizer.as_ref().unwrap_or(plan.teacher_optimizer())),
        js(&plan.log_every),
    ]);
    let (theta0, mut r0) = cache.get_or(&key_theta0, || pretrain_teacher(&data, plan))?;
    let ap = data.eval_set().map(|e| evaluate(&theta0.params, e)).transpose()?;
    r0.ap = ap.as_ref().map(|a| a.ap);
    r0.ap50 = ap.as_ref().map(|a| a.ap50);
    produced.push((theta0.clone(), r0));

    let data_key = key_of(&[
        js(&key_theta0),
        js(&plan.seed),
        js(&plan.data),
        js(&plan.batch_labeled),
        js(&plan.batch_unlabeled),
        js(&plan.eval_every),
    ]);
    let mut teacher = (theta0.clone(), data_key);
    let mut finetuned = None;
    if plan.has(Stage::TeacherFinetune) {
        let k = key_of(&[js(&teacher.1), js(&plan.teacher_finetune), js(&plan.steps(Stage::TeacherFinetune)), js(plan.optimizer_for(Stage::TeacherFinetune))]);
        let ft = cache.get_or(&k, || finetune_teacher(&data, &theta0, plan))?;
        produced.push(ft.clone());
        teacher = (ft.0, k);
        finetuned = Some(teacher.clone());
    }
    if plan.has(Stage::TeacherSelftrain) {
        let (ft, ft_key) = finetuned.as_ref().expect("validated: selftrain follows finetune");
        let k = key_of(&[js(ft_key), js(&plan.teacher_selftrain), js(&plan.steps(Stage::TeacherSelftrain)), js(plan.optimizer_for(Stage::TeacherSelftrain))]);
        let st = cache.get_or(&k, || selftrain_teacher(&data, &theta0, ft, plan))?;
        produced.push(st.clone());
        teacher = (st.0, k);
    }
    if plan.distill_labels == DistillLabels::Finetuned {
        if let Some(ft) = finetuned {
            teacher = ft;
        }
    }
    let teacher_ap = produced.iter().rev().find(|(_, r)| r.stage.starts_with("teacher")).and_then(|(_, r)| r.ap);

    let mut student: Option<(Checkpoint, String)> = None;
    if plan.has(Stage::Distill) {
        let k = key_of(&[
            js(&teacher.1),
            js(&plan.distill),
            js(&plan.steps(Stage::Distill)),
            js(&plan.student_arch()),
            js(plan.optimizer_for(Stage::Distill)),
        ]);
        let s = cache.get_or(&k, || distill_student(&data, Some(&teacher.0), plan))?;
        produced.push(s.clone());
        student = Some((s.0, k));
    } else if let Some(path) = &plan.student_checkpoint {
        let s = load_checkpoint(Path::new(path))?;
        let k = key_of(&[js(&params_hash(&s.params))]);
        student = Some((s, k));
    }
    if plan.has(Stage::Refine) {
        let (s, sk) = student.ok_or_else(|| Error::config("refine requires a student checkpoint"))?;
        let k = key_of(&[js(&sk), js(&plan.refine), js(&plan.steps(Stage::Refine)), js(plan.optimizer_for(Stage::Refine))]);
        let r = cache.get_or(&k, || refine_student(&data, &s, plan))?;
        produced.push(r);
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (ckpt, r) in produced.iter_mut() {
            let csv = dir.join(format!("{}.csv", r.stage));
            write_metrics_csv(&csv, &r.rows)?;
            r.metrics_csv = Some(csv.display().to_string());
            let path = dir.join(format!("{}.pxcl", r.stage));
            ckpt.extra = serde_json::json!({ "stage": r.stage, "plan": plan });
            save_checkpoint(ckpt, &path)?;
            r.checkpoint = Some(path.display().to_string());
        }
    }
    let stages: Vec<StageReport> = produced.into_iter().map(|(_, r)| r).collect();
    let last_student = stages.iter().rev().find(|r| r.stage == "distill" || r.stage == "refine");
    let report = RunReport {
        plan: plan.clone(),
        teacher_ap,
        student_ap: last_student.and_then(|r| r.ap),
        student_ap50: last_student.and_then(|r| r.ap50),
        stages,
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}
