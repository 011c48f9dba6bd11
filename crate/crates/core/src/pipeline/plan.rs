use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::objective::StageConfig;
use crate::synth::{DomainStyle, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TeacherFinetune,
    TeacherSelftrain,
    Distill,
    Refine,
}

keyword_enum!(
    Stage,
    "stage",
    "teacher_finetune" => Stage::TeacherFinetune,
    "teacher_selftrain" => Stage::TeacherSelftrain,
    "distill" => Stage::Distill,
    "refine" => Stage::Refine,
);

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::TeacherFinetune, Stage::TeacherSelftrain, Stage::Distill, Stage::Refine];

    /// Full-scale iteration count before the divisor is applied.
    pub fn base_steps(self) -> usize {
        match self {
            Stage::TeacherFinetune => 1000,
            Stage::TeacherSelftrain => 5000,
            Stage::Distill => 90_000,
            Stage::Refine => 2000,
        }
    }
}

/// Which adapted teacher labels the unlabeled pool for distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillLabels {
    /// The teacher after self-training.
    #[default]
    Selftrained,
    /// The teacher after the fine-tuning phase.
    Finetuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSpec {
    /// Explicit step count; derived from the divisor when absent.
    pub steps: Option<usize>,
    pub config: StageConfig,
    /// Replaces the plan's optimizer for this stage.
    pub optimizer: Option<OptimizerConfig>,
}

impl PhaseSpec {
    fn with(lambda_semi: f64, lambda_pxl: f64) -> Self {
        Self {
            steps: None,
            optimizer: None,
            config: StageConfig {
                lambda_semi,
                lambda_pxl,
                ..StageConfig::default()
            },
        }
    }
}

impl Default for PhaseSpec {
    fn default() -> Self {
        Self::with(1.0, 0.2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Dataset file written by `synth`; generated from the fields below
    /// when absent.
    pub path: Option<String>,
    pub scene: SceneConfig,
    pub scenes: usize,
    pub label_fraction: f64,
    /// Defaults to the plan seed.
    pub seed: Option<u64>,
    /// Held-out target-domain scenes for AP.
    pub eval_scenes: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            path: None,
            scene: SceneConfig::default(),
            scenes: 100,
            label_fraction: 0.1,
            seed: None,
            eval_scenes: 32,
        }
    }
}

/// Source-domain training that produces the initial teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    /// Load the initial teacher from here instead of training it.
    pub checkpoint: Option<String>,
    /// Seed of the source data and initial weights, independent of the
    /// plan seed.
    pub seed: u64,
    pub style: DomainStyle,
    pub scenes: usize,
    pub steps: usize,
    pub batch: usize,
    pub config: StageConfig,
    /// Falls back to the teacher optimizer.
    pub optimizer: Option<OptimizerConfig>,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            seed: 0,
            style: DomainStyle {
                background: 0.4,
                hue_shift: 0.06,
                saturation: 0.6,
                ..DomainStyle::default()
            },
            scenes: 64,
            steps: 300,
            batch: 4,
            config: PhaseSpec::with(0.0, 0.0).config,
            optimizer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPlan {
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub data: DataSpec,
    pub num_slots: usize,
    /// Architectures default to the preset sizes for `num_slots` and the
    /// scene class count.
    pub teacher_arch: Option<ArchConfig>,
    pub student_arch: Option<ArchConfig>,
    /// Student checkpoint to refine when the plan has no distill stage.
    pub student_checkpoint: Option<String>,
    pub pretrain: PretrainSpec,
    pub teacher_finetune: PhaseSpec,
    pub teacher_selftrain: PhaseSpec,
    pub distill: PhaseSpec,
    pub refine: PhaseSpec,
    pub distill_labels: DistillLabels,
    /// Full-scale step counts are divided by this.
    pub step_divisor: f64,
    pub optimizer: OptimizerConfig,
    pub teacher_optimizer: Option<OptimizerConfig>,
    /// Per-step batch composition. Steps without unlabeled data draw
    /// `batch_labeled + batch_unlabeled` labeled samples.
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Metric rows every this many steps.
    pub log_every: usize,
    /// AP rows every this many steps; only at the end when 0.
    pub eval_every: usize,
    /// Batches assembled ahead of the update; 0 assembles inline.
    pub prefetch: usize,
}

impl Default for RunPlan {
    fn default() -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            seed: 0,
            data: DataSpec::default(),
            num_slots: 8,
            teacher_arch: None,
            student_arch: None,
            student_checkpoint: None,
            pretrain: PretrainSpec::default(),
            teacher_finetune: PhaseSpec::with(0.0, 0.2),
            teacher_selftrain: PhaseSpec::with(1.0, 0.2),
            distill: PhaseSpec::with(1.0, 0.2),
            refine: PhaseSpec::with(0.0, 0.0),
            distill_labels: DistillLabels::Selftrained,
            step_divisor: 50.0,
            optimizer: OptimizerConfig::default(),
            teacher_optimizer: None,
            batch_labeled: 2,
            batch_unlabeled: 2,
            log_every: 10,
            eval_every: 0,
            prefetch: 2,
        }
    }
}

pub const PRESETS: [&str; 5] = ["full", "no-refine", "no-adapt", "distill-only", "sup-only"];

impl RunPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("run plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Applies a stage-ablation preset to this plan.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        use Stage::*;
        self.stages = match name {
            "full" => vec![TeacherFinetune, TeacherSelftrain, Distill, Refine],
            "no-refine" => vec![TeacherFinetune, TeacherSelftrain, Distill],
            "no-adapt" | "no-teacher-adapt" => vec![Distill, Refine],
            "distill-only" => vec![Distill],
            "sup-only" => {
                self.distill.config.lambda_semi = 0.0;
                self.distill.config.lambda_pxl = 0.0;
                vec![Distill]
            }
            _ => {
                return Err(Error::arg(format!(
                    "unknown preset '{name}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(self)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::default().with_preset(name)
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn phase(&self, stage: Stage) -> &PhaseSpec {
        match stage {
            Stage::TeacherFinetune => &self.teacher_finetune,
            Stage::TeacherSelftrain => &self.teacher_selftrain,
            Stage::Distill => &self.distill,
            Stage::Refine => &self.refine,
        }
    }

    /// Resolved step count of a stage. Refinement defaults to a tenth of
    /// distillation.
    pub fn steps(&self, stage: Stage) -> usize {
        if let Some(s) = self.phase(stage).steps {
            return s;
        }
        let scaled = |b: usize| (b as f64 / self.step_divisor).round() as usize;
        match stage {
            Stage::Refine => self.steps(Stage::Distill) / 10,
            s => scaled(s.base_steps()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.data.scene.num_classes
    }

    pub fn teacher_arch(&self) -> ArchConfig {
        self.teacher_arch
            .clone()
            .unwrap_or_else(|| ArchConfig::teacher(self.num_slots, self.num_classes()))
    }

    pub fn student_arch(&self) -> ArchConfig {
        self.student_arch
            .clone()
            .unwrap_or_else(|| ArchConfig::student(self.num_slots, self.num_classes()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn teacher_optimizer(&self) -> &OptimizerConfig {
        self.teacher_optimizer.as_ref().unwrap_or(&self.optimizer)
    }

    /// The stage's own optimizer, else the teacher or student default.
    pub fn optimizer_for(&self, stage: Stage) -> &OptimizerConfig {
        let fallback = match stage {
            Stage::TeacherFinetune | Stage::TeacherSelftrain => self.teacher_optimizer(),
            Stage::Distill | Stage::Refine => &self.optimizer,
        };
        self.phase(stage).optimizer.as_ref().unwrap_or(fallback)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("plan has no stages"));
        }
        for w in self.stages.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::config(format!(
                    "stages must be unique and in pipeline order, got {} before {}",
                    w[0], w[1]
                )));
            }
        }
        if self.has(Stage::TeacherSelftrain) && !self.has(Stage::TeacherFinetune) {
            return Err(Error::config("teacher_selftrain needs pseudo-labels from teacher_finetune"));
        }
        if self.has(Stage::Refine) && !self.has(Stage::Distill) && self.student_checkpoint.is_none() {
            return Err(Error::config("refine requires a student checkpoint or a distill stage"));
        }
        if self.stages.iter().all(|s| *s != Stage::Distill && *s != Stage::Refine)
            && self.student_checkpoint.is_some()
        {
            log::warn!("student_checkpoint is unused by this plan");
        }
        if self.num_slots == 0 {
            return Err(Error::config("num_slots must be >= 1"));
        }
        if !(self.step_divisor > 0.0 && self.step_divisor.is_finite()) {
            return Err(Error::config("step_divisor must be positive"));
        }
        if self.batch_labeled == 0 {
            return Err(Error::config("batch_labeled must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        if self.data.path.is_none() {
            self.data.scene.validate()?;
            if self.data.scenes == 0 {
                return Err(Error::config("dataset needs at least one scene"));
            }
        }
        for stage in Stage::ALL {
            self.phase(stage).config.validate()?;
            self.optimizer_for(stage).validate()?;
        }
        self.pretrain.config.validate()?;
        self.optimizer.validate()?;
        for o in self.teacher_optimizer.iter().chain(&self.pretrain.optimizer) {
            o.validate()?;
        }
        self.teacher_arch().validate()?;
        self.student_arch().validate()?;
        Ok(())
    }
}
