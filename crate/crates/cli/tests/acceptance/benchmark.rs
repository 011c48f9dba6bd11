//! Shared synthetic benchmark behind the false-negative and ablation
//! criteria. Every configuration is trained once per seed; stages shared
//! between configurations come from one cache.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use pixelcl::pipeline::{load_checkpoint, run_plan, sampler_fnr, OptimizerConfig, RunCache, RunPlan, Stage};
use pixelcl::sampler::{PlanSettings, SamplerVariant};
use pixelcl::synth::{Dataset, SceneConfig};
use pixelcl::RngStream;

use super::{ensure, within, Outcome};

pub const SEEDS: [u64; 3] = [0, 1, 2];
const LIMIT: Duration = Duration::from_secs(30 * 60);

pub struct Bench {
    /// Student AP per configuration, one entry per seed.
    ap: BTreeMap<&'static str, Vec<f64>>,
    /// (fusion, uniform) false negative rates per seed.
    fnr: Vec<(f64, f64)>,
    fnr_scenes: (usize, usize),
    elapsed: Duration,
    error: Option<String>,
}

fn scene() -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 32,
        min_instances: 2,
        max_instances: 4,
        num_classes: 4,
        min_size: 10,
        max_size: 16,
        ..SceneConfig::default()
    }
}

pub fn base_plan(seed: u64) -> RunPlan {
    let mut p = RunPlan::default();
    p.seed = seed;
    p.data.scene = scene();
    p.data.scenes = 120;
    p.data.label_fraction = 0.1;
    p.data.eval_scenes = 64;
    p.num_slots = 6;
    p.batch_labeled = 1;
    p.batch_unlabeled = 3;
    p.pretrain.scenes = 200;
    p.pretrain.steps = 3000;
    p.pretrain.optimizer = Some(p.optimizer.clone());
    let slow = OptimizerConfig {
        lr: 0.002,
        ..p.optimizer.clone()
    };
    p.teacher_optimizer = Some(slow.clone());
    p.refine.optimizer = Some(slow);
    p.teacher_finetune.steps = Some(100);
    p.teacher_selftrain.steps = Some(600);
    p.distill.steps = Some(3000);
    p.refine.steps = Some(60);
    p.distill.config.negatives = 64;
    p.distill.config.max_anchors = Some(128);
    for cfg in [
        &mut p.pretrain.config,
        &mut p.teacher_finetune.config,
        &mut p.teacher_selftrain.config,
        &mut p.distill.config,
        &mut p.refine.config,
    ] {
        cfg.w_class = 0.5;
    }
    p.log_every = 100;
    p
}

fn configs(seed: u64) -> Vec<(&'static str, RunPlan)> {
    let preset = |name: &str| base_plan(seed).with_preset(name).expect("preset");
    let mut out = vec![
        ("full", preset("full")),
        ("no-refine", preset("no-refine")),
        ("distill-only", preset("distill-only")),
        ("sup-only", preset("sup-only")),
    ];
    let mut semi = preset("no-refine");
    semi.distill.config.lambda_pxl = 0.0;
    out.push(("sup+semi", semi));
    for (name, variant) in [
        ("uniform", SamplerVariant::Uniform),
        ("mask", SamplerVariant::MaskOnly),
        ("class", SamplerVariant::ClassOnly),
    ] {
        let mut p = preset("no-refine");
        p.distill.config.sampler = variant;
        out.push((name, p));
    }
    out
}

/// Held-out scenes crowded enough to make same-instance negatives likely.
fn fnr_scenes(seed: u64) -> pixelcl::Result<Dataset> {
    let cfg = SceneConfig {
        min_instances: 4,
        max_instances: 5,
        max_size: 13,
        ..scene()
    };
    Dataset::generate(&cfg, 24, 1.0, 0xF0F0 ^ seed)
}

pub fn run() -> Bench {
    let start = Instant::now();
    let mut bench = Bench {
        ap: BTreeMap::new(),
        fnr: Vec::new(),
        fnr_scenes: (0, 0),
        elapsed: Duration::ZERO,
        error: None,
    };
    if let Err(e) = fill(&mut bench) {
        bench.error = Some(e.to_string());
    }
    bench.elapsed = start.elapsed();
    println!("    info: benchmark trained in {:.0}s", bench.elapsed.as_secs_f64());
    for (name, aps) in &bench.ap {
        let shown: Vec<String> = aps.iter().map(|a| format!("{a:.4}")).collect();
        println!("    info: {name:<13} AP {} mean {:.4}", shown.join(" "), mean(aps));
    }
    bench
}

fn fill(bench: &mut Bench) -> pixelcl::Result<()> {
    let mut cache = RunCache::new();
    let dir = tempfile::tempdir()?;
    for seed in SEEDS {
        for (name, plan) in configs(seed) {
            let out = dir.path().join(format!("{seed}-{name}"));
            let keep = name == "full";
            let report = run_plan(&plan, keep.then_some(out.as_path()), Some(&mut cache))?;
            let ap = report.student_ap.ok_or_else(|| pixelcl::Error::Internal("no student AP".into()))?;
            bench.ap.entry(name).or_default().push(ap);
            if keep {
                let student = load_checkpoint(&out.join(format!("{}.pxcl", Stage::Refine)))?;
                let scenes = fnr_scenes(seed)?;
                let refs: Vec<_> = scenes.scenes.iter().collect();
                bench.fnr_scenes = (refs.len(), refs.iter().map(|s| s.instances.len()).min().unwrap_or(0));
                let cfg = &plan.distill.config;
                let rate = |variant| {
                    let settings = PlanSettings {
                        variant,
                        exponent: cfg.debias_exponent,
                        negatives: cfg.negatives,
                    };
                    sampler_fnr(&student.params, &refs, settings, 4, &RngStream::new(seed, 0xF2))
                };
                bench.fnr.push((rate(SamplerVariant::Fusion)?, rate(SamplerVariant::Uniform)?));
            }
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl Bench {
    fn check(&self) -> Result<(), String> {
        if let Some(e) = &self.error {
            return Err(format!("benchmark failed: {e}"));
        }
        within(self.elapsed, LIMIT)
    }

    fn mean(&self, name: &str) -> f64 {
        mean(&self.ap[name])
    }

    fn ordering(&self, names: &[&str], strict: &[bool]) -> Outcome {
        self.check()?;
        let means: Vec<f64> = names.iter().map(|n| self.mean(n)).collect();
        let shown: Vec<String> = names.iter().zip(&means).map(|(n, m)| format!("{n} {m:.4}")).collect();
        for (i, s) in strict.iter().enumerate() {
            let ok = if *s { means[i] > means[i + 1] } else { means[i] >= means[i + 1] };
            let op = if *s { ">" } else { ">=" };
            ensure(ok, || format!("{} {op} {} violated: {}", names[i], names[i + 1], shown.join(", ")))?;
        }
        Ok(shown.join(", "))
    }
}

fn fnr_target(b: &Bench) -> Outcome {
    b.check()?;
    let (n, min_inst) = b.fnr_scenes;
    ensure(n >= 20 && min_inst >= 4, || format!("{n} scenes with at least {min_inst} instances"))?;
    let shown: Vec<String> = b.fnr.iter().map(|(f, u)| format!("{f:.3}/{u:.3}")).collect();
    for (seed, (f, u)) in SEEDS.iter().zip(&b.fnr) {
        ensure(*f < 0.1 && f < u, || format!("seed {seed}: fusion {f:.4}, uniform {u:.4}; all {}", shown.join(" ")))?;
    }
    Ok(format!("fusion/uniform per seed {} on {n} scenes", shown.join(" ")))
}

fn sampling_order(b: &Bench) -> Outcome {
    b.check()?;
    let fusion = b.mean("no-refine");
    let uniform = b.mean("uniform");
    let (mask, class) = (b.mean("mask"), b.mean("class"));
    let shown = format!("fusion {fusion:.4}, mask {mask:.4}, class {class:.4}, uniform {uniform:.4}");
    ensure(fusion > uniform, || format!("fusion not above uniform: {shown}"))?;
    ensure(mask >= uniform, || format!("mask below uniform: {shown}"))?;
    ensure(class >= uniform, || format!("class below uniform: {shown}"))?;
    Ok(shown)
}

fn loss_terms(b: &Bench) -> Outcome {
    b.ordering(&["no-refine", "sup+semi", "sup-only"], &[true, true])
}

fn stage_order(b: &Bench) -> Outcome {
    b.ordering(&["full", "no-refine", "distill-only", "sup-only"], &[false, false, false])
}

pub const CRITERIA: [(&str, fn(&Bench) -> Outcome); 4] = [
    ("4 false negative rate", fnr_target),
    ("5 sampling variant ordering", sampling_order),
    ("6 loss term ablation", loss_terms),
    ("7 stage ablation", stage_order),
];
