use pixelcl::codec::Container;
use pixelcl::model::{init_params, ArchConfig};
use pixelcl::pipeline::*;
use pixelcl::synth::SceneConfig;
use pixelcl::{Error, Params64, RngStream};

fn tiny_plan() -> RunPlan {
    let mut p = RunPlan::default();
    p.data.scene = SceneConfig {
        height: 16,
        width: 16,
        min_instances: 1,
        max_instances: 2,
        num_classes: 2,
        min_size: 4,
        max_size: 8,
        ..SceneConfig::default()
    };
    p.data.scenes = 8;
    p.data.label_fraction = 0.5;
    p.data.eval_scenes = 3;
    p.num_slots = 3;
    p.pretrain.scenes = 4;
    p.pretrain.steps = 3;
    p.pretrain.batch = 2;
    for stage in [&mut p.teacher_finetune, &mut p.teacher_selftrain, &mut p.distill, &mut p.refine] {
        stage.steps = Some(3);
        stage.config.negatives = 8;
    }
    p.log_every = 1;
    p
}

fn tiny_params(seed: u64) -> Params64 {
    init_params(&ArchConfig::student(3, 2), &mut RngStream::new(seed, 0)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut ckpt = Checkpoint::new(tiny_params(1));
    ckpt.step = 42;
    ckpt.rng = Some(RngStream::new(3, 4).state());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pxcl");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let again = dir.path().join("b.pxcl");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = Checkpoint::new(tiny_params(2)).encode().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    let err = Checkpoint::decode(&version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let ckpt = Checkpoint::new(tiny_params(3));
    let other = ArchConfig::teacher(3, 2);
    let err = ckpt.params_for(&other).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("encoder.0.weight"), "{err}");

    let mut c: Container = ckpt.to_container().unwrap();
    let (_, t) = c.tensors.iter_mut().find(|(n, _)| n == "queries").unwrap();
    *t = pixelcl::Tensor64::zeros(&[2, 2]);
    let err = Checkpoint::from_container(c).unwrap_err();
    assert!(err.to_string().contains("queries"), "{err}");
}

#[test]
fn presets_select_stages() {
    use Stage::*;
    let stages = |n: &str| RunPlan::preset(n).unwrap().stages;
    assert_eq!(stages("full"), vec![TeacherFinetune, TeacherSelftrain, Distill, Refine]);
    assert_eq!(stages("no-refine"), vec![TeacherFinetune, TeacherSelftrain, Distill]);
    assert_eq!(stages("no-adapt"), vec![Distill, Refine]);
    assert_eq!(stages("no-teacher-adapt"), vec![Distill, Refine]);
    assert_eq!(stages("distill-only"), vec![Distill]);
    let sup = RunPlan::preset("sup-only").unwrap();
    assert_eq!(sup.stages, vec![Distill]);
    assert_eq!((sup.distill.config.lambda_semi, sup.distill.config.lambda_pxl), (0.0, 0.0));
    assert!(matches!(RunPlan::preset("nope"), Err(Error::Argument(_))));
}

#[test]
fn default_steps_follow_the_divisor() {
    let p = RunPlan::default();
    assert_eq!(p.steps(Stage::TeacherFinetune), 20);
    assert_eq!(p.steps(Stage::TeacherSelftrain), 100);
    assert_eq!(p.steps(Stage::Distill), 1800);
    assert_eq!(p.steps(Stage::Refine), 180);
}

#[test]
fn invalid_stage_orders_are_config_errors() {
    let mut p = tiny_plan();
    p.stages = vec![Stage::TeacherSelftrain, Stage::Distill];
    assert!(matches!(p.validate(), Err(Error::Config(_))));
    p.stages = vec![Stage::Refine];
    assert!(matches!(p.validate(), Err(Error::Config(_))));
    p.stages = vec![Stage::Distill, Stage::TeacherFinetune];
    assert!(matches!(p.validate(), Err(Error::Config(_))));
    assert!(matches!(RunPlan::from_json(r#"{"stages": [], "bogus": 1}"#), Err(Error::Config(_))));
}

#[test]
fn empty_labeled_pool_is_a_config_error() {
    let mut p = tiny_plan();
    p.data.label_fraction = 0.01;
    p.data.scenes = 8;
    // round(0.08) = 0 labeled scenes
    let data = RunData::prepare(&p);
    if let Ok(data) = data {
        let theta0 = Checkpoint::new(init_params(&p.teacher_arch(), &mut RngStream::new(0, 0)).unwrap());
        assert!(matches!(finetune_teacher(&data, &theta0, &p), Err(Error::Config(_))));
    }
}

#[test]
fn missing_teacher_is_a_config_error() {
    let p = tiny_plan();
    let data = RunData::prepare(&p).unwrap();
    assert!(matches!(distill_student(&data, None, &p), Err(Error::Config(_))));
}

#[test]
fn zero_refinement_steps_is_identity() {
    let mut p = tiny_plan();
    p.refine.steps = Some(0);
    let data = RunData::prepare(&p).unwrap();
    let student = Checkpoint::new(init_params(&p.student_arch(), &mut RngStream::new(5, 0)).unwrap());
    let (out, report) = refine_student(&data, &student, &p).unwrap();
    assert_eq!(out.params, student.params);
    assert_eq!(report.params_hash, params_hash(&student.params));
}

#[test]
fn refinement_lowers_the_labeled_loss() {
    let mut p = tiny_plan();
    p.refine.steps = Some(40);
    p.batch_labeled = 4;
    let data = RunData::prepare(&p).unwrap();
    let student = Checkpoint::new(init_params(&p.student_arch(), &mut RngStream::new(5, 0)).unwrap());
    let (_, report) = refine_student(&data, &student, &p).unwrap();
    let before = report.notes["labeled_loss_before"].as_f64().unwrap();
    let after = report.notes["labeled_loss_after"].as_f64().unwrap();
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn self_training_restarts_from_the_initial_teacher() {
    let p = tiny_plan();
    let data = RunData::prepare(&p).unwrap();
    let (theta0, _) = pretrain_teacher(&data, &p).unwrap();
    let (ft, _) = finetune_teacher(&data, &theta0, &p).unwrap();
    assert_ne!(params_hash(&ft.params), params_hash(&theta0.params));
    let (_, report) = selftrain_teacher(&data, &theta0, &ft, &p).unwrap();
    assert_eq!(report.notes["start_hash"].as_str().unwrap(), params_hash(&theta0.params));
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let p = tiny_plan();
    let data = RunData::prepare(&p).unwrap();
    let (teacher, _) = pretrain_teacher(&data, &p).unwrap();
    let before = params_hash(&teacher.params);
    let (_, report) = distill_student(&data, Some(&teacher), &p).unwrap();
    assert_eq!(params_hash(&teacher.params), before);
    assert_eq!(report.notes["teacher_hash"].as_str().unwrap(), before);
}

#[test]
fn zero_weights_reduce_distillation_to_supervised_training() {
    let sup = tiny_plan().with_preset("sup-only").unwrap();
    let data = RunData::prepare(&sup).unwrap();
    let (t1, _) = pretrain_teacher(&data, &sup).unwrap();
    let mut other = sup.clone();
    other.pretrain.seed = 99;
    let (t2, _) = pretrain_teacher(&data, &other).unwrap();
    // with both extra terms off the teacher cannot influence the student
    let (a, _) = distill_student(&data, Some(&t1), &sup).unwrap();
    let (b, _) = distill_student(&data, Some(&t2), &sup).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn runs_are_deterministic_and_independent_of_prefetch() {
    let plan = tiny_plan();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = run_plan(&plan, Some(d1.path()), None).unwrap();
    let mut inline = plan.clone();
    inline.prefetch = 0;
    let r2 = run_plan(&inline, Some(d2.path()), None).unwrap();
    assert_eq!(r1.stages.len(), 5);
    for (a, b) in r1.stages.iter().zip(&r2.stages) {
        assert_eq!(a.params_hash, b.params_hash, "stage {}", a.stage);
        let csv = |d: &std::path::Path| std::fs::read(d.join(format!("{}.csv", a.stage))).unwrap();
        assert_eq!(csv(d1.path()), csv(d2.path()));
    }
    let r3 = run_plan(&plan, Some(d2.path()), None).unwrap();
    assert_eq!(r1.stages, r3.stages.iter().map(|s| {
        let mut s = s.clone();
        s.metrics_csv = s.metrics_csv.map(|p| p.replace(&d2.path().display().to_string(), &d1.path().display().to_string()));
        s.checkpoint = s.checkpoint.map(|p| p.replace(&d2.path().display().to_string(), &d1.path().display().to_string()));
        s
    }).collect::<Vec<_>>());
    for stage in ["teacher_pretrain", "distill", "refine"] {
        let f = format!("{stage}.pxcl");
        assert_eq!(std::fs::read(d1.path().join(&f)).unwrap(), std::fs::read(d2.path().join(&f)).unwrap());
    }
}

#[test]
fn cache_reuses_shared_stages() {
    let base = tiny_plan();
    let mut cache = RunCache::new();
    let full = run_plan(&base.clone().with_preset("full").unwrap(), None, Some(&mut cache)).unwrap();
    let n = cache.len();
    let no_refine = run_plan(&base.clone().with_preset("no-refine").unwrap(), None, Some(&mut cache)).unwrap();
    assert_eq!(cache.len(), n);
    assert_eq!(full.stages[..4], no_refine.stages[..]);
    let fresh = run_plan(&base.with_preset("no-refine").unwrap(), None, None).unwrap();
    assert_eq!(fresh.stages, no_refine.stages);
}

#[test]
fn optimizers_descend_on_a_quadratic() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW] {
        let cfg = OptimizerConfig {
            kind,
            lr: 0.05,
            schedule: LrSchedule::Constant,
            clip_norm: None,
            ..OptimizerConfig::default()
        };
        let mut params = tiny_params(7);
        let mut opt = Optimizer::new(cfg.clone(), &params).unwrap();
        let norm = |p: &Params64| p.tensors.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>();
        let start = norm(&params);
        for step in 0..50 {
            let grads: Vec<_> = params.tensors.iter().map(|(_, t)| t.map(|v| 2.0 * v)).collect();
            opt.step(&mut params, &grads, cfg.lr_at(step, 50)).unwrap();
        }
        assert!(norm(&params) < 0.5 * start, "{kind}");
    }
}

#[test]
fn cosine_schedule_decays_to_zero() {
    let cfg = OptimizerConfig::default();
    assert_eq!(cfg.lr_at(0, 100), cfg.lr);
    assert!(cfg.lr_at(99, 100) < 0.01 * cfg.lr);
    let warm = OptimizerConfig {
        warmup_steps: 10,
        schedule: LrSchedule::Constant,
        ..OptimizerConfig::default()
    };
    assert!((warm.lr_at(0, 100) - 0.1 * warm.lr).abs() < 1e-15);
}

#[test]
fn stage_optimizer_overrides_reach_training_and_the_cache() {
    let base = tiny_plan().with_preset("no-adapt").unwrap();
    let mut gentle = base.clone();
    gentle.refine.optimizer = Some(OptimizerConfig {
        lr: 1e-4,
        ..OptimizerConfig::default()
    });
    assert_eq!(gentle.optimizer_for(Stage::Refine).lr, 1e-4);
    assert_eq!(gentle.optimizer_for(Stage::Distill).lr, base.optimizer.lr);
    let mut cache = RunCache::new();
    let a = run_plan(&base, None, Some(&mut cache)).unwrap();
    let b = run_plan(&gentle, None, Some(&mut cache)).unwrap();
    let hash = |r: &RunReport, s: &str| r.stages.iter().find(|x| x.stage == s).unwrap().params_hash.clone();
    assert_eq!(hash(&a, "distill"), hash(&b, "distill"));
    assert_ne!(hash(&a, "refine"), hash(&b, "refine"));

    let mut teacher = tiny_plan();
    teacher.teacher_optimizer = Some(OptimizerConfig {
        lr: 1e-4,
        ..OptimizerConfig::default()
    });
    let c = run_plan(&tiny_plan(), None, Some(&mut cache)).unwrap();
    let d = run_plan(&teacher, None, Some(&mut cache)).unwrap();
    assert_ne!(hash(&c, "teacher_finetune"), hash(&d, "teacher_finetune"));
}
