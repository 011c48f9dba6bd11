//! End-to-end gradient checks of the model and the unified objective.

use pixelcl::model::{forward_vars, init_params, ArchConfig};
use pixelcl::numcore::{finite_diff_grad, Tape, Tensor};
use pixelcl::objective::{evaluate_objective, ground_truth, unified_objective, ObjectiveContext, StageConfig, TrainSample};
use pixelcl::synth::{Dataset, SceneConfig};
use pixelcl::{Params64, RngStream, Tensor64};

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![3, 4],
        num_slots: 3,
        num_classes: 2,
        proj_hidden: 4,
        proj_dim: 3,
    }
}

/// Replaces tensor `i` of `params` and evaluates `f`.
fn with_tensor(params: &Params64, i: usize, t: &Tensor64, f: &dyn Fn(&Params64) -> f64) -> f64 {
    let mut p = params.clone();
    p.tensors[i].1 = t.clone();
    f(&p)
}

/// Initial weights with non-zero biases, so no embedding row sits at the
/// origin where normalization is singular.
fn params_with_biases(arch: &ArchConfig, rng: &mut RngStream) -> Params64 {
    let mut p: Params64 = init_params(arch, rng).unwrap();
    for (name, t) in p.tensors.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(0.1, 0.5));
        }
    }
    p
}

fn relative_error(a: &Tensor64, b: &Tensor64) -> f64 {
    let scale = b.data().iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

#[test]
fn model_outputs_match_finite_differences() {
    let arch = tiny_arch();
    for seed in 0..3u64 {
        let mut rng = RngStream::new(seed, 5);
        let params = params_with_biases(&arch, &mut rng);
        let image = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform());
        let wz = Tensor::from_fn(&[4, 3], |_| rng.uniform_range(-1.0, 1.0));
        let wm = Tensor::from_fn(&[3, 4], |_| rng.uniform_range(-1.0, 1.0));
        let wc = Tensor::from_fn(&[3, 3], |_| rng.uniform_range(-1.0, 1.0));
        let build = |p: &Params64, tape: &mut Tape<f64>| {
            let vars = p.register(tape, true);
            let out = forward_vars(&p.arch, &vars, &image, tape).unwrap();
            let terms = [(out.z, &wz), (out.mask_logits, &wm), (out.class_logits, &wc)];
            let mut acc = None;
            for (v, w) in terms {
                let c = tape.constant(w.clone());
                let m = tape.mul(v, c);
                let s = tape.sum(m);
                acc = Some(match acc {
                    Some(a) => tape.add(a, s),
                    None => s,
                });
            }
            (vars, acc.unwrap())
        };
        let value = |p: &Params64| {
            let mut tape = Tape::new();
            let (_, out) = build(p, &mut tape);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let (vars, out) = build(&params, &mut tape);
        let grads = tape.backward(out);
        for (i, v) in vars.iter().enumerate() {
            let fd = finite_diff_grad(|t| with_tensor(&params, i, t, &value), &params.tensors[i].1, 1e-6).unwrap();
            let err = relative_error(&grads.wrt(*v), &fd);
            assert!(err < 1e-6, "seed {seed} tensor {}: relative error {err}", params.tensors[i].0);
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let arch = tiny_arch();
    let scene_cfg = SceneConfig {
        height: 16,
        width: 16,
        min_instances: 1,
        max_instances: 2,
        num_classes: 2,
        min_size: 4,
        max_size: 7,
        ..SceneConfig::default()
    };
    let ds = Dataset::generate(&scene_cfg, 4, 0.5, 3).unwrap();
    let mut rng = RngStream::new(9, 9);
    let params = params_with_biases(&arch, &mut rng);
    let samples: Vec<TrainSample> = ds
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| TrainSample::new(s, i as u64, &ground_truth(s), &mut rng))
        .collect();
    let (labeled, unlabeled) = samples.split_at(2);
    let cfg = StageConfig {
        lambda_semi: 1.0,
        lambda_pxl: 0.5,
        negatives: 8,
        ..StageConfig::default()
    };
    let step = RngStream::new(4, 4);
    let value = |p: &Params64| {
        evaluate_objective(p, labeled, unlabeled, &cfg, ObjectiveContext::default(), &step)
            .unwrap()
            .0
    };
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let v = unified_objective(&mut tape, &arch, &vars, labeled, unlabeled, &cfg, ObjectiveContext::default(), &step).unwrap();
    assert!(v.loss_pxl.is_some() && v.loss_semi.is_some());
    let grads = tape.backward(v.total);
    for (i, var) in vars.iter().enumerate() {
        let fd = finite_diff_grad(|t| with_tensor(&params, i, t, &value), &params.tensors[i].1, 1e-6).unwrap();
        let err = relative_error(&grads.wrt(*var), &fd);
        assert!(err < 1e-5, "tensor {}: relative error {err}", params.tensors[i].0);
    }
}

#[test]
fn objective_decomposes_into_weighted_terms() {
    let arch = tiny_arch();
    let scene_cfg = SceneConfig {
        height: 16,
        width: 16,
        min_instances: 1,
        max_instances: 3,
        num_classes: 2,
        min_size: 4,
        max_size: 7,
        ..SceneConfig::default()
    };
    let ds = Dataset::generate(&scene_cfg, 6, 0.5, 11).unwrap();
    for seed in 0..5u64 {
        let mut rng = RngStream::new(seed, 1);
        let params: Params64 = init_params(&arch, &mut rng).unwrap();
        let samples: Vec<TrainSample> = ds
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| TrainSample::new(s, i as u64, &ground_truth(s), &mut rng))
            .collect();
        let (labeled, unlabeled) = samples.split_at(3);
        let step = RngStream::new(seed, 2);
        let eval = |ls: f64, lp: f64| {
            let cfg = StageConfig {
                lambda_semi: ls,
                lambda_pxl: lp,
                negatives: 16,
                ..StageConfig::default()
            };
            evaluate_objective(&params, labeled, unlabeled, &cfg, ObjectiveContext::default(), &step).unwrap()
        };
        let (j0, _) = eval(0.0, 0.0);
        for (ls, lp) in [(1.0, 0.2), (0.5, 0.05), (2.0, 1.0)] {
            let (j, v) = eval(ls, lp);
            let rhs = ls * v.loss_semi.unwrap() + lp * v.loss_pxl.unwrap();
            assert!((j - j0 - rhs).abs() < 1e-10, "seed {seed}: {} vs {rhs}", j - j0);
        }
    }
}
