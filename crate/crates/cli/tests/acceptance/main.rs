//! Acceptance checks. Each criterion prints one PASS or FAIL line; the
//! process exits non-zero when any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pixelcl::contrastive::ntxent_grad_anchor;
use pixelcl::margin_lab::{linear_fit, run_grid, AnchorMode, LabConfig};
use pixelcl::model::{init_params, ArchConfig};
use pixelcl::numcore::{finite_diff_grad, Tape, Tensor};
use pixelcl::objective::{assignment_cost, evaluate_objective, ground_truth, hungarian, ObjectiveContext, StageConfig, TrainSample};
use pixelcl::pipeline::RunPlan;
use pixelcl::sampler::{expected_class_distribution, joint_embedding, ScoreMaps};
use pixelcl::synth::{Dataset, SceneConfig};
use pixelcl::{Params64, RngStream, Tensor64};

mod benchmark;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn unit(d: usize, rng: &mut RngStream) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Single-anchor NT-Xent on the tape: `lse(a P^T / T) - <a, z+>/T` where
/// row 0 of `P` is the positive.
fn ntxent_on_tape(tape: &mut Tape<f64>, a: pixelcl::Var, pool: &Tensor64, t: f64) -> pixelcl::Var {
    let p = tape.constant(pool.clone());
    let pt = tape.transpose(p);
    let logits = tape.matmul(a, pt);
    let logits = tape.scale(logits, 1.0 / t);
    let lse = tape.log_sum_exp_rows(logits);
    let pos = tape.gather(logits, vec![0], &[1]);
    let d = tape.sub(lse, pos);
    tape.sum(d)
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(1, 0);
    let mut worst_tape = 0.0f64;
    let mut worst_fd = 0.0f64;
    for _ in 0..100 {
        let d = rng.int_range(2, 64);
        let r = rng.int_range(1, 32);
        let t = [0.1, 0.2, 0.4][rng.int_range(0, 2)];
        let anchor = unit(d, &mut rng);
        let positive = unit(d, &mut rng);
        let negs: Vec<Vec<f64>> = (0..r).map(|_| unit(d, &mut rng)).collect();
        let neg_refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let closed = ntxent_grad_anchor(&anchor, &positive, &neg_refs, t);

        let mut rows = positive.clone();
        negs.iter().for_each(|n| rows.extend_from_slice(n));
        let pool = Tensor::new(vec![r + 1, d], rows).unwrap();
        let x = Tensor::new(vec![1, d], anchor).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(x.clone());
        let loss = ntxent_on_tape(&mut tape, a, &pool, t);
        let g_tape = tape.backward(loss).wrt(a);
        let g_fd = finite_diff_grad(
            |v: &Tensor64| {
                let mut tp = Tape::new();
                let a = tp.param(v.clone());
                let l = ntxent_on_tape(&mut tp, a, &pool, t);
                tp.value(l).data()[0]
            },
            &x,
            1e-6,
        )
        .unwrap();
        worst_tape = worst_tape.max(rel_err(&closed, g_tape.data()));
        worst_fd = worst_fd.max(rel_err(&closed, g_fd.data()));
    }
    ensure(worst_tape < 1e-6, || format!("tape relative error {worst_tape:.2e}"))?;
    ensure(worst_fd < 1e-6, || format!("finite-difference relative error {worst_fd:.2e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "max relative error vs tape {worst_tape:.1e}, vs finite differences {worst_fd:.1e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn random_probs(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let e: Vec<f64> = (0..cols).map(|_| rng.uniform_range(-3.0, 3.0).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn sampler_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(2, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = rng.int_range(1, 3);
        let k = rng.int_range(1, 4);
        let c1 = rng.int_range(1, 3) + 1;
        let (h, w) = (rng.int_range(1, 4), rng.int_range(1, 4));
        let n = h * w;
        // pm[b][p][k] sums to one over k; pc[b][k][c] over c
        let pm: Vec<Vec<Vec<f64>>> = (0..b).map(|_| random_probs(n, k, &mut rng)).collect();
        let pc: Vec<Vec<Vec<f64>>> = (0..b).map(|_| random_probs(k, c1, &mut rng)).collect();
        let mut dense_m = Vec::new();
        for img in &pm {
            for j in 0..k {
                dense_m.extend((0..n).map(|p| img[p][j]));
            }
        }
        let dense_c: Vec<f64> = pc.iter().flatten().flatten().copied().collect();
        let sm = ScoreMaps::from_dense(
            &Tensor::new(vec![b, k, h, w], dense_m).unwrap(),
            &Tensor::new(vec![b, k, c1], dense_c).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let fc = expected_class_distribution(&sm);
        let je = joint_embedding(&sm, &fc);
        let mut row = 0;
        for bi in 0..b {
            for p in 0..n {
                let mut y = pm[bi][p].clone();
                for c in 0..c1 {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += pm[bi][p][j] * pc[bi][j][c];
                    }
                    worst = worst.max((fc[bi].at(&[p, c]) - acc).abs());
                    y.push(acc);
                }
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (i, v) in y.iter().enumerate() {
                    worst = worst.max((je.y.at(&[row, i]) - v).abs());
                    worst = worst.max((je.y_normalized.at(&[row, i]) - v / norm).abs());
                }
                row += 1;
            }
        }
        ensure(row == je.len(), || format!("joint embedding has {} rows, expected {row}", je.len()))?;
    }
    ensure(worst < 1e-12, || format!("max abs error {worst:.2e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max abs error {worst:.1e}, {:.3}s", start.elapsed().as_secs_f64()))
}

fn margin_dynamics() -> Outcome {
    let start = Instant::now();
    let cfg = LabConfig {
        dim: 64,
        negatives: 16,
        temperature: 1.0,
        trials: 10_000,
        anchor: AnchorMode::Independent,
        ..LabConfig::default()
    };
    let rows = run_grid(&cfg).map_err(|e| e.to_string())?;
    let mut worst_rel = 0.0f64;
    let mut worst_z = 0.0f64;
    let mut worst_r2 = 1.0f64;
    for r in &rows {
        worst_rel = worst_rel.max((r.mean_ds_plus - r.predicted).abs() / r.predicted.abs());
        worst_z = worst_z.max(r.mean_ds_minus.abs() / r.se_ds_minus);
    }
    for &p in &cfg.p_grid {
        let cell: Vec<_> = rows.iter().filter(|r| r.p == p).collect();
        let x: Vec<f64> = cell.iter().map(|r| r.lambda).collect();
        let y: Vec<f64> = cell.iter().map(|r| r.mean_margin).collect();
        worst_r2 = worst_r2.min(linear_fit(&x, &y).2);
    }
    let converged = run_grid(&LabConfig {
        anchor: AnchorMode::Converged,
        ..cfg.clone()
    })
    .map_err(|e| e.to_string())?;
    let conv_rel = converged
        .iter()
        .map(|r| (r.mean_ds_plus - r.predicted).abs() / r.predicted.abs())
        .fold(0.0f64, f64::max);
    println!("    info: converged-anchor variant, max relative gap to the prediction {conv_rel:.3}");
    ensure(worst_rel < 0.05, || format!("positive shift off the prediction by {:.2}%", 100.0 * worst_rel))?;
    ensure(worst_z < 3.0, || format!("negative shift {worst_z:.2} standard errors from zero"))?;
    ensure(worst_r2 >= 0.99, || format!("margin vs step size R^2 {worst_r2:.4}"))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "max relative gap {:.2}%, max |negative shift| {worst_z:.2} SE, min R^2 {worst_r2:.5}, {:.1}s",
        100.0 * worst_rel,
        start.elapsed().as_secs_f64()
    ))
}

fn objective_decomposition() -> Outcome {
    let arch = ArchConfig::student(4, 3);
    let scene_cfg = SceneConfig {
        height: 32,
        width: 32,
        min_instances: 2,
        max_instances: 4,
        num_classes: 3,
        min_size: 6,
        max_size: 12,
        ..SceneConfig::default()
    };
    let ds = Dataset::generate(&scene_cfg, 4, 0.5, 8).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = RngStream::new(seed, 3);
        let params: Params64 = init_params(&arch, &mut rng).map_err(|e| e.to_string())?;
        let samples: Vec<TrainSample> = ds
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| TrainSample::new(s, i as u64, &ground_truth(s), &mut rng))
            .collect();
        let (labeled, unlabeled) = samples.split_at(2);
        let step = RngStream::new(seed, 4);
        let eval = |ls: f64, lp: f64| {
            let cfg = StageConfig {
                lambda_semi: ls,
                lambda_pxl: lp,
                ..StageConfig::default()
            };
            evaluate_objective(&params, labeled, unlabeled, &cfg, ObjectiveContext::default(), &step)
        };
        let (j0, _) = eval(0.0, 0.0).map_err(|e| e.to_string())?;
        for (ls, lp) in [(1.0, 0.2), (0.3, 0.01), (2.5, 1.0)] {
            let (j, v) = eval(ls, lp).map_err(|e| e.to_string())?;
            let rhs = ls * v.loss_semi.ok_or("no semi term")? + lp * v.loss_pxl.ok_or("no pixel term")?;
            worst = worst.max((j - j0 - rhs).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("max gap {worst:.2e}"))?;
    Ok(format!("max gap {worst:.1e}"))
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], col: usize, used: &mut Vec<bool>) -> f64 {
        if col == cost[0].len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                best = best.min(cost[r][col] + go(cost, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

fn hungarian_exact() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(9, 0);
    for i in 0..200 {
        let cols = rng.int_range(1, 6);
        let rows = rng.int_range(cols, 8);
        let integer = i % 2 == 0;
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| if integer { rng.int_range(0, 9) as f64 } else { rng.uniform_range(-1.0, 1.0) })
                    .collect()
            })
            .collect();
        let assignment = hungarian(&cost).map_err(|e| e.to_string())?;
        let mut seen = vec![false; cols];
        for c in assignment.iter().flatten() {
            ensure(!seen[*c], || format!("matrix {i}: column {c} assigned twice"))?;
            seen[*c] = true;
        }
        ensure(seen.iter().all(|&s| s), || format!("matrix {i}: a column is unassigned"))?;
        let got = assignment_cost(&cost, &assignment);
        let best = brute_force(&cost);
        let ok = if integer { got == best } else { (got - best).abs() <= 1e-12 };
        ensure(ok, || format!("matrix {i} ({rows}x{cols}): cost {got} vs optimum {best}"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("200 matrices optimal, {:.2}s", start.elapsed().as_secs_f64()))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pixelcl"))
        .args(args)
        .env("PIXELCL_THREADS", "2")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("pixelcl {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

/// Relative paths and contents of every CSV and checkpoint under `dir`.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "pxcl")) {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_plan() -> RunPlan {
    let mut p = RunPlan::default();
    p.data.scene = SceneConfig {
        height: 16,
        width: 16,
        min_instances: 1,
        max_instances: 3,
        num_classes: 2,
        min_size: 4,
        max_size: 8,
        ..SceneConfig::default()
    };
    p.data.scenes = 8;
    p.data.label_fraction = 0.5;
    p.data.eval_scenes = 4;
    p.num_slots = 3;
    p.pretrain.scenes = 4;
    p.pretrain.steps = 4;
    for stage in [&mut p.teacher_finetune, &mut p.teacher_selftrain, &mut p.distill, &mut p.refine] {
        stage.steps = Some(4);
        stage.config.negatives = 8;
    }
    p.log_every = 1;
    p.eval_every = 2;
    p
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plan_path = root.path().join("plan.json");
    std::fs::write(&plan_path, serde_json::to_string_pretty(&tiny_plan()).unwrap()).map_err(|e| e.to_string())?;
    let lab_path = root.path().join("lab.json");
    std::fs::write(&lab_path, r#"{"trials": 200, "p_grid": [0.5, 1.0], "lambda_grid": [0.1, 0.2]}"#).map_err(|e| e.to_string())?;
    let scene_path = root.path().join("scene.json");
    std::fs::write(&scene_path, serde_json::to_string(&tiny_plan().data.scene).unwrap()).map_err(|e| e.to_string())?;
    let plan = plan_path.to_str().unwrap();
    let scene = scene_path.to_str().unwrap();
    let lab = lab_path.to_str().unwrap();
    let mut compared = 0;
    for rep in ["a", "b"] {
        let d = root.path().join(rep);
        let p = |s: &str| d.join(s).display().to_string();
        cli(&["synth", "--scenes", "6", "--label-fraction", "0.5", "--seed", "3", "--scene-config", scene, "--out", &p("data/ds.pxcl")])?;
        cli(&["run", "--plan", plan, "--out", &p("run")])?;
        cli(&["ablate", "--preset", "no-adapt", "--plan", plan, "--out", &p("ablate"), "--sampler", "uniform"])?;
        cli(&["margin-lab", "--config", lab, "--out", &p("lab/grid.csv")])?;
        cli(&["eval", "--checkpoint", &p("run/refine.pxcl"), "--data", &p("data/ds.pxcl"), "--out", &p("eval.json")])?;
        cli(&["sweep", "--plan", plan, "--out", &p("sweep"), "--lambda-pxl", "0,0.1", "--seeds", "0,1", "--preset", "distill-only"])?;
    }
    let a = artifacts(&root.path().join("a"));
    let b = artifacts(&root.path().join("b"));
    ensure(a.len() == b.len() && a.len() >= 10, || format!("artifact sets differ: {} vs {}", a.len(), b.len()))?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure(na == nb, || format!("{na} vs {nb}"))?;
        ensure(ba == bb, || format!("{na} differs between reruns"))?;
        compared += 1;
    }
    let eval = |rep: &str| -> Result<serde_json::Value, String> {
        let text = std::fs::read_to_string(root.path().join(rep).join("eval.json")).map_err(|e| e.to_string())?;
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        // input paths differ between the two rerun directories
        v.as_object_mut().map(|o| (o.remove("checkpoint"), o.remove("data")));
        Ok(v)
    };
    ensure(eval("a")? == eval("b")?, || "eval report differs between reruns".into())?;
    Ok(format!("{compared} CSV and checkpoint files bit-identical across reruns of six commands"))
}

fn main() {
    let mut criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient exactness", Box::new(gradient_exactness)),
        ("2 sampler oracle equivalence", Box::new(sampler_oracle)),
        ("3 margin dynamics", Box::new(margin_dynamics)),
    ];
    let bench = std::rc::Rc::new(std::cell::OnceCell::new());
    for (name, f) in benchmark::CRITERIA {
        let bench = bench.clone();
        criteria.push((name, Box::new(move || f(bench.get_or_init(benchmark::run)))));
    }
    criteria.extend([
        ("8 objective decomposition", Box::new(objective_decomposition) as Box<dyn Fn() -> Outcome>),
        ("9 hungarian exactness", Box::new(hungarian_exact)),
        ("10 determinism", Box::new(determinism)),
    ]);
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.starts_with(&format!("{x} "))) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
