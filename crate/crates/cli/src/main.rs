//! `pixelcl` command-line front end.
//!
//! Exit codes: 0 success, 2 argument or config error, 3 data or format
//! error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pixelcl::contrastive::LossVariant;
use pixelcl::margin_lab::{self, AnchorMode, LabConfig};
use pixelcl::objective::{ScoreSource, StageConfig};
use pixelcl::pipeline::{self, RunCache, RunData, RunPlan, Stage};
use pixelcl::sampler::{DebiasExponent, PlanSettings, SamplerVariant, SamplingScope};
use pixelcl::synth::{Dataset, SceneConfig};
use pixelcl::{Error, Result, RngStream};

#[derive(Parser)]
#[command(name = "pixelcl", version, about = "Pixel-wise contrastive learning and semi-supervised distillation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file and its manifest.
    Synth(SynthArgs),
    /// Execute a run plan.
    Run(RunArgs),
    /// Execute a stage-ablation preset.
    Ablate(AblateArgs),
    /// Monte-Carlo check of one-step margin growth.
    MarginLab(LabArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Grid of runs over contrastive hyperparameters.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 0.1)]
    label_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    scene_config: Option<PathBuf>,
    /// Dataset file; the manifest is written next to it as `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied to every stage config of a plan.
#[derive(Args, Default, Clone)]
struct StageFlags {
    #[arg(long)]
    sampler: Option<SamplerVariant>,
    #[arg(long)]
    debias_exponent: Option<DebiasExponent>,
    #[arg(long)]
    scope: Option<SamplingScope>,
    #[arg(long)]
    bank_capacity: Option<usize>,
    #[arg(long)]
    loss: Option<LossVariant>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    sampler_source: Option<ScoreSource>,
}

impl StageFlags {
    fn apply(&self, c: &mut StageConfig) {
        if let Some(v) = self.sampler {
            c.sampler = v;
        }
        if let Some(v) = self.debias_exponent {
            c.debias_exponent = v;
        }
        if let Some(v) = self.scope {
            c.scope = v;
        }
        if let Some(v) = self.bank_capacity {
            c.bank_capacity = v;
        }
        if let Some(v) = self.loss {
            c.loss = v;
        }
        if let Some(v) = self.margin {
            c.margin = v;
        }
        if let Some(v) = self.temperature {
            c.temperature = v;
        }
        if let Some(v) = self.negatives {
            c.negatives = v;
        }
        if let Some(v) = self.sampler_source {
            c.sampler_source = v;
        }
    }

    fn apply_plan(&self, plan: &mut RunPlan) {
        for c in [
            &mut plan.teacher_finetune.config,
            &mut plan.teacher_selftrain.config,
            &mut plan.distill.config,
            &mut plan.refine.config,
        ] {
            self.apply(c);
        }
    }
}

#[derive(Args)]
struct PlanFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scene_config: Option<PathBuf>,
    /// Dataset file to train on instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    stage: StageFlags,
}

impl PlanFlags {
    fn apply(&self, plan: &mut RunPlan) -> Result<()> {
        if let Some(s) = self.seed {
            plan.seed = s;
        }
        if let Some(p) = &self.scene_config {
            plan.data.scene = read_scene_config(p)?;
        }
        if let Some(p) = &self.data {
            plan.data.path = Some(p.display().to_string());
        }
        self.stage.apply_plan(plan);
        Ok(())
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: PlanFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// One of full, no-refine, no-adapt, distill-only, sup-only.
    #[arg(long)]
    preset: String,
    /// Base plan; defaults are used when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: PlanFlags,
}

#[derive(Args)]
struct LabArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid CSV; the resolved config and extra columns go to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// converged or independent.
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes per sampling pool when measuring false negative rates.
    #[arg(long, default_value_t = 4)]
    pool: usize,
    #[command(flatten)]
    stage: StageFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.01, 0.1, 0.2, 0.5])]
    lambda_pxl: Vec<f64>,
    /// Negatives per anchor; the plan's value when absent.
    #[arg(long, value_delimiter = ',')]
    negatives: Vec<usize>,
    /// Temperatures; the plan's value when absent.
    #[arg(long, value_delimiter = ',')]
    temperature: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0])]
    seeds: Vec<u64>,
    #[arg(long, default_value = "full")]
    preset: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn read_scene_config(path: &Path) -> Result<SceneConfig> {
    let cfg: SceneConfig = read_json(path, "scene config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker cap from `PIXELCL_THREADS`, at least 1.
fn threads() -> usize {
    std::env::var("PIXELCL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1)
}

fn cap_prefetch(plan: &mut RunPlan) {
    if threads() < 2 {
        plan.prefetch = 0;
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = match &a.scene_config {
        Some(p) => read_scene_config(p)?,
        None => SceneConfig::default(),
    };
    let ds = Dataset::generate(&cfg, a.scenes, a.label_fraction, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ds.write(&a.out)?;
    write_json(&sidecar(&a.out), &ds.manifest())?;
    let labeled = ds.labeled().len();
    println!("wrote {} scenes ({labeled} labeled, {} unlabeled) to {}", ds.len(), ds.len() - labeled, a.out.display());
    Ok(())
}

fn print_report(r: &pipeline::RunReport) {
    for s in &r.stages {
        let ap = s.ap.map_or("-".into(), |v| format!("{v:.4}"));
        println!("{:<18} steps {:>6}  ap {ap}", s.stage, s.steps);
    }
}

fn execute(mut plan: RunPlan, out: &Path) -> Result<()> {
    cap_prefetch(&mut plan);
    plan.validate()?;
    let report = pipeline::run_plan(&plan, Some(out), None)?;
    print_report(&report);
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut plan: RunPlan = read_json(&a.plan, "run plan")?;
    a.flags.apply(&mut plan)?;
    execute(plan, &a.out)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = match &a.plan {
        Some(p) => read_json(p, "run plan")?,
        None => RunPlan::default(),
    };
    let mut plan = base.with_preset(&a.preset)?;
    a.flags.apply(&mut plan)?;
    execute(plan, &a.out)
}

#[derive(Serialize)]
struct LabOutput<'a> {
    config: &'a LabConfig,
    rows: &'a [margin_lab::GridRow],
    /// Per p: slope, intercept and R^2 of the mean margin against lambda.
    fits: Vec<(f64, f64, f64, f64)>,
}

fn cmd_margin_lab(a: LabArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json(p, "lab config")?,
        None => LabConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    if let Some(m) = &a.anchor {
        cfg.anchor = match m.as_str() {
            "converged" => AnchorMode::Converged,
            "independent" => AnchorMode::Independent,
            _ => return Err(Error::Argument(format!("unknown anchor mode '{m}'"))),
        };
    }
    cfg.validate()?;
    let rows = margin_lab::run_grid(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, margin_lab::grid_csv(&rows))?;
    let fits = cfg
        .p_grid
        .iter()
        .map(|&p| {
            let cell: Vec<_> = rows.iter().filter(|r| r.p == p).collect();
            let x: Vec<f64> = cell.iter().map(|r| r.lambda).collect();
            let y: Vec<f64> = cell.iter().map(|r| r.mean_margin).collect();
            let (s, i, r2) = margin_lab::linear_fit(&x, &y);
            println!("p={p:<5} slope {s:.6} R^2 {r2:.6}");
            (p, s, i, r2)
        })
        .collect();
    write_json(&sidecar(&a.out), &LabOutput { config: &cfg, rows: &rows, fits })
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    data: String,
    config: StageConfig,
    seed: u64,
    pool: usize,
    ap: f64,
    ap50: f64,
    /// `(class, ap, ap50)`.
    per_class: Vec<(usize, f64, f64)>,
    selected_sampler: SamplerVariant,
    fnr: Vec<(SamplerVariant, f64)>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = pipeline::load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::read(&a.data)?;
    if ckpt.params.arch.num_classes != ds.config.num_classes {
        return Err(Error::Data(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            ckpt.params.arch.num_classes, ds.config.num_classes
        )));
    }
    let mut cfg = StageConfig::default();
    a.stage.apply(&mut cfg);
    cfg.validate()?;
    let ap = pipeline::evaluate(&ckpt.params, &ds.scenes)?;
    let scenes: Vec<_> = ds.scenes.iter().collect();
    let rng = RngStream::new(a.seed, 0);
    let fnr = [
        SamplerVariant::Uniform,
        SamplerVariant::MaskOnly,
        SamplerVariant::ClassOnly,
        SamplerVariant::Fusion,
    ]
    .into_iter()
    .map(|variant| {
        let settings = PlanSettings {
            variant,
            exponent: cfg.debias_exponent,
            negatives: cfg.negatives,
        };
        Ok((variant, pipeline::sampler_fnr(&ckpt.params, &scenes, settings, a.pool, &rng)?))
    })
    .collect::<Result<Vec<_>>>()?;
    for (v, f) in &fnr {
        println!("fnr {v:<8} {f:.4}");
    }
    println!("ap {:.4} ap50 {:.4}", ap.ap, ap.ap50);
    let out = EvalOutput {
        checkpoint: a.checkpoint.display().to_string(),
        data: a.data.display().to_string(),
        selected_sampler: cfg.sampler,
        config: cfg,
        seed: a.seed,
        pool: a.pool,
        ap: ap.ap,
        ap50: ap.ap50,
        per_class: ap.per_class,
        fnr,
    };
    write_json(&a.out, &out)
}

#[derive(Clone, Serialize)]
struct SweepCell {
    lambda_pxl: f64,
    negatives: usize,
    temperature: f64,
    seed: u64,
    ap: f64,
    ap50: f64,
    margin: Option<f64>,
    fnr: Option<f64>,
    dataset_hash: String,
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    base_plan: &'a RunPlan,
    preset: &'a str,
    cells: &'a [SweepCell],
}

const SWEEP_HEADER: &str = "lambda_pxl,negatives,temperature,seeds,ap_mean,ap_std,ap50_mean,margin_mean,fnr_mean";

fn run_cell(base: &RunPlan, lambda: f64, r: usize, t: f64, seed: u64, cache: &mut RunCache) -> Result<SweepCell> {
    let mut plan = base.clone();
    plan.seed = seed;
    for c in [
        &mut plan.teacher_finetune.config,
        &mut plan.teacher_selftrain.config,
        &mut plan.distill.config,
    ] {
        c.negatives = r;
        c.temperature = t;
    }
    plan.distill.config.lambda_pxl = lambda;
    let data = RunData::prepare(&plan)?;
    let dataset_hash = sha256_hex(&data.dataset.to_container().encode()?);
    let report = pipeline::run_plan(&plan, None, Some(cache))?;
    let distill = report.stages.iter().find(|s| s.stage == Stage::Distill.to_string());
    let last_row = |f: fn(&pixelcl::metrics::MetricRow) -> Option<f64>| {
        distill.and_then(|d| d.rows.iter().rev().find_map(f))
    };
    Ok(SweepCell {
        lambda_pxl: lambda,
        negatives: r,
        temperature: t,
        seed,
        ap: report.student_ap.unwrap_or(0.0),
        ap50: report.student_ap50.unwrap_or(0.0),
        margin: last_row(|r| r.margin),
        fnr: last_row(|r| r.fnr),
        dataset_hash,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = match &a.plan {
        Some(p) => read_json(p, "run plan")?,
        None => RunPlan::default(),
    };
    let mut base = base.with_preset(&a.preset)?;
    cap_prefetch(&mut base);
    base.validate()?;
    let negatives = if a.negatives.is_empty() { vec![base.distill.config.negatives] } else { a.negatives.clone() };
    let temps = if a.temperature.is_empty() { vec![base.distill.config.temperature] } else { a.temperature.clone() };
    if a.lambda_pxl.is_empty() || a.seeds.is_empty() {
        return Err(Error::Argument("sweep grid is empty".into()));
    }
    let mut grid = Vec::new();
    for &l in &a.lambda_pxl {
        for &r in &negatives {
            for &t in &temps {
                grid.push((l, r, t));
            }
        }
    }
    // one worker per seed so each keeps its teachers cached
    let workers = threads().min(a.seeds.len());
    let per_seed: Vec<Result<Vec<SweepCell>>> = if workers <= 1 {
        a.seeds
            .iter()
            .map(|&seed| {
                let mut cache = RunCache::new();
                grid.iter().map(|&(l, r, t)| run_cell(&base, l, r, t, seed, &mut cache)).collect()
            })
            .collect()
    } else {
        let chunks: Vec<Vec<u64>> = a.seeds.chunks(a.seeds.len().div_ceil(workers)).map(<[u64]>::to_vec).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|seeds| {
                    let (base, grid) = (&base, &grid);
                    s.spawn(move || {
                        seeds
                            .iter()
                            .map(|&seed| {
                                let mut cache = RunCache::new();
                                grid.iter().map(|&(l, r, t)| run_cell(base, l, r, t, seed, &mut cache)).collect()
                            })
                            .collect::<Vec<Result<Vec<SweepCell>>>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    };
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    let cells: Vec<SweepCell> = per_seed.iter().flatten().cloned().collect();

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for (i, &(l, r, t)) in grid.iter().enumerate() {
        let group: Vec<&SweepCell> = per_seed.iter().map(|cs| &cs[i]).collect();
        let aps: Vec<f64> = group.iter().map(|c| c.ap).collect();
        let m = mean(&aps);
        let sd = if aps.len() > 1 {
            (aps.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (aps.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let opt_mean = |f: fn(&SweepCell) -> Option<f64>| {
            let v: Vec<f64> = group.iter().filter_map(|c| f(c)).collect();
            if v.is_empty() { String::new() } else { format!("{}", mean(&v)) }
        };
        csv.push_str(&format!(
            "{l},{r},{t},{},{m},{sd},{},{},{}\n",
            group.len(),
            mean(&group.iter().map(|c| c.ap50).collect::<Vec<_>>()),
            opt_mean(|c| c.margin),
            opt_mean(|c| c.fnr)
        ));
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    write_json(
        &a.out.join("sweep.json"),
        &SweepOutput {
            base_plan: &base,
            preset: &a.preset,
            cells: &cells,
        },
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::MarginLab(a) => cmd_margin_lab(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
