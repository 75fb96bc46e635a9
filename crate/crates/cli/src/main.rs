use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use springtwin_core::corpus::{
    self, consistency_report, evaluate, from_vec3, gen_synthetic, load_checkpoint, load_scene, load_trajectory,
    save_checkpoint, save_scene, write_json, Checkpoint, ConsistencyReport, EvalReport, FitSummary, Preset,
    SyntheticSpec, TrajectoryFile, FORMAT_VERSION,
};
use springtwin_core::pipeline::{feed_forward, predict, prepare, summarize, PrepareOptions, PreparedScene};
use springtwin_core::predictor::Model;
use springtwin_core::training::{train, LossWeights, TrainConfig};
use springtwin_core::Error;

mod serve;

#[derive(Parser)]
#[command(name = "springtwin", version, about = "Part-aware spring-mass twins: generate, fit, roll out, evaluate, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its ground-truth sidecar.
    Gen(GenArgs),
    /// Fit a checkpoint to one or more scenes.
    Fit(FitArgs),
    /// Feed-forward prediction and rollout.
    Rollout(RolloutArgs),
    /// Score a trajectory against a scene.
    Eval(EvalArgs),
    /// Cross-scene spread of fitted parameters.
    Consistency(ConsistencyArgs),
    /// Interactive drag sessions over a websocket.
    Serve(serve::ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generation spec (JSON). Without it, `--preset` defaults are used.
    spec: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar path; defaults to `<out stem>.gt.json`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SimOverrides {
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    disable_parts: bool,
}

impl SimOverrides {
    fn options(&self) -> PrepareOptions {
        PrepareOptions {
            disable_parts: self.disable_parts,
            dt: self.dt,
            substeps: self.substeps,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Line-delimited loss history; defaults to `<out stem>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for per-scene fit summaries.
    #[arg(long)]
    summaries: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_trk: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_cham: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda_prior: f64,
    #[arg(long)]
    disable_codebook: bool,
    #[arg(long)]
    disable_prior: bool,
    #[command(flatten)]
    sim: SimOverrides,
}

#[derive(Args)]
struct RolloutArgs {
    scene: PathBuf,
    checkpoint: PathBuf,
    /// Frames to simulate; defaults to the scene length.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sim: SimOverrides,
}

#[derive(Args)]
struct EvalArgs {
    scene: PathBuf,
    trajectory: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Summary files, or directories scanned for `*.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected rope-chain, cloth-grid or two-material-block".to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_instability() => 3,
        Some(Error::TrainingAborted(_)) => 4,
        Some(Error::Io { .. } | Error::Parse { .. }) => 2,
        Some(e) if e.is_validation() => 2,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Consistency(a) => cmd_consistency(a),
        Command::Serve(a) => serve::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if code == 3 {
                eprintln!("hint: the simulation blew up; try a smaller --dt, more --substeps or softer stiffness");
            }
            ExitCode::from(code)
        }
    }
}

/// `runs/rope.scene.json` + `.gt.json` -> `runs/rope.gt.json`.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let stem = name.split('.').next().filter(|s| !s.is_empty()).unwrap_or(name);
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let mut spec: SyntheticSpec = match (&a.spec, a.preset) {
        (Some(path), _) => corpus::read_document(path, &["preset"])?,
        (None, Some(p)) => SyntheticSpec::preset(p),
        (None, None) => anyhow::bail!(Error::InvalidInput("give a spec file or --preset".into())),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(frames) = a.frames {
        spec.frames = frames;
    }
    let (scene, sidecar) = gen_synthetic(&spec)?;
    let sidecar_path = a.sidecar.unwrap_or_else(|| with_suffix(&a.out, ".gt.json"));
    save_scene(&scene, &a.out)?;
    write_json(&sidecar, &sidecar_path)?;
    println!(
        "scene {} ({} points, {} frames, seed {}) -> {}",
        scene.meta.id,
        scene.point_count(),
        scene.frames(),
        spec.seed,
        a.out.display()
    );
    println!("ground truth -> {}", sidecar_path.display());
    Ok(())
}

#[derive(Serialize)]
struct LogHeader<'a> {
    seed: u64,
    epochs: usize,
    lr: f64,
    lambda_trk: f64,
    lambda_cham: f64,
    lambda_prior: f64,
    disable_codebook: bool,
    disable_prior: bool,
    disable_parts: bool,
    scenes: Vec<&'a str>,
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    tracking: f64,
    chamfer: f64,
    prior: f64,
    total: f64,
    skipped: usize,
    grad_norm: f64,
    wall_seconds: f64,
}

fn load_prepared(paths: &[PathBuf], model: &Model, opts: &PrepareOptions) -> anyhow::Result<Vec<PreparedScene>> {
    paths
        .iter()
        .map(|p| {
            let scene = load_scene(p)?;
            Ok(prepare(&scene, &model.ranges, opts)?)
        })
        .collect()
}

fn cmd_fit(a: FitArgs) -> anyhow::Result<()> {
    let weights = LossWeights {
        lambda_trk: a.lambda_trk,
        lambda_cham: a.lambda_cham,
        lambda_prior: if a.disable_prior { 0.0 } else { a.lambda_prior },
    };
    weights.validate()?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let model = Model::new(a.seed, !a.disable_codebook);
    let opts = a.sim.options();
    let scenes = load_prepared(&a.scenes, &model, &opts)?;
    let config = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        weights,
        parallel: scenes.len() > 1,
        ..TrainConfig::default()
    };
    let outcome = train(model, &scenes, &config)?;

    let mut ckpt = Checkpoint::from_model(&outcome.model, a.seed);
    ckpt.disable_parts = a.sim.disable_parts;
    save_checkpoint(&ckpt, &a.out)?;

    let header = LogHeader {
        seed: a.seed,
        epochs: a.epochs,
        lr: a.lr,
        lambda_trk: weights.lambda_trk,
        lambda_cham: weights.lambda_cham,
        lambda_prior: weights.lambda_prior,
        disable_codebook: a.disable_codebook,
        disable_prior: a.disable_prior,
        disable_parts: a.sim.disable_parts,
        scenes: scenes.iter().map(|s| s.id.as_str()).collect(),
    };
    let mut log = serde_json::to_string(&serde_json::json!({ "header": header }))?;
    log.push('\n');
    for r in &outcome.history {
        log.push_str(&serde_json::to_string(&LogLine {
            epoch: r.epoch,
            tracking: r.loss.tracking,
            chamfer: r.loss.chamfer,
            prior: r.loss.prior,
            total: r.loss.total,
            skipped: r.skipped,
            grad_norm: r.grad_norm,
            wall_seconds: r.wall_seconds,
        })?);
        log.push('\n');
    }
    std::fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;

    if let Some(dir) = &a.summaries {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for s in &scenes {
            let params = predict(&outcome.model, s)?;
            let summary = summarize(s, &params, a.seed);
            write_json(&summary, &dir.join(format!("{}.summary.json", s.id)))?;
        }
    }

    let first = outcome.history.first().map(|r| r.loss.total).unwrap_or(f64::NAN);
    let last = outcome.history.last().expect("at least one epoch").loss;
    println!("seed {}  epochs run {}{}", a.seed, outcome.history.len(), if outcome.stopped_early { " (early stop)" } else { "" });
    println!("{:<10} {:>14}", "loss", "final");
    println!("{:<10} {:>14.6e}", "tracking", last.tracking);
    println!("{:<10} {:>14.6e}", "chamfer", last.chamfer);
    println!("{:<10} {:>14.6e}", "prior", last.prior);
    println!("{:<10} {:>14.6e}  (initial {:.6e})", "total", last.total, first);
    println!("checkpoint -> {}", a.out.display());
    println!("log -> {}", log_path.display());
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model();
    let mut opts = a.sim.options();
    opts.disable_parts |= ckpt.disable_parts;
    let start = Instant::now();
    let prepared = prepare(&scene, &model.ranges, &opts)?;
    let frames = a.frames.unwrap_or(scene.frames());
    let (_, out) = feed_forward(&model, &prepared, frames)?;
    let seconds = start.elapsed().as_secs_f64();
    let file = TrajectoryFile {
        version: FORMAT_VERSION,
        scene_id: scene.meta.id.clone(),
        seed: a.seed,
        frame_rate: scene.meta.frame_rate,
        inference_seconds: seconds,
        trajectory: out.trajectory.iter().map(|f| f.iter().map(from_vec3).collect()).collect(),
    };
    write_json(&file, &a.out)?;
    println!(
        "{} frames of {} (seed {}) in {:.3} s -> {}",
        frames,
        scene.meta.id,
        a.seed,
        seconds,
        a.out.display()
    );
    Ok(())
}

fn print_eval(r: &EvalReport) {
    println!("scene {}", r.scene_id);
    println!("{:<14} {:>7} {:>14} {:>14}", "split", "frames", "chamfer (m)", "track (m)");
    println!(
        "{:<14} {:>7} {:>14.6e} {:>14.6e}",
        "resimulation", r.resimulation.frames, r.resimulation.chamfer, r.resimulation.track
    );
    match &r.future {
        Some(f) => println!("{:<14} {:>7} {:>14.6e} {:>14.6e}", "future", f.frames, f.chamfer, f.track),
        None => println!("{:<14} {:>7} {:>14} {:>14}", "future", 0, "-", "-"),
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let scene = load_scene(&a.scene)?;
    let traj = load_trajectory(&a.trajectory)?;
    let frames: Vec<Vec<_>> = traj.trajectory.iter().map(|f| f.iter().map(corpus::to_vec3).collect()).collect();
    let report = evaluate(&scene, &frames)?;
    print_eval(&report);
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    Ok(())
}

fn summary_files(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn print_consistency(r: &ConsistencyReport) {
    println!("{:<12} {:>6} {:<26} {:>12} {:>12} {:>10}", "category", "scenes", "parameter", "mean", "std", "cv");
    for c in &r.categories {
        for p in &c.params {
            println!(
                "{:<12} {:>6} {:<26} {:>12.5} {:>12.5} {:>10.4}",
                c.category, c.scenes, p.name, p.mean, p.std, p.cv
            );
        }
    }
    for s in &r.skipped {
        println!("{s:<12} skipped (single scene)");
    }
}

fn cmd_consistency(a: ConsistencyArgs) -> anyhow::Result<()> {
    let files = summary_files(&a.inputs)?;
    let fits = files
        .iter()
        .map(|f| corpus::read_document::<FitSummary>(f, &["scene_id", "category"]))
        .collect::<Result<Vec<_>, _>>()?;
    let report = consistency_report(&fits)?;
    print_consistency(&report);
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    Ok(())
}
