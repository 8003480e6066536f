use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use modelbridge::data::PairedDataset;
use modelbridge::experiment::artifacts::{self, seed_dir};
use modelbridge::experiment::report::{ablation_text, to_text};
use modelbridge::experiment::{
    ablate_with, evaluate_bridge, export_ablation, export_report, fit_bridge, load_or_generate, prepare_seed,
    run_experiment_with, run_method, seed_list, select_positions, worker_pool, AblationKind, ExperimentConfig,
    ExportFormat, SeedContext, SeedFailure, TransferReport,
};
use modelbridge::transfer::Positions;
use modelbridge::{Error, Result};

#[derive(Parser)]
#[command(name = "modelbridge", version, about = "Bridge frozen encoders across sensor modalities")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds, starting at --seed or the configured base seed.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Output directory (default: experiment.out, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Export format: json, jsonl, csv or text.
    #[arg(long, global = true, default_value = "text")]
    format: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the old-modality teacher and pretrain the new-modality encoder.
    Pretrain,
    /// Pick the bridge input and output layers.
    SelectPositions,
    /// Train a bridge at the selected (or configured) positions.
    TrainBridge,
    /// Train and evaluate a baseline.
    TrainBaseline {
        #[arg(long, value_enum, default_value = "kd")]
        method: Baseline,
    },
    /// Run every configured method and write the report.
    Evaluate,
    /// Sweep one bridge setting.
    Ablate {
        #[arg(value_enum)]
        kind: Ablation,
    },
    /// Re-export an existing report.json.
    Report {
        /// Report to read (default: <out>/report.json).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Kd,
    KdContrast,
    Random,
}

impl Baseline {
    fn id(self) -> &'static str {
        match self {
            Baseline::Kd => "kd",
            Baseline::KdContrast => "kd-contrast",
            Baseline::Random => "random",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Rank,
    Prototypes,
    Pairsize,
    Positions,
}

impl Ablation {
    fn kind(self) -> AblationKind {
        match self {
            Ablation::Rank => AblationKind::Rank,
            Ablation::Prototypes => AblationKind::Prototypes,
            Ablation::Pairsize => AblationKind::Pairsize,
            Ablation::Positions => AblationKind::Positions,
        }
    }
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    command: &'a str,
    error: String,
    exit_code: i32,
    seeds: Vec<SeedFailure>,
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    format: ExportFormat,
}

fn setup(cli: &Cli) -> Result<Run> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.experiment.base_seed = s;
        cfg.experiment.seeds = 1;
    }
    if let Some(k) = cli.seeds {
        cfg.experiment.seeds = k;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.experiment.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let format = ExportFormat::parse(&cli.format)?;
    Ok(Run { cfg, out, format })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretrained state for one seed: reloaded when current, otherwise trained and saved.
fn obtain(run: &Run, data: &PairedDataset, seed: u64) -> Result<SeedContext> {
    if artifacts::has_seed(&run.cfg, &run.out, seed) {
        return Ok(artifacts::load_seed(&run.cfg, &run.out, seed)?.1);
    }
    let ctx = prepare_seed(&run.cfg, data, seed)?;
    artifacts::save_seed(&run.cfg, data, &ctx, &run.out)?;
    Ok(ctx)
}

/// Contexts for every seed, prepared in parallel; failed seeds are returned separately.
fn obtain_all(run: &Run, data: &PairedDataset) -> Result<(Vec<SeedContext>, Vec<(u64, Error)>)> {
    let pool = worker_pool()?;
    let results: Vec<(u64, Result<SeedContext>)> = pool.install(|| {
        seed_list(&run.cfg)
            .par_iter()
            .map(|&s| (s, obtain(run, data, s)))
            .collect()
    });
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in results {
        match r {
            Ok(c) => ok.push(c),
            Err(e) => failed.push((s, e)),
        }
    }
    Ok((ok, failed))
}

fn failures(failed: &[(u64, Error)]) -> Vec<SeedFailure> {
    failed
        .iter()
        .map(|(seed, e)| SeedFailure {
            seed: *seed,
            error: e.to_string(),
            exit_code: e.exit_code(),
        })
        .collect()
}

/// Runs `f` for each seed in order, stopping at the first error.
fn per_seed(run: &Run, mut f: impl FnMut(&SeedContext) -> Result<()>) -> Result<()> {
    let data = load_or_generate(&run.cfg)?;
    for seed in seed_list(&run.cfg) {
        let ctx = obtain(run, &data, seed)?;
        f(&ctx)?;
    }
    Ok(())
}

fn positions_for(run: &Run, ctx: &SeedContext) -> Result<Positions> {
    let sel = match artifacts::load_positions(&run.out, ctx.seed)? {
        Some(s) => s,
        None => {
            let s = select_positions(&run.cfg, ctx)?;
            artifacts::save_positions(&run.out, ctx.seed, &s)?;
            s
        }
    };
    Ok(Positions { m: sel.m, l: sel.l })
}

fn fmt_scores<T: std::fmt::Display>(v: impl Iterator<Item = T>) -> String {
    v.map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
}

fn pretrain(run: &Run) -> Result<()> {
    let data = load_or_generate(&run.cfg)?;
    let pool = worker_pool()?;
    let results: Vec<Result<(u64, PathBuf)>> = pool.install(|| {
        seed_list(&run.cfg)
            .par_iter()
            .map(|&s| {
                let ctx = prepare_seed(&run.cfg, &data, s)?;
                Ok((s, artifacts::save_seed(&run.cfg, &data, &ctx, &run.out)?))
            })
            .collect()
    });
    for r in results {
        let (s, dir) = r?;
        println!("seed {s}: pretrained models in {}", dir.display());
    }
    Ok(())
}

fn cmd_select(run: &Run) -> Result<()> {
    per_seed(run, |ctx| {
        let sel = select_positions(&run.cfg, ctx)?;
        artifacts::save_positions(&run.out, ctx.seed, &sel)?;
        println!("seed {}: m={} l={}", ctx.seed, sel.m, sel.l);
        if !sel.probe_scores.is_empty() {
            println!("  probe F1-macro: {}", fmt_scores(sel.probe_scores.iter().map(|s| format!("{s:.4}"))));
        }
        if !sel.cka_scores.is_empty() {
            let cka = sel.cka_scores.iter().map(|s| s.map_or("-".to_string(), |v| format!("{v:.4}")));
            println!("  CKA: {}", fmt_scores(cka));
        }
        for w in &sel.warnings {
            println!("  warning: {w}");
        }
        Ok(())
    })
}

fn cmd_train_bridge(run: &Run) -> Result<()> {
    per_seed(run, |ctx| {
        let pos = positions_for(run, ctx)?;
        let b = &run.cfg.bridge;
        let (bridge, hist) =
            fit_bridge(&run.cfg, ctx, pos, b.rank, b.prototypes).map_err(|e| e.in_stage("train-bridge"))?;
        artifacts::save_bridge(&run.out, ctx, &bridge, pos)?;
        let m = evaluate_bridge(ctx, &bridge, pos)?;
        println!(
            "seed {}: m={} l={} params={} final loss {:.4} test BAcc {:.2}%",
            ctx.seed,
            pos.m,
            pos.l,
            bridge.param_count(),
            hist.epoch_loss.last().copied().unwrap_or(f64::NAN),
            100.0 * m.balanced_accuracy
        );
        Ok(())
    })
}

fn cmd_train_baseline(run: &Run, method: Baseline) -> Result<()> {
    per_seed(run, |ctx| {
        let r = run_method(&run.cfg, ctx, method.id())?;
        write_json(&seed_dir(&run.out, ctx.seed).join(format!("{}.json", method.id())), &r)?;
        println!(
            "seed {}: {} params={} test BAcc {:.2}%",
            ctx.seed,
            method.id(),
            r.params,
            100.0 * r.metrics.balanced_accuracy
        );
        Ok(())
    })
}

fn cmd_evaluate(run: &Run) -> Result<()> {
    let start = Instant::now();
    let data = load_or_generate(&run.cfg)?;
    let (contexts, failed) = obtain_all(run, &data)?;
    let mut seeds = failures(&failed);
    let mut first = failed.into_iter().next().map(|(_, e)| e);
    if contexts.is_empty() {
        *SEED_FAILURES.lock().unwrap() = seeds;
        return Err(first.expect("no seeds means validation failed"));
    }
    let mut output = run_experiment_with(&run.cfg, &data, &contexts)?;
    for c in &contexts {
        if let Some(t) = output.timing.seeds.iter_mut().find(|t| t.seed == c.seed) {
            let mut stages = c.timing.clone();
            stages.append(&mut t.stages);
            t.stages = stages;
        }
    }
    output.timing.total_seconds = start.elapsed().as_secs_f64();
    seeds.append(&mut output.failures);
    first = first.or(output.first_error);
    output.report.partial = !seeds.is_empty();
    export_report(&output.report, &run.out, run.format)?;
    write_json(&run.out.join("timing.json"), &output.timing)?;
    print!("{}", to_text(&output.report));
    match first {
        None => Ok(()),
        Some(e) => {
            *SEED_FAILURES.lock().unwrap() = seeds;
            Err(e)
        }
    }
}

fn cmd_ablate(run: &Run, kind: AblationKind) -> Result<()> {
    let data = load_or_generate(&run.cfg)?;
    let (contexts, failed) = obtain_all(run, &data)?;
    if let Some((_, e)) = failed.into_iter().next() {
        return Err(e);
    }
    let report = ablate_with(&run.cfg, &data, &contexts, kind)?;
    export_ablation(&report, &run.out, run.format)?;
    print!("{}", ablation_text(&report));
    Ok(())
}

fn cmd_report(run: &Run, input: Option<&Path>) -> Result<()> {
    let path = input.map_or_else(|| run.out.join("report.json"), Path::to_path_buf);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: TransferReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    export_report(&report, &run.out, run.format)?;
    print!("{}", to_text(&report));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let run = setup(cli)?;
    match &cli.command {
        Command::Pretrain => pretrain(&run),
        Command::SelectPositions => cmd_select(&run),
        Command::TrainBridge => cmd_train_bridge(&run),
        Command::TrainBaseline { method } => cmd_train_baseline(&run, *method),
        Command::Evaluate => cmd_evaluate(&run),
        Command::Ablate { kind } => cmd_ablate(&run, kind.kind()),
        Command::Report { input } => cmd_report(&run, input.as_deref()),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Pretrain => "pretrain",
        Command::SelectPositions => "select-positions",
        Command::TrainBridge => "train-bridge",
        Command::TrainBaseline { .. } => "train-baseline",
        Command::Evaluate => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
    }
}

/// Per-seed failures from `evaluate`, for the manifest.
static SEED_FAILURES: Mutex<Vec<SeedFailure>> = Mutex::new(Vec::new());

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cli.config.as_deref().and_then(|p| ExperimentConfig::load(p).ok()?.experiment.out))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let manifest = out_dir(&cli).join("failure.json");
    match dispatch(&cli) {
        Ok(()) => {
            let _ = fs::remove_file(&manifest);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            let seeds = std::mem::take(&mut *SEED_FAILURES.lock().unwrap());
            let m = FailureManifest {
                command: command_name(&cli.command),
                error: e.to_string(),
                exit_code: code,
                seeds,
            };
            if let Err(w) = write_json(&manifest, &m) {
                eprintln!("error: cannot write failure manifest: {w}");
            }
            ExitCode::from(code as u8)
        }
    }
}
