//! End-to-end runs: pretraining, position selection, bridge and baseline
//! training, evaluation on the held-out split, and ablations.

pub mod artifacts;
pub mod config;
pub mod report;

pub use config::ExperimentConfig;
pub use report::{
    export_ablation, export_report, AblationReport, AblationRow, ExportFormat, MethodReport, ParameterEfficiency,
    PositionSelection, SeedResult, Stat, TransferReport,
};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{grid_search, BridgeParams};
use crate::data::{
    generate_paired_dataset, load_dataset, split_dataset, subsample_pair_fraction, DatasetSplits, LabelUse,
    PairedDataset,
};
use crate::error::{Error, Result};
use crate::metrics::MetricSet;
use crate::model::{
    argmax_rows, batched, predict, pretrain_regression, pretrain_supervised, EncoderModel, TaskHead, TrainConfig,
};
use crate::probing::{pseudo_labels, select_input_position};
use crate::tensor::Tensor;
use crate::transfer::{
    bridge_spec_for, init_bridge_for, random_baseline, select_output_position, train_bridge, train_kd,
    train_kd_contrast, Bridged, EvalSet, Positions, TrainingHistory,
};

use report::HistorySummary;

/// Environment variable holding the number of parallel worker slots.
pub const WORKERS_ENV: &str = "MODELBRIDGE_WORKERS";

/// Offset separating the foundation corpus seed from the task dataset seed.
const FOUNDATION_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(tag)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Wall-clock measurements, kept apart from the deterministic report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub seeds: Vec<SeedTiming>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub stages: Vec<StageTime>,
}

struct Clock {
    stages: Vec<StageTime>,
}

impl Clock {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.stages.push(StageTime {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// The configured task dataset, loaded or generated.
pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<PairedDataset> {
    match &cfg.data.file {
        Some(path) => Ok(load_dataset(path)?.dataset),
        None => generate_paired_dataset(
            &cfg.data.task_spec(),
            &cfg.data.old_modality,
            &cfg.data.new_modality,
            cfg.data.seed,
        )
        .map_err(|e| Error::Config(e.to_string())),
    }
}

/// Everything a seed's methods share: its splits and the frozen pretrained models.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub classes: usize,
    pub splits: DatasetSplits,
    pub teacher: EncoderModel,
    pub head: TaskHead,
    /// New-modality encoder pretrained without task labels.
    pub foundation: EncoderModel,
    /// Teacher predictions on the paired split.
    pub pseudo: Vec<usize>,
    pub timing: Vec<StageTime>,
}

impl SeedContext {
    /// Same models, with the paired split reduced to `fraction` of its size.
    pub fn with_pair_fraction(&self, data: &PairedDataset, fraction: f64) -> Result<Self> {
        let splits = subsample_pair_fraction(&self.splits, data, fraction, sub_seed(self.seed, 7))?;
        let pseudo = pseudo_labels(&self.teacher, &self.head, splits.pair.x_a()?)?;
        Ok(Self {
            splits,
            pseudo,
            timing: Vec::new(),
            ..self.clone()
        })
    }

    fn new_labels(&self) -> Result<&[usize]> {
        self.splits.new.labels(LabelUse::Evaluation)
    }

    fn evaluate(&self, probs: &Tensor) -> Result<MetricSet> {
        MetricSet::compute(self.new_labels()?, &argmax_rows(probs), self.classes)
    }
}

/// Splits the data for `seed`, trains the teacher on the old split and
/// pretrains the new-modality encoder on a disjoint unlabeled corpus.
pub fn prepare_seed(cfg: &ExperimentConfig, data: &PairedDataset, seed: u64) -> Result<SeedContext> {
    let mut clock = Clock { stages: Vec::new() };
    let classes = data.task.classes;
    let ratios = cfg.data.normalized_ratios()?;
    let splits = clock.time("split", || {
        let s = split_dataset(data, ratios, cfg.data.split_mode, seed)?;
        if cfg.experiment.pair_fraction < 1.0 {
            subsample_pair_fraction(&s, data, cfg.experiment.pair_fraction, sub_seed(seed, 7))
        } else {
            Ok(s)
        }
    })?;
    let p = &cfg.pretrain;
    let (teacher, head) = clock.time("pretrain-teacher", || {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
        let old = &data.mod_a;
        let mut teacher = EncoderModel::build(cfg.models.old_arch, &old.name, old.sample_shape(), &mut rng)?;
        let (_, d) = teacher.shape_after(teacher.layer_count())?;
        let mut head = TaskHead::new(d, classes, 1.0 / (d as f64).sqrt(), &mut rng);
        let tc = TrainConfig {
            epochs: p.teacher_epochs,
            lr: p.teacher_lr,
            batch_size: p.batch_size,
            seed: sub_seed(seed, 2),
        };
        pretrain_supervised(
            &mut teacher,
            &mut head,
            splits.old.x_a()?,
            splits.old.labels(LabelUse::Training)?,
            &tc,
        )?;
        Ok((teacher, head))
    })?;
    let foundation = clock.time("pretrain-foundation", || {
        let mut task = data.task.clone();
        task.subjects = p.foundation_subjects;
        let corpus = generate_paired_dataset(&task, &data.mod_a, &data.mod_b, data.seed ^ FOUNDATION_SEED_OFFSET)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3));
        let new = &data.mod_b;
        let mut enc = EncoderModel::build(cfg.models.new_arch, &new.name, new.sample_shape(), &mut rng)?;
        let (_, d) = enc.shape_after(enc.layer_count())?;
        let k = task.latent_dim;
        let mut readout = TaskHead::new(d, k, 1.0 / (d as f64).sqrt(), &mut rng);
        let tc = TrainConfig {
            epochs: p.foundation_epochs,
            lr: p.foundation_lr,
            batch_size: p.batch_size,
            seed: sub_seed(seed, 4),
        };
        pretrain_regression(&mut enc, &mut readout, &corpus.x_b, &corpus.latents, &tc)?;
        Ok(enc)
    })?;
    let pseudo = clock.time("pseudo-labels", || pseudo_labels(&teacher, &head, splits.pair.x_a()?))?;
    Ok(SeedContext {
        seed,
        classes,
        splits,
        teacher,
        head,
        foundation,
        pseudo,
        timing: clock.stages,
    })
}

/// Stage 1 (probing) and stage 2 (CKA) on the paired split, unless fixed by config.
pub fn select_positions(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<PositionSelection> {
    let pair = &ctx.splits.pair;
    let (x_old, x_new) = (pair.x_a()?, pair.x_b()?);
    let mut warnings = Vec::new();
    let (m, probe_scores) = match cfg.bridge.input_position {
        Some(m) => (m, Vec::new()),
        None => {
            let probe = cfg.probe.probe_config(sub_seed(ctx.seed, 5));
            let c = select_input_position(&ctx.foundation, x_new, &ctx.pseudo, ctx.classes, &probe)?;
            warnings.extend(c.warning);
            (c.position, c.scores)
        }
    };
    let (l, cka_scores) = match cfg.bridge.output_position {
        Some(l) => (l, Vec::new()),
        None => {
            let h = batched(x_new, 256, |b| ctx.foundation.eval_prefix(b, m))?;
            let c = select_output_position(
                &h,
                &ctx.teacher,
                x_old,
                cfg.probe.row_cap,
                sub_seed(ctx.seed, 6),
                cfg.bridge.criterion,
            )?;
            (c.position, c.scores)
        }
    };
    Positions { m, l }.validate(&ctx.foundation, &ctx.teacher)?;
    Ok(PositionSelection {
        m,
        l,
        probe_scores,
        cka_scores,
        warnings,
    })
}

/// Trains one bridge at `positions` with the given size.
pub fn fit_bridge(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    positions: Positions,
    rank: usize,
    prototypes: usize,
) -> Result<(BridgeParams, TrainingHistory)> {
    let pair = &ctx.splits.pair;
    let b = &cfg.bridge;
    let bridge = init_bridge_for(
        &ctx.foundation,
        &ctx.teacher,
        pair.x_a()?,
        positions,
        rank,
        prototypes,
        b.init,
        b.pool,
        b.batch_size,
        sub_seed(ctx.seed, 8),
    )?;
    let val = &ctx.splits.val;
    let val_set = if val.is_empty() {
        None
    } else {
        Some(EvalSet {
            x: val.x_b()?,
            labels: val.labels(LabelUse::Evaluation)?,
        })
    };
    train_bridge(
        &ctx.teacher,
        &ctx.foundation,
        &ctx.head,
        pair.x_a()?,
        pair.x_b()?,
        positions,
        bridge,
        &b.train_config(sub_seed(ctx.seed, 9)),
        val_set,
    )
}

fn summarize(h: &TrainingHistory) -> HistorySummary {
    HistorySummary {
        epochs: h.epoch_loss.len(),
        first_loss: h.epoch_loss.first().copied().unwrap_or(0.0),
        final_loss: h.epoch_loss.last().copied().unwrap_or(0.0),
        final_val_bacc: h.val_metric.last().copied(),
        zero_norm_rows: h.zero_norm_rows,
    }
}

pub fn evaluate_bridge(ctx: &SeedContext, bridge: &BridgeParams, positions: Positions) -> Result<MetricSet> {
    let probs = Bridged {
        new_model: &ctx.foundation,
        teacher: &ctx.teacher,
        head: &ctx.head,
        bridge,
        positions,
    }
    .predict(ctx.splits.new.x_b()?)?;
    ctx.evaluate(&probs)
}

/// Full bridge method: position selection, optional (rank, prototypes) grid on
/// the validation split, training and test evaluation.
pub fn run_bridge(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<SeedResult> {
    let sel = select_positions(cfg, ctx).map_err(|e| e.in_stage("select-positions"))?;
    let positions = Positions { m: sel.m, l: sel.l };
    let b = &cfg.bridge;
    let (bridge, history, grid) = if !b.grid_ranks.is_empty() && !b.grid_prototypes.is_empty() {
        let mut best: Option<(f64, BridgeParams, TrainingHistory)> = None;
        let grid = grid_search(&b.grid_ranks, &b.grid_prototypes, |r, np| {
            let (bridge, hist) = fit_bridge(cfg, ctx, positions, r, np)?;
            let score = hist
                .val_metric
                .last()
                .copied()
                .ok_or_else(|| Error::invalid("grid search needs a non-empty validation split"))?;
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, bridge, hist));
            }
            Ok(score)
        })
        .map_err(|e| e.in_stage("grid-search"))?;
        let (_, bridge, hist) = best.expect("grid has at least one cell");
        (bridge, hist, Some(grid))
    } else {
        let (bridge, hist) =
            fit_bridge(cfg, ctx, positions, b.rank, b.prototypes).map_err(|e| e.in_stage("train-bridge"))?;
        (bridge, hist, None)
    };
    let metrics = evaluate_bridge(ctx, &bridge, positions).map_err(|e| e.in_stage("evaluate"))?;
    let (n_m, _) = ctx.foundation.shape_after(positions.m)?;
    Ok(SeedResult {
        seed: ctx.seed,
        metrics,
        params: bridge.param_count(),
        positions: Some(positions),
        full_rank_params: Some(bridge.spec().full_rank_param_count(n_m)),
        history: Some(summarize(&history)),
        selection: Some(sel),
        grid,
    })
}

fn plain_result(ctx: &SeedContext, metrics: MetricSet, params: usize, history: Option<HistorySummary>) -> SeedResult {
    SeedResult {
        seed: ctx.seed,
        metrics,
        params,
        positions: None,
        full_rank_params: None,
        history,
        selection: None,
        grid: None,
    }
}

/// Runs one method for one prepared seed.
pub fn run_method(cfg: &ExperimentConfig, ctx: &SeedContext, method: &str) -> Result<SeedResult> {
    let pair = &ctx.splits.pair;
    let test = &ctx.splits.new;
    let base = cfg.baseline.baseline_config(sub_seed(ctx.seed, 10));
    match method {
        "bridge" => run_bridge(cfg, ctx),
        "oracle" => {
            let probs = predict(&ctx.teacher, &ctx.head, test.x_a()?)?;
            let params = ctx.teacher.param_count() + ctx.head.param_count();
            Ok(plain_result(ctx, ctx.evaluate(&probs)?, params, None))
        }
        "kd" => {
            let s = train_kd(&ctx.foundation, &ctx.teacher, &ctx.head, pair.x_a()?, pair.x_b()?, &base)
                .map_err(|e| e.in_stage("train-kd"))?;
            let m = ctx.evaluate(&s.predict(test.x_b()?)?)?;
            Ok(plain_result(ctx, m, s.trainable_params(), Some(summarize(&s.history))))
        }
        "kd-contrast" => {
            let s = train_kd_contrast(&ctx.foundation, &ctx.teacher, pair.x_a()?, pair.x_b()?, &base)
                .map_err(|e| e.in_stage("train-kd-contrast"))?;
            let m = ctx.evaluate(&s.predict(&ctx.head, test.x_b()?)?)?;
            Ok(plain_result(ctx, m, s.trainable_params(), Some(summarize(&s.history))))
        }
        "random" => {
            let pred = random_baseline(ctx.classes, test.len(), sub_seed(ctx.seed, 11))?;
            let m = MetricSet::compute(ctx.new_labels()?, &pred, ctx.classes)?;
            Ok(plain_result(ctx, m, 0, None))
        }
        other => Err(Error::Config(format!("unknown method `{other}`"))),
    }
}

fn input_modality<'a>(method: &str, data: &'a PairedDataset) -> &'a str {
    if method == "oracle" {
        &data.mod_a.name
    } else {
        &data.mod_b.name
    }
}

/// Worker pool sized by [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV}={v} is not a positive integer")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

pub fn seed_list(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.experiment.seeds as u64).map(|i| cfg.experiment.base_seed + i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub report: TransferReport,
    pub timing: TimingReport,
    pub failures: Vec<SeedFailure>,
    /// First failure, kept for its exit status.
    pub first_error: Option<Error>,
}

const NOTE_CRITERION: &str = "bridge output position: old layer with the highest linear CKA to the tapped \
    new-modality representation; set bridge.criterion = \"min\" for the argmin reading of the selection rule";
const NOTE_PARAMS: &str = "params counts trainable parameters; the oracle row counts the supervised old-modality model";

/// Assembles the report from per-seed results in config method order.
pub fn assemble_report(
    cfg: &ExperimentConfig,
    data: &PairedDataset,
    per_seed: &[(u64, Vec<(String, SeedResult)>)],
    partial: bool,
) -> TransferReport {
    let methods: Vec<MethodReport> = cfg
        .experiment
        .methods
        .iter()
        .map(|m| {
            let rows = per_seed
                .iter()
                .filter_map(|(_, rs)| rs.iter().find(|(id, _)| id == m).map(|(_, r)| r.clone()))
                .collect();
            MethodReport::aggregate(m, input_modality(m, data), rows)
        })
        .collect();
    let find = |id: &str| methods.iter().find(|m| m.method == id && m.seeds > 0);
    let parameter_efficiency = match (find("bridge"), find("kd")) {
        (Some(b), Some(k)) => {
            let ratio = b.params as f64 / k.params as f64;
            Some(ParameterEfficiency {
                bridge_params: b.params,
                kd_params: k.params,
                ratio,
                full_rank_params: b.per_seed.iter().filter_map(|s| s.full_rank_params).max().unwrap_or(0),
                within_15_percent: ratio < 0.15,
            })
        }
        _ => None,
    };
    TransferReport {
        config: cfg.clone(),
        methods,
        parameter_efficiency,
        notes: vec![NOTE_CRITERION.to_string(), NOTE_PARAMS.to_string()],
        partial,
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: &PairedDataset,
    seed: u64,
) -> Result<(Vec<(String, SeedResult)>, Vec<StageTime>)> {
    let ctx = prepare_seed(cfg, data, seed)?;
    run_prepared(cfg, &ctx)
}

/// Runs every configured method on an already prepared seed.
pub fn run_prepared(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<(Vec<(String, SeedResult)>, Vec<StageTime>)> {
    let mut clock = Clock {
        stages: ctx.timing.clone(),
    };
    let mut out = Vec::new();
    for m in &cfg.experiment.methods {
        let r = clock.time(m, || run_method(cfg, ctx, m))?;
        out.push((m.clone(), r));
    }
    Ok((out, clock.stages))
}

/// The whole pipeline for every seed, in parallel worker slots. Seeds that
/// fail are listed in `failures`; the report then covers the rest and is
/// marked partial. An error is returned only when no seed completes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_or_generate(cfg)?;
    let seeds = seed_list(cfg);
    let pool = worker_pool()?;
    let results: Vec<_> = pool.install(|| seeds.par_iter().map(|&s| (s, run_seed(cfg, &data, s))).collect());
    collect_output(cfg, &data, results, start)
}

/// As [`run_experiment`], reusing contexts prepared earlier.
pub fn run_experiment_with(cfg: &ExperimentConfig, data: &PairedDataset, contexts: &[SeedContext]) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let pool = worker_pool()?;
    let results: Vec<_> = pool.install(|| contexts.par_iter().map(|c| (c.seed, run_prepared(cfg, c))).collect());
    collect_output(cfg, data, results, start)
}

type SeedRun = (u64, Result<(Vec<(String, SeedResult)>, Vec<StageTime>)>);

fn collect_output(
    cfg: &ExperimentConfig,
    data: &PairedDataset,
    results: Vec<SeedRun>,
    start: Instant,
) -> Result<ExperimentOutput> {
    let mut ok = Vec::new();
    let mut timing = TimingReport::default();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (seed, r) in results {
        match r {
            Ok((rows, stages)) => {
                ok.push((seed, rows));
                timing.seeds.push(SeedTiming { seed, stages });
            }
            Err(e) => {
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(first_error.expect("no seeds means validation failed earlier"));
    }
    timing.total_seconds = start.elapsed().as_secs_f64();
    Ok(ExperimentOutput {
        report: assemble_report(cfg, data, &ok, !failures.is_empty()),
        timing,
        failures,
        first_error,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Rank,
    Prototypes,
    Pairsize,
    Positions,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Self::Rank),
            "prototypes" => Ok(Self::Prototypes),
            "pairsize" => Ok(Self::Pairsize),
            "positions" => Ok(Self::Positions),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rank => "rank",
            Self::Prototypes => "prototypes",
            Self::Pairsize => "pairsize",
            Self::Positions => "positions",
        }
    }
}

/// `{1, ⌈count/2⌉, count}`, deduplicated for very shallow models.
pub fn fixed_layers(count: usize) -> Vec<usize> {
    let mut v = vec![1, count.div_ceil(2), count];
    v.dedup();
    v
}

#[derive(Clone, Debug)]
struct Cell {
    label: String,
    rank: usize,
    prototypes: usize,
    fraction: f64,
    positions: Option<Positions>,
}

struct CellOutcome {
    metrics: MetricSet,
    params: usize,
    positions: Positions,
}

fn run_cell(cfg: &ExperimentConfig, data: &PairedDataset, ctx: &SeedContext, cell: &Cell) -> Result<CellOutcome> {
    let reduced;
    let ctx = if cell.fraction < 1.0 {
        reduced = ctx.with_pair_fraction(data, cell.fraction)?;
        &reduced
    } else {
        ctx
    };
    let positions = match cell.positions {
        Some(p) => p,
        None => {
            let s = select_positions(cfg, ctx)?;
            Positions { m: s.m, l: s.l }
        }
    };
    let (bridge, _) = fit_bridge(cfg, ctx, positions, cell.rank, cell.prototypes)?;
    Ok(CellOutcome {
        metrics: evaluate_bridge(ctx, &bridge, positions)?,
        params: bridge.param_count(),
        positions,
    })
}

fn row_from(cell: &Cell, outcomes: Vec<Result<CellOutcome>>) -> AblationRow {
    let mut bacc = Vec::new();
    let mut f1m = Vec::new();
    let mut f1w = Vec::new();
    let mut params = 0;
    let mut failures = Vec::new();
    let mut positions = cell.positions;
    for o in outcomes {
        match o {
            Ok(c) => {
                bacc.push(c.metrics.balanced_accuracy);
                f1m.push(c.metrics.f1_macro);
                f1w.push(c.metrics.f1_weighted);
                params = params.max(c.params);
                positions.get_or_insert(c.positions);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    AblationRow {
        label: cell.label.clone(),
        rank: cell.rank,
        prototypes: cell.prototypes,
        pair_fraction: cell.fraction,
        positions,
        balanced_accuracy: Stat::of(&bacc),
        f1_macro: Stat::of(&f1m),
        f1_weighted: Stat::of(&f1w),
        params,
        per_seed_bacc: bacc,
        failures,
    }
}

/// Ablation over prepared seed contexts. Cells run in parallel worker slots;
/// a failed cell is recorded and left out of its row's statistics.
pub fn ablate_with(
    cfg: &ExperimentConfig,
    data: &PairedDataset,
    contexts: &[SeedContext],
    kind: AblationKind,
) -> Result<AblationReport> {
    let b = &cfg.bridge;
    let cell = |label: String, rank, prototypes, fraction, positions| Cell {
        label,
        rank,
        prototypes,
        fraction,
        positions,
    };
    let first = contexts.first().ok_or_else(|| Error::invalid("ablation needs at least one seed"))?;
    let mut cells: Vec<Cell> = match kind {
        AblationKind::Rank => {
            let ranks = if b.grid_ranks.is_empty() { vec![1, 2, 4, 8, 16] } else { b.grid_ranks.clone() };
            ranks.into_iter().map(|r| cell(format!("r={r}"), r, b.prototypes, 1.0, None)).collect()
        }
        AblationKind::Prototypes => {
            let nps = if b.grid_prototypes.is_empty() { vec![2, 4, 8, 16, 32] } else { b.grid_prototypes.clone() };
            nps.into_iter().map(|np| cell(format!("Np={np}"), b.rank, np, 1.0, None)).collect()
        }
        AblationKind::Pairsize => cfg
            .experiment
            .pair_fractions
            .iter()
            .map(|&f| cell(format!("fraction={f}"), b.rank, b.prototypes, f, None))
            .collect(),
        AblationKind::Positions => {
            let (mm, ll) = (first.foundation.layer_count(), first.teacher.layer_count());
            if mm < 3 || ll < 3 {
                return Err(Error::Config("positions ablation needs models with at least 3 layers".into()));
            }
            let mut v = Vec::new();
            for &m in &fixed_layers(mm) {
                for &l in &fixed_layers(ll) {
                    v.push(cell(format!("m={m},l={l}"), b.rank, b.prototypes, 1.0, Some(Positions { m, l })));
                }
            }
            v
        }
    };
    if kind == AblationKind::Positions {
        cells.push(cell("selected".into(), b.rank, b.prototypes, 1.0, None));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..contexts.len()).map(move |s| (c, s))).collect();
    let pool = worker_pool()?;
    let mut outcomes: Vec<Option<Result<CellOutcome>>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| Some(run_cell(cfg, data, &contexts[s], &cells[c])))
            .collect()
    });
    let mut rows: Vec<AblationRow> = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let per: Vec<Result<CellOutcome>> = (0..contexts.len())
                .map(|s| outcomes[c * contexts.len() + s].take().expect("each job ran once"))
                .collect();
            let mut row = row_from(cell, per);
            if cell.positions.is_none() && kind != AblationKind::Positions {
                row.positions = None;
            }
            row
        })
        .collect();
    let (selected, fixed_average) = if kind == AblationKind::Positions {
        let mut sel = rows.pop().expect("selected row present");
        sel.positions = None;
        let means: Vec<f64> = rows
            .iter()
            .filter(|r| !r.per_seed_bacc.is_empty())
            .map(|r| r.balanced_accuracy.mean)
            .collect();
        (Some(sel), Some(Stat::of(&means)))
    } else {
        (None, None)
    };
    Ok(AblationReport {
        kind: kind.name().to_string(),
        rows,
        selected,
        fixed_average,
    })
}

/// Prepares every seed (in parallel) and runs the ablation.
pub fn run_ablation(cfg: &ExperimentConfig, kind: AblationKind) -> Result<AblationReport> {
    cfg.validate()?;
    let data = load_or_generate(cfg)?;
    let contexts = prepare_all(cfg, &data)?;
    ablate_with(cfg, &data, &contexts, kind)
}

pub fn prepare_all(cfg: &ExperimentConfig, data: &PairedDataset) -> Result<Vec<SeedContext>> {
    let pool = worker_pool()?;
    pool.install(|| {
        seed_list(cfg)
            .par_iter()
            .map(|&s| prepare_seed(cfg, data, s))
            .collect()
    })
}

/// Bridge size at given positions, without training.
pub fn bridge_param_count(ctx: &SeedContext, positions: Positions, rank: usize, prototypes: usize) -> Result<usize> {
    Ok(bridge_spec_for(&ctx.foundation, &ctx.teacher, positions, rank, prototypes)?.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_layer_sets() {
        assert_eq!(fixed_layers(5), vec![1, 3, 5]);
        assert_eq!(fixed_layers(4), vec![1, 2, 4]);
        assert_eq!(fixed_layers(3), vec![1, 2, 3]);
    }

    #[test]
    fn ablation_names() {
        for k in ["rank", "prototypes", "pairsize", "positions"] {
            assert_eq!(AblationKind::parse(k).unwrap().name(), k);
        }
        assert!(AblationKind::parse("depth").is_err());
    }
}
