//! Report structures, aggregation over seeds and export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::bridge::GridResult;
use crate::error::{Error, Result};
use crate::metrics::MetricSet;
use crate::transfer::Positions;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than 2 seeds.
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = (n >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Self { mean, std }
    }
}

/// Per-layer scores behind the chosen bridge positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionSelection {
    pub m: usize,
    pub l: usize,
    /// Probe macro-F1 for new layers `1..=M` (empty when fixed or skipped).
    pub probe_scores: Vec<f64>,
    /// CKA for old layers `1..=L`; `None` marks degenerate layers.
    pub cka_scores: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub final_val_bacc: Option<f64>,
    pub zero_norm_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: MetricSet,
    pub params: usize,
    pub positions: Option<Positions>,
    /// Dense-map size at the bridge positions, for bridge rows.
    pub full_rank_params: Option<u64>,
    pub history: Option<HistorySummary>,
    pub selection: Option<PositionSelection>,
    pub grid: Option<GridResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub input_modality: String,
    pub seeds: usize,
    pub balanced_accuracy: Stat,
    pub f1_macro: Stat,
    pub f1_weighted: Stat,
    /// Trainable parameters (largest over seeds).
    pub params: usize,
    pub per_seed: Vec<SeedResult>,
}

impl MethodReport {
    pub fn aggregate(method: &str, input_modality: &str, per_seed: Vec<SeedResult>) -> Self {
        let col = |f: fn(&MetricSet) -> f64| per_seed.iter().map(|s| f(&s.metrics)).collect::<Vec<_>>();
        Self {
            method: method.to_string(),
            input_modality: input_modality.to_string(),
            seeds: per_seed.len(),
            balanced_accuracy: Stat::of(&col(|m| m.balanced_accuracy)),
            f1_macro: Stat::of(&col(|m| m.f1_macro)),
            f1_weighted: Stat::of(&col(|m| m.f1_weighted)),
            params: per_seed.iter().map(|s| s.params).max().unwrap_or(0),
            per_seed,
        }
    }

    fn positions_column(&self, pick: fn(&Positions) -> usize) -> String {
        let mut vals: Vec<usize> = self.per_seed.iter().filter_map(|s| s.positions.as_ref().map(pick)).collect();
        vals.sort_unstable();
        vals.dedup();
        vals.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEfficiency {
    pub bridge_params: usize,
    pub kd_params: usize,
    pub ratio: f64,
    /// A dense map between the two flattened representations at the bridge positions.
    pub full_rank_params: u64,
    pub within_15_percent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodReport>,
    pub parameter_efficiency: Option<ParameterEfficiency>,
    pub notes: Vec<String>,
    /// Set when some seeds failed; `methods` then covers the completed ones.
    pub partial: bool,
}

impl TransferReport {
    pub fn method(&self, id: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub rank: usize,
    pub prototypes: usize,
    pub pair_fraction: f64,
    pub positions: Option<Positions>,
    pub balanced_accuracy: Stat,
    pub f1_macro: Stat,
    pub f1_weighted: Stat,
    pub params: usize,
    pub per_seed_bacc: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: String,
    pub rows: Vec<AblationRow>,
    /// Positions ablation: the stage-selected bridge and the mean over the fixed cells.
    pub selected: Option<AblationRow>,
    pub fixed_average: Option<Stat>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    JsonLines,
    Csv,
    Text,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "jsonl" | "json-lines" => Ok(Self::JsonLines),
            "csv" => Ok(Self::Csv),
            "text" | "table" | "text-table" => Ok(Self::Text),
            other => Err(Error::Config(format!("unknown format `{other}` (json, jsonl, csv, text)"))),
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Json => "report.json",
            Self::JsonLines => "report.jsonl",
            Self::Csv => "report.csv",
            Self::Text => "report.txt",
        }
    }
}

pub const CSV_COLUMNS: [&str; 12] = [
    "method",
    "input_modality",
    "bacc_mean",
    "bacc_std",
    "f1m_mean",
    "f1m_std",
    "f1w_mean",
    "f1w_std",
    "params",
    "m",
    "l",
    "seeds",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn to_csv(report: &TransferReport) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for m in &report.methods {
        let row = [
            m.method.clone(),
            m.input_modality.clone(),
            format!("{}", m.balanced_accuracy.mean),
            opt(m.balanced_accuracy.std),
            format!("{}", m.f1_macro.mean),
            opt(m.f1_macro.std),
            format!("{}", m.f1_weighted.mean),
            opt(m.f1_weighted.std),
            m.params.to_string(),
            m.positions_column(|p| p.m),
            m.positions_column(|p| p.l),
            m.seeds.to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// One JSON object per method.
pub fn to_jsonl(report: &TransferReport) -> String {
    let mut out = String::new();
    for m in &report.methods {
        out.push_str(&serde_json::to_string(m).expect("row serializes"));
        out.push('\n');
    }
    out
}

fn pct(s: &Stat) -> String {
    match s.std {
        Some(sd) => format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * sd),
        None => format!("{:6.2}        ", 100.0 * s.mean),
    }
}

/// Methods appear in config order.
pub fn to_text(report: &TransferReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<8} {:<15} {:<15} {:<15} {:>8} {:>5}",
        "method", "input", "BAcc %", "F1-macro %", "F1-weighted %", "params", "seeds"
    );
    for m in &report.methods {
        let _ = writeln!(
            out,
            "{:<12} {:<8} {:<15} {:<15} {:<15} {:>8} {:>5}",
            m.method,
            m.input_modality,
            pct(&m.balanced_accuracy),
            pct(&m.f1_macro),
            pct(&m.f1_weighted),
            m.params,
            m.seeds
        );
    }
    if let Some(pe) = &report.parameter_efficiency {
        let _ = writeln!(
            out,
            "bridge/KD trainable parameters: {}/{} = {:.1}%",
            pe.bridge_params,
            pe.kd_params,
            100.0 * pe.ratio
        );
    }
    for n in &report.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

pub fn ablation_text(report: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} ablation", report.kind);
    let _ = writeln!(out, "{:<16} {:<15} {:<15} {:>8}", "setting", "BAcc %", "F1-macro %", "params");
    for r in report.rows.iter().chain(report.selected.iter()) {
        let _ = writeln!(
            out,
            "{:<16} {:<15} {:<15} {:>8}",
            r.label,
            pct(&r.balanced_accuracy),
            pct(&r.f1_macro),
            r.params
        );
    }
    if let Some(avg) = &report.fixed_average {
        let _ = writeln!(out, "{:<16} {:<15}", "fixed-average", pct(avg));
    }
    out
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out = String::from("setting,rank,prototypes,pair_fraction,m,l,bacc_mean,bacc_std,f1m_mean,f1m_std,params,failures\n");
    for r in report.rows.iter().chain(report.selected.iter()) {
        let (m, l) = r.positions.map_or((String::new(), String::new()), |p| (p.m.to_string(), p.l.to_string()));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.rank,
            r.prototypes,
            r.pair_fraction,
            m,
            l,
            r.balanced_accuracy.mean,
            opt(r.balanced_accuracy.std),
            r.f1_macro.mean,
            opt(r.f1_macro.std),
            r.params,
            r.failures.len()
        );
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `report.json` plus the requested export into `dir`.
pub fn export_report(report: &TransferReport, dir: &Path, format: ExportFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, ExportFormat::Json.file_name(), &report.to_json())?;
    let body = match format {
        ExportFormat::Json => return Ok(()),
        ExportFormat::JsonLines => to_jsonl(report),
        ExportFormat::Csv => to_csv(report),
        ExportFormat::Text => to_text(report),
    };
    write(dir, format.file_name(), &body)
}

pub fn export_ablation(report: &AblationReport, dir: &Path, format: ExportFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("ablation-{}", report.kind);
    write(dir, &format!("{stem}.json"), &report.to_json())?;
    match format {
        ExportFormat::Json => Ok(()),
        ExportFormat::JsonLines => {
            let mut out = String::new();
            for r in report.rows.iter().chain(report.selected.iter()) {
                out.push_str(&serde_json::to_string(r).expect("row serializes"));
                out.push('\n');
            }
            write(dir, &format!("{stem}.jsonl"), &out)
        }
        ExportFormat::Csv => write(dir, &format!("{stem}.csv"), &ablation_csv(report)),
        ExportFormat::Text => write(dir, &format!("{stem}.txt"), &ablation_text(report)),
    }
}
