//! Per-seed artifacts under `<out>/seed-<n>/`, so CLI stages can run separately.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, PositionSelection, SeedContext};
use crate::bridge::BridgeParams;
use crate::data::{load_dataset, save_dataset, PairedDataset};
use crate::error::{Error, Result};
use crate::model::{BridgeRecord, ModelCheckpoint};
use crate::probing::pseudo_labels;
use crate::transfer::Positions;

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const FOUNDATION_FILE: &str = "foundation.ckpt";
pub const DATASET_FILE: &str = "dataset.bin";
pub const STAMP_FILE: &str = "pretrain.toml";
pub const POSITIONS_FILE: &str = "positions.json";
pub const BRIDGE_FILE: &str = "bridge.ckpt";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// The config sections pretrained models depend on. Artifacts whose stamp
/// differs from the current config are stale.
#[derive(Serialize, Deserialize, PartialEq)]
struct Stamp {
    seed: u64,
    data: super::config::DataConfig,
    models: super::config::ModelsConfig,
    pretrain: super::config::PretrainConfig,
    pair_fraction: f64,
}

fn stamp(cfg: &ExperimentConfig, seed: u64) -> String {
    let s = Stamp {
        seed,
        data: cfg.data.clone(),
        models: cfg.models.clone(),
        pretrain: cfg.pretrain.clone(),
        pair_fraction: cfg.experiment.pair_fraction,
    };
    toml::to_string(&s).expect("stamp serializes")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_seed(cfg: &ExperimentConfig, data: &PairedDataset, ctx: &SeedContext, out: &Path) -> Result<PathBuf> {
    let dir = seed_dir(out, ctx.seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // positions and bridges were derived from the models being replaced
    for f in [POSITIONS_FILE, BRIDGE_FILE] {
        let path = dir.join(f);
        if path.is_file() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    ModelCheckpoint::new(ctx.teacher.clone(), Some(ctx.head.clone())).save(&dir.join(TEACHER_FILE))?;
    ModelCheckpoint::new(ctx.foundation.clone(), None).save(&dir.join(FOUNDATION_FILE))?;
    save_dataset(&dir.join(DATASET_FILE), data, Some(&ctx.splits))?;
    write(&dir.join(STAMP_FILE), &stamp(cfg, ctx.seed))?;
    Ok(dir)
}

/// True when pretraining artifacts for `seed` exist and match `cfg`.
pub fn has_seed(cfg: &ExperimentConfig, out: &Path, seed: u64) -> bool {
    let dir = seed_dir(out, seed);
    fs::read_to_string(dir.join(STAMP_FILE)).is_ok_and(|s| s == stamp(cfg, seed))
        && [TEACHER_FILE, FOUNDATION_FILE, DATASET_FILE].iter().all(|f| dir.join(f).is_file())
}

/// Reloads a seed saved by [`save_seed`]; pseudo-labels are recomputed.
pub fn load_seed(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<(PairedDataset, SeedContext)> {
    let dir = seed_dir(out, seed);
    let found = fs::read_to_string(dir.join(STAMP_FILE)).map_err(|e| Error::io(dir.join(STAMP_FILE), e))?;
    if found != stamp(cfg, seed) {
        return Err(Error::Config(format!(
            "{} was produced with a different config; rerun `pretrain`",
            dir.display()
        )));
    }
    let teacher_ck = ModelCheckpoint::load(&dir.join(TEACHER_FILE))?;
    let mut teacher = teacher_ck.model;
    let mut head = teacher_ck
        .head
        .ok_or_else(|| Error::Format(format!("{} has no task head", dir.join(TEACHER_FILE).display())))?;
    let mut foundation = ModelCheckpoint::load(&dir.join(FOUNDATION_FILE))?.model;
    teacher.freeze();
    head.set_trainable(false);
    foundation.freeze();
    let file = load_dataset(&dir.join(DATASET_FILE))?;
    let splits = file
        .splits
        .ok_or_else(|| Error::Format(format!("{} carries no split manifest", dir.join(DATASET_FILE).display())))?;
    let pseudo = pseudo_labels(&teacher, &head, splits.pair.x_a()?)?;
    let ctx = SeedContext {
        seed,
        classes: file.dataset.task.classes,
        splits,
        teacher,
        head,
        foundation,
        pseudo,
        timing: Vec::new(),
    };
    Ok((file.dataset, ctx))
}

pub fn save_positions(out: &Path, seed: u64, sel: &PositionSelection) -> Result<()> {
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(POSITIONS_FILE), &serde_json::to_string_pretty(sel).expect("selection serializes"))
}

pub fn load_positions(out: &Path, seed: u64) -> Result<Option<PositionSelection>> {
    let path = seed_dir(out, seed).join(POSITIONS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Stores the bridge next to the new-modality encoder it reads from.
pub fn save_bridge(out: &Path, ctx: &SeedContext, bridge: &BridgeParams, positions: Positions) -> Result<()> {
    let mut ck = ModelCheckpoint::new(ctx.foundation.clone(), None);
    ck.bridge = Some(BridgeRecord {
        bridge: bridge.clone(),
        input_position: positions.m,
        output_position: positions.l,
    });
    ck.save(&seed_dir(out, ctx.seed).join(BRIDGE_FILE))
}

pub fn load_bridge(out: &Path, seed: u64) -> Result<(BridgeParams, Positions)> {
    let path = seed_dir(out, seed).join(BRIDGE_FILE);
    let rec = ModelCheckpoint::load(&path)?
        .bridge
        .ok_or_else(|| Error::Format(format!("{} has no bridge section", path.display())))?;
    Ok((
        rec.bridge,
        Positions {
            m: rec.input_position,
            l: rec.output_position,
        },
    ))
}
