//! Checkpoint directories: run configuration, parameters and training log.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::detector::{BaselineDetector, CftDetector};
use super::experiments::write_records;
use super::train::EpochLog;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const META: &str = "checkpoint.json";
const PARAMS: &str = "params.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cft,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: RunConfig,
}

pub fn save_checkpoint(dir: &Path, kind: ModelKind, cfg: &RunConfig, store: &ParamStore<f32>, log: &[EpochLog]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta { kind, config: cfg.clone() };
    std::fs::write(dir.join(META), serde_json::to_string_pretty(&meta)?)?;
    store.save(&dir.join(PARAMS))?;
    write_records(dir, "train_log", log)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META))?)?;
    meta.config.validate()?;
    Ok(meta)
}

fn expect(meta: &CheckpointMeta, kind: ModelKind) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", meta.kind)));
    }
    Ok(())
}

/// Rebuilds the architecture from the stored configuration and overwrites
/// its parameters with the stored values.
pub fn load_cft(dir: &Path) -> Result<(RunConfig, CftDetector, ParamStore<f32>)> {
    let meta = read_meta(dir)?;
    expect(&meta, ModelKind::Cft)?;
    let mut store = ParamStore::new();
    let det = CftDetector::new(&mut store, &meta.config, meta.config.seed)?;
    store.load(&dir.join(PARAMS))?;
    Ok((meta.config, det, store))
}

pub fn load_baseline(dir: &Path) -> Result<(RunConfig, BaselineDetector, ParamStore<f32>)> {
    let meta = read_meta(dir)?;
    expect(&meta, ModelKind::Baseline)?;
    let mut store = ParamStore::new();
    let det = BaselineDetector::new(&mut store, &meta.config, meta.config.seed)?;
    store.load(&dir.join(PARAMS))?;
    Ok((meta.config, det, store))
}
