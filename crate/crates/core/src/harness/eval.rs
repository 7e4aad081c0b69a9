//! Inference over a dataset followed by the detection metrics.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::detector::{BaselineDetector, CftDetector};
use crate::dethead::{decode, output_grid, HeadOutput};
use crate::error::Result;
use crate::metrics::{evaluate, MetricsReport, SceneDetections};
use crate::numerics::ParamStore;
use crate::scenegen::dataset::Dataset;
use crate::scenegen::CameraRig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub detections: Vec<SceneDetections>,
}

fn score(cfg: &RunConfig, data: &Dataset, outputs: Vec<HeadOutput>) -> Result<Evaluation> {
    let grid = output_grid(&cfg.model.bev);
    let detections = outputs
        .iter()
        .zip(&data.scenes)
        .map(|(o, s)| Ok(SceneDetections { gts: s.boxes.clone(), preds: decode(o, &grid, &cfg.head)? }))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&detections, &cfg.scene.class_names());
    Ok(Evaluation { report, detections })
}

pub fn evaluate_cft(det: &CftDetector, store: &ParamStore<f32>, cfg: &RunConfig, data: &Dataset) -> Result<Evaluation> {
    let outputs = data.scenes.iter().map(|s| det.infer(store, &s.images)).collect::<Result<Vec<_>>>()?;
    score(cfg, data, outputs)
}

/// Evaluates the baseline with features lifted through `rig`, which may
/// differ from the rig that rendered the images.
pub fn evaluate_baseline(
    det: &BaselineDetector,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    rig: &CameraRig,
) -> Result<Evaluation> {
    let outputs = data
        .scenes
        .iter()
        .map(|s| det.infer(store, &det.lift(cfg, s, rig)?))
        .collect::<Result<Vec<_>>>()?;
    score(cfg, data, outputs)
}
