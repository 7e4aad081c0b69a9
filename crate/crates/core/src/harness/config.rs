//! Run configuration with desk-scale defaults and a reduced preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dethead::HeadConfig;
use crate::error::{config_err, Result};
use crate::numerics::StepSchedule;
use crate::pa::PaDesign;
use crate::scenegen::baseline::BaselineConfig;
use crate::scenegen::SceneConfig;
use crate::va::{ModelConfig, SchemeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Rotation noise levels (degrees) swept by the robustness study.
    pub rotation_deg: Vec<f64>,
    pub translation_m: f64,
    /// Independent rig draws evaluated per level.
    pub draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub design: PaDesign,
    pub scheme: SchemeKind,
    pub head: HeadConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub noise: NoiseConfig,
    /// Seeds of the multi-run experiments.
    pub experiment_seeds: Vec<u64>,
}

/// Milestones at the same fractions of training as drops at epochs 20 and
/// 23 of 24.
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    [20.0 / 24.0, 23.0 / 24.0].iter().map(|f| ((epochs as f64) * f).round() as usize).collect()
}

impl RunConfig {
    fn from_model(model: ModelConfig, epochs: usize, train_scenes: usize, eval_scenes: usize) -> Self {
        let scene = SceneConfig::standard(model.image_height, model.image_width, model.bev.x_range, model.bev.y_range);
        let head = HeadConfig::new(scene.classes.len(), model.bev.content_channels);
        Self {
            seed: 0,
            design: PaDesign::Explicit,
            scheme: SchemeKind::Rec2x2,
            head,
            scene,
            train: TrainConfig {
                epochs,
                batch_size: 4,
                schedule: StepSchedule { base_lr: 1e-3, milestones: scaled_milestones(epochs), factor: 0.1 },
                weight_decay: 1e-4,
                clip_norm: Some(10.0),
                train_scenes,
                eval_scenes,
            },
            baseline: BaselineConfig { hidden_channels: model.bev.content_channels, ..BaselineConfig::default() },
            noise: NoiseConfig { rotation_deg: vec![0.0, 0.5, 1.0, 2.0, 4.0], translation_m: 0.0, draws: 2 },
            experiment_seeds: vec![0, 1, 2],
            model,
        }
    }

    /// Desk scale: 30 epochs over 200 training and 50 evaluation scenes.
    pub fn desk() -> Self {
        Self::from_model(ModelConfig::desk(), 30, 200, 50)
    }

    /// Reduced preset, about a minute per transformer run on one core. Many
    /// fresh scenes with few passes and single-scene steps generalize far
    /// better than repeated passes over a small set.
    pub fn small() -> Self {
        let mut cfg = Self::from_model(ModelConfig::small(), 5, 480, 48);
        cfg.scene.max_objects = 4;
        cfg.train.batch_size = 1;
        cfg.train.schedule.base_lr = 2e-3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate(self.design)?;
        self.head.validate()?;
        self.scene.validate()?;
        let m = &self.model;
        if (self.scene.image_height, self.scene.image_width) != (m.image_height, m.image_width) {
            return Err(config_err("scene and model image extents differ"));
        }
        if self.scene.n_views != m.n_views || m.backbone.in_channels != 3 {
            return Err(config_err("the synthetic world renders six 3-channel views"));
        }
        if self.scene.x_range.0 < m.bev.x_range.0
            || self.scene.x_range.1 > m.bev.x_range.1
            || self.scene.y_range.0 < m.bev.y_range.0
            || self.scene.y_range.1 > m.bev.y_range.1
        {
            return Err(config_err("objects may be placed outside the BEV range"));
        }
        if self.head.n_classes != self.scene.classes.len() {
            return Err(config_err("head and scene disagree on the number of classes"));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(config_err("epochs and batch size must be positive"));
        }
        if self.experiment_seeds.is_empty() {
            return Err(config_err("experiments need at least one seed"));
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
