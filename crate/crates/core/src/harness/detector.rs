//! The two trainable detectors: the calibration-free transformer and the
//! camera-driven baseline, each followed by the same head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::dethead::{output_grid, DetHead, HeadOutput, HeadVars};
use crate::encodings::BevConfig;
use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::pa::{BevEmbedding, HeightTarget, PaDesign};
use crate::scenegen::baseline::{projection_baseline, BaselineModel};
use crate::scenegen::{CameraRig, SceneSample};
use crate::va::{build_scheme, CftModel, CftOutput, ForwardOptions, WindowScheme};

/// One forward pass ready for loss computation.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub head: HeadVars,
    pub z_ref: Option<Var>,
    pub embedding: Option<BevEmbedding>,
}

#[derive(Clone, Debug)]
pub struct CftDetector {
    pub model: CftModel,
    pub head: DetHead,
    pub scheme: WindowScheme,
    pub design: PaDesign,
}

impl CftDetector {
    /// Parameters are initialized from `seed`; a checkpoint may overwrite them.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CftModel::new(store, &cfg.model, cfg.design, &mut rng)?;
        let head = DetHead::new(store, "head", cfg.model.bev.content_channels, &cfg.head, &mut rng)?;
        let scheme = build_scheme(cfg.scheme, &cfg.model.bev, cfg.model.n_views)?;
        Ok(Self { model, head, scheme, design: cfg.design })
    }

    pub fn bev(&self) -> &BevConfig {
        &self.model.cfg.bev
    }

    pub fn run<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: &Tensor<T>, opts: ForwardOptions) -> Result<(CftOutput, HeadVars)> {
        let out = self.model.forward(g, p, images, self.design, &self.scheme, opts)?;
        let bev = self.bev();
        let head = self.head.forward(g, p, out.f_b, bev.height, bev.width)?;
        Ok((out, head))
    }

    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: &Tensor<T>) -> Result<Prediction> {
        let (out, head) = self.run(g, p, images, ForwardOptions::default())?;
        Ok(Prediction { head, z_ref: out.embedding.map(|e| e.z_ref), embedding: out.embedding })
    }

    /// Detached head output for one scene. The camera rig is not an input.
    pub fn infer(&self, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let pred = self.predict(&mut g, &p, images)?;
        let grid = output_grid(self.bev());
        Ok(HeadOutput::from_graph(&g, pred.head, grid.height, grid.width))
    }
}

#[derive(Clone, Debug)]
pub struct BaselineDetector {
    pub model: BaselineModel,
}

impl BaselineDetector {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = BaselineModel::new(store, &cfg.model.bev, &cfg.baseline, 3, &cfg.head, &mut rng)?;
        Ok(Self { model })
    }

    /// Lifts one scene's images through `rig`.
    pub fn lift(&self, cfg: &RunConfig, sample: &SceneSample, rig: &CameraRig) -> Result<Tensor<f32>> {
        projection_baseline(&sample.images, rig, &self.model.bev, &cfg.baseline)
    }

    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, lifted: &Tensor<T>) -> Result<Prediction> {
        Ok(Prediction { head: self.model.forward(g, p, lifted)?, z_ref: None, embedding: None })
    }

    pub fn infer(&self, store: &ParamStore<f32>, lifted: &Tensor<f32>) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let pred = self.predict(&mut g, &p, lifted)?;
        let grid = output_grid(&self.model.bev);
        Ok(HeadOutput::from_graph(&g, pred.head, grid.height, grid.width))
    }
}

/// Height supervision targets: object-center height at each object's grid.
pub fn height_targets(sample: &SceneSample, bev: &BevConfig) -> Vec<HeightTarget> {
    sample
        .boxes
        .iter()
        .filter_map(|b| bev.cell_of(b.center[0], b.center[1]).map(|(h, w)| HeightTarget { cell: h * bev.width + w, z: b.center[2] }))
        .collect()
}
