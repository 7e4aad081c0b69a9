//! Closed-form attention cost per routing scheme and its measured
//! counterpart from the op counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::pa::PaDesign;
use crate::va::attention::{CROSS_SCORE, CROSS_VALUE};
use crate::va::{build_scheme, CftModel, ForwardOptions, ModelConfig, Routing, SchemeKind};

/// Largest polar sector area in grids: `½·(H_b/2)·(W_b − H_b/(2√3))`.
pub fn polar_sector_area(h_b: usize, w_b: usize) -> f64 {
    0.5 * (h_b as f64 / 2.0) * (w_b as f64 - h_b as f64 / (2.0 * 3f64.sqrt()))
}

/// Mul-adds of one cross-attention product per scheme, divided by
/// `H_s·W_s·C`.
pub fn analytic_coefficient(kind: SchemeKind, h_b: usize, w_b: usize) -> u64 {
    let (hb, wb) = (h_b as u64, w_b as u64);
    let sector = polar_sector_area(h_b, w_b).ceil() as u64;
    match kind {
        SchemeKind::Global => 6 * hb * wb,
        SchemeKind::Rec2x2 => 4 * 3 * hb.div_ceil(2) * wb.div_ceil(2),
        SchemeKind::Rec2x3 => 6 * 3 * hb.div_ceil(2) * wb.div_ceil(3),
        SchemeKind::PolarA => 6 * sector,
        SchemeKind::PolarB => 6 * 2 * sector,
    }
}

pub fn analytic_cost(kind: SchemeKind, h_s: usize, w_s: usize, h_b: usize, w_b: usize, c: usize) -> u64 {
    analytic_coefficient(kind, h_b, w_b) * (h_s * w_s * c) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kind: SchemeKind,
    /// Closed form with `C` = query/key width + value width, so that one
    /// "product" covers both the score and the aggregation matmul.
    pub analytic_muladds: u64,
    /// Counted score + value mul-adds per cross layer, windows padded.
    pub measured_muladds: u64,
    /// Same count with every window at its true size.
    pub measured_unpadded: u64,
    pub ratio_vs_global: f64,
    pub measured_ratio_vs_global: f64,
    pub unpadded_ratio_vs_global: f64,
}

impl CostReport {
    /// `measured / analytic − 1`.
    pub fn relative_error(&self) -> f64 {
        self.measured_muladds as f64 / self.analytic_muladds as f64 - 1.0
    }

    pub fn unpadded_relative_error(&self) -> f64 {
        self.measured_unpadded as f64 / self.analytic_muladds as f64 - 1.0
    }
}

/// Per-layer cross-attention mul-adds of one forward pass.
pub fn measure_forward(
    model: &CftModel,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    kind: SchemeKind,
    pad: bool,
) -> Result<u64> {
    let scheme = build_scheme(kind, &model.cfg.bev, model.cfg.n_views)?;
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g)?;
    let opts = ForwardOptions { routing: Routing::Windowed { pad }, ..ForwardOptions::default() };
    let design = if model.layout == crate::va::TokenLayout::Mixed { PaDesign::Implicit } else { PaDesign::Explicit };
    g.counter_mut().reset();
    model.forward(&mut g, &p, images, design, &scheme, opts)?;
    let total = g.counter().get(CROSS_SCORE) + g.counter().get(CROSS_VALUE);
    let layers = model.cfg.stack.n_cross as u64;
    if total % layers != 0 {
        return Err(config_err("cross-attention count is not uniform across layers"));
    }
    Ok(total / layers)
}

/// Analytic and measured cost of every scheme on one random sample.
pub fn cost_table(cfg: &ModelConfig, seed: u64) -> Result<Vec<CostReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let model = CftModel::new(&mut store, cfg, PaDesign::Explicit, &mut rng)?;
    let rows = cfg.n_views * cfg.image_height * cfg.image_width;
    let images = Tensor::from_fn(&[rows, cfg.backbone.in_channels], |_| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    });
    let (h_s, w_s) = cfg.feature_extent();
    let c = 2 * cfg.stack.inner_dim();
    let (h_b, w_b) = (cfg.bev.height, cfg.bev.width);
    let mut reports = Vec::with_capacity(SchemeKind::ALL.len());
    for kind in SchemeKind::ALL {
        reports.push(CostReport {
            kind,
            analytic_muladds: analytic_cost(kind, h_s, w_s, h_b, w_b, c),
            measured_muladds: measure_forward(&model, &store, &images, kind, true)?,
            measured_unpadded: measure_forward(&model, &store, &images, kind, false)?,
            ratio_vs_global: 0.0,
            measured_ratio_vs_global: 0.0,
            unpadded_ratio_vs_global: 0.0,
        });
    }
    let global = reports.iter().find(|r| r.kind == SchemeKind::Global).cloned().expect("global row");
    for r in &mut reports {
        r.ratio_vs_global = r.analytic_muladds as f64 / global.analytic_muladds as f64;
        r.measured_ratio_vs_global = r.measured_muladds as f64 / global.measured_muladds as f64;
        r.unpadded_ratio_vs_global = r.measured_unpadded as f64 / global.measured_unpadded as f64;
    }
    Ok(reports)
}

/// Geometry for cost measurements at a given BEV extent: minimal image side
/// and channel widths so that only the routing dominates the runtime.
pub fn cost_probe_config(h_b: usize, w_b: usize) -> ModelConfig {
    let mut cfg = ModelConfig::small();
    cfg.image_height = 8;
    cfg.image_width = 8;
    cfg.backbone.channels = vec![4, 8, 8];
    cfg.bev.height = h_b;
    cfg.bev.width = w_b;
    cfg.bev.content_channels = 8;
    cfg.bev.pos_channels = 8;
    cfg.stack.n_self = 0;
    cfg.stack.heads = 1;
    cfg.stack.head_dim = 8;
    cfg
}
