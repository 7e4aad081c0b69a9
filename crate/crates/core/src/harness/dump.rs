//! Inspection dumps: cross-attention mass per camera view for a BEV query,
//! and the per-cell height embedding.

use serde::{Deserialize, Serialize};

use super::detector::CftDetector;
use crate::error::{config_err, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::va::{ForwardOptions, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub layer: usize,
    pub head: usize,
    pub view: String,
    pub mass: f64,
}

/// Attention weight the query at BEV cell `(h, w)` puts on each view, per
/// cross block and head. Views outside the cell's group get zero mass.
pub fn attention_mass(det: &CftDetector, store: &ParamStore<f32>, images: &Tensor<f32>, h: usize, w: usize) -> Result<Vec<AttentionMass>> {
    let bev = det.bev();
    if h >= bev.height || w >= bev.width {
        return Err(config_err(format!("cell ({h}, {w}) outside the {}x{} grid", bev.height, bev.width)));
    }
    let cell = h * bev.width + w;
    let tpv = det.model.cfg.tokens_per_view();
    let n_views = det.model.cfg.n_views;
    let mut g = Graph::new();
    let p = store.bind(&mut g)?;
    let opts = ForwardOptions { trace: true, ..ForwardOptions::default() };
    let (out, _) = det.run(&mut g, &p, images, opts)?;
    let mut rows = Vec::new();
    for (layer, traces) in out.traces.iter().enumerate() {
        let (trace, r) = traces
            .iter()
            .find_map(|t| t.rows.iter().position(|&c| c == Some(cell)).map(|r| (t, r)))
            .ok_or_else(|| config_err("no window holds the requested cell"))?;
        for (head, &wv) in trace.weights.iter().enumerate() {
            let weights = g.value(wv);
            let mut mass = vec![0.0; n_views];
            for (j, key) in trace.keys.iter().enumerate() {
                if let Some(k) = key {
                    mass[k / tpv] += f64::from(weights.at2(r, j));
                }
            }
            for (v, m) in mass.into_iter().enumerate() {
                let view = View::ALL.get(v).map_or_else(|| format!("view{v}"), |x| x.name().to_string());
                rows.push(AttentionMass { layer, head, view, mass: m });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCell {
    pub h: usize,
    pub w: usize,
    pub x: f64,
    pub y: f64,
    pub z_ref: f64,
    pub q_p_norm: f64,
    pub q_ep_norm: f64,
    pub modulation_norm: f64,
}

fn row_norm(t: &Tensor<f32>, r: usize) -> f64 {
    let n = t.shape()[1];
    t.data()[r * n..(r + 1) * n].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
}

/// Reference height and embedding norms of every BEV cell for one scene.
pub fn embedding_cells(det: &CftDetector, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Vec<EmbeddingCell>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g)?;
    let (out, _) = det.run(&mut g, &p, images, ForwardOptions::default())?;
    let e = out.embedding.ok_or_else(|| config_err("the implicit design has no height embedding"))?;
    let bev = det.bev();
    let (z, q_p, q_ep, m) = (g.value(e.z_ref), g.value(e.q_p), g.value(e.q_ep), g.value(e.modulation));
    let mut cells = Vec::with_capacity(bev.cells());
    for h in 0..bev.height {
        for w in 0..bev.width {
            let i = h * bev.width + w;
            let (x, y) = bev.grid_center(h, w);
            cells.push(EmbeddingCell {
                h,
                w,
                x,
                y,
                z_ref: f64::from(z.data()[i]),
                q_p_norm: row_norm(q_p, i),
                q_ep_norm: row_norm(q_ep, i),
                modulation_norm: row_norm(m, i),
            });
        }
    }
    Ok(cells)
}
