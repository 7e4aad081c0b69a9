//! Position-aware enhancement of the BEV embedding.
//!
//! A reference height is regressed from the 2D coordinate embedding, encoded
//! sinusoidally, modulated per channel by a map predicted from the content
//! embedding and added back onto the coordinate embedding. Content and
//! position are then kept in separate channel ranges for attention.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::TEMPERATURE;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::layers::Ffn;
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor, Var};

/// Embedding design variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaDesign {
    /// No height path; content and position are summed before attention.
    Implicit,
    /// Full height path with L1 supervision of the reference height.
    Explicit,
    /// Full height path, unsupervised.
    EnhancedImplicit,
}

impl PaDesign {
    pub const ALL: [PaDesign; 3] = [PaDesign::Implicit, PaDesign::Explicit, PaDesign::EnhancedImplicit];

    pub fn has_height_path(self) -> bool {
        !matches!(self, PaDesign::Implicit)
    }

    pub fn name(self) -> &'static str {
        match self {
            PaDesign::Implicit => "implicit",
            PaDesign::Explicit => "explicit",
            PaDesign::EnhancedImplicit => "enhanced-implicit",
        }
    }
}

impl std::str::FromStr for PaDesign {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        PaDesign::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| config_err(format!("unknown embedding design {s:?}")))
    }
}

/// Graph handles for one evaluation of the enhanced BEV embedding.
#[derive(Clone, Copy, Debug)]
pub struct BevEmbedding {
    pub q_p: Var,
    pub q_c: Var,
    pub z_ref: Var,
    pub q_ref: Var,
    pub modulation: Var,
    pub q_ep: Var,
    pub p_bev: Var,
}

/// Parameters of the height and modulation networks.
#[derive(Clone, Debug)]
pub struct PositionAware {
    pub height_ffn: Ffn,
    pub modulation_ffn: Ffn,
    pub pos_channels: usize,
    pub content_channels: usize,
    pub z_range: (f64, f64),
}

impl PositionAware {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        pos_channels: usize,
        content_channels: usize,
        z_range: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if z_range.0 >= z_range.1 {
            return Err(config_err(format!("degenerate z range {z_range:?}")));
        }
        Ok(Self {
            height_ffn: Ffn::new(store, "pa.height", pos_channels, 2 * pos_channels, 1, rng),
            modulation_ffn: Ffn::new(store, "pa.modulation", content_channels, 2 * content_channels, pos_channels, rng),
            pos_channels,
            content_channels,
            z_range,
        })
    }

    /// Returns `(z_ref [N, 1], Q_ref [N, C_p])`.
    pub fn reference_height<T: Real>(&self, g: &mut Graph<T>, p: &Bound, q_p: Var) -> Result<(Var, Var)> {
        let logits = self.height_ffn.forward(g, p, q_p)?;
        let z_ref = height_from_logits(g, logits, self.z_range)?;
        let q_ref = g.sinusoidal(z_ref, self.pos_channels, TEMPERATURE)?;
        Ok((z_ref, q_ref))
    }

    /// Returns `(M, Q_ep)` with `M = FFN(Q_c)`.
    pub fn enhance_position<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        q_p: Var,
        q_c: Var,
        q_ref: Var,
    ) -> Result<(Var, Var)> {
        let m = self.modulation_ffn.forward(g, p, q_c)?;
        let q_ep = modulate(g, m, q_ref, q_p)?;
        Ok((m, q_ep))
    }

    /// Full path from `(Q_p, Q_c)` to `P_bev = [Q_c ‖ Q_ep]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, q_p: Var, q_c: Var) -> Result<BevEmbedding> {
        let (z_ref, q_ref) = self.reference_height(g, p, q_p)?;
        let (modulation, q_ep) = self.enhance_position(g, p, q_p, q_c, q_ref)?;
        let p_bev = g.concat(&[q_c, q_ep], 1)?;
        Ok(BevEmbedding { q_p, q_c, z_ref, q_ref, modulation, q_ep, p_bev })
    }
}

/// `z_min + (z_max − z_min) · sigmoid(logits)`.
pub fn height_from_logits<T: Real>(g: &mut Graph<T>, logits: Var, z_range: (f64, f64)) -> Result<Var> {
    if z_range.0 >= z_range.1 {
        return Err(config_err(format!("degenerate z range {z_range:?}")));
    }
    let s = g.sigmoid(logits)?;
    let scaled = g.scale(s, T::of(z_range.1 - z_range.0))?;
    let offset = Tensor::full(g.shape(scaled), T::of(z_range.0));
    g.add_const(scaled, &offset)
}

/// `Q_ep = M ⊙ Q_ref + Q_p`.
pub fn modulate<T: Real>(g: &mut Graph<T>, m: Var, q_ref: Var, q_p: Var) -> Result<Var> {
    if g.shape(m) != g.shape(q_ref) || g.shape(q_ref) != g.shape(q_p) {
        return Err(shape_err(
            "enhance_position",
            format!("M {:?}, Q_ref {:?}, Q_p {:?}", g.shape(m), g.shape(q_ref), g.shape(q_p)),
        ));
    }
    let mq = g.mul(m, q_ref)?;
    g.add(mq, q_p)
}

/// Channel concatenation of image and BEV embeddings. Content always
/// occupies channels `[0, C_s)`, position the remaining channels.
pub fn restructure<T: Real>(
    g: &mut Graph<T>,
    f_s: Var,
    image_pos: &[Var],
    q_c: Var,
    q_ep: Var,
) -> Result<(Var, Var)> {
    let mut parts = vec![f_s];
    parts.extend_from_slice(image_pos);
    let p_image = g.concat(&parts, 1)?;
    let p_bev = g.concat(&[q_c, q_ep], 1)?;
    Ok((p_image, p_bev))
}

/// Ground-truth height at a BEV grid holding an object center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightTarget {
    pub cell: usize,
    pub z: f64,
}

/// L1 supervision of `z_ref` at object cells; zero unless `design` is
/// [`PaDesign::Explicit`] or when there are no objects.
pub fn height_loss<T: Real>(g: &mut Graph<T>, z_ref: Var, targets: &[HeightTarget], design: PaDesign) -> Result<Var> {
    if design != PaDesign::Explicit || targets.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let index = Arc::new(targets.iter().map(|t| Some(t.cell)).collect::<Vec<_>>());
    let picked = g.gather_rows(z_ref, index)?;
    let gt = Tensor::from_fn(&[targets.len(), 1], |i| T::of(targets[i].z));
    g.masked_l1(picked, &gt, &vec![true; targets.len()])
}
