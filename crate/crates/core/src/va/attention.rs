//! View-restricted multi-head attention.
//!
//! The windowed routines gather each window's queries and its view group's
//! keys, attend, and scatter the results back. The `masked_global_*`
//! routines compute the same thing as one dense attention with a boolean
//! mask; they exist as the reference the windowed paths are checked against.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scheme::WindowScheme;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::layers::{Ffn, LayerNorm, Linear};
use crate::numerics::{Bound, Graph, ParamStore, Real, Var};

pub const SELF_SCORE: &str = "self.score";
pub const SELF_VALUE: &str = "self.value";
pub const CROSS_SCORE: &str = "cross.score";
pub const CROSS_VALUE: &str = "cross.value";

/// How content and position reach the attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenLayout {
    /// `[content ‖ position]`: Q/K see both, V sees content only.
    Restructured,
    /// Position already summed into content; Q/K/V all see the sum.
    Mixed,
}

/// How cross-attention routes BEV grids to views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Per-window attention; `pad` batches every window to the scheme's
    /// `pad_to` rows.
    Windowed { pad: bool },
    /// One dense attention with the scheme expressed as a mask.
    MaskedGlobal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub n_self: usize,
    pub n_cross: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionStack {
    pub fn validate(&self) -> Result<()> {
        if self.n_cross == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(config_err("attention stack needs n_cross ≥ 1 and positive head sizes"));
        }
        Ok(())
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Attention weights of one window, kept for inspection dumps.
#[derive(Clone, Debug)]
pub struct WindowTrace {
    pub window: usize,
    /// BEV grid of each query row (`None` for padding).
    pub rows: Arc<Vec<Option<usize>>>,
    /// Image token of each key column (`None` for padding).
    pub keys: Arc<Vec<Option<usize>>>,
    /// The gathered query rows fed to this window.
    pub queries: Var,
    /// Softmax weights per head, `[rows, keys]`.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` column blocks of `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
    heads: usize,
    labels: (&'static str, &'static str),
    mut weights_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d || g.shape(v)[1] != d || d % heads != 0 || g.shape(k)[0] != g.shape(v)[0] {
        return Err(shape_err("attend", format!("q {:?} k {:?} v {:?}", g.shape(q), g.shape(k), g.shape(v))));
    }
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice(q, 1, h * hd, (h + 1) * hd)?, g.slice(k, 1, h * hd, (h + 1) * hd)?, g.slice(v, 1, h * hd, (h + 1) * hd)?)
        };
        let prev = g.set_scope(labels.0);
        let scores = g.matmul_nt(qh, kh)?;
        g.set_scope(prev);
        let scores = g.scale(scores, scale)?;
        let w = match allowed {
            Some(mask) => g.masked_softmax(scores, mask)?,
            None => g.softmax(scores, 1)?,
        };
        if let Some(ws) = weights_out.as_deref_mut() {
            ws.push(w);
        }
        let prev = g.set_scope(labels.1);
        let o = g.matmul(w, vh)?;
        g.set_scope(prev);
        outs.push(o);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

fn group_keys(scheme: &WindowScheme, window: usize, tokens_per_view: usize) -> Vec<Option<usize>> {
    let mut keys: Vec<Option<usize>> = scheme.groups[window]
        .iter()
        .flat_map(|&v| (v * tokens_per_view..(v + 1) * tokens_per_view).map(Some))
        .collect();
    keys.resize(scheme.max_group() * tokens_per_view, None);
    keys
}

/// Cross-attention restricted window by window to each window's view group.
#[allow(clippy::too_many_arguments)]
pub fn windowed_cross_attention<T: Real>(
    g: &mut Graph<T>,
    q_all: Var,
    k_all: Var,
    v_all: Var,
    scheme: &WindowScheme,
    tokens_per_view: usize,
    heads: usize,
    pad: bool,
    mut trace: Option<&mut Vec<WindowTrace>>,
) -> Result<Var> {
    let n_cells = scheme.assignment.len();
    if g.shape(q_all)[0] != n_cells {
        return Err(shape_err("cross_attention", format!("{} queries for {n_cells} grids", g.shape(q_all)[0])));
    }
    let mut parts = Vec::with_capacity(scheme.n_windows());
    for (wi, cells) in scheme.windows.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let mut rows: Vec<Option<usize>> = cells.iter().map(|&c| Some(c)).collect();
        if pad {
            rows.resize(scheme.pad_to.max(cells.len()), None);
        }
        let rows = Arc::new(rows);
        let keys = Arc::new(group_keys(scheme, wi, tokens_per_view));
        let key_mask = keys.iter().any(Option::is_none);
        let qw = g.gather_rows(q_all, rows.clone())?;
        let kw = g.gather_rows(k_all, keys.clone())?;
        let vw = g.gather_rows(v_all, keys.clone())?;
        let allowed: Option<Vec<bool>> =
            key_mask.then(|| rows.iter().flat_map(|_| keys.iter().map(Option::is_some)).collect());
        let mut weights = Vec::new();
        let out = attend(g, qw, kw, vw, allowed.as_deref(), heads, (CROSS_SCORE, CROSS_VALUE), Some(&mut weights))?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(WindowTrace { window: wi, rows: rows.clone(), keys, queries: qw, weights });
        }
        parts.push((out, rows));
    }
    g.assemble_rows(parts, n_cells)
}

/// Dense reference for [`windowed_cross_attention`].
pub fn masked_global_cross_attention<T: Real>(
    g: &mut Graph<T>,
    q_all: Var,
    k_all: Var,
    v_all: Var,
    scheme: &WindowScheme,
    tokens_per_view: usize,
    heads: usize,
) -> Result<Var> {
    let n_keys = g.shape(k_all)[0];
    let allowed: Vec<bool> = (0..scheme.assignment.len())
        .flat_map(|cell| (0..n_keys).map(move |k| scheme.allows(cell, k / tokens_per_view)))
        .collect();
    attend(g, q_all, k_all, v_all, Some(&allowed), heads, (CROSS_SCORE, CROSS_VALUE), None)
}

/// Self-attention computed independently inside each view.
pub fn per_view_self_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    n_views: usize,
    tokens_per_view: usize,
    heads: usize,
) -> Result<Var> {
    if g.shape(q)[0] != n_views * tokens_per_view {
        return Err(shape_err("self_attention", format!("{:?} for {n_views} views", g.shape(q))));
    }
    let mut outs = Vec::with_capacity(n_views);
    for view in 0..n_views {
        let (a, b) = (view * tokens_per_view, (view + 1) * tokens_per_view);
        let qv = g.slice(q, 0, a, b)?;
        let kv = g.slice(k, 0, a, b)?;
        let vv = g.slice(v, 0, a, b)?;
        outs.push(attend(g, qv, kv, vv, None, heads, (SELF_SCORE, SELF_VALUE), None)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 0)
    }
}

/// Dense reference for [`per_view_self_attention`]: block-diagonal mask.
pub fn block_diagonal_self_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    tokens_per_view: usize,
    heads: usize,
) -> Result<Var> {
    let n = g.shape(q)[0];
    let allowed: Vec<bool> =
        (0..n).flat_map(|i| (0..n).map(move |j| i / tokens_per_view == j / tokens_per_view)).collect();
    attend(g, q, k, v, Some(&allowed), heads, (SELF_SCORE, SELF_VALUE), None)
}

fn join<T: Real>(g: &mut Graph<T>, content: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => g.concat(&[content, p], 1),
        None => Ok(content),
    }
}

/// Pre-norm self-attention block over image tokens; updates content only.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn: Ffn,
}

impl SelfBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        full_width: usize,
        content: usize,
        inner: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), full_width),
            q: Linear::new(store, &format!("{name}.q"), full_width, inner, rng),
            k: Linear::new(store, &format!("{name}.k"), full_width, inner, rng),
            v: Linear::new(store, &format!("{name}.v"), content, inner, rng),
            out: Linear::new(store, &format!("{name}.out"), inner, content, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), content),
            ffn: Ffn::new(store, &format!("{name}.ffn"), content, 2 * content, content, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        content: Var,
        pos: Option<Var>,
        n_views: usize,
        tokens_per_view: usize,
        heads: usize,
        block_diagonal_reference: bool,
    ) -> Result<Var> {
        let x = join(g, content, pos)?;
        let h = self.norm.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, content)?;
        let a = if block_diagonal_reference {
            block_diagonal_self_attention(g, q, k, v, tokens_per_view, heads)?
        } else {
            per_view_self_attention(g, q, k, v, n_views, tokens_per_view, heads)?
        };
        let a = self.out.forward(g, p, a)?;
        let c = g.add(content, a)?;
        feed_forward(g, p, &self.ffn_norm, &self.ffn, c)
    }
}

fn feed_forward<T: Real>(g: &mut Graph<T>, p: &Bound, norm: &LayerNorm, ffn: &Ffn, x: Var) -> Result<Var> {
    let h = norm.forward(g, p, x)?;
    let f = ffn.forward(g, p, h)?;
    g.add(x, f)
}

/// Pre-norm cross-attention block from BEV queries to image tokens.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub query_norm: LayerNorm,
    pub key_norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn: Ffn,
}

/// Inputs shared by every cross-attention block of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub content: Var,
    pub pos: Option<Var>,
    pub tokens_per_view: usize,
}

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        query_width: usize,
        key_width: usize,
        content: usize,
        inner: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), query_width),
            key_norm: LayerNorm::new(store, &format!("{name}.key_norm"), key_width),
            q: Linear::new(store, &format!("{name}.q"), query_width, inner, rng),
            k: Linear::new(store, &format!("{name}.k"), key_width, inner, rng),
            v: Linear::new(store, &format!("{name}.v"), content, inner, rng),
            out: Linear::new(store, &format!("{name}.out"), inner, content, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), content),
            ffn: Ffn::new(store, &format!("{name}.ffn"), content, 2 * content, content, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query_content: Var,
        query_pos: Option<Var>,
        memory: Memory,
        scheme: &WindowScheme,
        heads: usize,
        routing: Routing,
        trace: Option<&mut Vec<WindowTrace>>,
    ) -> Result<Var> {
        let xq = join(g, query_content, query_pos)?;
        let hq = self.query_norm.forward(g, p, xq)?;
        let xk = join(g, memory.content, memory.pos)?;
        let hk = self.key_norm.forward(g, p, xk)?;
        let q = self.q.forward(g, p, hq)?;
        let k = self.k.forward(g, p, hk)?;
        let v = self.v.forward(g, p, memory.content)?;
        let a = match routing {
            Routing::Windowed { pad } => {
                windowed_cross_attention(g, q, k, v, scheme, memory.tokens_per_view, heads, pad, trace)?
            }
            Routing::MaskedGlobal => masked_global_cross_attention(g, q, k, v, scheme, memory.tokens_per_view, heads)?,
        };
        let a = self.out.forward(g, p, a)?;
        let c = g.add(query_content, a)?;
        feed_forward(g, p, &self.ffn_norm, &self.ffn, c)
    }

    /// The block with the attention term removed: residual plus output bias
    /// followed by the feed-forward sub-block.
    pub fn residual_path<T: Real>(&self, g: &mut Graph<T>, p: &Bound, query_content: Var) -> Result<Var> {
        let c = g.add_row(query_content, p.get(self.out.bias))?;
        feed_forward(g, p, &self.ffn_norm, &self.ffn, c)
    }
}
