//! The full image-to-BEV transformer: backbone, encodings, position-aware
//! embedding and the view-aware attention stack.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionStack, CrossBlock, Memory, Routing, SelfBlock, TokenLayout, WindowTrace};
use super::scheme::WindowScheme;
use crate::encodings::{bev_coordinate_embedding, image_position_bundle, BevConfig};
use crate::error::{config_err, shape_err, Result};
use crate::harness::backbone::{Backbone, BackboneConfig};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::pa::{BevEmbedding, PaDesign, PositionAware};

/// Std-dev of the initial learned BEV content embedding.
const CONTENT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub backbone: BackboneConfig,
    pub bev: BevConfig,
    pub stack: AttentionStack,
    /// Token layout; `None` picks mixed for the implicit design and
    /// restructured otherwise.
    #[serde(default)]
    pub layout: Option<TokenLayout>,
}

impl ModelConfig {
    /// Desk-scale defaults: six 64×64 views → 16×16×32 features, a 16×16 BEV
    /// grid with 32 positional channels, four heads, one self and two cross
    /// layers.
    pub fn desk() -> Self {
        Self {
            n_views: 6,
            image_height: 64,
            image_width: 64,
            backbone: BackboneConfig::new(3, 32),
            bev: BevConfig {
                height: 16,
                width: 16,
                pos_channels: 32,
                content_channels: 32,
                x_range: (-51.2, 51.2),
                y_range: (-51.2, 51.2),
                z_range: (-3.0, 5.0),
            },
            stack: AttentionStack { n_self: 1, n_cross: 2, heads: 4, head_dim: 8 },
            layout: None,
        }
    }

    /// A reduced configuration for quick runs: 32×32 views → 8×8×16 features,
    /// 8×8 BEV over ±25.6 m, two heads, one self and one cross layer.
    pub fn small() -> Self {
        Self {
            n_views: 6,
            image_height: 32,
            image_width: 32,
            backbone: BackboneConfig { in_channels: 3, channels: vec![8, 16, 16], strides: vec![2, 2, 1] },
            bev: BevConfig {
                height: 8,
                width: 8,
                pos_channels: 16,
                content_channels: 16,
                x_range: (-25.6, 25.6),
                y_range: (-25.6, 25.6),
                z_range: (-3.0, 5.0),
            },
            stack: AttentionStack { n_self: 1, n_cross: 1, heads: 2, head_dim: 8 },
            layout: None,
        }
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        self.backbone.feature_extent(self.image_height, self.image_width)
    }

    pub fn tokens_per_view(&self) -> usize {
        let (h, w) = self.feature_extent();
        h * w
    }

    pub fn layout_for(&self, design: PaDesign) -> TokenLayout {
        self.layout.unwrap_or(match design {
            PaDesign::Implicit => TokenLayout::Mixed,
            _ => TokenLayout::Restructured,
        })
    }

    pub fn validate(&self, design: PaDesign) -> Result<()> {
        self.bev.validate()?;
        self.backbone.validate()?;
        self.stack.validate()?;
        if self.n_views == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(config_err("image extents and view count must be positive"));
        }
        let c_s = self.bev.content_channels;
        if self.backbone.feature_channels() != c_s {
            return Err(config_err(format!(
                "backbone emits {} channels but the content width is {c_s}",
                self.backbone.feature_channels()
            )));
        }
        if self.layout_for(design) == TokenLayout::Mixed {
            if design != PaDesign::Implicit {
                return Err(config_err("mixed token layout only supports the implicit design"));
            }
            if self.bev.pos_channels != c_s {
                return Err(config_err("mixed token layout needs equal content and position widths"));
            }
        }
        Ok(())
    }
}

/// Per-call switches that do not change the computed function.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub routing: Routing,
    /// Use the block-diagonal dense reference for image self-attention.
    pub dense_self: bool,
    /// Record per-window attention weights.
    pub trace: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { routing: Routing::Windowed { pad: true }, dense_self: false, trace: false }
    }
}

#[derive(Clone, Debug)]
pub struct CftOutput {
    /// `[H_b·W_b, C_s]`, row-major over the BEV grid.
    pub f_b: Var,
    /// Backbone features `[N_v·H_s·W_s, C_s]`.
    pub f_s: Var,
    pub embedding: Option<BevEmbedding>,
    /// Attention traces of every cross block, when requested.
    pub traces: Vec<Vec<WindowTrace>>,
}

#[derive(Clone, Debug)]
pub struct CftModel {
    pub cfg: ModelConfig,
    pub layout: TokenLayout,
    pub backbone: Backbone,
    pub pa: PositionAware,
    pub self_blocks: Vec<SelfBlock>,
    pub cross_blocks: Vec<CrossBlock>,
    pub q_c: ParamId,
    pub q_p: ParamId,
    pub p_v: ParamId,
    p_x: Tensor<f64>,
    p_y: Tensor<f64>,
    view_of_token: Arc<Vec<Option<usize>>>,
}

impl CftModel {
    /// Registers all parameters under the `cft.` prefix. The layout is fixed
    /// at construction because it determines projection widths.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, design: PaDesign, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(design)?;
        let layout = cfg.layout_for(design);
        let bev = &cfg.bev;
        let (c_s, c_p) = (bev.content_channels, bev.pos_channels);
        let (fh, fw) = cfg.feature_extent();
        let backbone = Backbone::new(store, "cft.backbone", &cfg.backbone, rng)?;
        let bundle = image_position_bundle::<f64>(cfg.n_views, fh, fw, c_p, rng)?;
        let q_p = store.add("cft.q_p", bev_coordinate_embedding::<T>(bev)?);
        let q_c = store.add_normal("cft.q_c", &[bev.cells(), c_s], CONTENT_INIT_STD, rng);
        let p_v = store.add("cft.p_v", bundle.p_v.cast());
        let pa = PositionAware::new(store, c_p, c_s, bev.z_range, rng)?;
        let inner = cfg.stack.inner_dim();
        let (image_width, query_width) = match layout {
            TokenLayout::Restructured => (c_s + 3 * c_p, c_s + c_p),
            TokenLayout::Mixed => (c_s, c_s),
        };
        let self_blocks = (0..cfg.stack.n_self)
            .map(|i| SelfBlock::new(store, &format!("cft.self{i}"), image_width, c_s, inner, rng))
            .collect();
        let cross_blocks = (0..cfg.stack.n_cross)
            .map(|i| CrossBlock::new(store, &format!("cft.cross{i}"), query_width, image_width, c_s, inner, rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            backbone,
            pa,
            self_blocks,
            cross_blocks,
            q_c,
            q_p,
            p_v,
            p_x: bundle.p_x,
            p_y: bundle.p_y,
            view_of_token: bundle.view_of_token,
        })
    }

    /// Maps `n_views` images, stacked view-major as `[N_v·H·W, channels]`,
    /// to the BEV representation. Nothing about the cameras is an input.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: &Tensor<T>,
        design: PaDesign,
        scheme: &WindowScheme,
        opts: ForwardOptions,
    ) -> Result<CftOutput> {
        let cfg = &self.cfg;
        if self.layout == TokenLayout::Mixed && design != PaDesign::Implicit {
            return Err(config_err("a mixed-layout model only runs the implicit design"));
        }
        if scheme.height != cfg.bev.height || scheme.width != cfg.bev.width {
            return Err(config_err(format!(
                "scheme built for {}x{} but the BEV grid is {}x{}",
                scheme.height, scheme.width, cfg.bev.height, cfg.bev.width
            )));
        }
        if scheme.groups.iter().flatten().any(|&v| v >= cfg.n_views) {
            return Err(config_err("scheme routes to a view the model does not have"));
        }
        let expect = [cfg.n_views * cfg.image_height * cfg.image_width, cfg.backbone.in_channels];
        if images.shape() != expect {
            return Err(shape_err("cft_forward", format!("images {:?}, expected {expect:?}", images.shape())));
        }
        let x = g.constant(images.clone())?;
        let (f_s, fh, fw) = self.backbone.forward(g, p, x, cfg.n_views, cfg.image_height, cfg.image_width)?;
        let tpv = fh * fw;
        let p_x = g.constant(self.p_x.cast())?;
        let p_y = g.constant(self.p_y.cast())?;
        let p_v = g.gather_rows(p.get(self.p_v), self.view_of_token.clone())?;
        let q_c = p.get(self.q_c);
        let q_p = p.get(self.q_p);

        let (bev_content, bev_pos, img_content, img_pos, embedding) = match self.layout {
            TokenLayout::Mixed => {
                let bev = g.add(q_c, q_p)?;
                let a = g.add(f_s, p_x)?;
                let b = g.add(a, p_y)?;
                let img = g.add(b, p_v)?;
                (bev, None, img, None, None)
            }
            TokenLayout::Restructured => {
                let (q_ep, embedding) = if design.has_height_path() {
                    let e = self.pa.embed(g, p, q_p, q_c)?;
                    (e.q_ep, Some(e))
                } else {
                    (q_p, None)
                };
                let img_pos = g.concat(&[p_x, p_y, p_v], 1)?;
                (q_c, Some(q_ep), f_s, Some(img_pos), embedding)
            }
        };

        let heads = cfg.stack.heads;
        let mut img = img_content;
        for block in &self.self_blocks {
            img = block.forward(g, p, img, img_pos, cfg.n_views, tpv, heads, opts.dense_self)?;
        }
        let memory = Memory { content: img, pos: img_pos, tokens_per_view: tpv };
        let mut bev = bev_content;
        let mut traces = Vec::new();
        for block in &self.cross_blocks {
            let mut trace = Vec::new();
            let t = opts.trace.then_some(&mut trace);
            bev = block.forward(g, p, bev, bev_pos, memory, scheme, heads, opts.routing, t)?;
            if opts.trace {
                traces.push(trace);
            }
        }
        Ok(CftOutput { f_b: bev, f_s, embedding, traces })
    }
}
