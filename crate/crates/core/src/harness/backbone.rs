//! Tiny convolutional feature extractor shared by all views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::layers::Conv2d;
use crate::numerics::{Bound, Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of every stage; the last entry is the feature width.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl BackboneConfig {
    pub fn new(in_channels: usize, feature_channels: usize) -> Self {
        Self { in_channels, channels: vec![16, 32, feature_channels], strides: vec![2, 2, 1] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(config_err("backbone needs one stride per stage"));
        }
        if self.strides.iter().any(|&s| s == 0) || self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(config_err("backbone strides and channels must be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Feature-map extent for an input image extent.
    pub fn feature_extent(&self, height: usize, width: usize) -> (usize, usize) {
        self.strides.iter().fold((height, width), |(h, w), &s| (h.div_ceil(s), w.div_ceil(s)))
    }
}

/// 3×3 convolutions with rectifiers between stages; the last stage is linear.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut c_in = cfg.in_channels;
        for (i, (&c_out, &s)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            stages.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c_out, 3, s, rng));
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    /// `images` holds `n_views` maps of `height × width` rows, view-major.
    /// Returns view-major features and their extent.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        n_views: usize,
        height: usize,
        width: usize,
    ) -> Result<(Var, usize, usize)> {
        let per_view = height * width;
        if g.shape(images)[0] != n_views * per_view {
            return Err(shape_err("backbone", format!("{:?} for {n_views} views of {height}x{width}", g.shape(images))));
        }
        let mut outs = Vec::with_capacity(n_views);
        let mut extent = (height, width);
        for v in 0..n_views {
            let mut x = g.slice(images, 0, v * per_view, (v + 1) * per_view)?;
            let (mut h, mut w) = (height, width);
            for (i, stage) in self.stages.iter().enumerate() {
                let (y, ho, wo) = stage.forward(g, p, x, h, w)?;
                x = if i + 1 < self.stages.len() { g.relu(y)? } else { y };
                (h, w) = (ho, wo);
            }
            extent = (h, w);
            outs.push(x);
        }
        let f = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        Ok((f, extent.0, extent.1))
    }
}
