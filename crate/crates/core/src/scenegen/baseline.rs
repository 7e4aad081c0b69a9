//! Camera-driven reference detector: image features are lifted onto the BEV
//! grid by projecting grid points at a fixed height through the rig.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::{Camera, CameraRig};
use crate::dethead::{DetHead, HeadConfig, HeadVars};
use crate::encodings::BevConfig;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::layers::Conv2d;
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Height (m) at which every grid point is projected.
    pub z_fixed: f64,
    /// Sub-samples per grid side; each becomes its own group of channels.
    pub supersample: usize,
    pub hidden_channels: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { z_fixed: 0.8, supersample: 4, hidden_channels: 32 }
    }
}

impl BaselineConfig {
    pub fn lifted_channels(&self, image_channels: usize) -> usize {
        self.supersample * self.supersample * image_channels
    }
}

/// Bilinear sample of one view at continuous pixel coordinates; pixel
/// `(r, c)` has its center at `(c + 0.5, r + 0.5)` and samples outside the
/// image read as zero.
pub fn bilinear(images: &Tensor<f32>, view: usize, cam: &Camera, u: f64, v: f64, out: &mut [f64]) {
    let (h, w) = (cam.height as isize, cam.width as isize);
    let channels = out.len();
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (r, c) = (y0 as isize + dy, x0 as isize + dx);
            if r < 0 || c < 0 || r >= h || c >= w || wx * wy == 0.0 {
                continue;
            }
            let row = view * (h * w) as usize + (r * w + c) as usize;
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wx * wy * images.data()[row * channels + ch] as f64;
            }
        }
    }
}

/// `[H_b·W_b, s²·C]`: for each grid and each of its `s × s` sub-points at
/// `z_fixed`, the mean bilinear sample over the views that see it.
pub fn projection_baseline(images: &Tensor<f32>, rig: &CameraRig, bev: &BevConfig, cfg: &BaselineConfig) -> Result<Tensor<f32>> {
    let cam0 = rig.cameras.first().ok_or_else(|| config_err("empty rig"))?;
    let per_view = cam0.height * cam0.width;
    let (rows, channels) = images.dims2()?;
    if rows != rig.len() * per_view {
        return Err(shape_err("projection_baseline", format!("{rows} pixels for {} views", rig.len())));
    }
    let s = cfg.supersample;
    if s == 0 {
        return Err(config_err("supersample must be positive"));
    }
    let (cx, cy) = bev.cell_size();
    let width = s * s * channels;
    let mut out = vec![0.0f32; bev.cells() * width];
    let mut acc = vec![0.0; channels];
    let mut sample = vec![0.0; channels];
    for h in 0..bev.height {
        for w in 0..bev.width {
            let (gx, gy) = bev.grid_center(h, w);
            for i in 0..s {
                for j in 0..s {
                    let x = gx + cx * ((i as f64 + 0.5) / s as f64 - 0.5);
                    let y = gy + cy * ((j as f64 + 0.5) / s as f64 - 0.5);
                    let p = Vector3::new(x, y, cfg.z_fixed);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let mut n = 0;
                    for (vi, px) in rig.visible_in(&p) {
                        bilinear(images, vi, &rig.cameras[vi], px.u, px.v, &mut sample);
                        acc.iter_mut().zip(&sample).for_each(|(a, s)| *a += s);
                        n += 1;
                    }
                    if n == 0 {
                        continue;
                    }
                    let base = (h * bev.width + w) * width + (i * s + j) * channels;
                    for ch in 0..channels {
                        out[base + ch] = (acc[ch] / n as f64) as f32;
                    }
                }
            }
        }
    }
    Tensor::new(&[bev.cells(), width], out)
}

/// Two 3×3 convolutions on the lifted map followed by the detection head.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: DetHead,
    pub bev: BevConfig,
}

impl BaselineModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        bev: &BevConfig,
        cfg: &BaselineConfig,
        image_channels: usize,
        head: &HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.hidden_channels;
        Ok(Self {
            conv1: Conv2d::new(store, "baseline.conv1", cfg.lifted_channels(image_channels), c, 3, 1, rng),
            conv2: Conv2d::new(store, "baseline.conv2", c, c, 3, 1, rng),
            head: DetHead::new(store, "baseline.head", c, head, rng)?,
            bev: bev.clone(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, lifted: &Tensor<T>) -> Result<HeadVars> {
        let (h, w) = (self.bev.height, self.bev.width);
        let x = g.constant(lifted.clone())?;
        let (x, _, _) = self.conv1.forward(g, p, x, h, w)?;
        let x = g.relu(x)?;
        let (x, _, _) = self.conv2.forward(g, p, x, h, w)?;
        let x = g.relu(x)?;
        self.head.forward(g, p, x, h, w)
    }
}
