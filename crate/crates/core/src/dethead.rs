//! Center-based detection head on the 4× upsampled BEV map: heatmap and box
//! regression, their training targets and losses, and peak decoding with
//! class-wise circular NMS.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::BevConfig;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::layers::Conv2d;
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor, Var};

/// Δx, Δy, z, log l, log w, log h, sin yaw, cos yaw, vx, vy.
pub const REG_CHANNELS: usize = 10;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
/// Speed above which an object counts as moving.
const HEAT_INIT_SCALE: f64 = 0.05;
pub const MOVING_SPEED: f64 = 0.2;
/// Heatmap logit bias at initialization: sigmoid⁻¹(0.1).
const HEAT_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
}

impl DetectionBox {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn is_moving(&self) -> bool {
        self.speed() > MOVING_SPEED
    }

    pub fn planar_distance(&self, other: &DetectionBox) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_classes: usize,
    pub hidden_channels: usize,
    /// Side of the square Gaussian stamped per object, in output cells.
    pub kernel_size: usize,
    /// Kernel value at the middle of each edge.
    pub kernel_edge_value: f64,
    pub top_k: usize,
    pub score_threshold: f64,
    /// Base suppression radius in meters.
    pub nms_radius: f64,
    /// Per-class multiplier of the suppression radius.
    pub nms_scale: Vec<f64>,
}

impl HeadConfig {
    pub fn new(n_classes: usize, hidden_channels: usize) -> Self {
        Self {
            n_classes,
            hidden_channels,
            kernel_size: 9,
            kernel_edge_value: 0.05,
            top_k: 50,
            score_threshold: 0.05,
            nms_radius: 1.0,
            nms_scale: vec![1.0; n_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.hidden_channels == 0 {
            return Err(config_err("head needs at least one class and hidden channel"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size < 3 {
            return Err(config_err(format!("kernel size {} must be odd and ≥ 3", self.kernel_size)));
        }
        if !(0.0..1.0).contains(&self.kernel_edge_value) || self.kernel_edge_value == 0.0 {
            return Err(config_err("kernel edge value must lie in (0, 1)"));
        }
        if self.nms_scale.len() != self.n_classes {
            return Err(config_err("one NMS scale per class is required"));
        }
        Ok(())
    }

    /// σ such that the kernel reaches `kernel_edge_value` at distance
    /// `kernel_size / 2` from the center.
    pub fn sigma(&self) -> f64 {
        let r = (self.kernel_size / 2) as f64;
        r / (-2.0 * self.kernel_edge_value.ln()).sqrt()
    }
}

/// Output grid: the BEV range at four times the BEV resolution.
pub fn output_grid(bev: &BevConfig) -> BevConfig {
    BevConfig { height: 4 * bev.height, width: 4 * bev.width, ..bev.clone() }
}

/// Graph handles of one head evaluation, both `[4H_b·4W_b, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub heat_logits: Var,
    pub regression: Var,
}

/// Detached head predictions in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub height: usize,
    pub width: usize,
    /// `[H·W, n_classes]` in `[0, 1]`.
    pub heatmap: Tensor<f64>,
    /// `[H·W, REG_CHANNELS]`.
    pub regression: Tensor<f64>,
}

impl HeadOutput {
    pub fn from_graph<T: Real>(g: &Graph<T>, vars: HeadVars, height: usize, width: usize) -> Self {
        let logits: Tensor<f64> = g.value(vars.heat_logits).cast();
        Self { height, width, heatmap: logits.sigmoid(), regression: g.value(vars.regression).cast() }
    }
}

#[derive(Clone, Debug)]
pub struct DetHead {
    pub up1: Conv2d,
    pub up2: Conv2d,
    pub heat: Conv2d,
    pub reg: Conv2d,
}

impl DetHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &HeadConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden_channels;
        let up1 = Conv2d::new(store, &format!("{name}.up1"), in_channels, c, 3, 1, rng);
        let up2 = Conv2d::new(store, &format!("{name}.up2"), c, c, 3, 1, rng);
        let heat = Conv2d::new(store, &format!("{name}.heat"), c, cfg.n_classes, 1, 1, rng);
        let reg = Conv2d::new(store, &format!("{name}.reg"), c, REG_CHANNELS, 1, 1, rng);
        let prior = T::of(HEAT_PRIOR_BIAS);
        store.get_mut(heat.linear.bias).value.data_mut().iter_mut().for_each(|b| *b = prior);
        // start every cell near the prior so early focal gradients stay bounded
        let shrink = T::of(HEAT_INIT_SCALE);
        store.get_mut(heat.linear.weight).value.data_mut().iter_mut().for_each(|w| *w = *w * shrink);
        Ok(Self { up1, up2, heat, reg })
    }

    /// `f_b` is `[H_b·W_b, C]` row-major.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_b: Var, h_b: usize, w_b: usize) -> Result<HeadVars> {
        if g.shape(f_b)[0] != h_b * w_b {
            return Err(shape_err("head", format!("{:?} for a {h_b}x{w_b} grid", g.shape(f_b))));
        }
        let x = g.upsample2(f_b, h_b, w_b)?;
        let (x, h, w) = self.up1.forward(g, p, x, 2 * h_b, 2 * w_b)?;
        let x = g.relu(x)?;
        let x = g.upsample2(x, h, w)?;
        let (x, h, w) = self.up2.forward(g, p, x, 2 * h, 2 * w)?;
        let x = g.relu(x)?;
        let (heat_logits, _, _) = self.heat.forward(g, p, x, h, w)?;
        let (regression, _, _) = self.reg.forward(g, p, x, h, w)?;
        Ok(HeadVars { heat_logits, regression })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub heatmap: Tensor<f64>,
    pub regression: Tensor<f64>,
    pub mask: Vec<bool>,
    /// Boxes outside the range, not stamped.
    pub skipped: usize,
}

/// Regression vector of `b` relative to the center of the cell holding it.
pub fn encode_box(b: &DetectionBox, grid: &BevConfig, h: usize, w: usize) -> [f64; REG_CHANNELS] {
    let (cx, cy) = grid.grid_center(h, w);
    let (sx, sy) = grid.cell_size();
    [
        (b.center[0] - cx) / sx,
        (b.center[1] - cy) / sy,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

pub fn decode_box(reg: &[f64], grid: &BevConfig, h: usize, w: usize, class_id: usize, score: f64) -> DetectionBox {
    let (cx, cy) = grid.grid_center(h, w);
    let (sx, sy) = grid.cell_size();
    DetectionBox {
        center: [cx + reg[0] * sx, cy + reg[1] * sy, reg[2]],
        size: [reg[3].exp(), reg[4].exp(), reg[5].exp()],
        yaw: normalize_yaw(reg[6].atan2(reg[7])),
        velocity: [reg[8], reg[9]],
        class_id,
        score: score.clamp(0.0, 1.0),
    }
}

/// Heatmap, regression and mask targets on the output grid.
pub fn make_targets(boxes: &[DetectionBox], grid: &BevConfig, cfg: &HeadConfig) -> Result<Targets> {
    cfg.validate()?;
    let (gh, gw) = (grid.height, grid.width);
    let mut heat = Tensor::<f64>::zeros(&[gh * gw, cfg.n_classes]);
    let mut reg = Tensor::<f64>::zeros(&[gh * gw, REG_CHANNELS]);
    let mut mask = vec![false; gh * gw];
    let mut skipped = 0;
    let r = (cfg.kernel_size / 2) as isize;
    let two_s2 = 2.0 * cfg.sigma().powi(2);
    for b in boxes {
        if b.class_id >= cfg.n_classes {
            return Err(config_err(format!("class {} outside the head's {} classes", b.class_id, cfg.n_classes)));
        }
        let Some((h, w)) = grid.cell_of(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        for dh in -r..=r {
            for dw in -r..=r {
                let (y, x) = (h as isize + dh, w as isize + dw);
                if y < 0 || x < 0 || y >= gh as isize || x >= gw as isize {
                    continue;
                }
                let v = (-((dh * dh + dw * dw) as f64) / two_s2).exp();
                let slot = &mut heat.data_mut()[(y as usize * gw + x as usize) * cfg.n_classes + b.class_id];
                *slot = slot.max(v);
            }
        }
        let cell = h * gw + w;
        reg.data_mut()[cell * REG_CHANNELS..(cell + 1) * REG_CHANNELS].copy_from_slice(&encode_box(b, grid, h, w));
        mask[cell] = true;
    }
    Ok(Targets { heatmap: heat, regression: reg, mask, skipped })
}

/// Focal loss on heatmap logits against the soft targets.
pub fn focal_loss<T: Real>(g: &mut Graph<T>, heat_logits: Var, targets: &Targets) -> Result<Var> {
    g.focal_loss(heat_logits, &targets.heatmap.cast(), FOCAL_ALPHA, FOCAL_BETA)
}

/// Mean absolute regression error over masked cells and all channels.
pub fn reg_l1_loss<T: Real>(g: &mut Graph<T>, regression: Var, targets: &Targets) -> Result<Var> {
    g.masked_l1(regression, &targets.regression.cast(), &targets.mask)
}

fn is_peak(heat: &Tensor<f64>, n_classes: usize, height: usize, width: usize, h: usize, w: usize, c: usize) -> bool {
    let at = |y: usize, x: usize| heat.data()[(y * width + x) * n_classes + c];
    let v = at(h, w);
    for y in h.saturating_sub(1)..(h + 2).min(height) {
        for x in w.saturating_sub(1)..(w + 2).min(width) {
            if (y, x) == (h, w) {
                continue;
            }
            let u = at(y, x);
            // ties go to the earlier cell so a plateau yields one peak
            if u > v || (u == v && (y, x) < (h, w)) {
                return false;
            }
        }
    }
    true
}

/// Peaks → top-K → metric boxes → class-wise circular NMS with per-class
/// radii. Output sorted by descending score.
pub fn decode(out: &HeadOutput, grid: &BevConfig, cfg: &HeadConfig) -> Result<Vec<DetectionBox>> {
    cfg.validate()?;
    let (gh, gw, nc) = (out.height, out.width, cfg.n_classes);
    if out.heatmap.shape() != [gh * gw, nc] || out.regression.shape() != [gh * gw, REG_CHANNELS] {
        return Err(shape_err("decode", format!("heatmap {:?}, regression {:?}", out.heatmap.shape(), out.regression.shape())));
    }
    if (gh, gw) != (grid.height, grid.width) {
        return Err(shape_err("decode", format!("{gh}x{gw} output on a {}x{} grid", grid.height, grid.width)));
    }
    let mut peaks = Vec::new();
    for h in 0..gh {
        for w in 0..gw {
            for c in 0..nc {
                let s = out.heatmap.data()[(h * gw + w) * nc + c];
                if s >= cfg.score_threshold && is_peak(&out.heatmap, nc, gh, gw, h, w, c) {
                    peaks.push((s, h, w, c));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    peaks.truncate(cfg.top_k);
    let mut kept: Vec<DetectionBox> = Vec::with_capacity(peaks.len());
    for (s, h, w, c) in peaks {
        let b = decode_box(out.regression.row(h * gw + w), grid, h, w, c, s);
        let radius = cfg.nms_radius * cfg.nms_scale[c];
        if kept.iter().any(|k| k.class_id == c && k.planar_distance(&b) < radius) {
            continue;
        }
        kept.push(b);
    }
    Ok(kept)
}

/// Head output equal to the targets themselves, bypassing the network.
pub fn targets_as_output(t: &Targets, grid: &BevConfig) -> HeadOutput {
    HeadOutput { height: grid.height, width: grid.width, heatmap: t.heatmap.clone(), regression: t.regression.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BevConfig {
        output_grid(&BevConfig {
            height: 4,
            width: 4,
            pos_channels: 8,
            content_channels: 8,
            x_range: (-8.0, 8.0),
            y_range: (-8.0, 8.0),
            z_range: (-3.0, 5.0),
        })
    }

    fn boxed(x: f64, y: f64, class_id: usize) -> DetectionBox {
        DetectionBox {
            center: [x, y, 0.5],
            size: [4.0, 2.0, 1.5],
            yaw: 0.3,
            velocity: [0.0, 0.0],
            class_id,
            score: 1.0,
        }
    }

    #[test]
    fn kernel_edge_value() {
        let cfg = HeadConfig::new(2, 8);
        let s = cfg.sigma();
        assert!(((-16.0 / (2.0 * s * s)).exp() - 0.05).abs() < 1e-12);
        assert!((s - 1.6345).abs() < 1e-3);
    }

    #[test]
    fn empty_scene_targets() {
        let t = make_targets(&[], &grid(), &HeadConfig::new(2, 8)).unwrap();
        assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
        assert!(t.mask.iter().all(|&m| !m));
    }

    #[test]
    fn peak_is_one_at_the_center_cell() {
        let g = grid();
        let (x, y) = g.grid_center(5, 6);
        let t = make_targets(&[boxed(x, y, 1)], &g, &HeadConfig::new(2, 8)).unwrap();
        let cell = 5 * 16 + 6;
        assert_eq!(t.heatmap.data()[cell * 2 + 1], 1.0);
        assert_eq!(t.heatmap.data()[cell * 2], 0.0);
        assert!(t.mask[cell]);
        assert_eq!(t.mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(&t.regression.row(cell)[..3], &[0.0, 0.0, 0.5]);
    }

    #[test]
    fn out_of_range_boxes_are_counted() {
        let t = make_targets(&[boxed(30.0, 0.0, 0)], &grid(), &HeadConfig::new(1, 8)).unwrap();
        assert_eq!(t.skipped, 1);
    }

    #[test]
    fn yaw_wraps_into_half_open_interval() {
        assert_eq!(normalize_yaw(-PI), PI);
        assert!((normalize_yaw(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(normalize_yaw(0.5), 0.5);
    }

    #[test]
    fn nms_keeps_the_stronger_of_two_close_peaks() {
        let g = grid();
        let cfg = HeadConfig { nms_radius: 3.0, ..HeadConfig::new(1, 8) };
        let mut heat = Tensor::zeros(&[256, 1]);
        heat.data_mut()[5 * 16 + 5] = 0.9;
        heat.data_mut()[5 * 16 + 7] = 0.6;
        let out = HeadOutput { height: 16, width: 16, heatmap: heat, regression: Tensor::zeros(&[256, REG_CHANNELS]) };
        let dets = decode(&out, &g, &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.9);
        let cfg0 = HeadConfig { top_k: 0, ..cfg };
        assert!(decode(&out, &g, &cfg0).unwrap().is_empty());
    }
}
