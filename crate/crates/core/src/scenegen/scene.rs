//! Random boxes in the ego frame rendered as class-colored splats.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::CameraRig;
use crate::dethead::{normalize_yaw, DetectionBox};
use crate::error::{config_err, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub name: String,
    /// Mean `(l, w, h)` in meters; samples vary by ±10 %.
    pub size: [f64; 3],
    pub color: [f32; 3],
    pub max_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum planar distance between object centers.
    pub min_separation: f64,
    /// Minimum planar distance of an object from the ego origin.
    pub min_range: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub classes: Vec<ClassPrior>,
}

impl SceneConfig {
    pub fn standard(image_height: usize, image_width: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        Self {
            n_views: 6,
            image_height,
            image_width,
            hfov_deg: 70.0,
            camera_height: 1.5,
            min_objects: 1,
            max_objects: 8,
            min_separation: 4.0,
            min_range: 4.0,
            x_range,
            y_range,
            z_range: (-3.0, 5.0),
            classes: vec![
                ClassPrior { name: "car".into(), size: [4.5, 1.9, 1.6], color: [1.0, 0.2, 0.0], max_speed: 10.0 },
                ClassPrior { name: "truck".into(), size: [8.0, 2.6, 3.2], color: [0.0, 1.0, 0.2], max_speed: 8.0 },
                ClassPrior { name: "pedestrian".into(), size: [0.8, 0.7, 1.75], color: [0.2, 0.0, 1.0], max_speed: 2.0 },
            ],
        }
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::surround(self.image_width, self.image_height, self.hfov_deg, self.camera_height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views != 6 {
            return Err(config_err("the synthetic rig has exactly six cameras"));
        }
        if self.min_objects > self.max_objects {
            return Err(config_err("min_objects exceeds max_objects"));
        }
        if self.max_objects > 0 && self.classes.is_empty() {
            return Err(config_err("objects requested without any class"));
        }
        let reach = self.x_range.1.min(-self.x_range.0).min(self.y_range.1).min(-self.y_range.0);
        if reach <= self.min_range {
            return Err(config_err(format!("range {reach} m leaves no room beyond the {} m exclusion", self.min_range)));
        }
        for c in &self.classes {
            let z = c.size[2] * 0.55;
            if z + 0.3 > self.z_range.1 || c.size[2] * 0.45 - 0.3 < self.z_range.0 {
                return Err(config_err(format!("class {} does not fit the z range", c.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub seed: u64,
    pub boxes: Vec<DetectionBox>,
    /// `[N_v·H·W, 3]`, view-major then row-major.
    pub images: Tensor<f32>,
}

/// Splat standard deviation in pixels for an object of height `h` at `depth`.
pub fn splat_sigma(fy: f64, h: f64, depth: f64) -> f64 {
    (0.5 * fy * h / depth).max(0.6)
}

/// Renders boxes as Gaussian splats at their projected centers, taking the
/// channel-wise maximum where splats overlap.
pub fn render(boxes: &[DetectionBox], rig: &CameraRig, classes: &[ClassPrior]) -> Tensor<f32> {
    let cam0 = &rig.cameras[0];
    let (h, w) = (cam0.height, cam0.width);
    let mut img = Tensor::<f32>::zeros(&[rig.len() * h * w, 3]);
    for b in boxes {
        let p = Vector3::new(b.center[0], b.center[1], b.center[2]);
        for (vi, px) in rig.visible_in(&p) {
            let cam = &rig.cameras[vi];
            let sigma = splat_sigma(cam.fy, b.size[2], px.depth);
            let reach = (3.0 * sigma).ceil() as isize;
            let (c0, r0) = (px.u.floor() as isize, px.v.floor() as isize);
            let color = classes[b.class_id].color;
            for r in (r0 - reach).max(0)..(r0 + reach + 1).min(h as isize) {
                for c in (c0 - reach).max(0)..(c0 + reach + 1).min(w as isize) {
                    let du = c as f64 + 0.5 - px.u;
                    let dv = r as f64 + 0.5 - px.v;
                    let a = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp() as f32;
                    let row = vi * h * w + r as usize * w + c as usize;
                    for (ch, &col) in color.iter().enumerate() {
                        let slot = &mut img.data_mut()[row * 3 + ch];
                        *slot = slot.max(a * col);
                    }
                }
            }
        }
    }
    img
}

/// Samples one scene; identical seeds give identical scenes.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, rig: &CameraRig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<DetectionBox> = Vec::with_capacity(n);
    // rejection sampling; dense configurations may place fewer objects
    let mut attempts = 0;
    while boxes.len() < n && attempts < 200 * n.max(1) {
        attempts += 1;
        let class_id = rng.random_range(0..cfg.classes.len());
        let prior = &cfg.classes[class_id];
        // keep a margin so the whole 9×9 neighbourhood of the center stays in range
        let x = rng.random_range(cfg.x_range.0 + 1.0..cfg.x_range.1 - 1.0);
        let y = rng.random_range(cfg.y_range.0 + 1.0..cfg.y_range.1 - 1.0);
        if x.hypot(y) < cfg.min_range {
            continue;
        }
        if boxes.iter().any(|b| (b.center[0] - x).hypot(b.center[1] - y) < cfg.min_separation) {
            continue;
        }
        let size = prior.size.map(|s| s * rng.random_range(0.9..1.1));
        let z = size[2] / 2.0 + rng.random_range(-0.3..0.3);
        if rig.visible_in(&Vector3::new(x, y, z)).is_empty() {
            continue;
        }
        let yaw = normalize_yaw(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let speed = if rng.random_bool(0.5) { rng.random_range(0.0..prior.max_speed) } else { 0.0 };
        boxes.push(DetectionBox {
            center: [x, y, z],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            class_id,
            score: 1.0,
        });
    }
    let images = render(&boxes, rig, &cfg.classes);
    Ok(SceneSample { seed, boxes, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::va::View;

    fn cfg() -> SceneConfig {
        SceneConfig::standard(64, 64, (-51.2, 51.2), (-51.2, 51.2))
    }

    #[test]
    fn same_seed_same_scene() {
        let c = cfg();
        let rig = c.rig().unwrap();
        let a = generate_scene(7, &c, &rig).unwrap();
        assert_eq!(a, generate_scene(7, &c, &rig).unwrap());
        assert_ne!(a, generate_scene(8, &c, &rig).unwrap());
        assert!((1..=8).contains(&a.boxes.len()));
    }

    #[test]
    fn empty_config_renders_blank() {
        let mut c = cfg();
        c.min_objects = 0;
        c.max_objects = 0;
        let s = generate_scene(1, &c, &c.rig().unwrap()).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn object_ahead_lights_only_the_front_view() {
        let c = cfg();
        let rig = c.rig().unwrap();
        let b = DetectionBox {
            center: [20.0, 0.0, 0.0],
            size: [4.5, 1.9, 1.6],
            yaw: 0.0,
            velocity: [0.0, 0.0],
            class_id: 0,
            score: 1.0,
        };
        let img = render(&[b], &rig, &c.classes);
        let per_view = 64 * 64;
        for v in 0..6 {
            let lit = (0..per_view).any(|i| img.row(v * per_view + i)[0] > 0.0);
            assert_eq!(lit, v == View::Front.index(), "view {v}");
        }
        // brightest pixel sits at the projection, slightly below the center
        let front = View::Front.index() * per_view;
        let (best, _) = (0..per_view).map(|i| (i, img.row(front + i)[0])).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        let (r, col) = (best / 64, best % 64);
        assert!(col == 31 || col == 32);
        assert!((33..=37).contains(&r), "row {r}");
    }
}
