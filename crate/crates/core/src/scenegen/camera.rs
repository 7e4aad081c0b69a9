//! Pinhole camera rig used to render scenes and by the projection baseline.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::va::View;

/// Depth below which a point counts as behind the camera.
pub const NEAR_PLANE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view: View,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-ego rotation; camera axes are x right, y down, z forward.
    pub rotation: Rotation3<f64>,
    /// Camera origin in the ego frame.
    pub translation: Vector3<f64>,
}

/// A projected point: pixel coordinates (pixel `(r, c)` spans
/// `[c, c+1) × [r, r+1)`) and depth along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    /// Camera at `azimuth_deg` about ego +z, mounted at `height` above the
    /// ego origin, looking horizontally.
    pub fn looking_at(view: View, width: usize, height: usize, hfov_deg: f64, mount_height: f64) -> Self {
        let psi = view.azimuth_deg().to_radians();
        let forward = Vector3::new(psi.cos(), psi.sin(), 0.0);
        let right = Vector3::new(psi.sin(), -psi.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            view,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: Vector3::new(0.0, 0.0, mount_height),
        }
    }

    /// Projection of an ego-frame point, `None` behind the near plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Pixel> {
        let c = self.rotation.inverse() * (p - self.translation);
        if c.z < NEAR_PLANE {
            return None;
        }
        Some(Pixel { u: self.fx * c.x / c.z + self.cx, v: self.fy * c.y / c.z + self.cy, depth: c.z })
    }

    pub fn in_image(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Ego-frame point at `depth` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let c = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.rotation * c + self.translation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    /// Six cameras at the standard azimuths, in [`View`] index order.
    pub fn surround(width: usize, height: usize, hfov_deg: f64, mount_height: f64) -> Result<Self> {
        if !(60.0..180.0).contains(&hfov_deg) {
            return Err(config_err(format!("horizontal FOV {hfov_deg}° cannot cover a 60° sector")));
        }
        let cameras = View::ALL.iter().map(|&v| Camera::looking_at(v, width, height, hfov_deg, mount_height)).collect();
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Views whose image contains the projection of `p`.
    pub fn visible_in(&self, p: &Vector3<f64>) -> Vec<(usize, Pixel)> {
        self.cameras
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.project(p).filter(|px| c.in_image(px)).map(|px| (i, px)))
            .collect()
    }
}

/// Random rotation with uniform axis and angle `~ N(0, σ_rot)`.
pub fn random_rotation(sigma_rot_deg: f64, rng: &mut impl Rng) -> Rotation3<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = Normal::new(0.0, sigma_rot_deg.to_radians()).expect("finite sigma").sample(rng);
    Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle)
}

/// Copy of `rig` with every camera rotated by a random small rotation (in
/// the ego frame) and its origin jittered per axis.
pub fn perturb_extrinsics(rig: &CameraRig, sigma_rot_deg: f64, sigma_trans_m: f64, rng: &mut impl Rng) -> Result<CameraRig> {
    if !(sigma_rot_deg >= 0.0 && sigma_trans_m >= 0.0) {
        return Err(config_err("noise levels must be non-negative"));
    }
    if sigma_rot_deg == 0.0 && sigma_trans_m == 0.0 {
        return Ok(rig.clone());
    }
    let jitter = Normal::new(0.0, sigma_trans_m).expect("finite sigma");
    let mut out = rig.clone();
    for cam in &mut out.cameras {
        cam.rotation = random_rotation(sigma_rot_deg, rng) * cam.rotation;
        cam.translation += Vector3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng));
    }
    Ok(out)
}
