//! Synthetic surround-view world. The camera rig lives only here and in the
//! projection baseline; the transformer never receives it.

pub mod baseline;
pub mod camera;
pub mod dataset;
pub mod scene;

pub use camera::{perturb_extrinsics, Camera, CameraRig, Pixel};
pub use scene::{generate_scene, ClassPrior, SceneConfig, SceneSample};
