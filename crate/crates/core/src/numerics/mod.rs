//! Dense tensors, a reverse-mode tape, parameters and the optimizer.

mod counter;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use counter::OpCounter;
pub use graph::{ConvGeom, Gradients, Graph, Var, FOCAL_EPS};
pub use optim::{AdamW, StepSchedule};
pub use params::{Bound, ParamId, ParamStore, Parameter, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use scalar::Real;
pub use tensor::Tensor;

use crate::error::{config_err, Result};

/// Angular frequencies `temperature^(-2i/dim)` for `i in 0..dim/2`.
pub(crate) fn sinusoid_freqs<T: Real>(dim: usize, temperature: f64) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err(format!("sinusoidal width must be even and positive, got {dim}")));
    }
    Ok((0..dim / 2).map(|i| T::of(temperature.powf(-(2.0 * i as f64) / dim as f64))).collect())
}
