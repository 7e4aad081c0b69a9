use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

/// Piecewise-constant learning rate: multiplied by `factor` at each
/// milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}

/// AdamW with decoupled weight decay and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        let zeros = |p: &super::Parameter<T>| vec![T::zero(); p.value.len()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients scaled by
    /// `grad_scale`, and returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, grad_scale: f64) -> f64 {
        let norm = store
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| (g.as_f64() * grad_scale).powi(2))
            .sum::<f64>()
            .sqrt();
        if lr == 0.0 {
            return norm;
        }
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let (lr_t, eps, wd, scale) = (T::of(lr), T::of(self.eps), T::of(self.weight_decay), T::of(grad_scale * clip));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let decay = p.value.rank() > 1;
            let grad = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] * scale;
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                if decay {
                    *w -= lr_t * wd * *w;
                }
                *w -= lr_t * update;
            }
        }
        norm
    }
}
