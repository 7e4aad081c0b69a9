//! Parameterized building blocks shared by the model components.

use rand::Rng;

use super::{Bound, ConvGeom, Graph, ParamId, ParamStore, Real, Var};
use crate::error::Result;

/// `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(&format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add_const(&format!("{name}.bias"), &[fan_out], 0.0);
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.weight))?;
        g.add_row(y, p.get(self.bias))
    }
}

/// Two affine layers with a rectifier in between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub hidden: Linear,
    pub out: Linear,
}

impl Ffn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, rng),
            out: Linear::new(store, &format!("{name}.fc2"), hidden, fan_out, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add_const(&format!("{name}.gain"), &[width], 1.0),
            bias: store.add_const(&format!("{name}.bias"), &[width], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gain), p.get(self.bias))
    }
}

/// Square-kernel convolution on row-major `[H·W, C]` maps via `im2col`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let linear = Linear::new(store, name, kernel * kernel * in_channels, out_channels, rng);
        Self { linear, kernel, stride, in_channels }
    }

    pub fn geom(&self, height: usize, width: usize) -> ConvGeom {
        ConvGeom { height, width, channels: self.in_channels, kernel: self.kernel, stride: self.stride, pad: self.kernel / 2 }
    }

    /// Returns the output map and its `(height, width)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        height: usize,
        width: usize,
    ) -> Result<(Var, usize, usize)> {
        let geom = self.geom(height, width);
        let cols = if self.kernel == 1 && self.stride == 1 { x } else { g.im2col(x, geom)? };
        let y = self.linear.forward(g, p, cols)?;
        Ok((y, geom.out_height(), geom.out_width()))
    }
}
