//! Parameter-handle layers. A layer owns no data, just [`ParamRef`]s into the
//! model's flat store plus its hyperparameters, so models stay `Send + Sync`
//! and checkpointing is a walk over the store registry.

use crate::nn::graph::{Graph, ValId};
use crate::nn::store::{ParamBuilder, ParamRef};

pub const NORM_EPS: f64 = 1e-6;

/// Bias-free 1-D convolution over (channels, time). Weight layout is
/// (out_ch, in_ch/groups * kernel).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamRef,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Self {
        let fan_in = in_ch / groups * kernel;
        let w = b.uniform(&format!("{name}.weight"), out_ch, in_ch / groups * kernel, fan_in);
        Conv1d {
            w,
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation,
            groups,
        }
    }

    pub fn pointwise(b: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self::new(b, name, in_ch, out_ch, 1, 1, 1, 1)
    }

    pub fn apply(&self, g: &mut Graph, x: ValId, pad: (usize, usize)) -> ValId {
        let w = g.param(self.w);
        g.conv1d(x, w, self.stride, self.dilation, self.groups, self.kernel, pad)
    }

    /// Padding that keeps the frame count unchanged for odd kernels at unit
    /// stride (the depthwise TCN case).
    pub fn same_pad(&self) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        (span / 2, span - span / 2)
    }
}

/// Bias-free transposed 1-D convolution; weight layout (in_ch, out_ch * kernel).
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub w: ParamRef,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = b.uniform(&format!("{name}.weight"), in_ch, out_ch * kernel, in_ch * kernel);
        ConvTranspose1d {
            w,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: ValId) -> ValId {
        let w = g.param(self.w);
        g.conv_t1d(x, w, self.stride, self.kernel)
    }
}

/// Dense map on column vectors, with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRef,
    pub bias: ParamRef,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = b.uniform(&format!("{name}.weight"), out_dim, in_dim, in_dim);
        let bias = b.constant(&format!("{name}.bias"), out_dim, 1, 0.0);
        Linear {
            w,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: ValId) -> ValId {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, 1, 1, 1, 1, (0, 0));
        let b = g.param(self.bias);
        g.add(y, b)
    }
}

/// Single-parameter parametric ReLU.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamRef,
}

impl PRelu {
    pub fn new(b: &mut ParamBuilder, name: &str) -> Self {
        PRelu {
            slope: b.constant(&format!("{name}.slope"), 1, 1, 0.25),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: ValId) -> ValId {
        let slope = g.param(self.slope);
        g.prelu(x, slope)
    }
}

/// Global layer normalization over (channels, time) with per-channel affine.
#[derive(Debug, Clone)]
pub struct GlobalNorm {
    pub gain: ParamRef,
    pub bias: ParamRef,
    pub channels: usize,
}

impl GlobalNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        GlobalNorm {
            gain: b.constant(&format!("{name}.gain"), channels, 1, 1.0),
            bias: b.constant(&format!("{name}.bias"), channels, 1, 0.0),
            channels,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: ValId) -> ValId {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.global_norm(x, gain, bias, NORM_EPS)
    }
}
