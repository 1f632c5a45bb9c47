//! Parameterized building blocks shared by the policy and segmentation modules.
//!
//! Each block registers its tensors in a [`ParamStore`] at construction and
//! offers a differentiable `forward` on a [`Graph`]; blocks used during
//! generation also offer a plain `apply` that skips the tape.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{conv2d, gemm, silu, Tensor};

fn init(store: &mut ParamStore, name: String, group: ParamGroup, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
    if std == 0.0 {
        store.add_zeros(name, group, shape)
    } else {
        store.add_normal(name, group, shape, std, rng)
    }
}

/// `y = x W + b` with `W[in,out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init(store, format!("{name}.w"), group, &[fan_in, fan_out], std, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), group, &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// Default init: standard deviation `gain / sqrt(fan_in)`.
    pub fn scaled(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, group, fan_in, fan_out, gain / (fan_in as f64).sqrt(), true, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Single-row application without recording.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut out = match self.b {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![0.0; self.fan_out],
        };
        gemm(1, self.fan_in, self.fan_out, 1.0, x, false, store.get(self.w).data(), false, 1.0, &mut out);
        out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add_full(format!("{name}.gamma"), group, &[dim], 1.0);
        let beta = store.add_zeros(format!("{name}.beta"), group, &[dim]);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + Self::EPS).sqrt();
        let gm = store.get(self.gamma).data();
        let bt = store.get(self.beta).data();
        x.iter().enumerate().map(|(j, v)| (v - mean) * is * gm[j] + bt[j]).collect()
    }
}

/// Square-kernel 2-D convolution on `[C,H,W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = gain / (fan_in as f64).sqrt();
        let w = init(store, format!("{name}.w"), group, &[out_channels, fan_in], std, rng);
        let b = store.add_zeros(format!("{name}.b"), group, &[out_channels]);
        Self { w, b, in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.kernel, self.stride, self.pad)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        conv2d(x, store.get(self.w), store.get(self.b), self.stride, self.pad)
    }
}

/// Stack of convolutions with SiLU after every layer.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

impl ConvStack {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for l in &self.layers {
            let y = l.forward(g, store, x);
            x = g.silu(y);
        }
        x
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut x = x.clone();
        for l in &self.layers {
            x = l.apply(store, &x).map(silu);
        }
        x
    }
}

/// Two-layer perceptron with SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.fc1.apply(store, x).into_iter().map(silu).collect();
        self.fc2.apply(store, &h)
    }
}
