//! Small layer helpers over [`Graph`] and [`ParamStore`].

use std::rc::Rc;

use rand::Rng as _;

use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zero,
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut Rng) -> Self {
        let w = match init {
            Init::FanIn => uniform_fan_in(&[n_in, n_out], n_in, rng),
            Init::Zero => Tensor::zeros(&[n_in, n_out]),
        };
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[n_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// `W2 · gelu(W1 x + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        hidden: usize,
        n_out: usize,
        out_init: Init,
        rng: &mut Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), n_in, hidden, Init::FanIn, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, n_out, out_init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.gelu(h);
        self.l2.forward(g, store, h)
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let n = g.value(x).numel();
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            g.mul_const(x, Rc::new(mask))
        }
        _ => x,
    }
}
