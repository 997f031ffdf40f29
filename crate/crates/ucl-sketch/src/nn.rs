//! Small dense-network toolkit: linear layers with accumulating gradients,
//! the handful of activations the solver uses, sinusoidal position
//! embeddings, and Adam. Everything computes in `f64`; quantization to
//! `f32` happens only at the checkpoint boundary.

use crate::error::{Error, Result};
use rand::Rng;

/// Fully-connected layer, weights stored row-major `out × in`. Gradients
/// accumulate across calls to [`Linear::backward`] until reset.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform `±sqrt(1/fan_in)` weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        assert!(in_dim > 0 && out_dim > 0);
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            w,
            b: vec![0.0; out_dim],
            gw: vec![0.0; in_dim * out_dim],
            gb: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `y = W x + b`. `y` is overwritten.
    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(y.len(), self.out_dim);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *yo = acc;
        }
    }

    /// Accumulate `gw += gy ⊗ x`, `gb += gy`, and (when requested) write
    /// `gx = Wᵀ gy`.
    pub fn backward(&mut self, x: &[f64], gy: &[f64], gx: Option<&mut [f64]>) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(gy.len(), self.out_dim);
        for (o, &g) in gy.iter().enumerate() {
            let row = &mut self.gw[o * self.in_dim..(o + 1) * self.in_dim];
            for (wi, xi) in row.iter_mut().zip(x) {
                *wi += g * xi;
            }
            self.gb[o] += g;
        }
        if let Some(gx) = gx {
            debug_assert_eq!(gx.len(), self.in_dim);
            gx.fill(0.0);
            for (o, &g) in gy.iter().enumerate() {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                for (gi, wi) in gx.iter_mut().zip(row) {
                    *gi += wi * g;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(v: &mut [f64]) {
    for a in v.iter_mut() {
        if *a < 0.0 {
            *a = 0.0;
        }
    }
}

/// Multiply `g` by the ReLU derivative; `y_post` is the *post*-activation
/// value (its sign carries the same information as the pre-activation's).
pub fn relu_backward(y_post: &[f64], g: &mut [f64]) {
    for (gi, &y) in g.iter_mut().zip(y_post) {
        if y <= 0.0 {
            *gi = 0.0;
        }
    }
}

pub fn sigmoid(v: &mut [f64]) {
    for a in v.iter_mut() {
        *a = 1.0 / (1.0 + (-*a).exp());
    }
}

/// Multiply `g` by the sigmoid derivative `y (1 - y)` given post-activation
/// values.
pub fn sigmoid_backward(y_post: &[f64], g: &mut [f64]) {
    for (gi, &y) in g.iter_mut().zip(y_post) {
        *gi *= y * (1.0 - y);
    }
}

/// `silu(x) = x · σ(x)`, written from `x` into `y`.
pub fn silu(x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = xi / (1.0 + (-xi).exp());
    }
}

/// Multiply `g` by the SiLU derivative `σ(x)(1 + x(1 - σ(x)))`; needs the
/// *pre*-activation values.
pub fn silu_backward(x_pre: &[f64], g: &mut [f64]) {
    for (gi, &x) in g.iter_mut().zip(x_pre) {
        let s = 1.0 / (1.0 + (-x).exp());
        *gi *= s * (1.0 + x * (1.0 - s));
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal embedding
// ---------------------------------------------------------------------------

/// Standard sinusoidal position embedding of a bucket index: entry `2j`
/// holds `sin(i / 10000^(2j/dim))`, entry `2j+1` the matching cosine. The
/// dimension must be even (config validation enforces this upstream).
pub fn sinusoidal_embed(bucket: usize, out: &mut [f64]) {
    let dim = out.len();
    debug_assert!(dim % 2 == 0, "embedding dimension must be even");
    let i = bucket as f64;
    for (j, pair) in out.chunks_exact_mut(2).enumerate() {
        let angle = i / 10000f64.powf(2.0 * j as f64 / dim as f64);
        pair[0] = angle.sin();
        pair[1] = angle.cos();
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Flat Adam state over a model's parameters. The caller feeds parameter /
/// gradient chunks in a fixed canonical order each step; chunk lengths must
/// tile the state exactly.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(param_count: usize, cfg: AdamConfig) -> Self {
        AdamState { m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0, cfg }
    }

    /// One optimizer step. `visit` must call its sink once per parameter
    /// tensor, in the same canonical order every step.
    pub fn step<F>(&mut self, visit: F) -> Result<()>
    where
        F: FnOnce(&mut dyn FnMut(&mut [f64], &[f64])),
    {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.lr, self.cfg.eps);
        let mut cursor = 0usize;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut overflow = false;
        visit(&mut |params: &mut [f64], grads: &[f64]| {
            debug_assert_eq!(params.len(), grads.len());
            let end = cursor + params.len();
            if end > m.len() {
                overflow = true;
                return;
            }
            for ((p, &g), (mi, vi)) in params
                .iter_mut()
                .zip(grads)
                .zip(m[cursor..end].iter_mut().zip(v[cursor..end].iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            cursor = end;
        });
        if overflow || cursor != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer saw {cursor} parameters{}, state holds {}",
                if overflow { "+" } else { "" },
                self.m.len()
            )));
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
