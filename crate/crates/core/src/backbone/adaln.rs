//! Shared adaptive layer norm: one conditioning MLP produces a single set of
//! modulation vectors per forward pass, reused by every block.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_features, standardize, Init, Linear, Scope};

/// `gamma * standardize(x) + beta`, with `gamma` and `beta` broadcast over tokens.
pub fn shared_adaln(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let d = *x.dims().last().unwrap_or(&0);
    for (name, m) in [("gamma", gamma), ("beta", beta)] {
        if m.dims().last() != Some(&d) {
            return Err(Error::Shape(format!(
                "adaLN {name} has shape {:?}, expected trailing dim {d}",
                m.dims()
            )));
        }
    }
    Ok(standardize(x)?.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// The six modulation vectors of one forward pass, each `[B, 1, D]`.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub shift_attn: Tensor,
    pub gamma_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub gamma_mlp: Tensor,
    pub gate_mlp: Tensor,
}

pub struct TimestepEmbedder {
    freq_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimestepEmbedder {
    pub fn new(s: &mut Scope, freq_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            freq_dim,
            fc1: Linear::new(&mut s.pp("fc1"), freq_dim, dim, Init::TruncNormal(0.02))?,
            fc2: Linear::new(&mut s.pp("fc2"), dim, dim, Init::TruncNormal(0.02))?,
        })
    }

    /// `t` in `[0, 1]`, scaled by 1000 before the sinusoidal features.
    pub fn forward(&self, t: &[f64], like: &Tensor) -> Result<Tensor> {
        let scaled: Vec<f64> = t.iter().map(|v| v * 1000.0).collect();
        let feats = sinusoidal_features(&scaled, self.freq_dim, 10_000.0, like.dtype(), like.device())?;
        self.fc2.forward(&self.fc1.forward(&feats)?.silu()?)
    }
}

pub struct SharedAdaLn {
    proj: Linear,
    dim: usize,
}

impl SharedAdaLn {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut s.pp("proj"), dim, 6 * dim, Init::Zeros)?,
            dim,
        })
    }

    pub fn modulation(&self, cond: &Tensor) -> Result<Modulation> {
        let b = cond.dim(0)?;
        let out = self.proj.forward(&cond.silu()?)?.reshape((b, 6, self.dim))?;
        let part = |i: usize| -> Result<Tensor> { Ok(out.narrow(1, i, 1)?) };
        Ok(Modulation {
            shift_attn: part(0)?,
            gamma_attn: (part(1)? + 1.0)?,
            gate_attn: part(2)?,
            shift_mlp: part(3)?,
            gamma_mlp: (part(4)? + 1.0)?,
            gate_mlp: part(5)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.proj.weight().elem_count() + 6 * self.dim
    }
}
