use candle_core::Tensor;

use super::adaln::{shared_adaln, Modulation};
use crate::error::{Error, Result};
use crate::nn::{Attention, AttnInputs, Mlp, RopeTable, Scope};

/// Rotary tables and key mask for one token stream.
pub struct StreamCtx {
    pub rope: RopeTable,
    pub bias: Tensor,
}

impl StreamCtx {
    fn inputs(&self) -> AttnInputs<'_> {
        AttnInputs {
            rope_q: Some(&self.rope),
            rope_k: Some(&self.rope),
            bias: Some(&self.bias),
        }
    }
}

/// Pre-norm transformer block modulated by the shared adaLN vectors.
///
/// A block built with a skip branch adds gated cross-attention from the
/// modulated block input to a stored encoder state onto the block output.
pub struct Block {
    attn: Attention,
    mlp: Mlp,
    cross: Option<Attention>,
}

impl Block {
    pub fn new(s: &mut Scope, dim: usize, mlp_dim: usize, n_heads: usize, head_dim: usize, with_skip: bool) -> Result<Self> {
        let cross = if with_skip {
            Some(Attention::new(&mut s.pp("cross"), dim, n_heads, head_dim)?)
        } else {
            None
        };
        Ok(Self {
            attn: Attention::new(&mut s.pp("attn"), dim, n_heads, head_dim)?,
            mlp: Mlp::new(&mut s.pp("mlp"), dim, mlp_dim)?,
            cross,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.cross.is_some()
    }

    pub fn cross_attention(&self) -> Option<&Attention> {
        self.cross.as_ref()
    }

    pub fn forward(&self, x: &Tensor, m: &Modulation, ctx: &StreamCtx, skip: Option<&Tensor>) -> Result<Tensor> {
        let h = shared_adaln(x, &m.gamma_attn, &m.shift_attn)?;
        let a = self.attn.forward(&h, &h, &ctx.inputs())?;
        let x1 = (x + a.broadcast_mul(&m.gate_attn)?)?;
        let h2 = shared_adaln(&x1, &m.gamma_mlp, &m.shift_mlp)?;
        let out = (&x1 + self.mlp.forward(&h2)?.broadcast_mul(&m.gate_mlp)?)?;
        match (&self.cross, skip) {
            (None, None) => Ok(out),
            (Some(cross), Some(kv)) => {
                if kv.dims() != x.dims() {
                    return Err(Error::Internal(format!(
                        "skip state {:?} does not match stream {:?}",
                        kv.dims(),
                        x.dims()
                    )));
                }
                let c = cross.forward(&h, kv, &ctx.inputs())?;
                Ok((out + c.broadcast_mul(&m.gate_attn)?)?)
            }
            (Some(_), None) => Err(Error::Internal("cross-attention block called without its skip state".into())),
            (None, Some(_)) => Err(Error::Internal("skip state passed to a block without cross-attention".into())),
        }
    }
}
