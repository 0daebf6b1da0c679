//! Parameter storage and the handful of differentiable layers shared by the
//! backbone and the text encoder.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
/// Additive logit bias for masked keys.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

/// Named trainable tensors, created deterministically from a seed.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Internal(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = self.rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break std * z;
                    }
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter counts summed by the first `depth` dotted name components.
    pub fn param_groups(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut groups = BTreeMap::new();
        for (name, v) in &self.vars {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *groups.entry(key).or_insert(0) += v.elem_count();
        }
        groups
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Integrity(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Detached copies of all parameters.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let weight = s.var("weight", &[out_dim, in_dim], init)?;
        let bias = Some(s.var("bias", &[out_dim], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies over the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let (out_dim, w_in) = self.weight.dims2()?;
        if in_dim != w_in {
            return Err(Error::Shape(format!("linear expects {w_in} inputs, got {in_dim}")));
        }
        let rows = x.elem_count() / in_dim;
        let mut y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Zero mean, unit variance over the last dimension.
pub fn standardize(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// Layer norm with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: s.var("gain", &[dim], Init::Ones)?,
            bias: s.var("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(standardize(x)?.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(s: &mut Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut s.pp("fc1"), dim, hidden, Init::TruncNormal(0.02))?,
            fc2: Linear::new(&mut s.pp("fc2"), hidden, dim, Init::TruncNormal(0.02))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

struct SoftmaxLastDim;
struct SoftmaxGrad;

fn contiguous<'a, T>(v: &'a [T], l: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

fn softmax_rows<T: Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (x, y) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = (xi - max).exp();
            sum = sum + *yi;
        }
        let inv = T::one() / sum;
        y.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

fn softmax_grad_rows<T: Float>(y: &[T], g: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), o) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *oi = yi * (gi - dot);
        }
    }
    out
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, l, self.name())?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, l, self.name())?, dim)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?;
        Ok(Some(g))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_grad_rows(
                contiguous(y, l1, self.name())?,
                contiguous(g, l2, self.name())?,
                dim,
            )),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_grad_rows(
                contiguous(y, l1, self.name())?,
                contiguous(g, l2, self.name())?,
                dim,
            )),
            _ => candle_core::bail!("softmax grad supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

struct Gelu;
struct GeluGrad;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value<T: Float>(x: T) -> T {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_slope<T: Float>(x: T) -> T {
    let (c, a, half) = (T::from(GELU_C).unwrap(), T::from(GELU_A).unwrap(), T::from(0.5).unwrap());
    let th = (c * (x + a * x * x * x)).tanh();
    let three = T::from(3.0).unwrap();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous(v, l, self.name())?.iter().map(|&x| gelu_value(x)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, l, self.name())?.iter().map(|&x| gelu_value(x)).collect()),
            _ => candle_core::bail!("gelu supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad_res.contiguous()?, &GeluGrad)?))
    }
}

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Float>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter().zip(g).map(|(&x, &g)| g * gelu_slope(x)).collect()
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(run(contiguous(x, l1, self.name())?, contiguous(g, l2, self.name())?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(run(contiguous(x, l1, self.name())?, contiguous(g, l2, self.name())?))
            }
            _ => candle_core::bail!("gelu grad supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Tanh-approximated GELU with an exact derivative of that approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Differentiable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

/// Per-token rotation tables for a `[batch, len]` token stream.
///
/// Tokens without a position (text) get angle zero, which is the identity
/// rotation.
#[derive(Debug, Clone)]
pub struct RopeTable {
    cos: Tensor,
    sin: Tensor,
    rotated_dims: usize,
}

impl RopeTable {
    /// `angles` is `[batch][len * n_pairs]`, row-major by token.
    pub fn new(angles: &[Vec<f64>], len: usize, n_pairs: usize, dtype: DType, device: &Device) -> Result<Self> {
        let b = angles.len();
        let mut cos = Vec::with_capacity(b * len * n_pairs);
        let mut sin = Vec::with_capacity(b * len * n_pairs);
        for sample in angles {
            if sample.len() != len * n_pairs {
                return Err(Error::Shape(format!(
                    "rope angles: expected {} entries, got {}",
                    len * n_pairs,
                    sample.len()
                )));
            }
            for &a in sample {
                let (s, c) = a.sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        let shape = (b, 1, len, n_pairs, 1);
        Ok(Self {
            cos: Tensor::from_vec(cos, shape, device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, shape, device)?.to_dtype(dtype)?,
            rotated_dims: 2 * n_pairs,
        })
    }

    /// Rotates `x` of shape `[batch, heads, len, head_dim]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.rotated_dims == 0 {
            return Ok(x.clone());
        }
        let (b, h, l, dh) = x.dims4()?;
        let r = self.rotated_dims;
        let rot = x.narrow(3, 0, r)?.reshape((b, h, l, r / 2, 2))?;
        let x1 = rot.narrow(4, 0, 1)?;
        let x2 = rot.narrow(4, 1, 1)?;
        let y1 = (x1.broadcast_mul(&self.cos)? - x2.broadcast_mul(&self.sin)?)?;
        let y2 = (x1.broadcast_mul(&self.sin)? + x2.broadcast_mul(&self.cos)?)?;
        let rot = Tensor::cat(&[y1, y2], 4)?.reshape((b, h, l, r))?;
        if r == dh {
            return Ok(rot);
        }
        Ok(Tensor::cat(&[rot, x.narrow(3, r, dh - r)?], 3)?)
    }
}

/// Additive `[batch, 1, 1, len]` bias masking invalid keys.
pub fn key_bias(valid: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = valid.len();
    let len = valid.first().map_or(0, |v| v.len());
    let mut data = Vec::with_capacity(b * len);
    for row in valid {
        if row.len() != len {
            return Err(Error::Shape("ragged key mask".into()));
        }
        data.extend(row.iter().map(|&ok| if ok { 0.0 } else { MASK_BIAS }));
    }
    Ok(Tensor::from_vec(data, (b, 1, 1, len), device)?.to_dtype(dtype)?)
}

/// Multi-head attention with optional rotary tables and key masking.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
    head_dim: usize,
}

pub struct AttnInputs<'a> {
    pub rope_q: Option<&'a RopeTable>,
    pub rope_k: Option<&'a RopeTable>,
    /// `[batch, 1, 1 or len_q, len_k]` additive bias.
    pub bias: Option<&'a Tensor>,
}

impl Attention {
    pub fn new(s: &mut Scope, dim: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        let inner = n_heads * head_dim;
        Ok(Self {
            q: Linear::new(&mut s.pp("q"), dim, inner, Init::TruncNormal(0.02))?,
            k: Linear::new(&mut s.pp("k"), dim, inner, Init::TruncNormal(0.02))?,
            v: Linear::new(&mut s.pp("v"), dim, inner, Init::TruncNormal(0.02))?,
            o: Linear::new(&mut s.pp("o"), inner, dim, Init::TruncNormal(0.02))?,
            n_heads,
            head_dim,
        })
    }

    pub fn out_proj(&self) -> &Linear {
        &self.o
    }

    fn heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.n_heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, inputs: &AttnInputs) -> Result<Tensor> {
        let (b, lq, _) = xq.dims3()?;
        let mut q = self.heads(&self.q.forward(xq)?)?;
        let mut k = self.heads(&self.k.forward(xkv)?)?;
        let v = self.heads(&self.v.forward(xkv)?)?;
        if let Some(r) = inputs.rope_q {
            q = r.apply(&q)?;
        }
        if let Some(r) = inputs.rope_k {
            k = r.apply(&k)?;
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = inputs.bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = softmax_last_dim(&logits)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, self.n_heads * self.head_dim))?;
        self.o.forward(&out)
    }
}

/// Sinusoidal features of a scalar per batch element: `[cos(t w_i), sin(t w_i)]`.
pub fn sinusoidal_features(values: &[f64], dim: usize, max_period: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let freqs = (0..half).map(|i| (-(max_period.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| v * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_vec(data, (values.len(), 2 * half), device)?.to_dtype(dtype)?)
}
