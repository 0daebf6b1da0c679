//! Flow matching: linear interpolation between data (`t = 0`) and noise
//! (`t = 1`), a velocity-regression objective, and an Euler sampler that
//! integrates from noise back to data.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::PositionMap;
use crate::routing::{auto_guidance, batch_route_masks, GuidanceSpec, RouteMask};
use crate::seed;
use crate::textcond::TextBatch;

/// Per-sample conditioning: position maps and text context.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub positions: Vec<PositionMap>,
    pub text: TextBatch,
}

impl Conditioning {
    pub fn batch_size(&self) -> usize {
        self.positions.len()
    }
}

/// Anything that predicts a velocity field.
pub trait VelocityModel {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Conditioning, route: Option<&[RouteMask]>) -> Result<Tensor>;

    /// Number of routable tokens for an input shaped like `x`.
    fn route_tokens(&self, x: &Tensor) -> Result<usize> {
        let (_, _, h, w) = x.dims4()?;
        Ok(h * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    #[default]
    Uniform,
    LogitNormal { mean: f64, std: f64 },
}

impl TimeSampling {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeSampling::Uniform => rng.random::<f64>(),
            TimeSampling::LogitNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + (-(mean + std * z)).exp())
            }
        }
    }
}

/// One training example set along the interpolation path.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, like.rank().saturating_sub(1)));
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

impl FlowBatch {
    pub fn new(x0: &Tensor, x1: &Tensor, t: Vec<f64>) -> Result<Self> {
        if x0.dims() != x1.dims() {
            return Err(Error::Shape(format!("data {:?} vs noise {:?}", x0.dims(), x1.dims())));
        }
        if x0.dim(0)? != t.len() {
            return Err(Error::Shape(format!("{} times for batch {}", t.len(), x0.dim(0)?)));
        }
        let tt = per_sample(&t, x0)?;
        let one_minus: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let x_t = (x0.broadcast_mul(&per_sample(&one_minus, x0)?)? + x1.broadcast_mul(&tt)?)?;
        let v_target = (x1 - x0)?;
        Ok(Self {
            x0: x0.clone(),
            x1: x1.clone(),
            t,
            x_t,
            v_target,
        })
    }
}

pub fn gaussian_like<R: Rng>(shape: &[usize], dtype: DType, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Draws `t` and noise, returns the mean squared velocity error and the batch.
pub fn fm_loss<M: VelocityModel, R: Rng>(
    model: &M,
    x0: &Tensor,
    cond: &Conditioning,
    route: Option<&[RouteMask]>,
    sampling: TimeSampling,
    rng: &mut R,
) -> Result<(Tensor, FlowBatch)> {
    let b = x0.dim(0)?;
    let t: Vec<f64> = (0..b).map(|_| sampling.sample(rng)).collect();
    let x1 = gaussian_like(x0.dims(), x0.dtype(), rng)?;
    let batch = FlowBatch::new(x0, &x1, t)?;
    let loss = flow_loss(model, &batch, cond, route)?;
    Ok((loss, batch))
}

/// Loss on a fixed batch.
pub fn flow_loss<M: VelocityModel>(model: &M, batch: &FlowBatch, cond: &Conditioning, route: Option<&[RouteMask]>) -> Result<Tensor> {
    let v = model.velocity(&batch.x_t, &batch.t, cond, route)?;
    if v.dims() != batch.v_target.dims() {
        return Err(Error::Shape(format!(
            "model velocity {:?} vs target {:?}",
            v.dims(),
            batch.v_target.dims()
        )));
    }
    let loss = (v - &batch.v_target)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::TrainingDivergence { step: 0, loss: value });
    }
    Ok(loss)
}

/// Sampling schedule and guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    pub seed: u64,
    /// Explicit time grid from 1 to 0; uniform when absent.
    #[serde(default)]
    pub schedule: Option<Vec<f64>>,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            guidance: GuidanceSpec::default(),
            seed,
            schedule: None,
        }
    }

    pub fn time_grid(&self) -> Result<Vec<f64>> {
        let grid = match &self.schedule {
            Some(g) => g.clone(),
            None => {
                if self.steps == 0 {
                    return Err(Error::InvalidConfig("sampler needs at least one step".into()));
                }
                let n = self.steps as f64;
                (0..=self.steps).map(|i| 1.0 - i as f64 / n).collect()
            }
        };
        if grid.len() < 2 || grid[0] != 1.0 || *grid.last().unwrap() != 0.0 {
            return Err(Error::InvalidConfig("time grid must run from 1.0 to 0.0".into()));
        }
        if grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("time grid must be strictly decreasing".into()));
        }
        Ok(grid)
    }
}

/// Starting noise for a sampling run; depends only on the seed and shape.
pub fn initial_noise(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    gaussian_like(shape, dtype, &mut seed::rng(seed, &[seed::stream::SAMPLE_NOISE]))
}

pub fn tensor_hash(t: &Tensor) -> Result<String> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Conditional pass at rate `cr`, unconditional pass at rate `ur`, combined
/// by [`auto_guidance`]. With both rates zero this is classifier-free guidance.
pub fn guided_velocity<M: VelocityModel>(
    model: &M,
    x: &Tensor,
    t: &[f64],
    cond: &Conditioning,
    uncond: Option<&Conditioning>,
    guidance: &GuidanceSpec,
    route_seed: u64,
) -> Result<Tensor> {
    guidance.validate()?;
    let b = x.dim(0)?;
    let masks = |rate: f64, stream: u64| -> Result<Option<Vec<RouteMask>>> {
        if rate == 0.0 {
            return Ok(None);
        }
        let n = model.route_tokens(x)?;
        Ok(Some(batch_route_masks(n, rate, seed::derive(route_seed, &[stream]), b)?))
    };
    let cond_masks = masks(guidance.cond_rate, 0)?;
    let v_cond = model.velocity(x, t, cond, cond_masks.as_deref())?;
    if guidance.scale == 1.0 {
        return Ok(v_cond);
    }
    let uncond = uncond.ok_or_else(|| {
        Error::InvalidGuidance("guidance scale != 1 needs an unconditional condition".into())
    })?;
    let uncond_masks = masks(guidance.uncond_rate, 1)?;
    let v_uncond = model.velocity(x, t, uncond, uncond_masks.as_deref())?;
    auto_guidance(&v_cond, &v_uncond, guidance.scale)
}

pub struct SampleOutput {
    /// Final state at `t = 0`, unclamped.
    pub image: Tensor,
    /// Digest of the starting noise.
    pub noise_hash: String,
}

/// Euler integration of the velocity field from `t = 1` to `t = 0`.
pub fn euler_sample<M: VelocityModel>(
    model: &M,
    cond: &Conditioning,
    uncond: Option<&Conditioning>,
    cfg: &SamplerConfig,
    shape: &[usize],
    dtype: DType,
) -> Result<SampleOutput> {
    cfg.guidance.validate()?;
    let grid = cfg.time_grid()?;
    let x1 = initial_noise(shape, cfg.seed, dtype)?;
    let noise_hash = tensor_hash(&x1)?;
    let b = shape[0];
    let mut x = x1;
    for (k, w) in grid.windows(2).enumerate() {
        let (t_cur, t_next) = (w[0], w[1]);
        let route_seed = seed::derive(cfg.seed, &[seed::stream::SAMPLE_ROUTE, k as u64]);
        let v = guided_velocity(model, &x, &vec![t_cur; b], cond, uncond, &cfg.guidance, route_seed)?;
        x = (x + (v * (t_next - t_cur))?)?;
        let norm = x.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !norm.is_finite() {
            return Err(Error::SamplerDivergence { step: k, t: t_next });
        }
    }
    Ok(SampleOutput { image: x, noise_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_position_map;

    /// Returns `c` everywhere.
    struct Constant(f64);

    impl VelocityModel for Constant {
        fn velocity(&self, x: &Tensor, _t: &[f64], _c: &Conditioning, _r: Option<&[RouteMask]>) -> Result<Tensor> {
            Ok((x.zeros_like()? + self.0)?)
        }
    }

    /// The exact velocity of a fixed pair: `x1 - x0`.
    struct Captured {
        x0: Tensor,
        x1: Tensor,
    }

    impl VelocityModel for Captured {
        fn velocity(&self, _x: &Tensor, _t: &[f64], _c: &Conditioning, _r: Option<&[RouteMask]>) -> Result<Tensor> {
            Ok((&self.x1 - &self.x0)?)
        }
    }

    /// `v(x) = -x`.
    struct Decay;

    impl VelocityModel for Decay {
        fn velocity(&self, x: &Tensor, _t: &[f64], _c: &Conditioning, _r: Option<&[RouteMask]>) -> Result<Tensor> {
            Ok(x.neg()?)
        }
    }

    /// Conditional pass returns `a`, unconditional pass returns `b`; the
    /// condition is told apart by its text length.
    struct TwoPass {
        a: f64,
        b: f64,
    }

    impl VelocityModel for TwoPass {
        fn velocity(&self, x: &Tensor, _t: &[f64], c: &Conditioning, _r: Option<&[RouteMask]>) -> Result<Tensor> {
            let v = if c.text.len() > 1 { self.a } else { self.b };
            Ok((x.zeros_like()? + v)?)
        }
    }

    fn cond(b: usize, text_len: usize) -> Conditioning {
        let rows: Vec<Tensor> = (0..b)
            .map(|_| Tensor::zeros((text_len, 4), DType::F64, &Device::Cpu).unwrap())
            .collect();
        Conditioning {
            positions: vec![make_position_map(2, 2).unwrap(); b],
            text: TextBatch::from_rows(&rows).unwrap(),
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        gaussian_like(shape, DType::F64, &mut crate::seed::rng(seed, &[])).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn interpolant_endpoints_exact() {
        let x0 = rand_tensor(&[2, 3, 4, 4], 1);
        let x1 = rand_tensor(&[2, 3, 4, 4], 2);
        let b = FlowBatch::new(&x0, &x1, vec![0.0, 1.0]).unwrap();
        let xt = b.x_t.to_vec3::<f64>().ok();
        let _ = xt;
        assert_eq!(values(&b.x_t.get(0).unwrap()), values(&x0.get(0).unwrap()));
        assert_eq!(values(&b.x_t.get(1).unwrap()), values(&x1.get(1).unwrap()));
        let back = values(&(&b.v_target + &b.x0).unwrap());
        let want = values(&x1);
        assert!(back.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn oracle_loss_is_zero() {
        let x0 = rand_tensor(&[1, 3, 4, 4], 3);
        let x1 = rand_tensor(&[1, 3, 4, 4], 4);
        let batch = FlowBatch::new(&x0, &x1, vec![0.3]).unwrap();
        let oracle = Captured { x0: x0.clone(), x1: x1.clone() };
        let l = flow_loss(&oracle, &batch, &cond(1, 2), None).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn constant_model_loss_closed_form() {
        let x0 = rand_tensor(&[1, 3, 2, 2], 5);
        let x1 = rand_tensor(&[1, 3, 2, 2], 6);
        let batch = FlowBatch::new(&x0, &x1, vec![0.7]).unwrap();
        let c = 0.25;
        let l = flow_loss(&Constant(c), &batch, &cond(1, 2), None).unwrap().to_scalar::<f64>().unwrap();
        let (a, b) = (values(&x0), values(&x1));
        let want = a.iter().zip(&b).map(|(p, q)| (c - (q - p)).powi(2)).sum::<f64>() / a.len() as f64;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn zero_model_on_equal_endpoints() {
        let x0 = rand_tensor(&[2, 3, 2, 2], 7);
        let batch = FlowBatch::new(&x0, &x0, vec![0.2, 0.9]).unwrap();
        let l = flow_loss(&Constant(0.0), &batch, &cond(2, 2), None).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn non_finite_loss_surfaces() {
        let x0 = rand_tensor(&[1, 3, 2, 2], 8);
        let batch = FlowBatch::new(&x0, &x0, vec![0.5]).unwrap();
        assert!(matches!(
            flow_loss(&Constant(f64::NAN), &batch, &cond(1, 2), None),
            Err(Error::TrainingDivergence { .. })
        ));
    }

    #[test]
    fn fm_loss_deterministic() {
        let x0 = rand_tensor(&[2, 3, 2, 2], 9);
        let run = || {
            let mut rng = crate::seed::rng(11, &[]);
            fm_loss(&Constant(0.1), &x0, &cond(2, 2), None, TimeSampling::Uniform, &mut rng)
                .unwrap()
                .0
                .to_scalar::<f64>()
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn euler_exact_on_linear_path() {
        let shape = [1, 3, 4, 4];
        for steps in [1, 3, 10] {
            let cfg = SamplerConfig::new(steps, 42);
            let x1 = initial_noise(&shape, 42, DType::F64).unwrap();
            let x0 = rand_tensor(&shape, 13);
            let oracle = Captured { x0: x0.clone(), x1 };
            let out = euler_sample(&oracle, &cond(1, 2), None, &cfg, &shape, DType::F64).unwrap();
            let err = values(&out.image)
                .iter()
                .zip(values(&x0))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "steps {steps}: {err}");
        }
    }

    #[test]
    fn euler_first_order_on_decay() {
        let shape = [1, 1, 2, 2];
        let x1 = values(&initial_noise(&shape, 5, DType::F64).unwrap());
        let mut errors = Vec::new();
        for k in [8usize, 16, 32, 64] {
            let out = euler_sample(&Decay, &cond(1, 2), None, &SamplerConfig::new(k, 5), &shape, DType::F64).unwrap();
            let got = values(&out.image);
            // Integrating dx/dt = -x from t = 1 down to t = 0 multiplies by e.
            let err = got
                .iter()
                .zip(&x1)
                .map(|(g, x)| (g - x * std::f64::consts::E).abs())
                .fold(0.0, f64::max);
            // Each Euler step multiplies by (1 + 1/k).
            for (g, x) in got.iter().zip(&x1) {
                assert!((g - x * (1.0 + 1.0 / k as f64).powi(k as i32)).abs() < 1e-12);
            }
            errors.push(err);
        }
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 1.0).abs() < 0.2, "order {order}");
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let shape = [1, 1, 2, 2];
        let a = euler_sample(&Decay, &cond(1, 2), None, &SamplerConfig::new(4, 9), &shape, DType::F64).unwrap();
        let b = euler_sample(&Decay, &cond(1, 2), None, &SamplerConfig::new(4, 9), &shape, DType::F64).unwrap();
        assert_eq!(values(&a.image), values(&b.image));
        assert_eq!(a.noise_hash, b.noise_hash);
    }

    #[test]
    fn guidance_combinations() {
        let x = rand_tensor(&[1, 1, 2, 2], 1);
        let c = cond(1, 3);
        let u = cond(1, 1);
        let m = TwoPass { a: 1.5, b: -0.5 };
        let g = |scale: f64, cr: f64, ur: f64| {
            guided_velocity(&m, &x, &[0.5], &c, Some(&u), &GuidanceSpec { scale, cond_rate: cr, uncond_rate: ur }, 0)
        };
        assert!(values(&g(1.0, 0.0, 0.0).unwrap()).iter().all(|&v| v == 1.5));
        for s in [0.0, 2.0, 4.5] {
            // Direct two-pass classifier-free guidance.
            let want = -0.5 + s * (1.5 - -0.5);
            assert!(values(&g(s, 0.0, 0.0).unwrap()).iter().all(|&v| (v - want).abs() < 1e-12));
        }
        assert!(g(2.0, 0.25, 0.5).is_ok());
        assert!(matches!(g(2.0, 0.5, 0.25), Err(Error::InvalidGuidance(_))));
    }

    #[test]
    fn time_grid_validation() {
        assert_eq!(SamplerConfig::new(4, 0).time_grid().unwrap(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(SamplerConfig::new(0, 0).time_grid().is_err());
        let mut cfg = SamplerConfig::new(2, 0);
        cfg.schedule = Some(vec![1.0, 0.6, 0.6, 0.0]);
        assert!(cfg.time_grid().is_err());
        cfg.schedule = Some(vec![1.0, 0.9, 0.2, 0.0]);
        assert_eq!(cfg.time_grid().unwrap().len(), 4);
    }
}
