//! Fast invariant suite behind the `verify` subcommand.
//!
//! Each check is self-contained and reports a measured quantity next to its
//! threshold. [`Faults`] lets tests break one ingredient on purpose and
//! confirm that exactly the matching check turns red.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbone::{derived_counts, XutConfig};
use crate::datapipe::{min_dim_size, shifted_square_crop, token_position_map, Image};
use crate::error::Result;
use crate::flow::{euler_sample, flow_loss, initial_noise, Conditioning, FlowBatch, SamplerConfig, VelocityModel};
use crate::geometry::{compute_ranges, make_position_map, rope_rotate, AspectRanges, RopeFrequencies};
use crate::nn::ParamStore;
use crate::pipeline::TextToImage;
use crate::routing::{batch_route_masks, RouteMask};
use crate::seed;
use crate::textcond::TextConfig;
use crate::train::{Precision, RunConfig, Trainer};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Deliberate breakage for exercising the suite itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Replace the range rule with one that ignores the unit-area constraint.
    pub broken_ranges: bool,
}

fn ranges(h: usize, w: usize, faults: Faults) -> Result<AspectRanges> {
    if faults.broken_ranges {
        return Ok(AspectRanges {
            r_h: h as f64 / w as f64,
            r_w: 1.0,
        });
    }
    compute_ranges(h, w)
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Block and attention-layer counts of the three published scales.
pub fn check_config_arithmetic() -> CheckResult {
    timed("config_arithmetic", || {
        let table = [
            ("xut-small", XutConfig::xut_small(), 16, 20),
            ("xut-base", XutConfig::xut_base(), 20, 24),
            ("xut-large", XutConfig::xut_large(), 20, 24),
        ];
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, cfg, blocks, attn) in table {
            let d = derived_counts(&cfg);
            ok &= d.total_blocks == blocks && d.total_attention_layers == attn;
            parts.push(format!("{name}: blocks={} attn={}", d.total_blocks, d.total_attention_layers));
        }
        Ok((ok, parts.join(", ")))
    })
}

/// `r_h * r_w = 1` and `r_h / r_w = H / W` over random grids.
pub fn check_range_constraints(trials: usize, tol: f64, faults: Faults) -> CheckResult {
    timed("range_constraints", || {
        let mut rng = seed::rng(0x5eed, &[1]);
        let mut worst = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let h = rng.random_range(1..=2048usize);
            let w = rng.random_range(1..=2048usize);
            let r = ranges(h, w, faults)?;
            worst.0 = worst.0.max((r.r_h * r.r_w - 1.0).abs());
            worst.1 = worst.1.max((r.r_h / r.r_w - h as f64 / w as f64).abs());
        }
        Ok((
            worst.0 <= tol && worst.1 <= tol,
            format!("{trials} grids, max |area-1|={:.2e}, max |ratio err|={:.2e} (tol {tol:.0e})", worst.0, worst.1),
        ))
    })
}

/// Logits unchanged under a joint translation; per-pair norms preserved.
pub fn check_rope(draws: usize) -> CheckResult {
    timed("rope_relative_position", || {
        let f = RopeFrequencies::standard(64)?;
        let mut rng = seed::rng(0x5eed, &[2]);
        let (mut worst_logit, mut worst_norm) = (0.0f64, 0.0f64);
        let pos = |rng: &mut rand_chacha::ChaCha8Rng| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        for _ in 0..draws {
            let q: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
            let k: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (p1, p2, d) = (pos(&mut rng), pos(&mut rng), pos(&mut rng));
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let qr = rope_rotate(&q, p1, &f)?;
            let l0 = dot(&qr, &rope_rotate(&k, p2, &f)?);
            let l1 = dot(
                &rope_rotate(&q, [p1[0] + d[0], p1[1] + d[1]], &f)?,
                &rope_rotate(&k, [p2[0] + d[0], p2[1] + d[1]], &f)?,
            );
            worst_logit = worst_logit.max((l0 - l1).abs());
            for p in 0..32 {
                let n0 = q[2 * p].hypot(q[2 * p + 1]);
                let n1 = qr[2 * p].hypot(qr[2 * p + 1]);
                worst_norm = worst_norm.max((n0 - n1).abs());
            }
        }
        Ok((
            worst_logit <= 1e-5 && worst_norm <= 1e-6,
            format!("{draws} draws, max logit drift {worst_logit:.2e}, max pair-norm drift {worst_norm:.2e}"),
        ))
    })
}

/// Adds Gaussian noise to every parameter so zero-initialized heads and
/// gates do not hide paths from a check.
pub fn jitter_params(store: &ParamStore, std: f64, seed_value: u64) -> Result<()> {
    let mut rng = seed::rng(seed_value, &[0x717]);
    for var in store.vars().values() {
        let n = var.elem_count();
        let noise: Vec<f64> = (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let noise = Tensor::from_vec(noise, var.dims(), var.device())?.to_dtype(var.dtype())?;
        var.set(&(var.as_tensor() + noise)?)?;
    }
    Ok(())
}

/// A small fixed f64 problem on the micro config.
pub struct Probe {
    pub model: TextToImage,
    pub cond: Conditioning,
    pub batch: FlowBatch,
}

impl Probe {
    pub fn micro(seed_value: u64) -> Result<Self> {
        let cfg = XutConfig::micro();
        let model = TextToImage::new(&cfg, &TextConfig::for_context_dim(cfg.context_dim), DType::F64, seed_value)?;
        jitter_params(&model.store, 0.2, seed_value)?;
        let side = 8;
        let pos = make_position_map(side / cfg.patch_size, side / cfg.patch_size)?;
        let captions = vec![model.tokenizer.encode("red circle center"), model.tokenizer.encode("blue square")];
        let cond = Conditioning {
            positions: vec![pos.clone(), pos],
            // The second caption is dropped so the null row is on the graph.
            text: model.encode_captions(&captions, &[false, true])?,
        };
        let mut rng = seed::rng(seed_value, &[0x9e]);
        let shape = [2, cfg.in_channels, side, side];
        let x0 = crate::flow::gaussian_like(&shape, DType::F64, &mut rng)?;
        let x1 = crate::flow::gaussian_like(&shape, DType::F64, &mut rng)?;
        let batch = FlowBatch::new(&x0, &x1, vec![0.3, 0.8])?;
        Ok(Self { model, cond, batch })
    }

    pub fn masks(&self, rate: f64, seed_value: u64) -> Result<Vec<RouteMask>> {
        let n = self.model.route_tokens(&self.batch.x_t)?;
        batch_route_masks(n, rate, seed_value, 2)
    }

    /// Re-encodes the captions so text-encoder parameters are on the graph.
    fn loss(&self, route: Option<&[RouteMask]>) -> Result<Tensor> {
        let captions = vec![
            self.model.tokenizer.encode("red circle center"),
            self.model.tokenizer.encode("blue square"),
        ];
        let cond = Conditioning {
            positions: self.cond.positions.clone(),
            text: self.model.encode_captions(&captions, &[false, true])?,
        };
        flow_loss(&self.model, &self.batch, &cond, route)
    }

    pub fn loss_value(&self, route: Option<&[RouteMask]>) -> Result<f64> {
        Ok(self.loss(route)?.to_scalar::<f64>()?)
    }
}

/// Routed forward at rate 0 against the unrouted forward.
pub fn check_rate_zero(tol: f64) -> CheckResult {
    timed("tread_rate_zero", || {
        let p = Probe::micro(7)?;
        let masks = p.masks(0.0, 3)?;
        let a = p.model.velocity(&p.batch.x_t, &p.batch.t, &p.cond, None)?;
        let b = p.model.velocity(&p.batch.x_t, &p.batch.t, &p.cond, Some(&masks))?;
        let diff = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
        Ok((diff <= tol, format!("max |diff| = {diff:.2e} (tol {tol:.0e})")))
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
    pub num_params: usize,
    /// Sampled entries whose gradient magnitude exceeds the floor.
    pub above_floor: usize,
}

/// Central differences on `samples` random scalar parameters, with routing at
/// `rate`. Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor only
/// matters for gradients that are numerically zero.
pub fn gradient_check(samples: usize, rate: f64, eps: f64, floor: f64) -> Result<GradCheckReport> {
    let p = Probe::micro(11)?;
    let masks = (rate > 0.0).then(|| p.masks(rate, 5)).transpose()?;
    let route = masks.as_deref();
    let grads = p.loss(route)?.backward()?;
    let vars: Vec<(&String, &candle_core::Var)> = p.model.store.vars().iter().collect();
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seed::rng(0x5eed, &[3]);

    // Every tensor once, then uniform draws over all scalars.
    let mut picks: Vec<(usize, usize)> = (0..vars.len()).map(|i| (i, rng.random_range(0..sizes[i]))).collect();
    while picks.len() < samples {
        let mut flat = (rng.next_u64() % total as u64) as usize;
        let mut i = 0;
        while flat >= sizes[i] {
            flat -= sizes[i];
            i += 1;
        }
        picks.push((i, flat));
    }

    let mut worst = (0.0f64, String::new());
    let mut above_floor = 0;
    for &(i, j) in &picks {
        let (name, var) = vars[i];
        let analytic = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[j],
            None => 0.0,
        };
        let orig = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let eval = |delta: f64| -> Result<f64> {
            let mut v = orig.clone();
            v[j] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), var.device())?)?;
            p.loss_value(route)
        };
        // Fourth-order central stencil.
        let numeric = (8.0 * (eval(eps)? - eval(-eps)?) - (eval(2.0 * eps)? - eval(-2.0 * eps)?)) / (12.0 * eps);
        var.set(&Tensor::from_vec(orig, var.dims(), var.device())?)?;
        above_floor += usize::from(analytic.abs() > floor);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, format!("{name}[{j}]"));
        }
    }
    Ok(GradCheckReport {
        checked: picks.len(),
        worst_rel: worst.0,
        worst_param: worst.1,
        num_params: total,
        above_floor,
    })
}

pub fn check_gradients(samples: usize, tol: f64) -> CheckResult {
    timed("gradient_check", || {
        let r = gradient_check(samples, 0.5, 1e-3, 1e-8)?;
        Ok((
            r.worst_rel < tol && r.checked >= samples && r.num_params <= 50_000,
            format!(
                "{} of {} parameters ({} with |grad| > 1e-8), worst relative error {:.2e} at {} (tol {tol:.0e})",
                r.checked, r.num_params, r.above_floor, r.worst_rel, r.worst_param
            ),
        ))
    })
}

/// Layers (parameter names without the trailing `weight`/`bias`) whose
/// gradient is identically zero.
pub fn dead_groups(store: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<Vec<String>> {
    let mut groups: BTreeMap<String, bool> = BTreeMap::new();
    for (name, var) in store.vars() {
        let group = match name.rsplit_once('.') {
            Some((g, "weight" | "bias" | "gain")) => g.to_string(),
            _ => name.clone(),
        };
        let live = match grads.get(var) {
            Some(g) => g.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? > 0.0,
            None => false,
        };
        *groups.entry(group).or_insert(false) |= live;
    }
    Ok(groups.into_iter().filter(|(_, live)| !live).map(|(g, _)| g).collect())
}

/// Layer groups left without gradient after one routed step.
///
/// Two ordinary trainer steps first move the zero-initialized output head and
/// modulation gates off zero; before that, most blocks are legitimately
/// shadowed. The probed step routes at `rate` and drops one caption so the
/// learned null embedding is on the graph too.
pub fn gradient_reach(rate: f64, warmup_steps: u64) -> Result<Vec<String>> {
    let mut cfg = RunConfig::micro(warmup_steps, 23);
    cfg.precision = Precision::F64;
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..warmup_steps {
        trainer.train_step()?;
    }
    let model = trainer.model();
    let side = 8;
    let patch = model.config().patch_size;
    let pos = make_position_map(side / patch, side / patch)?;
    let captions = vec![model.tokenizer.encode("green triangle left"), model.tokenizer.encode("red circle")];
    let cond = Conditioning {
        positions: vec![pos.clone(), pos],
        text: model.encode_captions(&captions, &[false, true])?,
    };
    let mut rng = seed::rng(23, &[0x4ea]);
    let shape = [2, model.config().in_channels, side, side];
    let x0 = crate::flow::gaussian_like(&shape, DType::F64, &mut rng)?;
    let x1 = crate::flow::gaussian_like(&shape, DType::F64, &mut rng)?;
    let batch = FlowBatch::new(&x0, &x1, vec![0.4, 0.7])?;
    let masks = batch_route_masks(model.route_tokens(&batch.x_t)?, rate, 29, 2)?;
    let route = (rate > 0.0).then_some(masks.as_slice());
    let grads = flow_loss(model, &batch, &cond, route)?.backward()?;
    dead_groups(&model.store, &grads)
}

pub fn check_gradient_reach(rate: f64) -> CheckResult {
    timed("gradient_reach", || {
        let dead = gradient_reach(rate, 2)?;
        Ok((
            dead.is_empty(),
            if dead.is_empty() {
                format!("every layer group has nonzero gradient at tread_rate {rate}")
            } else {
                format!("no gradient reaches {}", dead.join(", "))
            },
        ))
    })
}

/// Pipeline crops against slices of independently built full maps.
pub fn check_crop_consistency(trials: usize) -> CheckResult {
    timed("crop_consistency", || {
        let mut rng = seed::rng(0x5eed, &[4]);
        let patch = 2;
        for trial in 0..trials {
            let x = patch * rng.random_range(1..=16usize);
            let h = rng.random_range(x..=4 * x + 7);
            let w = rng.random_range(x..=4 * x + 7);
            let (rh, rw) = min_dim_size(h, w, x)?;
            let img = Image::filled(1, rh, rw, 0.0);
            let pos = token_position_map(rh, rw, patch)?;
            let crop = shifted_square_crop(&img, &pos, patch, &mut seed::rng(trial as u64, &[]))?;
            // Oracle: the symmetric-linspace construction, written out again.
            let (th, tw) = (rh / patch, rw / patch);
            let r = compute_ranges(th, tw)?;
            let axis = |r: f64, n: usize| -> Vec<f64> {
                if n == 1 {
                    vec![0.0]
                } else {
                    (0..n).map(|i| (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64 * r).collect()
                }
            };
            let (hs, ws) = (axis(r.r_h, th), axis(r.r_w, tw));
            let (y0, x0) = (crop.origin.0 / patch, crop.origin.1 / patch);
            let xt = x / patch;
            for i in 0..xt {
                for j in 0..xt {
                    let got = crop.pos.get(i, j);
                    if got[0].to_bits() != hs[y0 + i].to_bits() || got[1].to_bits() != ws[x0 + j].to_bits() {
                        return Ok((false, format!("trial {trial}: {rh}x{rw} crop at {:?} differs at ({i}, {j})", crop.origin)));
                    }
                }
            }
        }
        Ok((true, format!("{trials} resize+crop trials bitwise equal")))
    })
}

struct LinePath {
    v: Tensor,
}

impl VelocityModel for LinePath {
    fn velocity(&self, _x: &Tensor, _t: &[f64], _c: &Conditioning, _r: Option<&[RouteMask]>) -> Result<Tensor> {
        Ok(self.v.clone())
    }
}

struct Decay;

impl VelocityModel for Decay {
    fn velocity(&self, x: &Tensor, _t: &[f64], _c: &Conditioning, _r: Option<&[RouteMask]>) -> Result<Tensor> {
        Ok(x.neg()?)
    }
}

/// One-step recovery on the linear path; observed Euler order on `v = -x`.
pub fn check_flow_oracle() -> CheckResult {
    timed("flow_oracle", || {
        let shape = [1, 3, 4, 4];
        let s = 17;
        let x1 = initial_noise(&shape, s, DType::F64)?;
        let x0 = crate::flow::gaussian_like(&shape, DType::F64, &mut seed::rng(s, &[0x0]))?;
        let cond = Conditioning {
            positions: vec![make_position_map(2, 2)?],
            text: crate::textcond::TextBatch::from_rows(&[Tensor::zeros((1, 4), DType::F64, &candle_core::Device::Cpu)?])?,
        };
        let line = LinePath { v: (&x1 - &x0)? };
        let out = euler_sample(&line, &cond, None, &SamplerConfig::new(1, s), &shape, DType::F64)?;
        let one_step = (out.image - &x0)?.abs()?.max_all()?.to_scalar::<f64>()?;

        let x1v = x1.flatten_all()?.to_vec1::<f64>()?;
        let mut errs = Vec::new();
        for k in [8, 16, 32, 64] {
            let out = euler_sample(&Decay, &cond, None, &SamplerConfig::new(k, s), &shape, DType::F64)?;
            let got = out.image.flatten_all()?.to_vec1::<f64>()?;
            errs.push(
                got.iter()
                    .zip(&x1v)
                    .map(|(g, x)| (g - x * std::f64::consts::E).abs())
                    .fold(0.0, f64::max),
            );
        }
        let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        let ok = one_step <= 1e-6 && orders.iter().all(|o| (o - 1.0).abs() <= 0.2);
        Ok((
            ok,
            format!(
                "one-step error {one_step:.2e}, observed orders {}",
                orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>().join(", ")
            ),
        ))
    })
}

/// The suite run by `verify`.
pub fn run_suite(faults: Faults) -> Vec<CheckResult> {
    vec![
        check_config_arithmetic(),
        check_range_constraints(1000, 1e-12, faults),
        check_rope(100),
        check_rate_zero(1e-6),
        check_crop_consistency(1000),
        check_gradients(200, 1e-4),
        check_gradient_reach(0.5),
        check_flow_oracle(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_ranges_fail_only_their_check() {
        let faults = Faults { broken_ranges: true };
        assert!(!check_range_constraints(50, 1e-12, faults).passed);
        assert!(check_crop_consistency(50).passed);
        assert!(check_rope(10).passed);
        assert!(check_config_arithmetic().passed);
    }

    #[test]
    fn reach_detects_shadowed_layers() {
        // At initialization the zero head blocks every upstream gradient.
        let dead = gradient_reach(0.5, 0).unwrap();
        assert!(dead.iter().any(|g| g.starts_with("enc.")), "{dead:?}");
    }

    #[test]
    fn clean_checks_pass() {
        for c in [
            check_range_constraints(200, 1e-12, Faults::default()),
            check_crop_consistency(200),
            check_rate_zero(1e-6),
            check_flow_oracle(),
            check_gradient_reach(0.5),
        ] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
