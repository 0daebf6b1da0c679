//! Token routing: a random subset of image tokens skips the routed block
//! region through an identity path and is merged back afterwards.
//!
//! Within a token stream laid out as `[image tokens | text tokens]`, a mask
//! induces the permutation `kept ++ text ++ bypassed`. The kept stream is the
//! first `kept + text` rows of the permuted stream, the bypass store is the
//! rest, and merging applies the inverse permutation.

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;

use crate::backbone::{derived_counts, XutConfig};
use crate::error::{Error, Result};
use crate::seed;

/// Selection rate used during training; the conditional auto-guidance pass
/// must stay below it.
pub const TRAINING_ROUTE_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RouteMask {
    kept: Vec<usize>,
    bypassed: Vec<usize>,
    rate: f64,
    seed: u64,
    n_image: usize,
}

pub fn make_route_mask(n_image_tokens: usize, rate: f64, seed: u64) -> Result<RouteMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    let n_bypass = (rate * n_image_tokens as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_image_tokens).collect();
    order.shuffle(&mut seed::rng(seed, &[]));
    let mut bypassed = order[..n_bypass].to_vec();
    let mut kept = order[n_bypass..].to_vec();
    bypassed.sort_unstable();
    kept.sort_unstable();
    Ok(RouteMask {
        kept,
        bypassed,
        rate,
        seed,
        n_image: n_image_tokens,
    })
}

/// One independent mask per batch element, keyed by `(seed, index)`.
pub fn batch_route_masks(n_image_tokens: usize, rate: f64, seed: u64, batch: usize) -> Result<Vec<RouteMask>> {
    (0..batch)
        .map(|i| make_route_mask(n_image_tokens, rate, seed::derive(seed, &[i as u64])))
        .collect()
}

impl RouteMask {
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn bypassed(&self) -> &[usize] {
        &self.bypassed
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    /// Order of the full `[image | text]` stream after routing.
    pub fn permutation(&self, n_text: usize) -> Vec<usize> {
        let n = self.n_image;
        self.kept
            .iter()
            .copied()
            .chain(n..n + n_text)
            .chain(self.bypassed.iter().copied())
            .collect()
    }

    pub fn inverse_permutation(&self, n_text: usize) -> Vec<usize> {
        let perm = self.permutation(n_text);
        let mut inv = vec![0; perm.len()];
        for (pos, &src) in perm.iter().enumerate() {
            inv[src] = pos;
        }
        inv
    }

    pub fn kept_stream_len(&self, n_text: usize) -> usize {
        self.kept.len() + n_text
    }

    fn check(&self, len: usize, n_text: usize) -> Result<()> {
        if self.n_image + n_text != len {
            return Err(Error::Internal(format!(
                "route mask covers {} image + {n_text} text tokens but the stream has {len}",
                self.n_image
            )));
        }
        if let Some(&i) = self.kept.iter().chain(&self.bypassed).find(|&&i| i >= self.n_image) {
            return Err(Error::Internal(format!("route index {i} outside the image span")));
        }
        Ok(())
    }
}

fn gather_rows(tokens: &Tensor, rows_per_sample: &[Vec<usize>]) -> Result<Tensor> {
    let (b, l, d) = tokens.dims3()?;
    let width = rows_per_sample.first().map_or(0, |r| r.len());
    let mut idx = Vec::with_capacity(b * width);
    for (s, rows) in rows_per_sample.iter().enumerate() {
        if rows.len() != width {
            return Err(Error::Shape("route masks in a batch must select equal counts".into()));
        }
        idx.extend(rows.iter().map(|&r| (s * l + r) as u32));
    }
    let idx = Tensor::from_vec(idx, b * width, &Device::Cpu)?;
    Ok(tokens.reshape((b * l, d))?.index_select(&idx, 0)?.reshape((b, width, d))?)
}

/// Splits `[B, n_image + n_text, D]` into the kept stream (kept image tokens
/// in order, then all text tokens) and the untouched bypassed image tokens.
pub fn route_split(tokens: &Tensor, masks: &[RouteMask], n_text: usize) -> Result<(Tensor, Tensor)> {
    let (b, l, _) = tokens.dims3()?;
    if masks.len() != b {
        return Err(Error::Shape(format!("{} route masks for a batch of {b}", masks.len())));
    }
    let mut kept_rows = Vec::with_capacity(b);
    let mut bypass_rows = Vec::with_capacity(b);
    for m in masks {
        m.check(l, n_text)?;
        let perm = m.permutation(n_text);
        let k = m.kept_stream_len(n_text);
        kept_rows.push(perm[..k].to_vec());
        bypass_rows.push(perm[k..].to_vec());
    }
    Ok((gather_rows(tokens, &kept_rows)?, gather_rows(tokens, &bypass_rows)?))
}

/// Reinserts bypassed tokens at their original positions.
pub fn route_merge(kept: &Tensor, bypass: &Tensor, masks: &[RouteMask], n_text: usize) -> Result<Tensor> {
    let (b, k, _) = kept.dims3()?;
    let (bb, nb, _) = bypass.dims3()?;
    if masks.len() != b || bb != b {
        return Err(Error::Shape(format!(
            "merge of batches {b} and {bb} with {} masks",
            masks.len()
        )));
    }
    let mut inv_rows = Vec::with_capacity(b);
    for m in masks {
        if m.kept_stream_len(n_text) != k || m.bypassed.len() != nb {
            return Err(Error::Shape(format!(
                "kept stream {k} / bypass {nb} rows do not match mask ({} kept, {} bypassed, {n_text} text)",
                m.kept.len(),
                m.bypassed.len()
            )));
        }
        inv_rows.push(m.inverse_permutation(n_text));
    }
    let joined = Tensor::cat(&[kept, bypass], 1)?;
    gather_rows(&joined, &inv_rows)
}

/// Block range `[first, end)` over the flattened block sequence that routing covers.
pub fn routed_region_bounds(cfg: &XutConfig) -> Result<(usize, usize)> {
    let total = derived_counts(cfg).total_blocks;
    let (n, m) = (cfg.tread_before, cfg.tread_after);
    if n + m > total {
        return Err(Error::InvalidConfig(format!(
            "tread_before ({n}) + tread_after ({m}) exceeds {total} blocks"
        )));
    }
    Ok((n, total - m))
}

/// Guidance weight and the routing rates of the conditional and unconditional passes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub cond_rate: f64,
    pub uncond_rate: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            cond_rate: 0.0,
            uncond_rate: 0.0,
        }
    }
}

impl GuidanceSpec {
    pub fn auto_guidance_enabled(&self) -> bool {
        self.cond_rate > 0.0 || self.uncond_rate > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.cond_rate, self.uncond_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidGuidance(format!("routing rate {r} outside [0, 1]")));
            }
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidGuidance(format!("scale {} is not finite", self.scale)));
        }
        if self.auto_guidance_enabled() {
            if self.cond_rate >= self.uncond_rate {
                return Err(Error::InvalidGuidance(format!(
                    "conditional rate {} must be below unconditional rate {}",
                    self.cond_rate, self.uncond_rate
                )));
            }
            if self.cond_rate >= TRAINING_ROUTE_RATE {
                return Err(Error::InvalidGuidance(format!(
                    "conditional rate {} must be below the training rate {TRAINING_ROUTE_RATE}",
                    self.cond_rate
                )));
            }
        }
        Ok(())
    }
}

/// `v_uncond + scale * (v_cond - v_uncond)`.
pub fn auto_guidance(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if v_cond.dims() != v_uncond.dims() {
        return Err(Error::Shape(format!(
            "guidance velocities differ in shape: {:?} vs {:?}",
            v_cond.dims(),
            v_uncond.dims()
        )));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * scale)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    fn tokens(b: usize, l: usize, d: usize) -> Tensor {
        let v: Vec<f32> = (0..b * l * d).map(|i| i as f32 * 0.5 - 3.0).collect();
        Tensor::from_vec(v, (b, l, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn mask_boundaries() {
        let m = make_route_mask(10, 0.0, 1).unwrap();
        assert!(m.bypassed().is_empty());
        assert_eq!(m.kept(), (0..10).collect::<Vec<_>>().as_slice());
        let m = make_route_mask(10, 1.0, 1).unwrap();
        assert!(m.kept().is_empty());
        let m = make_route_mask(256, 0.5, 7).unwrap();
        assert_eq!(m.bypassed().len(), 128);
        assert!(matches!(make_route_mask(4, 1.5, 0), Err(Error::InvalidRate(_))));
        assert!(matches!(make_route_mask(4, -0.1, 0), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn masks_deterministic_and_independent() {
        assert_eq!(make_route_mask(64, 0.5, 3).unwrap(), make_route_mask(64, 0.5, 3).unwrap());
        let batch = batch_route_masks(64, 0.5, 3, 4).unwrap();
        assert_ne!(batch[0].bypassed(), batch[1].bypassed());
    }

    #[test]
    fn rate_zero_split_is_identity() {
        let x = tokens(2, 7, 3);
        let masks = batch_route_masks(5, 0.0, 11, 2).unwrap();
        let (kept, bypass) = route_split(&x, &masks, 2).unwrap();
        assert_eq!(bypass.dim(1).unwrap(), 0);
        assert_eq!(
            kept.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn split_keeps_text_and_order() {
        let x = tokens(1, 6, 1);
        let m = make_route_mask(4, 0.5, 5).unwrap();
        let (kept, bypass) = route_split(&x, std::slice::from_ref(&m), 2).unwrap();
        let kept = kept.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bypass = bypass.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let row = |i: usize| i as f32 * 0.5 - 3.0;
        let mut want_kept: Vec<f32> = m.kept().iter().map(|&i| row(i)).collect();
        want_kept.extend([row(4), row(5)]);
        assert_eq!(kept, want_kept);
        assert_eq!(bypass, m.bypassed().iter().map(|&i| row(i)).collect::<Vec<_>>());
    }

    #[test]
    fn merge_checks_lengths() {
        let x = tokens(1, 6, 2);
        let m = make_route_mask(4, 0.5, 5).unwrap();
        let (kept, bypass) = route_split(&x, std::slice::from_ref(&m), 2).unwrap();
        let short = kept.narrow(1, 0, 3).unwrap();
        assert!(matches!(route_merge(&short, &bypass, &[m], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn region_bounds() {
        assert_eq!(routed_region_bounds(&XutConfig::xut_base()).unwrap(), (1, 17));
        let cfg = XutConfig { tread_before: 0, tread_after: 0, ..XutConfig::toy() };
        assert_eq!(routed_region_bounds(&cfg).unwrap(), (0, 6));
        // No U-loop blocks left: the region is empty and routing is a no-op.
        let cfg = XutConfig { n_enc: 0, n_dec: 0, ..XutConfig::toy() };
        let (a, b) = routed_region_bounds(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guidance_rules() {
        let ok = GuidanceSpec { scale: 2.0, cond_rate: 0.25, uncond_rate: 0.5 };
        ok.validate().unwrap();
        let bad = GuidanceSpec { scale: 2.0, cond_rate: 0.5, uncond_rate: 0.25 };
        assert!(matches!(bad.validate(), Err(Error::InvalidGuidance(_))));
        let equal = GuidanceSpec { scale: 2.0, cond_rate: 0.3, uncond_rate: 0.3 };
        assert!(equal.validate().is_err());
        let high = GuidanceSpec { scale: 2.0, cond_rate: 0.5, uncond_rate: 0.75 };
        assert!(high.validate().is_err());
        GuidanceSpec { scale: 3.0, cond_rate: 0.0, uncond_rate: 0.0 }.validate().unwrap();
    }

    #[test]
    fn guidance_combination() {
        let c = Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap();
        let u = Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap();
        let v = auto_guidance(&c, &u, 2.0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 2.0));
        let v = auto_guidance(&c, &u, 1.0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
        let v = auto_guidance(&c, &u, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let w = Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(auto_guidance(&c, &w, 2.0), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn mask_partitions_image_tokens(n in 0usize..300, rate in 0.0f64..=1.0, seed in any::<u64>()) {
            let m = make_route_mask(n, rate, seed).unwrap();
            prop_assert_eq!(m.bypassed().len(), (rate * n as f64).round() as usize);
            let mut all: Vec<usize> = m.kept().iter().chain(m.bypassed()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let perm = m.permutation(3);
            let inv = m.inverse_permutation(3);
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(inv[p], i);
            }
        }

        #[test]
        fn split_merge_roundtrip(n in 1usize..40, text in 0usize..6, rate in 0.0f64..=1.0, seed in any::<u64>()) {
            let x = Tensor::randn(0f32, 1., (2, n + text, 3), &Device::Cpu).unwrap();
            let masks = batch_route_masks(n, rate, seed, 2).unwrap();
            let (kept, bypass) = route_split(&x, &masks, text).unwrap();
            // Multiset of (index, value) pairs survives the split.
            for (b, m) in masks.iter().enumerate() {
                let perm = m.permutation(text);
                let k = m.kept_stream_len(text);
                let xs = x.get(b).unwrap().to_vec2::<f32>().unwrap();
                let ks = kept.get(b).unwrap().to_vec2::<f32>().unwrap();
                let bs = bypass.get(b).unwrap().to_vec2::<f32>().unwrap();
                for (pos, &src) in perm.iter().enumerate() {
                    let got = if pos < k { &ks[pos] } else { &bs[pos - k] };
                    prop_assert_eq!(got, &xs[src]);
                }
            }
            let y = route_merge(&kept, &bypass, &masks, text).unwrap();
            prop_assert_eq!(
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }
}
