use candle_core::Tensor;

use super::adaln::{shared_adaln, SharedAdaLn, TimestepEmbedder};
use super::block::{Block, StreamCtx};
use super::config::XutConfig;
use super::patch::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::geometry::{PositionMap, RopeFrequencies};
use crate::nn::{key_bias, Init, Linear, RopeTable, Scope};
use crate::routing::{route_merge, route_split, RouteMask};
use crate::textcond::TextBatch;

/// Everything one backbone call consumes.
pub struct XutInput<'a> {
    /// `[B, C, H, W]`.
    pub image: &'a Tensor,
    /// One map per sample at token resolution.
    pub positions: &'a [PositionMap],
    pub text: &'a TextBatch,
    /// One time per sample in `[0, 1]`.
    pub t: &'a [f64],
    pub route: Option<&'a [RouteMask]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Pre,
    Encoder { depth: usize },
    Decoder { depth: usize },
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEvent {
    /// Position in the flattened block sequence.
    pub index: usize,
    pub role: BlockRole,
    /// 1-based encoder depth whose state the cross-attention read.
    pub skip_from: Option<usize>,
    /// Image tokens this block processed (per sample).
    pub image_tokens: usize,
}

/// Record of one forward pass, for instrumentation and throughput counters.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub events: Vec<BlockEvent>,
    pub encoder_states: usize,
    pub modulation_sets: usize,
}

struct TokenMeta {
    angles: Vec<f64>,
    valid: Vec<bool>,
}

impl TokenMeta {
    fn select(&self, rows: &[usize], n_pairs: usize) -> TokenMeta {
        let mut angles = Vec::with_capacity(rows.len() * n_pairs);
        for &r in rows {
            angles.extend_from_slice(&self.angles[r * n_pairs..(r + 1) * n_pairs]);
        }
        TokenMeta {
            angles,
            valid: rows.iter().map(|&r| self.valid[r]).collect(),
        }
    }
}

/// Cross-U transformer over patch tokens concatenated with text tokens.
pub struct Xut {
    cfg: XutConfig,
    freqs: RopeFrequencies,
    patch_embed: Linear,
    text_proj: Linear,
    time: TimestepEmbedder,
    adaln: SharedAdaLn,
    pre: Vec<Block>,
    enc: Vec<Vec<Block>>,
    dec: Vec<Vec<Block>>,
    post: Vec<Block>,
    head: Linear,
}

impl Xut {
    pub fn new(s: &mut Scope, cfg: &XutConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let block = |s: &mut Scope, skip: bool| Block::new(s, d, cfg.mlp_dim, cfg.n_heads, cfg.head_dim, skip);
        let patch_embed = Linear::new(&mut s.pp("patch_embed"), cfg.tokens_per_patch(), d, Init::TruncNormal(0.02))?;
        let text_proj = Linear::new(&mut s.pp("text_proj"), cfg.context_dim, d, Init::TruncNormal(0.02))?;
        let time = TimestepEmbedder::new(&mut s.pp("time"), cfg.time_freq_dim, d)?;
        let adaln = SharedAdaLn::new(&mut s.pp("adaln"), d)?;
        let pre = (0..cfg.tread_before)
            .map(|i| block(&mut s.pp(format!("pre.{i}")), false))
            .collect::<Result<Vec<_>>>()?;
        let enc = (0..cfg.n_depth)
            .map(|dep| {
                (0..cfg.n_enc)
                    .map(|j| block(&mut s.pp(format!("enc.{dep}.{j}")), false))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..cfg.n_depth)
            .map(|dep| {
                (0..cfg.n_dec)
                    .map(|j| block(&mut s.pp(format!("dec.{dep}.{j}")), j == 0))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let post = (0..cfg.tread_after)
            .map(|i| block(&mut s.pp(format!("post.{i}")), false))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut s.pp("head"), d, cfg.tokens_per_patch(), Init::Zeros)?;
        Ok(Self {
            cfg: cfg.clone(),
            freqs: RopeFrequencies::new(cfg.head_dim, cfg.rope_fraction, cfg.rope_base)?,
            patch_embed,
            text_proj,
            time,
            adaln,
            pre,
            enc,
            dec,
            post,
            head,
        })
    }

    pub fn config(&self) -> &XutConfig {
        &self.cfg
    }

    pub fn rope_frequencies(&self) -> &RopeFrequencies {
        &self.freqs
    }

    pub fn adaln(&self) -> &SharedAdaLn {
        &self.adaln
    }

    /// Decoder level `d` (1-based) reads encoder state `n_depth - d + 1`.
    pub fn skip_source(&self, decoder_depth: usize) -> usize {
        self.cfg.n_depth - decoder_depth + 1
    }

    pub fn decoder_block(&self, depth: usize, j: usize) -> Option<&Block> {
        self.dec.get(depth)?.get(j)
    }

    fn check(&self, input: &XutInput) -> Result<(usize, (usize, usize))> {
        let (b, c, h, w) = input.image.dims4()?;
        let p = self.cfg.patch_size;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.cfg.in_channels)));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {p}")));
        }
        let grid = (h / p, w / p);
        if input.positions.len() != b || input.t.len() != b || input.text.batch_size() != b {
            return Err(Error::Shape(format!(
                "batch {b} with {} position maps, {} times, {} text rows",
                input.positions.len(),
                input.t.len(),
                input.text.batch_size()
            )));
        }
        if let Some(pm) = input.positions.iter().find(|pm| (pm.height(), pm.width()) != grid) {
            return Err(Error::Shape(format!(
                "position map {}x{} does not match token grid {}x{}",
                pm.height(),
                pm.width(),
                grid.0,
                grid.1
            )));
        }
        if input.text.context_dim()? != self.cfg.context_dim {
            return Err(Error::Shape(format!(
                "text context width {} != {}",
                input.text.context_dim()?,
                self.cfg.context_dim
            )));
        }
        if let Some(masks) = input.route {
            if masks.len() != b {
                return Err(Error::Shape(format!("{} route masks for batch {b}", masks.len())));
            }
            if let Some(m) = masks.iter().find(|m| m.n_image() != grid.0 * grid.1) {
                return Err(Error::Shape(format!(
                    "route mask over {} tokens for a {}-token image",
                    m.n_image(),
                    grid.0 * grid.1
                )));
            }
        }
        if let Some(t) = input.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Shape(format!("time {t} outside [0, 1]")));
        }
        Ok((b, grid))
    }

    fn ctx(&self, metas: &[TokenMeta], like: &Tensor) -> Result<StreamCtx> {
        let len = metas.first().map_or(0, |m| m.valid.len());
        let angles: Vec<Vec<f64>> = metas.iter().map(|m| m.angles.clone()).collect();
        let valid: Vec<Vec<bool>> = metas.iter().map(|m| m.valid.clone()).collect();
        Ok(StreamCtx {
            rope: RopeTable::new(&angles, len, self.freqs.n_pairs(), like.dtype(), like.device())?,
            bias: key_bias(&valid, like.dtype(), like.device())?,
        })
    }

    pub fn forward(&self, input: &XutInput) -> Result<Tensor> {
        self.forward_traced(input, &mut ForwardTrace::default())
    }

    pub fn forward_traced(&self, input: &XutInput, trace: &mut ForwardTrace) -> Result<Tensor> {
        let (b, grid) = self.check(input)?;
        let n_img = grid.0 * grid.1;
        let n_txt = input.text.len();
        let n_pairs = self.freqs.n_pairs();

        let (patches, _) = patchify(input.image, self.cfg.patch_size)?;
        let img = self.patch_embed.forward(&patches)?;
        let txt = self.text_proj.forward(&input.text.emb.to_dtype(img.dtype())?)?;
        let mut x = Tensor::cat(&[img, txt], 1)?;

        let metas: Vec<TokenMeta> = (0..b)
            .map(|s| {
                let mut angles = Vec::with_capacity((n_img + n_txt) * n_pairs);
                for &c in input.positions[s].coords() {
                    angles.extend(self.freqs.angles(c));
                }
                angles.resize((n_img + n_txt) * n_pairs, 0.0);
                let mut valid = vec![true; n_img];
                valid.extend_from_slice(&input.text.valid[s]);
                TokenMeta { angles, valid }
            })
            .collect();
        let full_ctx = self.ctx(&metas, &x)?;

        let cond = self.time.forward(input.t, &x)?;
        let m = self.adaln.modulation(&cond)?;
        trace.modulation_sets += 1;

        let mut index = 0;
        let mut record = |trace: &mut ForwardTrace, role, skip_from, image_tokens| {
            trace.events.push(BlockEvent {
                index,
                role,
                skip_from,
                image_tokens,
            });
            index += 1;
        };

        for blk in &self.pre {
            x = blk.forward(&x, &m, &full_ctx, None)?;
            record(trace, BlockRole::Pre, None, n_img);
        }

        let routed = input.route;
        let (mut h, bypass, u_ctx, u_img) = match routed {
            Some(masks) => {
                let (kept, bypass) = route_split(&x, masks, n_txt)?;
                let kept_metas: Vec<TokenMeta> = metas
                    .iter()
                    .zip(masks)
                    .map(|(meta, mk)| {
                        let perm = mk.permutation(n_txt);
                        meta.select(&perm[..mk.kept_stream_len(n_txt)], n_pairs)
                    })
                    .collect();
                let ctx = self.ctx(&kept_metas, &x)?;
                let kept_img = masks[0].kept().len();
                (kept, Some(bypass), Some(ctx), kept_img)
            }
            None => (x.clone(), None, None, n_img),
        };
        let u_ctx = u_ctx.as_ref().unwrap_or(&full_ctx);

        let mut states = Vec::with_capacity(self.cfg.n_depth);
        for (d, blocks) in self.enc.iter().enumerate() {
            for blk in blocks {
                h = blk.forward(&h, &m, u_ctx, None)?;
                record(trace, BlockRole::Encoder { depth: d + 1 }, None, u_img);
            }
            states.push(h.clone());
        }
        trace.encoder_states = states.len();

        for (d, blocks) in self.dec.iter().enumerate() {
            let src = self.skip_source(d + 1);
            let skip = states
                .get(src - 1)
                .ok_or_else(|| Error::Internal(format!("missing encoder state {src}")))?;
            for (j, blk) in blocks.iter().enumerate() {
                let kv = (j == 0).then_some(skip);
                h = blk.forward(&h, &m, u_ctx, kv)?;
                record(trace, BlockRole::Decoder { depth: d + 1 }, kv.map(|_| src), u_img);
            }
        }

        x = match (routed, bypass) {
            (Some(masks), Some(bypass)) => route_merge(&h, &bypass, masks, n_txt)?,
            _ => h,
        };

        for blk in &self.post {
            x = blk.forward(&x, &m, &full_ctx, None)?;
            record(trace, BlockRole::Post, None, n_img);
        }

        let img_tokens = x.narrow(1, 0, n_img)?;
        let out = self.head.forward(&shared_adaln(&img_tokens, &m.gamma_attn, &m.shift_attn)?)?;
        unpatchify(&out, grid, self.cfg.in_channels, self.cfg.patch_size)
    }
}
