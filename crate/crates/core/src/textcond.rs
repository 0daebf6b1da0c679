//! Text conditioning: a toy tokenizer and a small causal transformer whose
//! final hidden states serve as the context for the backbone.
//!
//! The encoder adds no positional embedding of any kind; order information
//! comes from the causal mask alone, anchored by a learned start row that
//! every position can attend to. Anything that produces a
//! `[len, context_dim]` matrix per prompt can stand in for it through
//! [`TextBatch`], including embeddings precomputed elsewhere and loaded from a
//! tensor container.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::nn::{key_bias, Attention, AttnInputs, Init, LayerNorm, Mlp, Scope, MASK_BIAS};

pub const PAD: u32 = 0;
const BYTE_OFFSET: u32 = 1;
const WORD_OFFSET: u32 = BYTE_OFFSET + 256;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const PLACES: [&str; 5] = ["top", "bottom", "left", "right", "center"];

/// Whole-word vocabulary with a byte fallback for anything else.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let extra = ["a", "an", "the", "at", "in", "on", "of", "and", "small", "large"];
        Self::new(SHAPES.iter().chain(&COLORS).chain(&PLACES).chain(&extra).copied())
    }
}

impl Tokenizer {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.to_lowercase();
            if !out.index.contains_key(&w) {
                out.index.insert(w.clone(), WORD_OFFSET + out.words.len() as u32);
                out.words.push(w);
            }
        }
        out
    }

    pub fn vocab_size(&self) -> usize {
        WORD_OFFSET as usize + self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let lower = word.to_lowercase();
            match self.index.get(&lower) {
                Some(&id) => ids.push(id),
                None => ids.extend(word.bytes().map(|b| BYTE_OFFSET + b as u32)),
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if id >= WORD_OFFSET {
                flush(&mut bytes, &mut words);
                if let Some(w) = self.words.get((id - WORD_OFFSET) as usize) {
                    words.push(w.clone());
                }
            } else if id >= BYTE_OFFSET {
                bytes.push((id - BYTE_OFFSET) as u8);
            }
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }
}

fn default_n_layers() -> usize {
    2
}

fn default_n_heads() -> usize {
    4
}

fn default_max_context() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_dim: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
}

impl TextConfig {
    pub fn for_context_dim(context_dim: usize) -> Self {
        Self {
            vocab_size: Tokenizer::default().vocab_size(),
            context_dim,
            n_layers: default_n_layers(),
            n_heads: default_n_heads().min(context_dim / 2).max(1),
            max_context: default_max_context(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.context_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "text context_dim {} not divisible by {} heads",
                self.context_dim, self.n_heads
            )));
        }
        if self.max_context == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("text max_context and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Padded batch of per-token context vectors plus validity flags.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub emb: Tensor,
    pub valid: Vec<Vec<bool>>,
}

impl TextBatch {
    /// Right-pads `[len_i, ctx]` rows with zeros to a common length.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self> {
        let max_len = rows.iter().map(|r| r.dim(0)).collect::<candle_core::Result<Vec<_>>>()?;
        let max_len = max_len.into_iter().max().unwrap_or(0).max(1);
        let mut padded = Vec::with_capacity(rows.len());
        let mut valid = Vec::with_capacity(rows.len());
        for r in rows {
            let len = r.dim(0)?;
            padded.push(r.pad_with_zeros(0, 0, max_len - len)?);
            valid.push((0..max_len).map(|i| i < len).collect());
        }
        Ok(Self {
            emb: Tensor::stack(&padded, 0)?,
            valid,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.valid.len()
    }

    pub fn len(&self) -> usize {
        self.valid.first().map_or(0, |v| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context_dim(&self) -> Result<usize> {
        Ok(self.emb.dim(2)?)
    }

    /// Repeats every sample `n` times along the batch.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let emb = Tensor::cat(&vec![self.emb.clone(); n], 0)?;
        let valid = (0..n).flat_map(|_| self.valid.iter().cloned()).collect();
        Ok(Self { emb, valid })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            emb: self.emb.to_dtype(dtype)?,
            valid: self.valid.clone(),
        })
    }

    /// Loads a single prompt embedding (`embedding`, `[len, ctx]`) from a tensor container.
    pub fn load_embedding_file(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path)?;
        let emb = file
            .tensors
            .get("embedding")
            .ok_or_else(|| Error::Integrity(format!("{} has no `embedding` tensor", path.display())))?;
        if emb.rank() != 2 {
            return Err(Error::Shape(format!("embedding must be [len, ctx], got {:?}", emb.dims())));
        }
        Self::from_rows(&[emb.to_dtype(DType::F32)?])
    }
}

struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Small causal transformer over token ids.
pub struct ToyCausalEncoder {
    cfg: TextConfig,
    embed: Tensor,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    start: Tensor,
    null: Tensor,
}

impl ToyCausalEncoder {
    pub fn new(s: &mut Scope, cfg: &TextConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.context_dim;
        let embed = s.var("embed", &[cfg.vocab_size, d], Init::Normal(1.0))?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let mut b = s.pp(format!("blocks.{i}"));
            blocks.push(EncoderBlock {
                ln1: LayerNorm::new(&mut b.pp("ln1"), d)?,
                attn: Attention::new(&mut b.pp("attn"), d, cfg.n_heads, d / cfg.n_heads)?,
                ln2: LayerNorm::new(&mut b.pp("ln2"), d)?,
                mlp: Mlp::new(&mut b.pp("mlp"), d, 4 * d)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            final_ln: LayerNorm::new(&mut s.pp("final_ln"), d)?,
            start: s.var("start", &[1, 1, d], Init::Normal(1.0))?,
            null: s.var("null", &[1, d], Init::Normal(1.0))?,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    pub fn context_dim(&self) -> usize {
        self.cfg.context_dim
    }

    /// The learned single-row embedding used for unconditional passes.
    pub fn null_condition(&self) -> Tensor {
        self.null.clone()
    }

    /// Keeps the first `max_context` tokens.
    pub fn truncate<'a>(&self, tokens: &'a [u32]) -> &'a [u32] {
        if tokens.len() > self.cfg.max_context {
            log::warn!(
                "prompt of {} tokens truncated to {}",
                tokens.len(),
                self.cfg.max_context
            );
            &tokens[..self.cfg.max_context]
        } else {
            tokens
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the stack on `[B, L]` ids with per-sample key validity.
    fn run(&self, ids: &[Vec<u32>], valid: &[Vec<bool>]) -> Result<Tensor> {
        let b = ids.len();
        let l = ids.first().map_or(0, |r| r.len());
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        self.check_ids(&flat)?;
        let device = self.embed.device();
        let idx = Tensor::from_vec(flat, b * l, device)?;
        let tokens = self.embed.index_select(&idx, 0)?.reshape((b, l, self.cfg.context_dim))?;
        let start = self.start.to_dtype(tokens.dtype())?.broadcast_as((b, 1, self.cfg.context_dim))?;
        let mut x = Tensor::cat(&[start, tokens], 1)?;
        // Without the start row, a repeated token would see the same value set at
        // every position and produce identical states.
        let n = l + 1;
        let mut causal = Vec::with_capacity(n * n);
        for i in 0..n {
            causal.extend((0..n).map(|j| if j <= i { 0.0 } else { MASK_BIAS }));
        }
        let causal = Tensor::from_vec(causal, (1, 1, n, n), device)?.to_dtype(x.dtype())?;
        let valid: Vec<Vec<bool>> = valid
            .iter()
            .map(|v| std::iter::once(true).chain(v.iter().copied()).collect())
            .collect();
        let bias = key_bias(&valid, x.dtype(), device)?.broadcast_add(&causal)?;
        let inputs = AttnInputs {
            rope_q: None,
            rope_k: None,
            bias: Some(&bias),
        };
        for blk in &self.blocks {
            let h = blk.ln1.forward(&x)?;
            x = (&x + blk.attn.forward(&h, &h, &inputs)?)?;
            x = (&x + blk.mlp.forward(&blk.ln2.forward(&x)?)?)?;
        }
        Ok(self.final_ln.forward(&x)?.narrow(1, 1, l)?)
    }

    /// Final hidden states `[len, context_dim]`; an empty prompt yields the null row.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor> {
        let tokens = self.truncate(tokens);
        if tokens.is_empty() {
            return Ok(self.null_condition());
        }
        Ok(self.run(&[tokens.to_vec()], &[vec![true; tokens.len()]])?.squeeze(0)?)
    }

    /// Encodes with an explicit validity mask; invalid positions are hidden
    /// from every attention key.
    pub fn encode_masked(&self, tokens: &[u32], valid: &[bool]) -> Result<Tensor> {
        if tokens.len() != valid.len() {
            return Err(Error::Shape("token and mask lengths differ".into()));
        }
        Ok(self.run(&[tokens.to_vec()], &[valid.to_vec()])?.squeeze(0)?)
    }

    /// Encodes a batch; dropped or empty captions get the null row.
    pub fn encode_batch(&self, captions: &[Vec<u32>], dropped: &[bool]) -> Result<TextBatch> {
        if captions.len() != dropped.len() {
            return Err(Error::Shape("caption and dropout flag counts differ".into()));
        }
        let kept: Vec<&[u32]> = captions.iter().map(|c| self.truncate(c)).collect();
        let lens: Vec<usize> = kept
            .iter()
            .zip(dropped)
            .map(|(c, &d)| if d { 0 } else { c.len() })
            .collect();
        let l = lens.iter().copied().max().unwrap_or(0).max(1);
        let b = captions.len();
        let ids: Vec<Vec<u32>> = kept
            .iter()
            .zip(&lens)
            .map(|(c, &n)| c[..n].iter().copied().chain(std::iter::repeat(PAD)).take(l).collect())
            .collect();
        let valid: Vec<Vec<bool>> = lens.iter().map(|&n| (0..l).map(|i| i < n.max(1)).collect()).collect();

        let hidden = if lens.iter().any(|&n| n > 0) {
            Some(self.run(&ids, &valid)?)
        } else {
            None
        };
        let null_row = self.null.pad_with_zeros(0, 0, l - 1)?;
        let mut rows = Vec::with_capacity(b);
        for (i, &n) in lens.iter().enumerate() {
            match (&hidden, n) {
                (Some(h), n) if n > 0 => rows.push(h.get(i)?),
                _ => rows.push(null_row.clone()),
            }
        }
        Ok(TextBatch {
            emb: Tensor::stack(&rows, 0)?,
            valid,
        })
    }
}

/// Writes a prompt embedding file readable by [`TextBatch::load_embedding_file`].
pub fn save_embedding_file(path: &Path, embedding: &Tensor) -> Result<()> {
    let mut file = TensorFile::new(serde_json::json!({ "kind": "text-embedding" }));
    file.insert("embedding", embedding.to_device(&Device::Cpu)?);
    file.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn encoder(layers: usize) -> (ParamStore, ToyCausalEncoder) {
        let mut store = ParamStore::new(DType::F64, 5);
        let cfg = TextConfig {
            n_layers: layers,
            ..TextConfig::for_context_dim(16)
        };
        let enc = ToyCausalEncoder::new(&mut store.root().pp("text"), &cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn tokenizer_words_and_bytes() {
        let tok = Tokenizer::default();
        let ids = tok.encode("Red circle center");
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i >= WORD_OFFSET));
        let ids = tok.encode("zq");
        assert_eq!(ids, vec![BYTE_OFFSET + b'z' as u32, BYTE_OFFSET + b'q' as u32]);
        assert_eq!(tok.decode(&tok.encode("red zq circle")), "red zq circle");
    }

    #[test]
    fn causality_for_every_depth() {
        for layers in 1..=3 {
            let (_s, enc) = encoder(layers);
            let base = [275u32, 270, 265, 280, 278];
            let a = enc.encode(&base).unwrap().to_vec2::<f64>().unwrap();
            for j in 0..base.len() {
                let mut p = base;
                p[j] = 5;
                let b = enc.encode(&p).unwrap().to_vec2::<f64>().unwrap();
                for r in 0..j {
                    assert_eq!(a[r], b[r], "layers {layers}: row {r} changed when token {j} changed");
                }
                assert_ne!(a[j], b[j]);
            }
        }
    }

    #[test]
    fn empty_prompt_is_null_row() {
        let (_s, enc) = encoder(2);
        let e = enc.encode(&[]).unwrap();
        assert_eq!(e.dims(), &[1, 16]);
        assert_eq!(
            e.to_vec2::<f64>().unwrap(),
            enc.null_condition().to_vec2::<f64>().unwrap()
        );
        assert_eq!(
            enc.null_condition().to_vec2::<f64>().unwrap(),
            enc.null_condition().to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn duplicate_tokens_differ_by_prefix() {
        let (_s, enc) = encoder(2);
        let tok = Tokenizer::default();
        let ids = tok.encode("a a");
        let e = enc.encode(&ids).unwrap().to_vec2::<f64>().unwrap();
        let diff: f64 = e[0].iter().zip(&e[1]).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn masked_padding_prefix_is_invisible() {
        let (_s, enc) = encoder(2);
        let real = [275u32, 271, 266];
        let plain = enc.encode(&real).unwrap().to_vec2::<f64>().unwrap();
        for k in 1..4 {
            let mut ids = vec![PAD; k];
            ids.extend(real);
            let mut valid = vec![false; k];
            valid.extend([true; 3]);
            let padded = enc.encode_masked(&ids, &valid).unwrap().to_vec2::<f64>().unwrap();
            for (r, row) in plain.iter().enumerate() {
                for (a, b) in row.iter().zip(&padded[k + r]) {
                    assert!((a - b).abs() < 1e-12, "k={k} row {r}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn overlong_prompts_truncate() {
        let (_s, enc) = encoder(1);
        let ids: Vec<u32> = (0..40).map(|i| 260 + (i % 10)).collect();
        assert_eq!(enc.encode(&ids).unwrap().dim(0).unwrap(), 16);
    }

    #[test]
    fn batch_encoding_pads_and_drops() {
        let (_s, enc) = encoder(2);
        let caps = vec![vec![275u32, 270], vec![277u32], vec![278u32, 279, 280]];
        let batch = enc.encode_batch(&caps, &[false, false, true]).unwrap();
        assert_eq!(batch.emb.dims(), &[3, 2, 16]);
        assert_eq!(batch.valid, vec![vec![true, true], vec![true, false], vec![true, false]]);
        let single = enc.encode(&caps[1]).unwrap().to_vec2::<f64>().unwrap();
        let row = batch.emb.get(1).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in single[0].iter().zip(&row[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let dropped = batch.emb.get(2).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(dropped[0], enc.null_condition().to_vec2::<f64>().unwrap()[0]);
    }
}
