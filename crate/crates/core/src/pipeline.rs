//! Text encoder plus backbone behind one parameter store.

use candle_core::{DType, Tensor};

use crate::backbone::{Xut, XutConfig, XutInput};
use crate::datapipe::{inference_position_map, Image};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, Conditioning, SamplerConfig, VelocityModel};
use crate::geometry::{CameraTransform, PositionMap};
use crate::nn::ParamStore;
use crate::routing::RouteMask;
use crate::textcond::{TextBatch, TextConfig, Tokenizer, ToyCausalEncoder};

pub struct TextToImage {
    pub store: ParamStore,
    pub text: ToyCausalEncoder,
    pub backbone: Xut,
    pub tokenizer: Tokenizer,
}

impl TextToImage {
    pub fn new(cfg: &XutConfig, text_cfg: &TextConfig, dtype: DType, seed: u64) -> Result<Self> {
        if text_cfg.context_dim != cfg.context_dim {
            return Err(Error::InvalidConfig(format!(
                "text encoder width {} != backbone context_dim {}",
                text_cfg.context_dim, cfg.context_dim
            )));
        }
        let tokenizer = Tokenizer::default();
        if text_cfg.vocab_size < tokenizer.vocab_size() {
            return Err(Error::InvalidConfig(format!(
                "text vocab {} smaller than tokenizer vocab {}",
                text_cfg.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut store = ParamStore::new(dtype, seed);
        let backbone = Xut::new(&mut store.root(), cfg)?;
        let text = ToyCausalEncoder::new(&mut store.root().pp("text"), text_cfg)?;
        Ok(Self {
            store,
            text,
            backbone,
            tokenizer,
        })
    }

    pub fn config(&self) -> &XutConfig {
        self.backbone.config()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode_captions(&self, captions: &[Vec<u32>], dropped: &[bool]) -> Result<TextBatch> {
        self.text.encode_batch(captions, dropped)
    }

    pub fn null_text(&self, batch: usize) -> Result<TextBatch> {
        self.text.encode_batch(&vec![Vec::new(); batch], &vec![true; batch])
    }

    /// Samples one image for `prompt` on the full inference map.
    pub fn sample(&self, prompt: &str, height: usize, width: usize, cam: &CameraTransform, cfg: &SamplerConfig) -> Result<(Image, String)> {
        let pos = inference_position_map(height, width, self.config().patch_size, cam)?;
        let tokens = self.tokenizer.encode(prompt);
        let cond = Conditioning {
            positions: vec![pos.clone()],
            text: self.encode_captions(&[tokens], &[false])?,
        };
        let uncond = Conditioning {
            positions: vec![pos],
            text: self.null_text(1)?,
        };
        let shape = [1, self.config().in_channels, height, width];
        let out = euler_sample(self, &cond, Some(&uncond), cfg, &shape, self.dtype())?;
        Ok((Image::from_tensor(&out.image.squeeze(0)?)?, out.noise_hash))
    }
}

impl VelocityModel for TextToImage {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Conditioning, route: Option<&[RouteMask]>) -> Result<Tensor> {
        self.backbone.forward(&XutInput {
            image: x,
            positions: &cond.positions,
            text: &cond.text,
            t,
            route,
        })
    }

    fn route_tokens(&self, x: &Tensor) -> Result<usize> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.config().image_tokens(h, w))
    }
}

/// Backbone without a text encoder, for tests and benchmarks.
impl VelocityModel for Xut {
    fn velocity(&self, x: &Tensor, t: &[f64], cond: &Conditioning, route: Option<&[RouteMask]>) -> Result<Tensor> {
        self.forward(&XutInput {
            image: x,
            positions: &cond.positions,
            text: &cond.text,
            t,
            route,
        })
    }

    fn route_tokens(&self, x: &Tensor) -> Result<usize> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.config().image_tokens(h, w))
    }
}

/// `n` copies of one map.
pub fn repeat_positions(pos: &PositionMap, n: usize) -> Vec<PositionMap> {
    vec![pos.clone(); n]
}
