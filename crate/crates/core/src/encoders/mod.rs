//! Desk-scale image and text towers sharing one embedding space.

mod image;
mod text;
pub mod tokenizer;

use ndarray::{Array1, Array2, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{TemperatureMode, LOGIT_SCALE_RANGE};
use crate::nn::{ParamId, ParamSet, Scalar};
use crate::simkernel::{TokenEmbeddings, TokenKind};

pub use image::{validate_pixels, ImageCache, ImageEncoder, ImageEncoderConfig, ImageForward};
pub use text::{TextCache, TextEncoder, TextEncoderConfig, TextForward};
pub use tokenizer::{TokenizedText, Tokenizer};

/// Name of the parameter holding `ln τ`.
pub const LOGIT_SCALE_PARAM: &str = "logit_scale";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    /// Output dimension shared by both towers.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        Ok(())
    }
}

/// Unit-norm token bank plus the global vector of one encoded input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub tokens: TokenEmbeddings,
    pub global_vec: Array1<f64>,
}

impl EncodedSample {
    /// Builds an f64 sample, re-normalizing rows cast from lower precision.
    pub fn from_rows<F: Scalar>(
        rows: ArrayView2<'_, F>,
        mask: Vec<bool>,
        global: ndarray::ArrayView1<'_, F>,
        kind: TokenKind,
    ) -> Result<Self> {
        let mut vectors: Array2<f64> = rows.mapv(Scalar::f64);
        for mut r in vectors.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        let mut global_vec: Array1<f64> = global.mapv(Scalar::f64);
        let n = global_vec.dot(&global_vec).sqrt();
        global_vec.mapv_inplace(|v| v / n);
        let tokens = TokenEmbeddings::new(vectors, mask, kind)?.with_global(global_vec.clone())?;
        Ok(Self { tokens, global_vec })
    }
}

/// Both towers, the tokenizer and the learnable logit scale.
#[derive(Debug, Clone)]
pub struct DualEncoder<F> {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub params: ParamSet<F>,
    logit_scale: ParamId,
}

impl<F: Scalar> DualEncoder<F> {
    /// Randomly initialized model; identical seeds give identical parameters.
    pub fn new(config: EncoderConfig, tokenizer: Tokenizer, temperature: TemperatureMode, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab().len() > config.text.vocab_size {
            return Err(Error::config(format!(
                "tokenizer has {} entries but vocab_size is {}",
                tokenizer.vocab().len(),
                config.text.vocab_size
            )));
        }
        if tokenizer.max_tokens() != config.text.max_tokens {
            return Err(Error::config("tokenizer and text encoder disagree on max_tokens"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let image = ImageEncoder::new(config.image.clone(), config.embed_dim, &mut params, &mut rng);
        let text = TextEncoder::new(config.text.clone(), config.embed_dim, &mut params, &mut rng);
        let logit_scale = params.add_const(LOGIT_SCALE_PARAM, (1, 1), temperature.initial().ln());
        params.set_trainable(logit_scale, temperature.is_learnable());
        Ok(Self {
            config,
            tokenizer,
            image,
            text,
            params,
            logit_scale,
        })
    }

    /// Rebuilds the model around previously saved parameters.
    pub fn from_parts(config: EncoderConfig, tokenizer: Tokenizer, params: ParamSet<F>) -> Result<Self> {
        let mut model = Self::new(config, tokenizer, TemperatureMode::Fixed(1.0), 0)?;
        if !model.params.same_layout(&params) {
            return Err(Error::validation("saved parameters do not match the encoder layout"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    /// Current logit scale `τ`.
    pub fn logit_scale(&self) -> f64 {
        self.params.get(self.logit_scale)[[0, 0]].f64().exp()
    }

    /// Clamps a learnable `τ` back into its allowed range.
    pub fn clamp_logit_scale(&mut self) {
        let (lo, hi) = LOGIT_SCALE_RANGE;
        let v = &mut self.params.get_mut(self.logit_scale)[[0, 0]];
        let clamped = v.f64().clamp(lo.ln(), hi.ln());
        *v = F::of(clamped);
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedText> {
        self.tokenizer.tokenize(text)
    }

    pub fn encode_images(&self, images: &[ArrayView3<'_, f32>]) -> Result<ImageForward<F>> {
        for img in images {
            validate_pixels(*img, self.config.image.image_size)?;
        }
        Ok(self.image.forward(&self.params, images))
    }

    pub fn encode_texts(&self, texts: &[&TokenizedText]) -> Result<TextForward<F>> {
        for t in texts {
            self.text.validate(t)?;
        }
        Ok(self.text.forward(&self.params, texts))
    }

    pub fn encode_image(&self, pixels: ArrayView3<'_, f32>) -> Result<EncodedSample> {
        let fwd = self.encode_images(&[pixels])?;
        let n = self.config.image.n_patches();
        EncodedSample::from_rows(fwd.patches(0), vec![true; n], fwd.global(0), TokenKind::ImagePatch)
    }

    pub fn encode_text(&self, tokens: &TokenizedText) -> Result<EncodedSample> {
        let fwd = self.encode_texts(&[tokens])?;
        EncodedSample::from_rows(
            fwd.tokens(0),
            fwd.token_mask(0).to_vec(),
            fwd.global(0),
            TokenKind::TextToken,
        )
    }

    /// Word strings of the unpadded positions, aligned with `encode_text` rows.
    pub fn token_labels(&self, tokens: &TokenizedText) -> Vec<String> {
        tokens
            .valid_ids()
            .iter()
            .map(|&id| self.tokenizer.token_str(id).to_string())
            .collect()
    }
}
