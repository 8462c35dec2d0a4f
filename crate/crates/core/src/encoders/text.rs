use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{is_special, TokenizedText};
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, Block, BlockCache, LayerNorm, LayerNormCache,
    Linear, ParamId, ParamSet, Scalar, Segment,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub causal_mask: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            max_tokens: 77,
            dim: 64,
            depth: 2,
            heads: 4,
            causal_mask: true,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.max_tokens < 3 || self.dim == 0 || self.heads == 0 {
            return Err(Error::config("text encoder sizes are too small"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "text dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Masked self-attention text tower.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    tok_embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: Linear,
}

pub struct TextCache<F> {
    ids: Vec<u32>,
    positions: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    ln_f: LayerNormCache<F>,
    ln_out: Array2<F>,
    norms: Array1<F>,
}

/// Row-stacked output over the unpadded positions of every sequence.
///
/// The global vector of a sequence is its final (end-of-text) row; the token
/// mask is `false` for the begin/end markers so only word tokens are matched.
pub struct TextForward<F> {
    pub embeddings: Array2<F>,
    pub segments: Vec<Segment>,
    pub word_mask: Vec<bool>,
    pub cache: TextCache<F>,
}

impl<F: Scalar> TextForward<F> {
    pub fn global(&self, k: usize) -> ArrayView1<'_, F> {
        self.embeddings.row(self.segments[k].end() - 1)
    }

    pub fn tokens(&self, k: usize) -> ArrayView2<'_, F> {
        let seg = self.segments[k];
        self.embeddings.slice(s![seg.start..seg.end(), ..])
    }

    pub fn token_mask(&self, k: usize) -> &[bool] {
        let seg = self.segments[k];
        &self.word_mask[seg.start..seg.end()]
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

impl TextEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        config: TextEncoderConfig,
        embed_dim: usize,
        params: &mut ParamSet<F>,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let tok_embed = params.add_normal("text.tok_embed", (config.vocab_size, d), 0.02, false, rng);
        let pos = params.add_normal("text.pos", (config.max_tokens, d), 0.01, false, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                Block::new(
                    params,
                    &format!("text.block{i}"),
                    d,
                    config.heads,
                    config.causal_mask,
                    config.depth,
                    rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(params, "text.ln_f", d);
        let proj = Linear::new(params, "text.proj", d, embed_dim, false, (d as f64).powf(-0.5), rng);
        Self {
            config,
            tok_embed,
            pos,
            blocks,
            ln_f,
            proj,
        }
    }

    pub fn validate(&self, text: &TokenizedText) -> Result<()> {
        if text.ids.len() != text.mask.len() {
            return Err(Error::validation("token ids and mask differ in length"));
        }
        if text.ids.len() > self.config.max_tokens {
            return Err(Error::validation(format!(
                "{} positions exceed max_tokens {}",
                text.ids.len(),
                self.config.max_tokens
            )));
        }
        if let Some(&bad) = text.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::validation(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        if text.is_empty() {
            return Err(Error::validation("token sequence has no unmasked position"));
        }
        if !text
            .ids
            .iter()
            .zip(&text.mask)
            .any(|(&id, &m)| m && !is_special(id))
        {
            return Err(Error::validation("token sequence has no word token"));
        }
        Ok(())
    }

    /// Forward pass over already-validated sequences.
    pub fn forward<F: Scalar>(&self, p: &ParamSet<F>, texts: &[&TokenizedText]) -> TextForward<F> {
        let d = self.config.dim;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(texts.len());
        for t in texts {
            let start = ids.len();
            for (i, (&id, &m)) in t.ids.iter().zip(&t.mask).enumerate() {
                if m {
                    ids.push(id);
                    positions.push(i);
                }
            }
            segments.push(Segment {
                start,
                len: ids.len() - start,
            });
        }
        let emb = p.get(self.tok_embed);
        let pos = p.get(self.pos);
        let mut h = Array2::zeros((ids.len(), d));
        for (r, (&id, &at)) in ids.iter().zip(&positions).enumerate() {
            let mut row = h.row_mut(r);
            row.assign(&emb.row(id as usize));
            row += &pos.row(at);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(p, &h, &segments);
            h = out;
            caches.push(cache);
        }
        let (ln_out, ln_f) = self.ln_f.forward(p, &h);
        let z = self.proj.forward(p, &ln_out);
        let (embeddings, norms) = l2_normalize_rows(z.view());
        let word_mask = ids.iter().map(|&id| !is_special(id)).collect();
        TextForward {
            embeddings,
            segments,
            word_mask,
            cache: TextCache {
                ids,
                positions,
                blocks: caches,
                ln_f,
                ln_out,
                norms,
            },
        }
    }

    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        fwd: &TextForward<F>,
        d_embeddings: &Array2<F>,
        g: &mut ParamSet<F>,
    ) {
        let cache = &fwd.cache;
        let dz = l2_normalize_rows_backward(fwd.embeddings.view(), &cache.norms, d_embeddings.view());
        let d_ln = self.proj.backward(p, &cache.ln_out, &dz, g);
        let mut dh = self.ln_f.backward(p, &cache.ln_f, &d_ln, g);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(p, bc, &dh, &fwd.segments, g);
        }
        {
            let g_emb = g.get_mut(self.tok_embed);
            for (r, &id) in cache.ids.iter().enumerate() {
                g_emb.row_mut(id as usize).scaled_add(F::one(), &dh.row(r));
            }
        }
        let g_pos = g.get_mut(self.pos);
        for (r, &at) in cache.positions.iter().enumerate() {
            g_pos.row_mut(at).scaled_add(F::one(), &dh.row(r));
        }
    }
}
