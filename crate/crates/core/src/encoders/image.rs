use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, Block, BlockCache, LayerNorm, LayerNormCache,
    Linear, ParamId, ParamSet, Scalar, Segment,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            depth: 2,
            heads: 4,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::config("image encoder sizes must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "image dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Vision transformer: linear patch embedding, class token, learned
/// positions, pre-norm blocks, shared output projection, unit-norm rows.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: Linear,
}

/// Activations kept for the backward pass.
pub struct ImageCache<F> {
    patches: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    ln_f: LayerNormCache<F>,
    ln_out: Array2<F>,
    norms: ndarray::Array1<F>,
}

/// Row-stacked encoder output: per image, row 0 is the global vector and
/// rows `1..=n_patches` are the patch embeddings, all unit length.
pub struct ImageForward<F> {
    pub embeddings: Array2<F>,
    pub segments: Vec<Segment>,
    pub cache: ImageCache<F>,
}

impl<F: Scalar> ImageForward<F> {
    pub fn global(&self, k: usize) -> ArrayView1<'_, F> {
        self.embeddings.row(self.segments[k].start)
    }

    pub fn patches(&self, k: usize) -> ArrayView2<'_, F> {
        let seg = self.segments[k];
        self.embeddings.slice(s![seg.start + 1..seg.end(), ..])
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Checks shape `[size × size × 3]` and the `[0, 1]` value range.
pub fn validate_pixels(pixels: ArrayView3<'_, f32>, image_size: usize) -> Result<()> {
    if pixels.dim() != (image_size, image_size, 3) {
        return Err(Error::validation(format!(
            "image has shape {:?}, expected ({image_size}, {image_size}, 3)",
            pixels.dim()
        )));
    }
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::validation("pixel values must lie in [0, 1]"));
    }
    Ok(())
}

impl ImageEncoder {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        config: ImageEncoderConfig,
        embed_dim: usize,
        params: &mut ParamSet<F>,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let patch_embed = Linear::new(
            params,
            "image.patch_embed",
            config.patch_dim(),
            d,
            true,
            (config.patch_dim() as f64).powf(-0.5),
            rng,
        );
        let cls = params.add_normal("image.cls", (1, d), 0.02, false, rng);
        let pos = params.add_normal("image.pos", (config.n_patches() + 1, d), 0.02, false, rng);
        let blocks = (0..config.depth)
            .map(|i| Block::new(params, &format!("image.block{i}"), d, config.heads, false, config.depth, rng))
            .collect();
        let ln_f = LayerNorm::new(params, "image.ln_f", d);
        let proj = Linear::new(params, "image.proj", d, embed_dim, false, (d as f64).powf(-0.5), rng);
        Self {
            config,
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f,
            proj,
        }
    }

    fn patchify<F: Scalar>(&self, images: &[ArrayView3<'_, f32>]) -> Array2<F> {
        let ps = self.config.patch_size;
        let side = self.config.patches_per_side();
        let n = self.config.n_patches();
        let mut out = Array2::zeros((images.len() * n, self.config.patch_dim()));
        for (k, img) in images.iter().enumerate() {
            for py in 0..side {
                for px in 0..side {
                    let mut row = out.row_mut(k * n + py * side + px);
                    let mut idx = 0;
                    for dy in 0..ps {
                        for dx in 0..ps {
                            for c in 0..3 {
                                let v = img[[py * ps + dy, px * ps + dx, c]];
                                row[idx] = F::of(2.0 * f64::from(v) - 1.0);
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass over already-validated images.
    pub fn forward<F: Scalar>(&self, p: &ParamSet<F>, images: &[ArrayView3<'_, f32>]) -> ImageForward<F> {
        let n = self.config.n_patches();
        let tokens = n + 1;
        let d = self.config.dim;
        let patches = self.patchify::<F>(images);
        let emb = self.patch_embed.forward(p, &patches);
        let pos = p.get(self.pos);
        let cls = p.get(self.cls).row(0);
        let mut h = Array2::zeros((images.len() * tokens, d));
        let segments: Vec<Segment> = (0..images.len())
            .map(|k| Segment {
                start: k * tokens,
                len: tokens,
            })
            .collect();
        for (k, seg) in segments.iter().enumerate() {
            let mut block = h.slice_mut(s![seg.start..seg.end(), ..]);
            block.row_mut(0).assign(&(&cls + &pos.row(0)));
            let mut rest = block.slice_mut(s![1.., ..]);
            rest.assign(&emb.slice(s![k * n..(k + 1) * n, ..]));
            rest += &pos.slice(s![1.., ..]);
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
        ImageForward {
            embeddings,
            segments,
            cache: ImageCache {
                patches,
                blocks: caches,
                ln_f,
                ln_out,
                norms,
            },
        }
    }

    /// Accumulates parameter gradients given `dL/d embeddings`.
    pub fn backward<F: Scalar>(
        &self,
        p: &ParamSet<F>,
        fwd: &ImageForward<F>,
        d_embeddings: &Array2<F>,
        g: &mut ParamSet<F>,
    ) {
        let cache = &fwd.cache;
        let n = self.config.n_patches();
        let dz = l2_normalize_rows_backward(fwd.embeddings.view(), &cache.norms, d_embeddings.view());
        let d_ln = self.proj.backward(p, &cache.ln_out, &dz, g);
        let mut dh = self.ln_f.backward(p, &cache.ln_f, &d_ln, g);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(p, bc, &dh, &fwd.segments, g);
        }
        let mut d_emb = Array2::zeros((fwd.segments.len() * n, self.config.dim));
        {
            let mut d_cls = Array2::<F>::zeros((1, self.config.dim));
            let mut d_pos = Array2::<F>::zeros((n + 1, self.config.dim));
            for (k, seg) in fwd.segments.iter().enumerate() {
                let block = dh.slice(s![seg.start..seg.end(), ..]);
                d_cls.row_mut(0).scaled_add(F::one(), &block.row(0));
                d_pos += &block;
                d_emb
                    .slice_mut(s![k * n..(k + 1) * n, ..])
                    .assign(&block.slice(s![1.., ..]));
            }
            *g.get_mut(self.cls) += &d_cls;
            *g.get_mut(self.pos) += &d_pos;
        }
        self.patch_embed.backward_params(&cache.patches, &d_emb, g);
    }
}

