//! Minimal transformer building blocks with hand-written backward passes.
//!
//! Activations are row-stacked: a batch of sequences is one `[rows × dim]`
//! matrix plus a list of [`Segment`]s telling attention where each sequence
//! starts. Every layer returns a cache from `forward` that `backward`
//! consumes; parameter gradients accumulate into a [`ParamSet`] shaped like
//! the parameters.

mod layers;
mod params;
mod scalar;

pub use layers::{
    l2_normalize_rows, l2_normalize_rows_backward, Attention, AttentionCache, Block, BlockCache,
    LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Segment,
};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use scalar::Scalar;
