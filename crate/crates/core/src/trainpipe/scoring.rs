//! Image × caption score grids from encoder outputs, with gradients.

use ndarray::{s, Array2};

use crate::encoders::{ImageForward, TextForward};
use crate::error::Result;
use crate::nn::Scalar;
use crate::simkernel::{matrix_pair_score, Scorer, ScorerConfig, SimilarityMatrix};

/// Gradients with respect to the two stacked embedding matrices.
pub struct GridGrads<F> {
    pub images: Array2<F>,
    pub texts: Array2<F>,
}

fn to_f64<F: Scalar>(a: ndarray::ArrayView2<'_, F>) -> Array2<f64> {
    a.mapv(Scalar::f64)
}

fn to_scalar<F: Scalar>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::of)
}

/// Score of every (image, caption) pair; with `d_scores`, also the gradient
/// of `Σ d_scores ⊙ scores` with respect to both embedding matrices.
pub fn score_grid<F: Scalar>(
    img: &ImageForward<F>,
    txt: &TextForward<F>,
    cfg: &ScorerConfig,
    d_scores: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Option<GridGrads<F>>)> {
    let (b, c) = (img.len(), txt.len());
    let mut scores = Array2::zeros((b, c));
    let mut d_img = d_scores.map(|_| Array2::<f64>::zeros(img.embeddings.dim()));
    let mut d_txt = d_scores.map(|_| Array2::<f64>::zeros(txt.embeddings.dim()));
    let txt64 = to_f64(txt.embeddings.view());

    if cfg.scorer == Scorer::Clip {
        let globals_i: Vec<_> = (0..b).map(|k| img.global(k).mapv(Scalar::f64)).collect();
        let globals_t: Vec<_> = (0..c).map(|j| txt64.row(txt.segments[j].end() - 1).to_owned()).collect();
        for k in 0..b {
            for j in 0..c {
                scores[[k, j]] = globals_i[k].dot(&globals_t[j]).clamp(-1.0, 1.0);
                if let (Some(d), Some(di), Some(dt)) = (d_scores, d_img.as_mut(), d_txt.as_mut()) {
                    let w = d[[k, j]];
                    di.row_mut(img.segments[k].start).scaled_add(w, &globals_t[j]);
                    dt.row_mut(txt.segments[j].end() - 1).scaled_add(w, &globals_i[k]);
                }
            }
        }
    } else {
        for k in 0..b {
            let patches = to_f64(img.patches(k));
            let n = patches.nrows();
            let grid = patches.dot(&txt64.t()).mapv(|v| v.clamp(-1.0, 1.0));
            let mut d_grid = d_scores.map(|_| Array2::<f64>::zeros(grid.dim()));
            for j in 0..c {
                let seg = txt.segments[j];
                let sub = grid.slice(s![.., seg.start..seg.end()]).to_owned();
                let sim = SimilarityMatrix::new(sub, vec![true; n], txt.token_mask(j).to_vec())?;
                let scale = d_scores.map_or(0.0, |d| d[[k, j]]);
                let mut visit = |r: usize, col: usize, w: f64| {
                    if let Some(g) = d_grid.as_mut() {
                        g[[r, seg.start + col]] += w;
                    }
                };
                scores[[k, j]] = matrix_pair_score(&sim, cfg, scale, &mut visit);
            }
            if let (Some(g), Some(di), Some(dt)) = (d_grid, d_img.as_mut(), d_txt.as_mut()) {
                let start = img.segments[k].start + 1;
                di.slice_mut(s![start..start + n, ..]).assign(&g.dot(&txt64));
                *dt += &g.t().dot(&patches);
            }
        }
    }
    let grads = match (d_img, d_txt) {
        (Some(i), Some(t)) => Some(GridGrads {
            images: to_scalar(&i),
            texts: to_scalar(&t),
        }),
        _ => None,
    };
    Ok((scores, grads))
}
