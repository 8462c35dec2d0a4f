//! Per-patch account of how one image matches one caption.

use ndarray::ArrayView3;

use crate::encoders::DualEncoder;
use crate::error::Result;
use crate::nn::Scalar;
use crate::simkernel::{
    flexible_match_score, match_report, token_similarity_matrix, Direction, MatchReport, MatchingThresholds,
    SimilarityMatrix,
};

#[derive(Debug, Clone)]
pub struct MatchExplanation {
    pub report: MatchReport,
    pub similarity: SimilarityMatrix,
    /// Word strings aligned with the similarity columns.
    pub token_labels: Vec<String>,
    /// Image-to-text flexible score straight from the kernel.
    pub score: f64,
}

pub fn explain_match<F: Scalar>(
    model: &DualEncoder<F>,
    pixels: ArrayView3<'_, f32>,
    caption: &str,
    thresholds: MatchingThresholds,
) -> Result<MatchExplanation> {
    let tokens = model.tokenize(caption)?;
    let img = model.encode_image(pixels)?;
    let txt = model.encode_text(&tokens)?;
    let similarity = token_similarity_matrix(&img.tokens, &txt.tokens)?;
    Ok(MatchExplanation {
        report: match_report(&similarity, thresholds),
        score: flexible_match_score(&similarity, thresholds, Direction::ImageToText),
        token_labels: model.token_labels(&tokens),
        similarity,
    })
}
