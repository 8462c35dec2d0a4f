//! Patch/token similarity kernels.
//!
//! Every scorer reduces a patch-by-token cosine grid to a single pair score:
//!
//! - [`flexible_match_score`] averages all tokens above an upper threshold,
//!   falls back to the best token inside the `[lower, upper]` band, and drops
//!   patches whose best token sits below the lower threshold;
//! - [`filip_score`] is the mean over patches of the best token (mean-max);
//! - [`clip_score`] is the plain cosine of two global vectors.
//!
//! The functions are pure and allocation-light so the trainer can call them
//! for every image/caption pair of a batch.

pub mod oracle;
mod report;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{MatchBranch, MatchReport, PatchMatch};

/// Tolerance used when checking that embedding rows have unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    ImagePatch,
    TextToken,
}

/// A bank of unit-length token vectors with a validity mask.
///
/// Rows whose mask entry is `false` are padding and never influence a score.
/// An optional global vector rides along for the global-cosine scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    vectors: Array2<f64>,
    mask: Vec<bool>,
    kind: TokenKind,
    global: Option<Array1<f64>>,
}

impl TokenEmbeddings {
    pub fn new(vectors: Array2<f64>, mask: Vec<bool>, kind: TokenKind) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::validation("token bank must hold at least one row"));
        }
        if vectors.ncols() == 0 {
            return Err(Error::validation("token vectors must have dim >= 1"));
        }
        if mask.len() != vectors.nrows() {
            return Err(Error::validation(format!(
                "mask length {} does not match {} token rows",
                mask.len(),
                vectors.nrows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::validation("token bank has no unmasked row"));
        }
        for (row, vec) in vectors.axis_iter(Axis(0)).enumerate() {
            if mask[row] {
                check_unit(vec, &format!("row {row}"))?;
            }
        }
        Ok(Self {
            vectors,
            mask,
            kind,
            global: None,
        })
    }

    /// Bank with every row valid.
    pub fn unmasked(vectors: Array2<f64>, kind: TokenKind) -> Result<Self> {
        let mask = vec![true; vectors.nrows()];
        Self::new(vectors, mask, kind)
    }

    /// Attach the global (pooled) embedding used by the global-cosine scorer.
    pub fn with_global(mut self, global: Array1<f64>) -> Result<Self> {
        if global.len() != self.dim() {
            return Err(Error::validation(format!(
                "global vector has dim {}, tokens have dim {}",
                global.len(),
                self.dim()
            )));
        }
        check_unit(global.view(), "global vector")?;
        self.global = Some(global);
        Ok(self)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn global(&self) -> Option<ArrayView1<'_, f64>> {
        self.global.as_ref().map(|g| g.view())
    }

    pub fn n_tokens(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn check_unit(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::validation(format!("{what} has zero or non-finite norm")));
    }
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::validation(format!(
            "{what} has norm {norm}, expected unit length"
        )));
    }
    Ok(())
}

/// Patch-by-token cosine grid; rows are image patches, columns text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Array2<f64>,
    row_mask: Vec<bool>,
    col_mask: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn new(scores: Array2<f64>, row_mask: Vec<bool>, col_mask: Vec<bool>) -> Result<Self> {
        if row_mask.len() != scores.nrows() || col_mask.len() != scores.ncols() {
            return Err(Error::validation(format!(
                "mask lengths ({}, {}) do not match score shape {:?}",
                row_mask.len(),
                col_mask.len(),
                scores.dim()
            )));
        }
        if !row_mask.iter().any(|&m| m) || !col_mask.iter().any(|&m| m) {
            return Err(Error::validation(
                "similarity matrix needs at least one valid row and one valid column",
            ));
        }
        for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
            if !row_mask[i] {
                continue;
            }
            for (t, &v) in row.iter().enumerate() {
                if col_mask[t] && !(-1.0 - SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&v) {
                    return Err(Error::validation(format!(
                        "score ({i}, {t}) = {v} is outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(Self {
            scores,
            row_mask,
            col_mask,
        })
    }

    /// Grid with every row and column valid.
    pub fn from_scores(scores: Array2<f64>) -> Result<Self> {
        let (r, c) = scores.dim();
        Self::new(scores, vec![true; r], vec![true; c])
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn row_mask(&self) -> &[bool] {
        &self.row_mask
    }

    pub fn col_mask(&self) -> &[bool] {
        &self.col_mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.scores.dim()
    }

    /// Token-by-patch view with the masks swapped.
    pub fn transpose(&self) -> Self {
        Self {
            scores: self.scores.t().to_owned(),
            row_mask: self.col_mask.clone(),
            col_mask: self.row_mask.clone(),
        }
    }

    fn lane_count(&self, dir: Direction) -> usize {
        match dir {
            Direction::ImageToText => self.scores.nrows(),
            Direction::TextToImage => self.scores.ncols(),
        }
    }

    fn lane_masks(&self, dir: Direction) -> (&[bool], &[bool]) {
        match dir {
            Direction::ImageToText => (&self.row_mask, &self.col_mask),
            Direction::TextToImage => (&self.col_mask, &self.row_mask),
        }
    }

    fn lane(&self, dir: Direction, lane: usize) -> ArrayView1<'_, f64> {
        match dir {
            Direction::ImageToText => self.scores.row(lane),
            Direction::TextToImage => self.scores.column(lane),
        }
    }

    /// Maps a (lane, entry) pair back to (row, column) coordinates.
    fn coords(dir: Direction, lane: usize, entry: usize) -> (usize, usize) {
        match dir {
            Direction::ImageToText => (lane, entry),
            Direction::TextToImage => (entry, lane),
        }
    }
}

/// Lower (`c`) and upper (`d`) cosine thresholds of flexible matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingThresholds {
    pub lower: f64,
    pub upper: f64,
}

impl MatchingThresholds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::config("thresholds must be finite"));
        }
        if lower > upper {
            return Err(Error::config(format!(
                "lower threshold {lower} exceeds upper threshold {upper}"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Thresholds wide enough that every cosine lands in the band, which
    /// turns flexible matching into mean-max.
    pub fn mean_max() -> Self {
        Self {
            lower: -2.0,
            upper: 2.0,
        }
    }
}

impl Default for MatchingThresholds {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: 0.85,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// How the two directional scores combine into one pair score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// Arithmetic mean of image-to-text and text-to-image.
    #[default]
    Symmetric,
    ImageToText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Three-branch flexible matching.
    Flexible,
    /// Mean-max token similarity.
    Filip,
    /// Cosine of global embeddings.
    Clip,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Flexible => "flexible",
            Scorer::Filip => "filip",
            Scorer::Clip => "clip",
        }
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flexible" => Ok(Scorer::Flexible),
            "filip" => Ok(Scorer::Filip),
            "clip" => Ok(Scorer::Clip),
            other => Err(Error::config(format!(
                "unknown scorer {other:?} (expected flexible, filip or clip)"
            ))),
        }
    }
}

/// Scorer choice plus the knobs it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub scorer: Scorer,
    pub thresholds: MatchingThresholds,
    pub directions: DirectionMode,
}

impl ScorerConfig {
    pub fn new(scorer: Scorer) -> Self {
        Self {
            scorer,
            thresholds: MatchingThresholds::default(),
            directions: DirectionMode::Symmetric,
        }
    }
}

/// Cosine grid between every patch and every token.
pub fn token_similarity_matrix(
    img: &TokenEmbeddings,
    txt: &TokenEmbeddings,
) -> Result<SimilarityMatrix> {
    if img.kind() != TokenKind::ImagePatch || txt.kind() != TokenKind::TextToken {
        return Err(Error::config(
            "similarity matrix expects (image_patch, text_token) banks",
        ));
    }
    if img.dim() != txt.dim() {
        return Err(Error::config(format!(
            "embedding dims differ: image {} vs text {}",
            img.dim(),
            txt.dim()
        )));
    }
    let mut scores = img.vectors().dot(&txt.vectors().t());
    // Cosines of unit vectors can overshoot by a rounding error.
    scores.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(SimilarityMatrix {
        scores,
        row_mask: img.mask().to_vec(),
        col_mask: txt.mask().to_vec(),
    })
}

/// Per-lane outcome of the three-branch rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LaneOutcome {
    Masked,
    /// Best entry above the upper threshold: mean of all entries above it.
    Above { value: f64, count: usize },
    /// Best entry inside the closed band.
    Band { value: f64, argmax: usize },
    Dropped,
}

impl LaneOutcome {
    fn contributes(&self) -> Option<f64> {
        match *self {
            LaneOutcome::Above { value, .. } | LaneOutcome::Band { value, .. } => Some(value),
            LaneOutcome::Masked | LaneOutcome::Dropped => None,
        }
    }
}

pub(crate) fn classify_lanes(
    s: &SimilarityMatrix,
    th: MatchingThresholds,
    dir: Direction,
) -> Vec<LaneOutcome> {
    let (lane_mask, entry_mask) = s.lane_masks(dir);
    (0..s.lane_count(dir))
        .map(|lane| {
            if !lane_mask[lane] {
                return LaneOutcome::Masked;
            }
            let values = s.lane(dir, lane);
            let mut best = f64::NEG_INFINITY;
            let mut argmax = 0;
            for (e, &v) in values.iter().enumerate() {
                if entry_mask[e] && v > best {
                    best = v;
                    argmax = e;
                }
            }
            if best > th.upper {
                let mut sum = 0.0;
                let mut count = 0;
                for (e, &v) in values.iter().enumerate() {
                    if entry_mask[e] && v > th.upper {
                        sum += v;
                        count += 1;
                    }
                }
                LaneOutcome::Above {
                    value: sum / count as f64,
                    count,
                }
            } else if best >= th.lower {
                LaneOutcome::Band {
                    value: best,
                    argmax,
                }
            } else {
                LaneOutcome::Dropped
            }
        })
        .collect()
}

/// Flexible-matching score in one direction.
///
/// Patches (or tokens, for [`Direction::TextToImage`]) whose best match is
/// below the lower threshold are excluded from both the sum and the count;
/// if every lane is dropped the score is `0`.
pub fn flexible_match_score(s: &SimilarityMatrix, th: MatchingThresholds, dir: Direction) -> f64 {
    mean_of_outcomes(&classify_lanes(s, th, dir))
}

fn mean_of_outcomes(outcomes: &[LaneOutcome]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for value in outcomes.iter().filter_map(LaneOutcome::contributes) {
        sum += value;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Flexible-matching score together with its (sub)gradient.
///
/// `visit(row, col, weight)` receives every nonzero entry of
/// `d score / d S[row, col]`, scaled by `scale`. The effective lane count and
/// branch assignment are treated as locally constant, which holds whenever no
/// entry sits exactly on a threshold.
pub fn flexible_match_backward(
    s: &SimilarityMatrix,
    th: MatchingThresholds,
    dir: Direction,
    scale: f64,
    visit: &mut dyn FnMut(usize, usize, f64),
) -> f64 {
    let outcomes = classify_lanes(s, th, dir);
    let score = mean_of_outcomes(&outcomes);
    let effective = outcomes.iter().filter(|o| o.contributes().is_some()).count();
    if effective == 0 || scale == 0.0 {
        return score;
    }
    let lane_weight = scale / effective as f64;
    let (_, entry_mask) = s.lane_masks(dir);
    for (lane, outcome) in outcomes.iter().enumerate() {
        match *outcome {
            LaneOutcome::Above { count, .. } => {
                let w = lane_weight / count as f64;
                for (e, &v) in s.lane(dir, lane).iter().enumerate() {
                    if entry_mask[e] && v > th.upper {
                        let (r, c) = SimilarityMatrix::coords(dir, lane, e);
                        visit(r, c, w);
                    }
                }
            }
            LaneOutcome::Band { argmax, .. } => {
                let (r, c) = SimilarityMatrix::coords(dir, lane, argmax);
                visit(r, c, lane_weight);
            }
            LaneOutcome::Masked | LaneOutcome::Dropped => {}
        }
    }
    score
}

/// Dense gradient of [`flexible_match_score`] with respect to the score grid.
pub fn flexible_match_grad(
    s: &SimilarityMatrix,
    th: MatchingThresholds,
    dir: Direction,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(s.dim());
    let score = flexible_match_backward(s, th, dir, 1.0, &mut |r, c, w| grad[[r, c]] += w);
    (score, grad)
}

/// Mean over valid lanes of the lane maximum.
pub fn filip_score(s: &SimilarityMatrix, dir: Direction) -> f64 {
    let (lane_mask, entry_mask) = s.lane_masks(dir);
    let mut sum = 0.0;
    let mut count = 0usize;
    for lane in (0..s.lane_count(dir)).filter(|&l| lane_mask[l]) {
        let best = s
            .lane(dir, lane)
            .iter()
            .zip(entry_mask)
            .filter(|(_, &m)| m)
            .fold(f64::NEG_INFINITY, |acc, (&v, _)| if v > acc { v } else { acc });
        sum += best;
        count += 1;
    }
    sum / count as f64
}

/// Cosine similarity of two global embeddings.
pub fn clip_score(img_global: ArrayView1<'_, f64>, txt_global: ArrayView1<'_, f64>) -> Result<f64> {
    if img_global.len() != txt_global.len() {
        return Err(Error::config(format!(
            "global dims differ: {} vs {}",
            img_global.len(),
            txt_global.len()
        )));
    }
    let na = img_global.dot(&img_global).sqrt();
    let nb = txt_global.dot(&txt_global).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::validation("global vector has zero or non-finite norm"));
    }
    Ok((img_global.dot(&txt_global) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pair score of an image bank against a text bank.
pub fn pair_score(img: &TokenEmbeddings, txt: &TokenEmbeddings, cfg: &ScorerConfig) -> Result<f64> {
    match cfg.scorer {
        Scorer::Clip => match (img.global(), txt.global()) {
            (Some(a), Some(b)) => clip_score(a, b),
            _ => Err(Error::config(
                "global-cosine scorer needs global embeddings on both banks",
            )),
        },
        Scorer::Flexible | Scorer::Filip => {
            let s = token_similarity_matrix(img, txt)?;
            Ok(matrix_pair_score(&s, cfg, 0.0, &mut |_, _, _| {}))
        }
    }
}

/// Token-level pair score computed from an existing grid, with gradient.
///
/// Only meaningful for the token scorers; the global scorer has no grid and
/// is handled by the caller. `visit` receives `scale * d score / d S`.
pub fn matrix_pair_score(
    s: &SimilarityMatrix,
    cfg: &ScorerConfig,
    scale: f64,
    visit: &mut dyn FnMut(usize, usize, f64),
) -> f64 {
    let th = match cfg.scorer {
        Scorer::Flexible => cfg.thresholds,
        Scorer::Filip | Scorer::Clip => MatchingThresholds::mean_max(),
    };
    match cfg.directions {
        DirectionMode::ImageToText => {
            flexible_match_backward(s, th, Direction::ImageToText, scale, visit)
        }
        DirectionMode::Symmetric => {
            let a = flexible_match_backward(s, th, Direction::ImageToText, 0.5 * scale, visit);
            let b = flexible_match_backward(s, th, Direction::TextToImage, 0.5 * scale, visit);
            0.5 * (a + b)
        }
    }
}

/// Per-patch branch assignment used for qualitative match reports.
pub fn match_report(s: &SimilarityMatrix, th: MatchingThresholds) -> MatchReport {
    MatchReport::from_matrix(s, th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn worked() -> SimilarityMatrix {
        SimilarityMatrix::from_scores(array![[0.9, 0.88, 0.2], [0.5, -0.1, 0.3]]).unwrap()
    }

    #[test]
    fn similarity_of_basis_vectors() {
        let img = TokenEmbeddings::unmasked(array![[1.0, 0.0], [0.0, 1.0]], TokenKind::ImagePatch)
            .unwrap();
        let txt = TokenEmbeddings::unmasked(array![[1.0, 0.0]], TokenKind::TextToken).unwrap();
        let s = token_similarity_matrix(&img, &txt).unwrap();
        assert_eq!(s.scores(), array![[1.0], [0.0]]);

        let same = TokenEmbeddings::unmasked(array![[0.6, 0.8]], TokenKind::TextToken).unwrap();
        let img1 = TokenEmbeddings::unmasked(array![[0.6, 0.8]], TokenKind::ImagePatch).unwrap();
        let s = token_similarity_matrix(&img1, &same).unwrap();
        assert!((s.scores()[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_bad_inputs() {
        let img = TokenEmbeddings::unmasked(array![[1.0, 0.0]], TokenKind::ImagePatch).unwrap();
        let txt3 = TokenEmbeddings::unmasked(array![[1.0, 0.0, 0.0]], TokenKind::TextToken).unwrap();
        assert!(matches!(
            token_similarity_matrix(&img, &txt3),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TokenEmbeddings::unmasked(array![[0.0, 0.0]], TokenKind::TextToken),
            Err(Error::Validation(_))
        ));
        // A zero row is fine when it is padding.
        let padded = TokenEmbeddings::new(
            array![[1.0, 0.0], [0.0, 0.0]],
            vec![true, false],
            TokenKind::TextToken,
        );
        assert!(padded.is_ok());
        assert!(TokenEmbeddings::new(array![[1.0, 0.0]], vec![false], TokenKind::TextToken).is_err());
    }

    #[test]
    fn worked_example_image_to_text() {
        let s = worked();
        let got = flexible_match_score(&s, MatchingThresholds::default(), Direction::ImageToText);
        assert!((got - 0.695).abs() < 1e-12, "{got}");
    }

    #[test]
    fn dropped_patch_leaves_denominator() {
        let s = SimilarityMatrix::from_scores(array![[-0.2, -0.5], [0.4, 0.1]]).unwrap();
        let got = flexible_match_score(&s, MatchingThresholds::default(), Direction::ImageToText);
        assert!((got - 0.4).abs() < 1e-12);
    }

    #[test]
    fn all_dropped_scores_zero() {
        let s = SimilarityMatrix::from_scores(array![[-0.2, -0.5], [-0.4, -0.1]]).unwrap();
        let th = MatchingThresholds::default();
        assert_eq!(flexible_match_score(&s, th, Direction::ImageToText), 0.0);
        let (_, g) = flexible_match_grad(&s, th, Direction::ImageToText);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_maximal_pair() {
        let s = SimilarityMatrix::from_scores(array![[1.0]]).unwrap();
        for th in [
            MatchingThresholds::default(),
            MatchingThresholds::new(0.0, 1.0).unwrap(),
            MatchingThresholds::new(1.0, 1.0).unwrap(),
        ] {
            assert_eq!(flexible_match_score(&s, th, Direction::ImageToText), 1.0);
        }
        let zero = SimilarityMatrix::from_scores(array![[0.0]]).unwrap();
        assert_eq!(
            flexible_match_score(&zero, MatchingThresholds::default(), Direction::ImageToText),
            0.0
        );
    }

    #[test]
    fn threshold_strictness() {
        // Exactly d stays in the band (max), exactly c is kept.
        let th = MatchingThresholds::new(0.1, 0.5).unwrap();
        let s = SimilarityMatrix::from_scores(array![[0.5, 0.5, 0.2], [0.1, 0.0, 0.05]]).unwrap();
        let outcomes = classify_lanes(&s, th, Direction::ImageToText);
        assert_eq!(outcomes[0], LaneOutcome::Band { value: 0.5, argmax: 0 });
        assert_eq!(outcomes[1], LaneOutcome::Band { value: 0.1, argmax: 0 });
    }

    #[test]
    fn filip_worked_example() {
        let s = worked();
        assert!((filip_score(&s, Direction::ImageToText) - 0.7).abs() < 1e-12);
        let one = SimilarityMatrix::from_scores(array![[1.0]]).unwrap();
        assert_eq!(filip_score(&one, Direction::TextToImage), 1.0);
    }

    #[test]
    fn clip_basics() {
        let a = array![1.0, 0.0];
        assert_eq!(clip_score(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(clip_score(a.view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        assert_eq!(clip_score(a.view(), array![-1.0, 0.0].view()).unwrap(), -1.0);
        assert!(clip_score(a.view(), array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn pair_score_worked_example_is_direction_mean() {
        let s = worked();
        let th = MatchingThresholds::default();
        let i2t = oracle::flexible_match_oracle(&s, th, Direction::ImageToText);
        let t2i = oracle::flexible_match_oracle(&s, th, Direction::TextToImage);
        let cfg = ScorerConfig::new(Scorer::Flexible);
        let got = matrix_pair_score(&s, &cfg, 0.0, &mut |_, _, _| {});
        assert!((got - 0.5 * (i2t + t2i)).abs() < 1e-12);
        // Columns: 0.9 (>d alone), 0.88 (>d alone), 0.3 -> mean 0.6933..
        assert!((t2i - (0.9 + 0.88 + 0.3) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pair_score_needs_globals_for_clip() {
        let img = TokenEmbeddings::unmasked(array![[1.0, 0.0]], TokenKind::ImagePatch).unwrap();
        let txt = TokenEmbeddings::unmasked(array![[1.0, 0.0]], TokenKind::TextToken).unwrap();
        let cfg = ScorerConfig::new(Scorer::Clip);
        assert!(matches!(pair_score(&img, &txt, &cfg), Err(Error::Config(_))));
        let img = img.with_global(array![0.0, 1.0]).unwrap();
        let txt = txt.with_global(array![0.0, 1.0]).unwrap();
        assert_eq!(pair_score(&img, &txt, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn filip_pair_on_scalar_grid() {
        let x = 0.37;
        let img = TokenEmbeddings::unmasked(array![[1.0, 0.0]], TokenKind::ImagePatch).unwrap();
        let txt = TokenEmbeddings::unmasked(
            array![[x, (1.0f64 - x * x).sqrt()]],
            TokenKind::TextToken,
        )
        .unwrap();
        let got = pair_score(&img, &txt, &ScorerConfig::new(Scorer::Filip)).unwrap();
        assert!((got - x).abs() < 1e-15);
    }

    #[test]
    fn symmetric_grid_gives_equal_directions() {
        let s = SimilarityMatrix::from_scores(array![[0.9, 0.3, -0.2], [0.3, 0.95, 0.5], [-0.2, 0.5, 0.1]])
            .unwrap();
        let th = MatchingThresholds::default();
        let a = flexible_match_score(&s, th, Direction::ImageToText);
        let b = flexible_match_score(&s, th, Direction::TextToImage);
        assert_eq!(a, b);
        let pair = matrix_pair_score(&s, &ScorerConfig::new(Scorer::Flexible), 0.0, &mut |_, _, _| {});
        assert!((pair - a).abs() < 1e-15);
    }

    #[test]
    fn masked_lanes_are_ignored() {
        let s = SimilarityMatrix::new(
            array![[0.9, 0.88, 0.99], [0.5, -0.1, 0.99], [1.0, 1.0, 1.0]],
            vec![true, true, false],
            vec![true, true, false],
        )
        .unwrap();
        let got = flexible_match_score(&s, MatchingThresholds::default(), Direction::ImageToText);
        assert!((got - 0.695).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_scores_rejected() {
        assert!(SimilarityMatrix::from_scores(array![[1.5]]).is_err());
        assert!(SimilarityMatrix::new(array![[1.5, 0.2]], vec![true], vec![false, true]).is_ok());
    }
}
