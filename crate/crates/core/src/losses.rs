//! Multi-positive contrastive loss, categorical loss and their weighted sum.
//!
//! Scores are cosine-valued; every softmax is taken over `temperature * score`.
//! All functions return both the value and, through [`objective`], the
//! analytic gradient with respect to every score matrix and the temperature.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial logit scale of a learnable temperature (`1 / 0.07`).
pub const DEFAULT_LOGIT_SCALE: f64 = 1.0 / 0.07;
/// Clamp range applied to a learnable logit scale.
pub const LOGIT_SCALE_RANGE: (f64, f64) = (1.0, 100.0);

/// Similarities of one batch: images vs captions, captions vs images, and
/// images vs the label bank of all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScoreSet {
    /// `s_it[k][j]`: image `k` against caption `j`.
    pub s_it: Array2<f64>,
    /// `s_ti[j][k]`: caption `j` against image `k`.
    pub s_ti: Array2<f64>,
    /// `s_label[k][l]`: image `k` against the caption of class `l`.
    pub s_label: Option<Array2<f64>>,
    pub temperature: f64,
}

impl BatchScoreSet {
    /// Score set for direction-symmetric scorers (`s_ti = s_itᵀ`).
    pub fn symmetric(s_it: Array2<f64>, s_label: Option<Array2<f64>>, temperature: f64) -> Result<Self> {
        let s_ti = s_it.t().to_owned();
        Self::new(s_it, s_ti, s_label, temperature)
    }

    pub fn new(
        s_it: Array2<f64>,
        s_ti: Array2<f64>,
        s_label: Option<Array2<f64>>,
        temperature: f64,
    ) -> Result<Self> {
        let (b, b2) = s_it.dim();
        if b == 0 || b != b2 {
            return Err(Error::validation(format!(
                "image/text scores must be square and non-empty, got {:?}",
                s_it.dim()
            )));
        }
        if s_ti.dim() != (b, b) {
            return Err(Error::validation(format!(
                "text/image scores have shape {:?}, expected ({b}, {b})",
                s_ti.dim()
            )));
        }
        if let Some(l) = &s_label {
            if l.nrows() != b || l.ncols() == 0 {
                return Err(Error::validation(format!(
                    "label scores have shape {:?}, expected ({b}, C>=1)",
                    l.dim()
                )));
            }
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            s_it,
            s_ti,
            s_label,
            temperature,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.s_it.nrows()
    }
}

/// Whether positive weights are used as raw indicators or normalized per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QNormalization {
    #[default]
    Literal,
    RowNormalized,
}

impl FromStr for QNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(QNormalization::Literal),
            "row_normalized" => Ok(QNormalization::RowNormalized),
            other => Err(Error::config(format!(
                "unknown q normalization {other:?} (expected literal or row_normalized)"
            ))),
        }
    }
}

/// Positive-pair indicator for a batch whose caption `j` belongs to sample `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositivePairMask {
    q: Array2<f64>,
    labels: Vec<usize>,
    normalization: QNormalization,
}

impl PositivePairMask {
    /// Every image/caption pair that shares a class is positive.
    pub fn from_labels(labels: &[usize]) -> Self {
        let b = labels.len();
        let q = Array2::from_shape_fn((b, b), |(k, j)| f64::from(labels[k] == labels[j]));
        Self {
            q,
            labels: labels.to_vec(),
            normalization: QNormalization::Literal,
        }
    }

    /// Only each image's own caption is positive.
    pub fn diagonal(labels: &[usize]) -> Self {
        Self {
            q: Array2::eye(labels.len()),
            labels: labels.to_vec(),
            normalization: QNormalization::Literal,
        }
    }

    /// Explicit indicator; every row must hold a positive.
    pub fn from_indicator(q: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (b, b2) = q.dim();
        if b != b2 || b != labels.len() {
            return Err(Error::validation(format!(
                "indicator shape {:?} does not match {} labels",
                q.dim(),
                labels.len()
            )));
        }
        if q.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation("indicator entries must be 0 or 1"));
        }
        Ok(Self {
            q,
            labels,
            normalization: QNormalization::Literal,
        })
    }

    pub fn with_normalization(mut self, normalization: QNormalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn indicator(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> QNormalization {
        self.normalization
    }

    /// Target weights for image rows (`q`) or caption rows (`qᵀ`).
    fn weights(&self, transpose: bool) -> Result<Array2<f64>> {
        let mut w = if transpose {
            self.q.t().to_owned()
        } else {
            self.q.clone()
        };
        for (r, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
            let total: f64 = row.sum();
            if total <= 0.0 {
                return Err(Error::validation(format!(
                    "{} {r} has no positive pair",
                    if transpose { "caption" } else { "image" }
                )));
            }
            if self.normalization == QNormalization::RowNormalized {
                row.mapv_inplace(|v| v / total);
            }
        }
        Ok(w)
    }
}

/// Contrastive and categorical loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub m: f64,
    pub n: f64,
}

impl LossWeights {
    pub fn new(m: f64, n: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&n) || m + n <= 0.0 {
            return Err(Error::config(format!(
                "loss weights must lie in [0, 1] with a positive sum, got m={m}, n={n}"
            )));
        }
        Ok(Self { m, n })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { m: 0.75, n: 0.25 }
    }
}

/// Fixed logit scale, or a learnable one starting at `init`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureMode {
    Learnable { init: f64 },
    Fixed(f64),
}

impl Default for TemperatureMode {
    fn default() -> Self {
        TemperatureMode::Learnable {
            init: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl TemperatureMode {
    pub fn initial(self) -> f64 {
        match self {
            TemperatureMode::Learnable { init } => init,
            TemperatureMode::Fixed(v) => v,
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, TemperatureMode::Learnable { .. })
    }
}

impl fmt::Display for TemperatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemperatureMode::Learnable { init } if *init == DEFAULT_LOGIT_SCALE => {
                write!(f, "learnable")
            }
            TemperatureMode::Learnable { init } => write!(f, "learnable:{init}"),
            TemperatureMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for TemperatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = match s.split_once(':') {
            Some((k, v)) => (k, Some(v)),
            None => (s, None),
        };
        let parse = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| *x > 0.0 && x.is_finite())
                .ok_or_else(|| Error::config(format!("invalid temperature value {v:?}")))
        };
        match (kind, value) {
            ("learnable", None) => Ok(TemperatureMode::default()),
            ("learnable", Some(v)) => {
                let init = parse(v)?;
                if !(LOGIT_SCALE_RANGE.0..=LOGIT_SCALE_RANGE.1).contains(&init) {
                    return Err(Error::config(format!(
                        "learnable logit scale {init} outside [1, 100]"
                    )));
                }
                Ok(TemperatureMode::Learnable { init })
            }
            ("fixed", Some(v)) => Ok(TemperatureMode::Fixed(parse(v)?)),
            _ => Err(Error::config(format!(
                "temperature must be `learnable`, `learnable:<x>` or `fixed:<x>`, got {s:?}"
            ))),
        }
    }
}

impl Serialize for TemperatureMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TemperatureMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Value and gradients of one soft cross-entropy block.
struct SoftCe {
    value: f64,
    d_scores: Array2<f64>,
    d_temperature: f64,
}

/// `Σ_r −scale · Σ_j w[r][j] · log softmax_j(τ · s[r])`, with gradients.
fn soft_cross_entropy(scores: ArrayView2<'_, f64>, weights: ArrayView2<'_, f64>, temperature: f64, scale: f64) -> SoftCe {
    let mut value = 0.0;
    let mut d_scores = Array2::zeros(scores.dim());
    let mut d_temperature = 0.0;
    for ((row, w), mut d_row) in scores
        .axis_iter(Axis(0))
        .zip(weights.axis_iter(Axis(0)))
        .zip(d_scores.axis_iter_mut(Axis(0)))
    {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(temperature * v));
        let log_norm = row.iter().map(|&v| (temperature * v - max).exp()).sum::<f64>().ln() + max;
        let w_total: f64 = w.sum();
        for (j, (&s, &wj)) in row.iter().zip(w.iter()).enumerate() {
            let logit = temperature * s;
            let log_p = logit - log_norm;
            if wj != 0.0 {
                value -= scale * wj * log_p;
            }
            let d_logit = -scale * (wj - w_total * log_p.exp());
            d_row[j] = temperature * d_logit;
            d_temperature += s * d_logit;
        }
    }
    SoftCe {
        value,
        d_scores,
        d_temperature,
    }
}

fn check_mask(scores: &BatchScoreSet, mask: &PositivePairMask) -> Result<()> {
    if mask.labels().len() != scores.batch_size() {
        return Err(Error::validation(format!(
            "mask covers {} samples, scores cover {}",
            mask.labels().len(),
            scores.batch_size()
        )));
    }
    Ok(())
}

fn image_to_text_block(scores: &BatchScoreSet, mask: &PositivePairMask) -> Result<SoftCe> {
    check_mask(scores, mask)?;
    let b = scores.batch_size() as f64;
    let w = mask.weights(false)?;
    Ok(soft_cross_entropy(scores.s_it.view(), w.view(), scores.temperature, 1.0 / b))
}

fn text_to_image_block(scores: &BatchScoreSet, mask: &PositivePairMask) -> Result<SoftCe> {
    check_mask(scores, mask)?;
    let b = scores.batch_size() as f64;
    let w = mask.weights(true)?;
    Ok(soft_cross_entropy(scores.s_ti.view(), w.view(), scores.temperature, 1.0 / b))
}

/// `Σ_k L^I_k` with `L^I_k = −(1/b) Σ_j q[k][j] log softmax_j(τ s_it[k])`.
pub fn image_to_text_loss(scores: &BatchScoreSet, mask: &PositivePairMask) -> Result<f64> {
    Ok(image_to_text_block(scores, mask)?.value)
}

/// Caption-side analogue of [`image_to_text_loss`], softmax over images.
pub fn text_to_image_loss(scores: &BatchScoreSet, mask: &PositivePairMask) -> Result<f64> {
    Ok(text_to_image_block(scores, mask)?.value)
}

/// `½ Σ_k (L^I_k + L^T_k)`.
pub fn contrastive_loss(scores: &BatchScoreSet, mask: &PositivePairMask) -> Result<f64> {
    Ok(0.5 * (image_to_text_loss(scores, mask)? + text_to_image_loss(scores, mask)?))
}

fn categorical_block(scores: &BatchScoreSet, labels: &[usize]) -> Result<SoftCe> {
    let s_label = scores
        .s_label
        .as_ref()
        .ok_or_else(|| Error::validation("categorical loss needs label scores"))?;
    let (b, classes) = s_label.dim();
    if labels.len() != b {
        return Err(Error::validation(format!(
            "{} labels for {b} label-score rows",
            labels.len()
        )));
    }
    let mut targets = Array2::zeros((b, classes));
    for (k, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::validation(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        targets[[k, y]] = 1.0;
    }
    Ok(soft_cross_entropy(
        s_label.view(),
        targets.view(),
        scores.temperature,
        1.0 / b as f64,
    ))
}

/// `−(1/b) Σ_k log softmax_l(τ s_label[k])[y_k]` over all classes.
pub fn categorical_loss(scores: &BatchScoreSet, labels: &[usize]) -> Result<f64> {
    Ok(categorical_block(scores, labels)?.value)
}

pub fn total_loss(l_con: f64, l_cat: f64, w: LossWeights) -> f64 {
    w.m * l_con + w.n * l_cat
}

/// Gradients of the total objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub s_it: Array2<f64>,
    pub s_ti: Array2<f64>,
    pub s_label: Option<Array2<f64>>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub l_con: f64,
    /// `None` when the categorical branch is off.
    pub l_cat: Option<f64>,
    pub total: f64,
    pub grads: ScoreGrads,
}

/// Total objective `m · L_con + n · L_cat` and its gradients.
///
/// The categorical term is included when `scores.s_label` is present.
pub fn objective(
    scores: &BatchScoreSet,
    mask: &PositivePairMask,
    weights: LossWeights,
) -> Result<Objective> {
    let i2t = image_to_text_block(scores, mask)?;
    let t2i = text_to_image_block(scores, mask)?;
    let l_con = 0.5 * (i2t.value + t2i.value);
    let con_scale = 0.5 * weights.m;
    let mut d_temperature = con_scale * (i2t.d_temperature + t2i.d_temperature);
    let d_it = i2t.d_scores * con_scale;
    let d_ti = t2i.d_scores * con_scale;

    let (l_cat, d_label) = match scores.s_label {
        Some(_) => {
            let cat = categorical_block(scores, mask.labels())?;
            d_temperature += weights.n * cat.d_temperature;
            (Some(cat.value), Some(cat.d_scores * weights.n))
        }
        None => (None, None),
    };
    let total = total_loss(l_con, l_cat.unwrap_or(0.0), weights);
    Ok(Objective {
        l_con,
        l_cat,
        total,
        grads: ScoreGrads {
            s_it: d_it,
            s_ti: d_ti,
            s_label: d_label,
            temperature: d_temperature,
        },
    })
}
