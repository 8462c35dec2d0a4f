use serde::{Deserialize, Serialize};

use super::{classify_lanes, Direction, LaneOutcome, MatchingThresholds, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchBranch {
    AveragedAboveD,
    MaxInBand,
    Dropped,
}

impl MatchBranch {
    pub fn tag(self) -> &'static str {
        match self {
            MatchBranch::AveragedAboveD => "averaged_above_d",
            MatchBranch::MaxInBand => "max_in_band",
            MatchBranch::Dropped => "dropped",
        }
    }
}

/// Branch taken by one patch and the tokens it was matched to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub patch_index: usize,
    pub branch: MatchBranch,
    pub matched_token_indices: Vec<usize>,
    pub matched_scores: Vec<f64>,
}

impl PatchMatch {
    /// Patch contribution implied by the report alone.
    pub fn patch_score(&self) -> Option<f64> {
        match self.branch {
            MatchBranch::Dropped => None,
            MatchBranch::MaxInBand => self.matched_scores.first().copied(),
            MatchBranch::AveragedAboveD => {
                let sum: f64 = self.matched_scores.iter().sum();
                Some(sum / self.matched_scores.len() as f64)
            }
        }
    }
}

/// Image-to-text match report: one entry per valid patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub thresholds: MatchingThresholds,
    pub per_patch: Vec<PatchMatch>,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    patch: usize,
    branch: &'static str,
    token_indices: &'a [usize],
    tokens: Vec<&'a str>,
    scores: &'a [f64],
    patch_score: Option<f64>,
}

impl MatchReport {
    pub(crate) fn from_matrix(s: &SimilarityMatrix, th: MatchingThresholds) -> Self {
        let scores = s.scores();
        let col_mask = s.col_mask();
        let per_patch = classify_lanes(s, th, Direction::ImageToText)
            .into_iter()
            .enumerate()
            .filter_map(|(i, outcome)| {
                let (branch, tokens): (MatchBranch, Vec<usize>) = match outcome {
                    LaneOutcome::Masked => return None,
                    LaneOutcome::Dropped => (MatchBranch::Dropped, Vec::new()),
                    LaneOutcome::Band { argmax, .. } => (MatchBranch::MaxInBand, vec![argmax]),
                    LaneOutcome::Above { .. } => (
                        MatchBranch::AveragedAboveD,
                        (0..scores.ncols())
                            .filter(|&t| col_mask[t] && scores[[i, t]] > th.upper)
                            .collect(),
                    ),
                };
                let matched_scores = tokens.iter().map(|&t| scores[[i, t]]).collect();
                Some(PatchMatch {
                    patch_index: i,
                    branch,
                    matched_token_indices: tokens,
                    matched_scores,
                })
            })
            .collect();
        Self {
            thresholds: th,
            per_patch,
        }
    }

    /// Image-to-text flexible score recomputed from the report entries.
    pub fn score(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for value in self.per_patch.iter().filter_map(PatchMatch::patch_score) {
            sum += value;
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn count(&self, branch: MatchBranch) -> usize {
        self.per_patch.iter().filter(|p| p.branch == branch).count()
    }

    /// One JSON object per line, tokens rendered through `token_labels`.
    pub fn to_json_lines(&self, token_labels: &[String]) -> String {
        let mut out = String::new();
        for p in &self.per_patch {
            let line = ReportLine {
                patch: p.patch_index,
                branch: p.branch.tag(),
                token_indices: &p.matched_token_indices,
                tokens: p
                    .matched_token_indices
                    .iter()
                    .map(|&t| token_labels.get(t).map(String::as_str).unwrap_or("?"))
                    .collect(),
                scores: &p.matched_scores,
                patch_score: p.patch_score(),
            };
            out.push_str(&serde_json::to_string(&line).expect("report line serializes"));
            out.push('\n');
        }
        out
    }

    /// Human-readable table, one patch per line.
    pub fn to_text(&self, token_labels: &[String]) -> String {
        let mut out = format!(
            "# thresholds c={} d={}; score={:.6}\n",
            self.thresholds.lower,
            self.thresholds.upper,
            self.score()
        );
        for p in &self.per_patch {
            let words: Vec<String> = p
                .matched_token_indices
                .iter()
                .zip(&p.matched_scores)
                .map(|(&t, s)| {
                    let label = token_labels.get(t).map(String::as_str).unwrap_or("?");
                    format!("{label}({s:.3})")
                })
                .collect();
            out.push_str(&format!(
                "patch {:>3}  {:<16} {}\n",
                p.patch_index,
                p.branch.tag(),
                words.join(" ")
            ));
        }
        out
    }
}
