//! Loop-by-loop reference for flexible matching.
//!
//! Written directly from the set definitions (patches above `d`, patches in
//! `[c, d]`, effective counts) without sharing any code with the production
//! kernel. Tests compare the two.

use super::{Direction, MatchingThresholds, SimilarityMatrix};

pub fn flexible_match_oracle(s: &SimilarityMatrix, th: MatchingThresholds, dir: Direction) -> f64 {
    match dir {
        Direction::ImageToText => image_to_text(s, th),
        Direction::TextToImage => text_to_image(s, th),
    }
}

fn image_to_text(s: &SimilarityMatrix, th: MatchingThresholds) -> f64 {
    let scores = s.scores();
    let (n_img, n_txt) = scores.dim();
    let patches: Vec<usize> = (0..n_img).filter(|&i| s.row_mask()[i]).collect();
    let tokens: Vec<usize> = (0..n_txt).filter(|&t| s.col_mask()[t]).collect();

    let mut total = 0.0;
    let mut effective = 0usize;
    for &i in &patches {
        let mut max = f64::NEG_INFINITY;
        for &t in &tokens {
            if scores[[i, t]] > max {
                max = scores[[i, t]];
            }
        }
        let above: Vec<usize> = tokens
            .iter()
            .copied()
            .filter(|&t| scores[[i, t]] > th.upper)
            .collect();
        let band: Vec<usize> = tokens
            .iter()
            .copied()
            .filter(|&t| th.lower <= scores[[i, t]] && scores[[i, t]] <= th.upper)
            .collect();
        if max > th.upper {
            let mut sum = 0.0;
            for &t in &above {
                sum += scores[[i, t]];
            }
            total += sum / above.len() as f64;
            effective += 1;
        } else if th.lower <= max && max <= th.upper {
            let mut best = f64::NEG_INFINITY;
            for &t in &band {
                if scores[[i, t]] > best {
                    best = scores[[i, t]];
                }
            }
            total += best;
            effective += 1;
        }
    }
    if effective == 0 {
        0.0
    } else {
        total / effective as f64
    }
}

fn text_to_image(s: &SimilarityMatrix, th: MatchingThresholds) -> f64 {
    let scores = s.scores();
    let (n_img, n_txt) = scores.dim();
    let patches: Vec<usize> = (0..n_img).filter(|&i| s.row_mask()[i]).collect();
    let tokens: Vec<usize> = (0..n_txt).filter(|&t| s.col_mask()[t]).collect();

    let mut total = 0.0;
    let mut effective = 0usize;
    for &t in &tokens {
        let mut max = f64::NEG_INFINITY;
        for &i in &patches {
            if scores[[i, t]] > max {
                max = scores[[i, t]];
            }
        }
        let above: Vec<usize> = patches
            .iter()
            .copied()
            .filter(|&i| scores[[i, t]] > th.upper)
            .collect();
        let band: Vec<usize> = patches
            .iter()
            .copied()
            .filter(|&i| th.lower <= scores[[i, t]] && scores[[i, t]] <= th.upper)
            .collect();
        if max > th.upper {
            let mut sum = 0.0;
            for &i in &above {
                sum += scores[[i, t]];
            }
            total += sum / above.len() as f64;
            effective += 1;
        } else if th.lower <= max && max <= th.upper {
            let mut best = f64::NEG_INFINITY;
            for &i in &band {
                if scores[[i, t]] > best {
                    best = scores[[i, t]];
                }
            }
            total += best;
            effective += 1;
        }
    }
    if effective == 0 {
        0.0
    } else {
        total / effective as f64
    }
}
