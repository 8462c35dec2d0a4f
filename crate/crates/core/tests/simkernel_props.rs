use flexmatch::simkernel::oracle::flexible_match_oracle;
use flexmatch::simkernel::{
    filip_score, flexible_match_grad, flexible_match_score, match_report, matrix_pair_score,
    pair_score, token_similarity_matrix, Direction, DirectionMode, MatchBranch, MatchingThresholds,
    Scorer, ScorerConfig, SimilarityMatrix, TokenEmbeddings, TokenKind,
};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

const DIRECTIONS: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

/// Cosines drawn from a mix of a continuum and a few values that sit on
/// common thresholds, so ties and boundary hits are exercised.
fn cosine() -> impl Strategy<Value = f64> {
    prop_oneof![
        4 => -1.0f64..=1.0,
        1 => prop::sample::select(vec![-1.0, -0.5, 0.0, 0.3, 0.5, 0.85, 0.9, 1.0]),
    ]
}

fn thresholds() -> impl Strategy<Value = MatchingThresholds> {
    (-1.0f64..=1.0, -1.0f64..=1.0).prop_map(|(a, b)| MatchingThresholds::new(a.min(b), a.max(b)).unwrap())
}

fn mask(len: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(prop::bool::weighted(0.8), len).prop_map(|mut m| {
        if !m.iter().any(|&v| v) {
            m[0] = true;
        }
        m
    })
}

fn grid(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(cosine(), r * c)
            .prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn masked_matrix() -> impl Strategy<Value = SimilarityMatrix> {
    grid(16, 24).prop_flat_map(|s| {
        let (r, c) = s.dim();
        (Just(s), mask(r), mask(c)).prop_map(|(s, rm, cm)| SimilarityMatrix::new(s, rm, cm).unwrap())
    })
}

/// Maps `t ∈ [0, 1)` into `[-0.99, 0.99]` minus a `margin` band around `c` and `d`.
fn away_from(t: f64, th: MatchingThresholds, margin: f64) -> f64 {
    let mut cuts = vec![(th.lower - margin, th.lower + margin), (th.upper - margin, th.upper + margin)];
    cuts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if cuts[1].0 <= cuts[0].1 {
        cuts = vec![(cuts[0].0, cuts[0].1.max(cuts[1].1))];
    }
    let mut pieces = Vec::new();
    let mut lo = -0.99;
    for (a, b) in cuts {
        if a > lo {
            pieces.push((lo, a.min(0.99)));
        }
        lo = lo.max(b);
    }
    if lo < 0.99 {
        pieces.push((lo, 0.99));
    }
    let total: f64 = pieces.iter().map(|(a, b)| b - a).sum();
    let mut x = t * total;
    for (a, b) in &pieces {
        if x <= b - a {
            return a + x;
        }
        x -= b - a;
    }
    pieces.last().unwrap().1
}

/// Grids whose entries keep a margin from both thresholds.
fn smooth_case() -> impl Strategy<Value = (SimilarityMatrix, MatchingThresholds)> {
    (thresholds(), 1usize..=8, 1usize..=10).prop_flat_map(|(th, r, c)| {
        prop::collection::vec(0.0f64..1.0, r * c).prop_map(move |ts| {
            let v = ts.iter().map(|&t| away_from(t, th, 0.05)).collect();
            let s = Array2::from_shape_vec((r, c), v).unwrap();
            (SimilarityMatrix::from_scores(s).unwrap(), th)
        })
    })
}

/// Lane maxima lead the runner-up by more than `gap`, so argmax is stable under the FD step.
fn lanes_separated(s: &SimilarityMatrix, gap: f64) -> bool {
    let sc = s.scores();
    let rows = sc.rows().into_iter().map(|r| r.to_vec());
    let cols = sc.columns().into_iter().map(|c| c.to_vec());
    rows.chain(cols).all(|mut lane| {
        lane.sort_by(|a, b| b.total_cmp(a));
        lane.len() < 2 || lane[0] - lane[1] > gap
    })
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(s: &SimilarityMatrix, f: impl Fn(&SimilarityMatrix) -> f64) -> Array2<f64> {
    let h = 1e-4;
    let base = s.scores().to_owned();
    Array2::from_shape_fn(base.dim(), |(r, c)| {
        let mut up = base.clone();
        up[[r, c]] += h;
        let mut down = base.clone();
        down[[r, c]] -= h;
        let fu = f(&SimilarityMatrix::new(up, s.row_mask().to_vec(), s.col_mask().to_vec()).unwrap());
        let fd = f(&SimilarityMatrix::new(down, s.row_mask().to_vec(), s.col_mask().to_vec()).unwrap());
        (fu - fd) / (2.0 * h)
    })
}

fn unit_rows(raw: Vec<f64>, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_vec((rows, dim), raw).unwrap();
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-9);
        r.mapv_inplace(|v| v / n);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kernel_matches_oracle(s in masked_matrix(), th in thresholds()) {
        for dir in DIRECTIONS {
            let fast = flexible_match_score(&s, th, dir);
            let slow = flexible_match_oracle(&s, th, dir);
            prop_assert!((fast - slow).abs() <= 1e-12, "{dir:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn wide_thresholds_reduce_to_mean_max(s in masked_matrix()) {
        for dir in DIRECTIONS {
            prop_assert_eq!(
                flexible_match_score(&s, MatchingThresholds::mean_max(), dir),
                filip_score(&s, dir)
            );
        }
    }

    #[test]
    fn score_stays_within_valid_entries(s in masked_matrix(), th in thresholds()) {
        let valid: Vec<f64> = s
            .scores()
            .indexed_iter()
            .filter(|((r, c), _)| s.row_mask()[*r] && s.col_mask()[*c])
            .map(|(_, &v)| v)
            .collect();
        let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for dir in DIRECTIONS {
            let got = flexible_match_score(&s, th, dir);
            prop_assert!((-1.0..=1.0).contains(&got));
            if got != 0.0 {
                prop_assert!(got >= th.lower - 1e-15 && got <= hi + 1e-15, "{got} outside [{}, {hi}]", th.lower);
            }
        }
    }

    #[test]
    fn masked_entries_do_not_matter(s in masked_matrix(), th in thresholds(), fill in cosine()) {
        let mut scores = s.scores().to_owned();
        for ((r, c), v) in scores.indexed_iter_mut() {
            if !s.row_mask()[r] || !s.col_mask()[c] {
                *v = fill;
            }
        }
        let other = SimilarityMatrix::new(scores, s.row_mask().to_vec(), s.col_mask().to_vec()).unwrap();
        for dir in DIRECTIONS {
            prop_assert_eq!(flexible_match_score(&s, th, dir), flexible_match_score(&other, th, dir));
        }
    }

    #[test]
    fn transpose_swaps_directions(s in masked_matrix(), th in thresholds()) {
        let t = s.transpose();
        prop_assert_eq!(
            flexible_match_score(&s, th, Direction::TextToImage),
            flexible_match_score(&t, th, Direction::ImageToText)
        );
        prop_assert_eq!(
            flexible_match_score(&s, th, Direction::ImageToText),
            flexible_match_score(&t, th, Direction::TextToImage)
        );
    }

    #[test]
    fn report_covers_every_patch_once(s in masked_matrix(), th in thresholds()) {
        let report = match_report(&s, th);
        let valid_rows: Vec<usize> = (0..s.dim().0).filter(|&r| s.row_mask()[r]).collect();
        let listed: Vec<usize> = report.per_patch.iter().map(|p| p.patch_index).collect();
        prop_assert_eq!(&listed, &valid_rows);
        let total = report.count(MatchBranch::AveragedAboveD)
            + report.count(MatchBranch::MaxInBand)
            + report.count(MatchBranch::Dropped);
        prop_assert_eq!(total, valid_rows.len());
        for p in &report.per_patch {
            match p.branch {
                MatchBranch::Dropped => prop_assert!(p.matched_token_indices.is_empty()),
                MatchBranch::MaxInBand => prop_assert_eq!(p.matched_token_indices.len(), 1),
                MatchBranch::AveragedAboveD => {
                    prop_assert!(!p.matched_token_indices.is_empty());
                    prop_assert!(p.matched_scores.iter().all(|&v| v > th.upper));
                }
            }
        }
        let kernel = flexible_match_score(&s, th, Direction::ImageToText);
        prop_assert!((report.score() - kernel).abs() <= 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences((s, th) in smooth_case()) {
        prop_assume!(lanes_separated(&s, 1e-3));
        for dir in DIRECTIONS {
            let (_, analytic) = flexible_match_grad(&s, th, dir);
            let numeric = numeric_grad(&s, |m| flexible_match_score(m, th, dir));
            let err = rel_err(&analytic, &numeric);
            prop_assert!(err <= 1e-4, "{dir:?}: relative error {err}");
        }
        let cfg = ScorerConfig { scorer: Scorer::Flexible, thresholds: th, directions: DirectionMode::Symmetric };
        let mut analytic = Array2::zeros(s.dim());
        matrix_pair_score(&s, &cfg, 1.0, &mut |r, c, w| analytic[[r, c]] += w);
        let numeric = numeric_grad(&s, |m| matrix_pair_score(m, &cfg, 0.0, &mut |_, _, _| {}));
        prop_assert!(rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn pair_score_is_mean_of_directions(
        (p, t, dim) in (1usize..=6, 1usize..=6, 2usize..=5),
        raw in prop::collection::vec(-1.0f64..1.0, 72),
    ) {
        let img = unit_rows(raw[..p * dim].to_vec(), p, dim);
        let txt = unit_rows(raw[36..36 + t * dim].to_vec(), t, dim);
        prop_assume!(img.rows().into_iter().chain(txt.rows()).all(|r| (r.dot(&r) - 1.0).abs() < 1e-9));
        let img = TokenEmbeddings::unmasked(img, TokenKind::ImagePatch).unwrap();
        let txt = TokenEmbeddings::unmasked(txt, TokenKind::TextToken).unwrap();
        let s = token_similarity_matrix(&img, &txt).unwrap();
        for scorer in [Scorer::Flexible, Scorer::Filip] {
            let cfg = ScorerConfig::new(scorer);
            let th = if scorer == Scorer::Flexible { cfg.thresholds } else { MatchingThresholds::mean_max() };
            let want = 0.5
                * (flexible_match_oracle(&s, th, Direction::ImageToText)
                    + flexible_match_oracle(&s, th, Direction::TextToImage));
            let got = pair_score(&img, &txt, &cfg).unwrap();
            prop_assert!((got - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn worked_example() {
    let s = SimilarityMatrix::from_scores(array![[0.9, 0.88, 0.2], [0.5, -0.1, 0.3]]).unwrap();
    let th = MatchingThresholds::new(0.0, 0.85).unwrap();
    let got = flexible_match_score(&s, th, Direction::ImageToText);
    assert!((got - 0.695).abs() <= 1e-12, "{got}");
    assert!((flexible_match_oracle(&s, th, Direction::ImageToText) - 0.695).abs() <= 1e-12);

    let with_dropped = SimilarityMatrix::from_scores(array![[0.9, 0.88, 0.2], [0.5, -0.1, 0.3], [-0.4, -0.2, -0.9]]).unwrap();
    let got = flexible_match_score(&with_dropped, th, Direction::ImageToText);
    assert!((got - 0.695).abs() <= 1e-12, "dropped row changed the score: {got}");
    let report = match_report(&with_dropped, th);
    assert_eq!(report.count(MatchBranch::Dropped), 1);
    assert_eq!(report.count(MatchBranch::AveragedAboveD), 1);
    assert_eq!(report.count(MatchBranch::MaxInBand), 1);
}

#[test]
fn clip_pair_uses_globals_only() {
    let img = TokenEmbeddings::unmasked(array![[1.0, 0.0]], TokenKind::ImagePatch)
        .unwrap()
        .with_global(Array1::from(vec![0.6, 0.8]))
        .unwrap();
    let txt = TokenEmbeddings::unmasked(array![[-1.0, 0.0]], TokenKind::TextToken)
        .unwrap()
        .with_global(Array1::from(vec![0.8, 0.6]))
        .unwrap();
    let got = pair_score(&img, &txt, &ScorerConfig::new(Scorer::Clip)).unwrap();
    assert!((got - 0.96).abs() < 1e-15);
}
