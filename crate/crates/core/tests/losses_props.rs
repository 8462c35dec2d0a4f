use flexmatch::losses::{
    categorical_loss, contrastive_loss, image_to_text_loss, objective, text_to_image_loss,
    BatchScoreSet, LossWeights, PositivePairMask, QNormalization,
};
use ndarray::Array2;
use proptest::prelude::*;

/// Plain cross-entropy of one logit row against one target index.
fn reference_ce(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

fn reference_i2t(s: &Array2<f64>, tau: f64) -> f64 {
    let b = s.nrows();
    (0..b)
        .map(|k| {
            let row: Vec<f64> = (0..b).map(|j| tau * s[[k, j]]).collect();
            reference_ce(&row, k)
        })
        .sum::<f64>()
        / b as f64
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..=1.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Batch of `b` samples over `c` classes with label scores.
fn batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>, Vec<usize>, f64)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(b, c)| {
        (
            matrix(b, b),
            matrix(b, b),
            matrix(b, c),
            prop::collection::vec(0..c, b),
            1.0f64..=100.0,
        )
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn one_hot_targets_match_reference_cross_entropy((s_it, s_ti, s_label, labels, tau) in batch()) {
        let set = BatchScoreSet::new(s_it.clone(), s_ti.clone(), Some(s_label.clone()), tau).unwrap();
        let eye = PositivePairMask::diagonal(&labels);
        let li = image_to_text_loss(&set, &eye).unwrap();
        let lt = text_to_image_loss(&set, &eye).unwrap();
        prop_assert!(close(li, reference_i2t(&s_it, tau), 1e-12));
        prop_assert!(close(lt, reference_i2t(&s_ti, tau), 1e-12));
        let lcon = contrastive_loss(&set, &eye).unwrap();
        prop_assert!(close(lcon, 0.5 * (li + lt), 1e-12));

        let b = labels.len();
        let cat_ref = (0..b)
            .map(|k| {
                let row: Vec<f64> = s_label.row(k).iter().map(|&v| tau * v).collect();
                reference_ce(&row, labels[k])
            })
            .sum::<f64>()
            / b as f64;
        prop_assert!(close(categorical_loss(&set, &labels).unwrap(), cat_ref, 1e-12));
    }

    #[test]
    fn one_hot_is_identity_under_row_normalization((s_it, s_ti, _l, labels, tau) in batch()) {
        let set = BatchScoreSet::new(s_it, s_ti, None, tau).unwrap();
        let literal = PositivePairMask::diagonal(&labels);
        let normalized = PositivePairMask::diagonal(&labels).with_normalization(QNormalization::RowNormalized);
        prop_assert_eq!(
            contrastive_loss(&set, &literal).unwrap(),
            contrastive_loss(&set, &normalized).unwrap()
        );
    }

    #[test]
    fn batch_permutation_leaves_losses_unchanged(
        (s_it, s_ti, s_label, labels, tau) in batch(),
        seed in any::<u64>(),
    ) {
        let b = labels.len();
        let mut perm: Vec<usize> = (0..b).collect();
        let mut x = seed;
        for i in (1..b).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        let p_it = Array2::from_shape_fn((b, b), |(r, c)| s_it[[perm[r], perm[c]]]);
        let p_ti = Array2::from_shape_fn((b, b), |(r, c)| s_ti[[perm[r], perm[c]]]);
        let p_label = Array2::from_shape_fn(s_label.dim(), |(r, c)| s_label[[perm[r], c]]);
        let p_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let w = LossWeights::default();
        for q in [QNormalization::Literal, QNormalization::RowNormalized] {
            let a = objective(
                &BatchScoreSet::new(s_it.clone(), s_ti.clone(), Some(s_label.clone()), tau).unwrap(),
                &PositivePairMask::from_labels(&labels).with_normalization(q),
                w,
            )
            .unwrap();
            let bb = objective(
                &BatchScoreSet::new(p_it.clone(), p_ti.clone(), Some(p_label.clone()), tau).unwrap(),
                &PositivePairMask::from_labels(&p_labels).with_normalization(q),
                w,
            )
            .unwrap();
            prop_assert!(close(a.total, bb.total, 1e-12));
        }
    }

    #[test]
    fn row_shift_leaves_row_softmax_unchanged((s_it, s_ti, s_label, labels, tau) in batch(), shift in -0.5f64..0.5) {
        let mask = PositivePairMask::from_labels(&labels);
        let base = BatchScoreSet::new(s_it.clone(), s_ti.clone(), Some(s_label.clone()), tau).unwrap();
        let shifted = BatchScoreSet::new(&s_it + shift, &s_ti + shift, Some(&s_label + shift), tau).unwrap();
        prop_assert!(close(
            image_to_text_loss(&base, &mask).unwrap(),
            image_to_text_loss(&shifted, &mask).unwrap(),
            1e-10
        ));
        prop_assert!(close(
            text_to_image_loss(&base, &mask).unwrap(),
            text_to_image_loss(&shifted, &mask).unwrap(),
            1e-10
        ));
        prop_assert!(close(
            categorical_loss(&base, &labels).unwrap(),
            categorical_loss(&shifted, &labels).unwrap(),
            1e-10
        ));
    }

    #[test]
    fn row_normalized_duplicates_match_merged_columns(
        (b, c) in (2usize..=8, 1usize..=4),
        seed_scores in prop::collection::vec(-1.0f64..=1.0, 32),
        seed_labels in prop::collection::vec(0usize..4, 8),
        tau in 1.0f64..=100.0,
    ) {
        // Captions of one class are identical, so their columns coincide.
        let labels: Vec<usize> = seed_labels[..b].iter().map(|&l| l % c).collect();
        let g = |k: usize, class: usize| seed_scores[k * 4 + class];
        let s_it = Array2::from_shape_fn((b, b), |(k, j)| g(k, labels[j]));
        let set = BatchScoreSet::new(s_it.clone(), s_it.t().to_owned(), None, tau).unwrap();
        let mask = PositivePairMask::from_labels(&labels).with_normalization(QNormalization::RowNormalized);

        let first_of = |class: usize| labels.iter().position(|&l| l == class).unwrap();
        let merged_i2t = (0..b)
            .map(|k| {
                let row: Vec<f64> = (0..b).map(|j| tau * s_it[[k, j]]).collect();
                reference_ce(&row, first_of(labels[k]))
            })
            .sum::<f64>()
            / b as f64;
        let mut merged_t2i = 0.0;
        for class in 0..c {
            let copies = labels.iter().filter(|&&l| l == class).count();
            if copies == 0 {
                continue;
            }
            let col: Vec<f64> = (0..b).map(|k| tau * g(k, class)).collect();
            let term = (0..b).filter(|&k| labels[k] == class).map(|k| reference_ce(&col, k)).sum::<f64>()
                / copies as f64;
            merged_t2i += copies as f64 * term;
        }
        merged_t2i /= b as f64;

        prop_assert!(close(image_to_text_loss(&set, &mask).unwrap(), merged_i2t, 1e-12));
        prop_assert!(close(text_to_image_loss(&set, &mask).unwrap(), merged_t2i, 1e-12));
    }

    #[test]
    fn total_gradient_matches_finite_differences(
        (s_it, s_ti, s_label, labels, tau) in batch(),
        (m, n) in (0.0f64..=1.0, 0.0f64..=1.0),
        normalized in any::<bool>(),
    ) {
        prop_assume!(m + n > 0.0);
        let w = LossWeights::new(m, n).unwrap();
        let q = if normalized { QNormalization::RowNormalized } else { QNormalization::Literal };
        let mask = PositivePairMask::from_labels(&labels).with_normalization(q);
        let f = |a: &Array2<f64>, b: &Array2<f64>, l: &Array2<f64>, t: f64| {
            objective(&BatchScoreSet::new(a.clone(), b.clone(), Some(l.clone()), t).unwrap(), &mask, w)
                .unwrap()
                .total
        };
        let obj = objective(
            &BatchScoreSet::new(s_it.clone(), s_ti.clone(), Some(s_label.clone()), tau).unwrap(),
            &mask,
            w,
        )
        .unwrap();
        let h = 1e-6;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for which in 0..3 {
            let (base, grad) = match which {
                0 => (&s_it, &obj.grads.s_it),
                1 => (&s_ti, &obj.grads.s_ti),
                _ => (&s_label, obj.grads.s_label.as_ref().unwrap()),
            };
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let mut up = base.clone();
                up[[r, c]] += h;
                let mut down = base.clone();
                down[[r, c]] -= h;
                let (fu, fd) = match which {
                    0 => (f(&up, &s_ti, &s_label, tau), f(&down, &s_ti, &s_label, tau)),
                    1 => (f(&s_it, &up, &s_label, tau), f(&s_it, &down, &s_label, tau)),
                    _ => (f(&s_it, &s_ti, &up, tau), f(&s_it, &s_ti, &down, tau)),
                };
                analytic.push(grad[[r, c]]);
                numeric.push((fu - fd) / (2.0 * h));
            }
        }
        let ht = 1e-6 * tau;
        analytic.push(obj.grads.temperature);
        numeric.push((f(&s_it, &s_ti, &s_label, tau + ht) - f(&s_it, &s_ti, &s_label, tau - ht)) / (2.0 * ht));

        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        prop_assert!(diff <= 1e-4 * norm.max(1e-6), "relative error {}", diff / norm);
    }
}

#[test]
fn single_sample_contrastive_loss_is_exactly_zero() {
    for v in [-1.0, -0.3, 0.0, 0.42, 1.0] {
        for tau in [1.0, 1.0 / 0.07, 100.0] {
            let set = BatchScoreSet::symmetric(Array2::from_elem((1, 1), v), None, tau).unwrap();
            for mask in [PositivePairMask::from_labels(&[3]), PositivePairMask::diagonal(&[3])] {
                assert_eq!(contrastive_loss(&set, &mask).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn shared_labels_make_multiple_positives() {
    let s = Array2::from_shape_vec((3, 3), vec![0.9, 0.8, -0.2, 0.7, 0.95, 0.1, -0.3, 0.0, 0.6]).unwrap();
    let set = BatchScoreSet::symmetric(s.clone(), None, 10.0).unwrap();
    let multi = PositivePairMask::from_labels(&[0, 0, 1]);
    let eye = PositivePairMask::diagonal(&[0, 0, 1]);
    let got = image_to_text_loss(&set, &multi).unwrap();
    let extra = |k: usize, j: usize| {
        let row: Vec<f64> = s.row(k).iter().map(|&v| 10.0 * v).collect();
        reference_ce(&row, j)
    };
    let want = image_to_text_loss(&set, &eye).unwrap() + (extra(0, 1) + extra(1, 0)) / 3.0;
    assert!((got - want).abs() < 1e-12);
}
