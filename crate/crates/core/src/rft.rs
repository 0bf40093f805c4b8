//! Relevant Feature Test: supervised ranking of feature dimensions.
//!
//! Each feature is scored by the best achievable sample-size-weighted MSE of
//! a single threshold split with constant-mean side models. Low scores mean
//! the feature alone separates the regression target well; features are
//! ranked ascending and the top K retained.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Outcome of scoring and ranking a feature matrix.
#[derive(Debug, Clone)]
pub struct RftReport {
    /// Minimal weighted split loss per feature, indexed by column.
    pub scores: Vec<f64>,
    /// Column indices sorted by ascending score; ties broken by lower index.
    pub ranking: Vec<usize>,
    /// The first `keep` entries of `ranking`.
    pub selected: Vec<usize>,
    /// Number of candidate thresholds evaluated per feature.
    pub bin_count: usize,
}

fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Best single-split weighted MSE for one feature column.
///
/// Candidate thresholds are `bins` uniform cut points strictly inside the
/// feature's range. Features with fewer than two distinct values carry no
/// split information and score the target variance.
pub fn rft_score(feature: &[f64], target: &[f64], bins: usize) -> Result<f64> {
    if feature.is_empty() {
        return Err(Error::InsufficientData("rft_score on empty column".into()));
    }
    if feature.len() != target.len() {
        return Err(Error::shape("rft_score lengths", feature.len(), target.len()));
    }
    if feature.len() < 2 {
        return Err(Error::InsufficientData(
            "rft_score needs at least two samples".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::invalid("rft_score needs bins >= 1"));
    }
    let lo = feature.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = feature.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(population_variance(target));
    }
    let n = feature.len() as f64;
    let mut best = f64::INFINITY;
    for i in 1..=bins {
        let threshold = lo + (hi - lo) * i as f64 / (bins + 1) as f64;
        let mut n_l = 0.0;
        let mut sum_l = 0.0;
        let mut sumsq_l = 0.0;
        let mut n_r = 0.0;
        let mut sum_r = 0.0;
        let mut sumsq_r = 0.0;
        for (x, y) in feature.iter().zip(target) {
            if *x <= threshold {
                n_l += 1.0;
                sum_l += y;
                sumsq_l += y * y;
            } else {
                n_r += 1.0;
                sum_r += y;
                sumsq_r += y * y;
            }
        }
        if n_l == 0.0 || n_r == 0.0 {
            continue;
        }
        let mse_l = (sumsq_l / n_l - (sum_l / n_l) * (sum_l / n_l)).max(0.0);
        let mse_r = (sumsq_r / n_r - (sum_r / n_r) * (sum_r / n_r)).max(0.0);
        let weighted = (n_l * mse_l + n_r * mse_r) / n;
        if weighted < best {
            best = weighted;
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Ok(population_variance(target))
    }
}

/// Scores every column of a row-major `n x d` feature matrix, ranks the
/// columns ascending by loss, and keeps the best `keep`.
pub fn rft_select(
    features: &[f64],
    rows: usize,
    cols: usize,
    target: &[f64],
    keep: usize,
    bins: usize,
) -> Result<RftReport> {
    if features.len() != rows * cols {
        return Err(Error::shape("rft_select matrix", features.len(), rows * cols));
    }
    if target.len() != rows {
        return Err(Error::shape("rft_select target", target.len(), rows));
    }
    if keep > cols {
        return Err(Error::invalid(format!(
            "rft_select keep {keep} exceeds feature count {cols}"
        )));
    }
    let scores: Vec<f64> = (0..cols)
        .into_par_iter()
        .map(|j| {
            let column: Vec<f64> = (0..rows).map(|i| features[i * cols + j]).collect();
            rft_score(&column, target, bins)
        })
        .collect::<Result<_>>()?;
    let mut ranking: Vec<usize> = (0..cols).collect();
    ranking.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let selected = ranking[..keep].to_vec();
    Ok(RftReport {
        scores,
        ranking,
        selected,
        bin_count: bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive double-loop oracle: enumerates the same uniform cut points
    /// and computes both side MSEs directly with two-pass means.
    fn oracle_score(feature: &[f64], target: &[f64], bins: usize) -> f64 {
        let lo = feature.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = feature.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let var = {
            let m = target.iter().sum::<f64>() / target.len() as f64;
            target.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / target.len() as f64
        };
        if lo == hi {
            return var;
        }
        let mut best = f64::INFINITY;
        for i in 1..=bins {
            let t = lo + (hi - lo) * i as f64 / (bins + 1) as f64;
            let left: Vec<f64> = feature
                .iter()
                .zip(target)
                .filter(|(x, _)| **x <= t)
                .map(|(_, y)| *y)
                .collect();
            let right: Vec<f64> = feature
                .iter()
                .zip(target)
                .filter(|(x, _)| **x > t)
                .map(|(_, y)| *y)
                .collect();
            if left.is_empty() || right.is_empty() {
                continue;
            }
            let mse = |side: &[f64]| {
                let m = side.iter().sum::<f64>() / side.len() as f64;
                side.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / side.len() as f64
            };
            let w = (left.len() as f64 * mse(&left) + right.len() as f64 * mse(&right))
                / feature.len() as f64;
            if w < best {
                best = w;
            }
        }
        if best.is_finite() {
            best
        } else {
            var
        }
    }

    #[test]
    fn perfect_feature_scores_well_below_variance() {
        let n = 64;
        let feature: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let target = feature.clone();
        let var = population_variance(&target);
        let score = rft_score(&feature, &target, 15).unwrap();
        assert!(score < 0.3 * var, "score {score} vs var {var}");
    }

    #[test]
    fn constant_feature_scores_target_variance() {
        let feature = vec![2.5; 10];
        let target: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let score = rft_score(&feature, &target, 8).unwrap();
        assert_abs_diff_eq!(score, population_variance(&target), epsilon = 1e-12);
    }

    #[test]
    fn eight_sample_case_matches_oracle() {
        let feature = vec![0.1, 0.9, 0.4, 0.6, 0.2, 0.8, 0.3, 0.7];
        let target = vec![1.0, 5.0, 2.0, 4.0, 1.5, 4.5, 1.8, 4.2];
        let got = rft_score(&feature, &target, 4).unwrap();
        let want = oracle_score(&feature, &target, 4);
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn select_prefers_informative_column() {
        // column 0 equals the target, column 1 is constant
        let rows = 12;
        let mut features = vec![0.0; rows * 2];
        let target: Vec<f64> = (0..rows).map(|i| (i as f64).sin()).collect();
        for i in 0..rows {
            features[i * 2] = target[i];
            features[i * 2 + 1] = 3.0;
        }
        let report = rft_select(&features, rows, 2, &target, 1, 8).unwrap();
        assert_eq!(report.selected, vec![0]);
    }

    #[test]
    fn keep_all_returns_full_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = 20;
        let cols = 5;
        let features: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
        let target: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>()).collect();
        let report = rft_select(&features, rows, cols, &target, cols, 8).unwrap();
        let mut sorted = report.selected.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..cols).collect::<Vec<_>>());
    }

    #[test]
    fn ranking_matches_exhaustive_oracle_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows = 30;
        let cols = 6;
        let features: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
        let target: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>()).collect();
        let report = rft_select(&features, rows, cols, &target, cols, 7).unwrap();
        let oracle_scores: Vec<f64> = (0..cols)
            .map(|j| {
                let col: Vec<f64> = (0..rows).map(|i| features[i * cols + j]).collect();
                oracle_score(&col, &target, 7)
            })
            .collect();
        let mut oracle_ranking: Vec<usize> = (0..cols).collect();
        oracle_ranking.sort_by(|&a, &b| oracle_scores[a].total_cmp(&oracle_scores[b]).then(a.cmp(&b)));
        assert_eq!(report.ranking, oracle_ranking);
    }

    #[test]
    fn keep_larger_than_dims_is_error() {
        let features = vec![0.0; 8];
        let target = vec![0.0; 4];
        assert!(rft_select(&features, 4, 2, &target, 3, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn score_never_exceeds_target_variance(
            seed in 0u64..1000,
            n in 4usize..40,
            bins in 1usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feature: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let score = rft_score(&feature, &target, bins).unwrap();
            prop_assert!(score <= population_variance(&target) + 1e-12);
        }

        #[test]
        fn duplicated_columns_score_identically(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = 16;
            let col: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>()).collect();
            let target: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>()).collect();
            let mut features = vec![0.0; rows * 2];
            for i in 0..rows {
                features[i * 2] = col[i];
                features[i * 2 + 1] = col[i];
            }
            let report = rft_select(&features, rows, 2, &target, 2, 6).unwrap();
            prop_assert_eq!(report.scores[0], report.scores[1]);
        }

        #[test]
        fn affine_feature_transform_leaves_score_unchanged(
            seed in 0u64..1000,
            scale in 0.5f64..2.0,
            shift in -1.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 24;
            let feature: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let transformed: Vec<f64> = feature.iter().map(|x| scale * x + shift).collect();
            let s0 = rft_score(&feature, &target, 9).unwrap();
            let s1 = rft_score(&transformed, &target, 9).unwrap();
            prop_assert!((s0 - s1).abs() <= 1e-12);
        }

        #[test]
        fn joint_row_permutation_leaves_scores_unchanged(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = 18;
            let cols = 3;
            let features: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
            let target: Vec<f64> = (0..rows).map(|_| rng.gen::<f64>()).collect();
            let mut order: Vec<usize> = (0..rows).collect();
            order.shuffle(&mut rng);
            let mut pf = vec![0.0; rows * cols];
            let mut pt = vec![0.0; rows];
            for (new_i, &old_i) in order.iter().enumerate() {
                pt[new_i] = target[old_i];
                for j in 0..cols {
                    pf[new_i * cols + j] = features[old_i * cols + j];
                }
            }
            let a = rft_select(&features, rows, cols, &target, cols, 5).unwrap();
            let b = rft_select(&pf, rows, cols, &pt, cols, 5).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
