//! U-statistic estimators of the target-population AUC.
//!
//! Every estimator is a ratio of pair sums over ordered pairs `i != j`. With
//! per-pair kernel `k` either the concordance indicator
//! `I(h_i > h_j)` or the constant 1, the three transport estimators use
//!
//! * outcome term: `m_i (1 - m_j)` over target-target pairs,
//! * weighting term: `w_i w_j` over study pairs with `y_i = 1, y_j = 0`,
//! * cross term: `w_i w_j m_i (1 - m_j)` over study-study pairs,
//!
//! with the doubly robust kernel being `weighting + outcome - cross`. Ties
//! `h_i = h_j` contribute zero to the numerators (the concordance indicator
//! is strict); [`TieRule::HalfCredit`] awards them half weight instead,
//! which deviates from the strict definition and is off by default.
//!
//! Numerators and denominators are computed in `O(n log n)` by sorting
//! scores and sweeping weighted prefix sums with compensated accumulation;
//! the brute-force `O(n^2)` enumeration lives in the test suite as the
//! oracle this fast path is checked against.

use crate::dataset::AnalysisDataset;
use crate::error::{Error, Result};
use crate::kahan::KahanSum;
use crate::metrics::{EstimatorKind, WeightMode};
use crate::scalar::{cast, is_positive, Scalar};
use serde::Serialize;

/// Tie handling for equal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// Ties contribute zero, matching the strict concordance indicator.
    #[default]
    Strict,
    /// Ties contribute half their pair weight.
    HalfCredit,
}

/// Ordered pairs contributing to each term.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PairCounts {
    pub outcome: u64,
    pub weighting: u64,
    pub cross: u64,
}

/// AUC point estimate with pair-level diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct AucEstimate<F> {
    pub estimator: EstimatorKind,
    pub value: F,
    pub numerator: F,
    pub denominator: F,
    pub pair_counts: PairCounts,
    /// Ordered pairs with exactly equal scores among the contributing sets.
    pub tie_pairs: u64,
}

/// Re-exported per-row nuisance bundle (shared with the threshold metrics).
pub use crate::metrics::NuisanceValues;

/// AUC in the target population under the chosen estimator.
pub fn auc<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    kind: EstimatorKind,
    mode: WeightMode,
    ties: TieRule,
) -> Result<AucEstimate<F>> {
    if nuisances.outcome_probs.len() != ds.n() || nuisances.participation_odds.len() != ds.n() {
        return Err(Error::Config(format!(
            "nuisance value lengths ({}, {}) do not match dataset rows ({})",
            nuisances.outcome_probs.len(),
            nuisances.participation_odds.len(),
            ds.n()
        )));
    }

    let outcome_term = |counts: &mut PairCounts, tie_pairs: &mut u64| -> Result<PairSums<F>> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, row) in ds.rows().iter().enumerate() {
            if row.r() {
                continue;
            }
            let h = ds.score(i)?;
            let v = match mode {
                WeightMode::Unweighted => F::one(),
                WeightMode::Survey => row.weight,
            };
            let m = nuisances.outcome_probs[i];
            pos.push(PairItem { row: i, score: h, weight: v * m });
            neg.push(PairItem { row: i, score: h, weight: v * (F::one() - m) });
        }
        let sums = bilinear_pair_sums(pos, neg, ties);
        counts.outcome = sums.pair_count;
        *tie_pairs += sums.tie_pairs;
        Ok(sums)
    };

    let weighting_term = |counts: &mut PairCounts,
                          tie_pairs: &mut u64,
                          unit_weight: bool|
     -> Result<PairSums<F>> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, row) in ds.rows().iter().enumerate() {
            if !row.r() {
                continue;
            }
            let h = ds.score(i)?;
            let w = if unit_weight { F::one() } else { nuisances.participation_odds[i] };
            let item = PairItem { row: i, score: h, weight: w };
            if row.y == Some(true) {
                pos.push(item);
            } else {
                neg.push(item);
            }
        }
        let sums = bilinear_pair_sums(pos, neg, ties);
        counts.weighting = sums.pair_count;
        *tie_pairs += sums.tie_pairs;
        Ok(sums)
    };

    let cross_term = |counts: &mut PairCounts, tie_pairs: &mut u64| -> Result<PairSums<F>> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, row) in ds.rows().iter().enumerate() {
            if !row.r() {
                continue;
            }
            let h = ds.score(i)?;
            let w = nuisances.participation_odds[i];
            let m = nuisances.outcome_probs[i];
            pos.push(PairItem { row: i, score: h, weight: w * m });
            neg.push(PairItem { row: i, score: h, weight: w * (F::one() - m) });
        }
        let sums = bilinear_pair_sums(pos, neg, ties);
        counts.cross = sums.pair_count;
        *tie_pairs += sums.tie_pairs;
        Ok(sums)
    };

    let mut pair_counts = PairCounts::default();
    let mut tie_pairs = 0u64;
    let (numerator, denominator) = match kind {
        EstimatorKind::OutcomeModel => {
            let s = outcome_term(&mut pair_counts, &mut tie_pairs)?;
            (s.num, s.den)
        }
        EstimatorKind::Weighting => {
            let s = weighting_term(&mut pair_counts, &mut tie_pairs, false)?;
            (s.num, s.den)
        }
        EstimatorKind::Source => {
            let s = weighting_term(&mut pair_counts, &mut tie_pairs, true)?;
            (s.num, s.den)
        }
        EstimatorKind::DoublyRobust => {
            let w = weighting_term(&mut pair_counts, &mut tie_pairs, false)?;
            let out = outcome_term(&mut pair_counts, &mut tie_pairs)?;
            let cross = cross_term(&mut pair_counts, &mut tie_pairs)?;
            (w.num + out.num - cross.num, w.den + out.den - cross.den)
        }
    };

    if !is_positive(denominator) {
        return Err(Error::ZeroDenominator { context: "auc" });
    }
    let value = numerator / denominator;
    debug_assert!(value.is_finite());
    Ok(AucEstimate {
        estimator: kind,
        value,
        numerator,
        denominator,
        pair_counts,
        tie_pairs,
    })
}

pub(crate) struct PairItem<F> {
    pub(crate) row: usize,
    pub(crate) score: F,
    pub(crate) weight: F,
}

pub(crate) struct PairSums<F> {
    pub(crate) num: F,
    pub(crate) den: F,
    pub(crate) tie_pairs: u64,
    pub(crate) pair_count: u64,
}

/// Empirical Mann-Whitney AUC over raw scores (strict ties-to-zero rule),
/// shared with the simulation oracle.
pub(crate) fn mann_whitney_auc<F: Scalar>(
    pos_scores: impl Iterator<Item = F>,
    neg_scores: impl Iterator<Item = F>,
) -> Result<F> {
    let pos: Vec<PairItem<F>> = pos_scores
        .enumerate()
        .map(|(i, score)| PairItem { row: i, score, weight: F::one() })
        .collect();
    let offset = pos.len();
    let neg: Vec<PairItem<F>> = neg_scores
        .enumerate()
        .map(|(i, score)| PairItem { row: offset + i, score, weight: F::one() })
        .collect();
    let sums = bilinear_pair_sums(pos, neg, TieRule::Strict);
    if !is_positive(sums.den) {
        return Err(Error::ZeroDenominator { context: "mann-whitney auc" });
    }
    Ok(sums.num / sums.den)
}

/// Ordered-pair sums between two weighted role lists that may share rows:
///
/// * `num = sum over pairs (i in pos, j in neg, i != j) of a_i b_j I(h_i > h_j)`
///   (plus half the tied weight under [`TieRule::HalfCredit`]),
/// * `den = sum over the same pairs of a_i b_j`.
///
/// Diagonal pairs `i = j` (rows present in both roles) are excluded from the
/// denominator explicitly; they never reach the numerator because a score
/// cannot exceed itself.
pub(crate) fn bilinear_pair_sums<F: Scalar>(
    mut pos: Vec<PairItem<F>>,
    mut neg: Vec<PairItem<F>>,
    ties: TieRule,
) -> PairSums<F> {
    // Shared-row corrections. Both lists are built in row order.
    let mut shared_dot = KahanSum::new();
    let mut shared_count = 0u64;
    {
        let (mut i, mut j) = (0, 0);
        while i < pos.len() && j < neg.len() {
            match pos[i].row.cmp(&neg[j].row) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    shared_dot.add(pos[i].weight * neg[j].weight);
                    shared_count += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
    }

    let mut pos_total = KahanSum::new();
    for item in &pos {
        pos_total.add(item.weight);
    }
    let mut neg_total = KahanSum::new();
    for item in &neg {
        neg_total.add(item.weight);
    }
    let den = pos_total.total() * neg_total.total() - shared_dot.total();
    let pair_count = (pos.len() as u64) * (neg.len() as u64) - shared_count;

    pos.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("scores are finite"));
    neg.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("scores are finite"));

    // Sweep scores in ascending order, keeping the negative-role weight
    // strictly below the current score in `below`.
    let mut num = KahanSum::new();
    let mut tie_weight = KahanSum::new();
    let mut tie_pairs_raw = 0u64;
    let mut below = KahanSum::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < pos.len() {
        let score = pos[i].score;
        while j < neg.len() && neg[j].score < score {
            below.add(neg[j].weight);
            j += 1;
        }
        // Group of positive-role items at this score.
        let mut pos_group = KahanSum::new();
        let mut pos_group_len = 0u64;
        while i < pos.len() && pos[i].score == score {
            pos_group.add(pos[i].weight);
            pos_group_len += 1;
            i += 1;
        }
        num.add(pos_group.total() * below.total());
        // Negative-role items tied at this score.
        let mut k = j;
        let mut neg_group = KahanSum::new();
        let mut neg_group_len = 0u64;
        while k < neg.len() && neg[k].score == score {
            neg_group.add(neg[k].weight);
            neg_group_len += 1;
            k += 1;
        }
        if neg_group_len > 0 {
            tie_weight.add(pos_group.total() * neg_group.total());
            tie_pairs_raw += pos_group_len * neg_group_len;
        }
    }

    // Every shared row ties with itself; remove those diagonal pairs.
    let tie_pairs = tie_pairs_raw - shared_count;
    let num = match ties {
        TieRule::Strict => num.total(),
        TieRule::HalfCredit => {
            num.total() + cast::<F>(0.5) * (tie_weight.total() - shared_dot.total())
        }
    };

    PairSums { num, den, tie_pairs, pair_count }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AnalysisDataset, DataRow};

    struct Toy {
        ds: AnalysisDataset<f64>,
        m: Vec<f64>,
        w: Vec<f64>,
    }

    impl Toy {
        fn nuis(&self) -> NuisanceValues<'_, f64> {
            NuisanceValues::new(&self.m, &self.w)
        }
    }

    fn toy(target: &[(f64, f64, f64)], study: &[(f64, bool, f64, f64)]) -> Toy {
        // target: (score, m, weight); study: (score, y, odds, m)
        let mut rows = Vec::new();
        let mut m = Vec::new();
        let mut w = Vec::new();
        for &(h, mi, wi) in target {
            rows.push(DataRow::target(vec![0.0]).with_score(h).with_weight(wi));
            m.push(mi);
            w.push(1.0);
        }
        for &(h, y, wi, mi) in study {
            rows.push(DataRow::study(1, vec![0.0], y).with_score(h));
            m.push(mi);
            w.push(wi);
        }
        Toy { ds: AnalysisDataset::with_default_names(rows).unwrap(), m, w }
    }

    #[test]
    fn outcome_model_two_row_hand_value() {
        // Target rows (m, h) = (0.9, 0.8), (0.1, 0.3):
        // num = 0.9 * 0.9 = 0.81, den = 0.81 + 0.1 * 0.1 = 0.82.
        let t = toy(&[(0.8, 0.9, 1.0), (0.3, 0.1, 1.0)], &[(0.9, true, 1.0, 0.5)]);
        let est = auc(&t.ds, t.nuis(), EstimatorKind::OutcomeModel, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        assert!((est.value - 0.81 / 0.82).abs() < 1e-15);
        assert_eq!(est.pair_counts.outcome, 2);
    }

    #[test]
    fn outcome_model_constant_m_counts_concordant_pairs() {
        // Constant m cancels: value = concordant ordered pairs / all ordered
        // pairs = (n(n-1)/2) / (n(n-1)) with strictly increasing scores.
        let t = toy(
            &[(0.1, 0.4, 1.0), (0.2, 0.4, 1.0), (0.3, 0.4, 1.0), (0.4, 0.4, 1.0)],
            &[(0.9, true, 1.0, 0.5)],
        );
        let est = auc(&t.ds, t.nuis(), EstimatorKind::OutcomeModel, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        assert!((est.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_target_row_is_zero_denominator() {
        let t = toy(&[(0.8, 0.9, 1.0)], &[(0.9, true, 1.0, 0.5)]);
        assert!(matches!(
            auc(&t.ds, t.nuis(), EstimatorKind::OutcomeModel, WeightMode::Unweighted, TieRule::Strict),
            Err(Error::ZeroDenominator { .. })
        ));
    }

    #[test]
    fn weighting_hand_value() {
        // Study rows (y=1, h=0.8, w=2), (y=0, h=0.3, w=1), (y=0, h=0.9, w=1):
        // num = 2*1*1 + 2*1*0 = 2, den = 4.
        let t = toy(
            &[(0.5, 0.5, 1.0), (0.6, 0.5, 1.0)],
            &[(0.8, true, 2.0, 0.5), (0.3, false, 1.0, 0.5), (0.9, false, 1.0, 0.5)],
        );
        let est = auc(&t.ds, t.nuis(), EstimatorKind::Weighting, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        assert!((est.value - 0.5).abs() < 1e-15);
        assert_eq!(est.pair_counts.weighting, 2);
    }

    #[test]
    fn weighting_separated_scores_give_one() {
        let t = toy(
            &[(0.5, 0.5, 1.0), (0.6, 0.5, 1.0)],
            &[(0.9, true, 1.3, 0.5), (0.8, true, 0.7, 0.5), (0.2, false, 2.0, 0.5)],
        );
        let est = auc(&t.ds, t.nuis(), EstimatorKind::Weighting, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        assert_eq!(est.value, 1.0);
    }

    #[test]
    fn unit_odds_reduce_weighting_to_source() {
        let t = toy(
            &[(0.5, 0.5, 1.0), (0.6, 0.5, 1.0)],
            &[
                (0.9, true, 1.0, 0.5),
                (0.4, true, 1.0, 0.5),
                (0.5, false, 1.0, 0.5),
                (0.2, false, 1.0, 0.5),
            ],
        );
        let w = auc(&t.ds, t.nuis(), EstimatorKind::Weighting, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        let source = auc(&t.ds, t.nuis(), EstimatorKind::Source, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        assert!((w.value - source.value).abs() < 1e-15);
        // Empirical Mann-Whitney by hand: pairs (0.9 vs 0.5), (0.9 vs 0.2),
        // (0.4 vs 0.5), (0.4 vs 0.2) -> 3 concordant of 4.
        assert!((source.value - 0.75).abs() < 1e-15);
    }

    #[test]
    fn dr_reduces_to_om_when_outcome_model_is_exact() {
        let t = toy(
            &[(0.8, 0.9, 1.0), (0.3, 0.1, 1.0), (0.55, 0.4, 1.0)],
            &[(0.9, true, 1.7, 1.0), (0.2, false, 0.6, 0.0), (0.7, true, 2.4, 1.0)],
        );
        let dr = auc(&t.ds, t.nuis(), EstimatorKind::DoublyRobust, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        let om = auc(&t.ds, t.nuis(), EstimatorKind::OutcomeModel, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        assert!((dr.value - om.value).abs() < 1e-14);
    }

    #[test]
    fn survey_weighted_outcome_model_hand_value() {
        // Two target rows with weights (2, 1), m = (0.9, 0.1), h = (0.8, 0.3):
        // num = 2*1*0.81 = 1.62, den = 1.62 + 1*2*0.01 = 1.64.
        let t = toy(&[(0.8, 0.9, 2.0), (0.3, 0.1, 1.0)], &[(0.9, true, 1.0, 0.5)]);
        let est = auc(&t.ds, t.nuis(), EstimatorKind::OutcomeModel, WeightMode::Survey, TieRule::Strict)
            .unwrap();
        assert!((est.value - 1.62 / 1.64).abs() < 1e-15);
    }

    #[test]
    fn ties_contribute_zero_but_are_counted() {
        let t = toy(
            &[(0.5, 0.5, 1.0), (0.6, 0.5, 1.0)],
            &[(0.7, true, 1.0, 0.5), (0.7, false, 1.0, 0.5), (0.2, false, 1.0, 0.5)],
        );
        let est = auc(&t.ds, t.nuis(), EstimatorKind::Source, WeightMode::Unweighted, TieRule::Strict)
            .unwrap();
        // Pairs: (0.7 vs 0.7) tie -> 0, (0.7 vs 0.2) concordant -> 1; of 2.
        assert!((est.value - 0.5).abs() < 1e-15);
        assert_eq!(est.tie_pairs, 1);

        let half = auc(&t.ds, t.nuis(), EstimatorKind::Source, WeightMode::Unweighted, TieRule::HalfCredit)
            .unwrap();
        assert!((half.value - 0.75).abs() < 1e-15);
    }
}
