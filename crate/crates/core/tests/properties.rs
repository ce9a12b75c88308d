//! Property-based invariants of the estimators.

mod common;

use common::{close, OracleData};
use perfport::auc::{auc, TieRule};
use perfport::dataset::{AnalysisDataset, DataRow};
use perfport::metrics::{
    self, EstimatorKind, Loss, MetricId, NuisanceValues, WeightMode,
};
use proptest::prelude::*;

/// Strategy: a valid dataset of 2..=12 rows with scores, weights, and
/// per-row fitted values. Scores land on a coarse lattice so ties occur.
fn dataset_strategy() -> impl Strategy<Value = OracleData> {
    let row = (0u8..=1, 0usize..10, 0.02f64..0.98, 0.1f64..4.0, 0.5f64..2.5, any::<bool>());
    proptest::collection::vec(row, 2..=12).prop_filter_map(
        "needs a target and a study row",
        |rows| {
            let mut data_rows = Vec::new();
            let mut m = Vec::new();
            let mut w = Vec::new();
            for (is_study, score_idx, m_i, w_i, weight, y) in rows {
                let score = score_idx as f64 / 10.0 + 0.05;
                let x = vec![m_i - w_i];
                let row = if is_study == 1 {
                    DataRow::study(1 + (score_idx % 2) as u32, x, y)
                } else {
                    DataRow::target(x)
                };
                data_rows.push(row.with_score(score).with_weight(weight));
                m.push(m_i);
                w.push(w_i);
            }
            let has_target = data_rows.iter().any(|r| !r.r());
            let has_study = data_rows.iter().any(|r| r.r());
            if !(has_target && has_study) {
                return None;
            }
            Some(OracleData {
                ds: AnalysisDataset::with_default_names(data_rows).unwrap(),
                m,
                w,
            })
        },
    )
}

fn metric_value(
    data: &OracleData,
    metric: MetricId,
    estimator: EstimatorKind,
    c: f64,
    mode: WeightMode,
) -> Result<f64, perfport::Error> {
    let nuis = NuisanceValues::new(&data.m, &data.w);
    match metric {
        MetricId::Sensitivity => {
            metrics::sensitivity(&data.ds, nuis, c, estimator, mode).map(|e| e.value)
        }
        MetricId::Specificity => {
            metrics::specificity(&data.ds, nuis, c, estimator, mode).map(|e| e.value)
        }
        MetricId::Ppv => metrics::ppv(&data.ds, nuis, c, estimator, mode).map(|e| e.value),
        MetricId::Npv => metrics::npv(&data.ds, nuis, c, estimator, mode).map(|e| e.value),
        MetricId::Risk => {
            metrics::risk(&data.ds, nuis, Loss::Brier, estimator, mode).map(|e| e.value)
        }
        MetricId::Auc => {
            auc(&data.ds, nuis, estimator, mode, TieRule::Strict).map(|e| e.value)
        }
    }
}

proptest! {
    /// Estimators that are intrinsically bounded stay in range. That is the
    /// OM and source families throughout, and the W family for the
    /// self-normalized ratio measures; the W risk is a plain odds-weighted
    /// sum over n_0 and is only asymptotically in range, so it gets a
    /// non-negativity check only. The DR family is not range-respecting in
    /// finite samples by construction.
    #[test]
    fn bounded_estimators_stay_in_range(data in dataset_strategy(), c_idx in 0usize..10) {
        let c = c_idx as f64 / 10.0;
        for estimator in [EstimatorKind::OutcomeModel, EstimatorKind::Weighting, EstimatorKind::Source] {
            for metric in MetricId::ALL {
                if let Ok(v) = metric_value(&data, metric, estimator, c, WeightMode::Unweighted) {
                    if metric == MetricId::Risk {
                        prop_assert!(v >= 0.0, "{metric} {estimator} = {v}");
                        if estimator != EstimatorKind::Weighting {
                            prop_assert!(v <= 1.0 + 1e-12, "{metric} {estimator} = {v}");
                        }
                    } else {
                        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{metric} {estimator} = {v}");
                    }
                }
            }
        }
    }

    /// Applying a strictly increasing transform to every score leaves every
    /// AUC estimator unchanged.
    #[test]
    fn auc_is_invariant_to_monotone_score_transforms(data in dataset_strategy()) {
        let transformed = OracleData {
            ds: data.ds.with_scores(|_| 0.0).unwrap(), // placeholder, replaced below
            m: data.m.clone(),
            w: data.w.clone(),
        };
        // Rebuild with the exp transform applied to the original scores.
        let mut rows = data.ds.rows().to_vec();
        for row in &mut rows {
            row.score = row.score.map(|h| (3.0 * h).exp() - 0.5);
        }
        let transformed = OracleData {
            ds: AnalysisDataset::with_default_names(rows).unwrap(),
            ..transformed
        };
        for estimator in EstimatorKind::ALL {
            let a = metric_value(&data, MetricId::Auc, estimator, 0.0, WeightMode::Unweighted);
            let b = metric_value(&transformed, MetricId::Auc, estimator, 0.0, WeightMode::Unweighted);
            match (a, b) {
                (Ok(x), Ok(y)) => prop_assert!(close(x, y, 1e-12), "{estimator}: {x} vs {y}"),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{estimator}: {other:?}"),
            }
        }
    }

    /// Constant participation odds reduce the weighting estimators to the
    /// pooled empirical (source) estimators. The constant is n0 / n_study,
    /// the marginal odds, so the risk normalization also matches.
    #[test]
    fn constant_odds_reduce_weighting_to_source(data in dataset_strategy(), c_idx in 0usize..10) {
        let c = c_idx as f64 / 10.0;
        let marginal_odds = data.ds.n_target() as f64 / data.ds.n_study() as f64;
        let constant = OracleData {
            ds: data.ds.clone(),
            m: data.m.clone(),
            w: vec![marginal_odds; data.ds.n()],
        };
        for metric in MetricId::ALL {
            let w = metric_value(&constant, metric, EstimatorKind::Weighting, c, WeightMode::Unweighted);
            let source = metric_value(&constant, metric, EstimatorKind::Source, c, WeightMode::Unweighted);
            match (w, source) {
                (Ok(a), Ok(b)) => prop_assert!(close(a, b, 1e-12), "{metric}: W {a} vs source {b}"),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{metric}: {other:?}"),
            }
        }
    }

    /// With unit survey weights the weighted variants equal the unweighted
    /// ones exactly.
    #[test]
    fn unit_survey_weights_reduce_to_unweighted(data in dataset_strategy(), c_idx in 0usize..10) {
        let c = c_idx as f64 / 10.0;
        let mut rows = data.ds.rows().to_vec();
        for row in &mut rows {
            row.weight = 1.0;
        }
        let unit = OracleData {
            ds: AnalysisDataset::with_default_names(rows).unwrap(),
            m: data.m.clone(),
            w: data.w.clone(),
        };
        for metric in MetricId::ALL {
            for estimator in EstimatorKind::ALL {
                let weighted = metric_value(&unit, metric, estimator, c, WeightMode::Survey);
                let plain = metric_value(&unit, metric, estimator, c, WeightMode::Unweighted);
                match (weighted, plain) {
                    (Ok(a), Ok(b)) => prop_assert!(close(a, b, 1e-12), "{metric} {estimator}: {a} vs {b}"),
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "{metric} {estimator}: {other:?}"),
                }
            }
        }
    }

    /// A perfect outcome model on study rows collapses the doubly robust
    /// estimators onto the outcome-model estimators.
    #[test]
    fn exact_outcome_model_collapses_dr_to_om(data in dataset_strategy(), c_idx in 0usize..10) {
        let c = c_idx as f64 / 10.0;
        let mut m = data.m.clone();
        for (i, row) in data.ds.rows().iter().enumerate() {
            if row.r() {
                m[i] = if row.y == Some(true) { 1.0 } else { 0.0 };
            }
        }
        let exact = OracleData { ds: data.ds.clone(), m, w: data.w.clone() };
        for metric in MetricId::ALL {
            let dr = metric_value(&exact, metric, EstimatorKind::DoublyRobust, c, WeightMode::Unweighted);
            let om = metric_value(&exact, metric, EstimatorKind::OutcomeModel, c, WeightMode::Unweighted);
            match (dr, om) {
                (Ok(a), Ok(b)) => prop_assert!(close(a, b, 1e-12), "{metric}: DR {a} vs OM {b}"),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{metric}: {other:?}"),
            }
        }
    }

    /// Swapping outcome labels and negating scores maps the weighting AUC
    /// onto itself on tie-free data (pair roles swap with the order).
    #[test]
    fn weighting_auc_label_reversal_symmetry(data in dataset_strategy()) {
        // Perturb scores to break ties deterministically.
        let mut rows = data.ds.rows().to_vec();
        for (i, row) in rows.iter_mut().enumerate() {
            row.score = row.score.map(|h| h + (i as f64) * 1e-6);
        }
        let tie_free = AnalysisDataset::with_default_names(rows.clone()).unwrap();
        let base = metric_value(
            &OracleData { ds: tie_free, m: data.m.clone(), w: data.w.clone() },
            MetricId::Auc,
            EstimatorKind::Weighting,
            0.0,
            WeightMode::Unweighted,
        );
        for row in &mut rows {
            row.y = row.y.map(|y| !y);
            row.score = row.score.map(|h| -h);
        }
        let flipped = metric_value(
            &OracleData {
                ds: AnalysisDataset::with_default_names(rows).unwrap(),
                m: data.m.clone(),
                w: data.w.clone(),
            },
            MetricId::Auc,
            EstimatorKind::Weighting,
            0.0,
            WeightMode::Unweighted,
        );
        match (base, flipped) {
            (Ok(a), Ok(b)) => prop_assert!(close(a, b, 1e-12), "{a} vs {b}"),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    /// Doubling all target survey weights and the participation odds
    /// together leaves every AUC variant unchanged: each pair term picks up
    /// the same factor of four.
    #[test]
    fn auc_weight_scale_cancellation(data in dataset_strategy()) {
        let mut rows = data.ds.rows().to_vec();
        for row in &mut rows {
            if !row.r() {
                row.weight *= 2.0;
            }
        }
        let doubled = OracleData {
            ds: AnalysisDataset::with_default_names(rows).unwrap(),
            m: data.m.clone(),
            w: data.w.iter().map(|w| w * 2.0).collect(),
        };
        for estimator in EstimatorKind::ALL {
            let a = metric_value(&data, MetricId::Auc, estimator, 0.0, WeightMode::Survey);
            let b = metric_value(&doubled, MetricId::Auc, estimator, 0.0, WeightMode::Survey);
            match (a, b) {
                (Ok(x), Ok(y)) => prop_assert!(close(x, y, 1e-12), "{estimator}: {x} vs {y}"),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{estimator}: {other:?}"),
            }
        }
    }

    /// Subsetting commutes with predicate conjunction and `derive_r` matches
    /// its definition row by row.
    #[test]
    fn subset_composes(data in dataset_strategy()) {
        let ds = &data.ds;
        let nested = ds.subset(|r| r.r()).subset(|r| r.weight > 1.0);
        let direct = ds.subset(|r| r.r() && r.weight > 1.0);
        prop_assert_eq!(nested.indices(), direct.indices());
        for (row, r) in ds.rows().iter().zip(ds.derive_r()) {
            prop_assert_eq!(r, row.source != 0);
        }
    }
}
