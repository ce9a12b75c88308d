//! Brute-force oracles shared by the integration and acceptance suites.
//!
//! Everything here is written as a direct transliteration of the estimator
//! definitions: plain loops, explicit indicator arithmetic, no sorting, no
//! prefix sums, no shared code with the library's computation paths. The
//! fast implementations are required to agree with these to 1e-12.

#![allow(dead_code)]

use perfport::dataset::{AnalysisDataset, DataRow};
use perfport::metrics::{EstimatorKind, MetricId};
use rand::Rng;

/// Per-row inputs for the oracle: fitted values are supplied directly so
/// the oracle exercises the estimator algebra, not the model fitting.
#[derive(Debug, Clone)]
pub struct OracleData {
    pub ds: AnalysisDataset<f64>,
    pub m: Vec<f64>,
    pub w: Vec<f64>,
}

impl OracleData {
    fn v(&self, i: usize, survey: bool) -> f64 {
        if survey {
            self.ds.rows()[i].weight
        } else {
            1.0
        }
    }

    fn h(&self, i: usize) -> f64 {
        self.ds.rows()[i].score.expect("oracle rows carry scores")
    }

    fn is_target(&self, i: usize) -> bool {
        !self.ds.rows()[i].r()
    }

    fn y(&self, i: usize) -> f64 {
        if self.ds.rows()[i].y == Some(true) {
            1.0
        } else {
            0.0
        }
    }
}

/// `Err(())` mirrors the implementation's non-positive-denominator error.
type OracleResult = Result<f64, ()>;

fn ratio(num: f64, den: f64) -> OracleResult {
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(())
    }
}

/// Direct-summation oracle for the five threshold measures and risk.
pub fn oracle_metric(
    data: &OracleData,
    metric: MetricId,
    estimator: EstimatorKind,
    c: f64,
    survey: bool,
) -> OracleResult {
    let n = data.ds.n();
    let pos = |i: usize| if data.h(i) > c { 1.0 } else { 0.0 };
    let neg = |i: usize| if data.h(i) <= c { 1.0 } else { 0.0 };

    match (metric, estimator) {
        (MetricId::Sensitivity, EstimatorKind::OutcomeModel) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * pos(i) * data.m[i];
                    den += data.v(i, survey) * data.m[i];
                }
            }
            ratio(num, den)
        }
        (MetricId::Sensitivity, EstimatorKind::Weighting) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) && data.y(i) == 1.0 {
                    num += data.w[i] * pos(i);
                    den += data.w[i];
                }
            }
            ratio(num, den)
        }
        (MetricId::Sensitivity, EstimatorKind::DoublyRobust) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * pos(i) * data.m[i];
                    den += data.v(i, survey) * data.m[i];
                } else {
                    num += data.w[i] * pos(i) * (data.y(i) - data.m[i]);
                    den += data.w[i] * (data.y(i) - data.m[i]);
                }
            }
            ratio(num, den)
        }
        (MetricId::Sensitivity, EstimatorKind::Source) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) && data.y(i) == 1.0 {
                    num += pos(i);
                    den += 1.0;
                }
            }
            ratio(num, den)
        }
        (MetricId::Specificity, EstimatorKind::OutcomeModel) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * neg(i) * (1.0 - data.m[i]);
                    den += data.v(i, survey) * (1.0 - data.m[i]);
                }
            }
            ratio(num, den)
        }
        (MetricId::Specificity, EstimatorKind::Weighting) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) && data.y(i) == 0.0 {
                    num += data.w[i] * neg(i);
                    den += data.w[i];
                }
            }
            ratio(num, den)
        }
        (MetricId::Specificity, EstimatorKind::DoublyRobust) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * neg(i) * (1.0 - data.m[i]);
                    den += data.v(i, survey) * (1.0 - data.m[i]);
                } else {
                    let resid = (1.0 - data.y(i)) - (1.0 - data.m[i]);
                    num += data.w[i] * neg(i) * resid;
                    den += data.w[i] * resid;
                }
            }
            ratio(num, den)
        }
        (MetricId::Specificity, EstimatorKind::Source) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) && data.y(i) == 0.0 {
                    num += neg(i);
                    den += 1.0;
                }
            }
            ratio(num, den)
        }
        (MetricId::Ppv, EstimatorKind::OutcomeModel) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * pos(i) * data.m[i];
                    den += data.v(i, survey) * pos(i);
                }
            }
            ratio(num, den)
        }
        (MetricId::Ppv, EstimatorKind::Weighting) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) {
                    num += data.w[i] * pos(i) * data.y(i);
                    den += data.w[i] * pos(i);
                }
            }
            ratio(num, den)
        }
        (MetricId::Ppv, EstimatorKind::DoublyRobust) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * pos(i) * data.m[i];
                    den += data.v(i, survey) * pos(i);
                } else {
                    num += data.w[i] * pos(i) * (data.y(i) - data.m[i]);
                }
            }
            ratio(num, den)
        }
        (MetricId::Ppv, EstimatorKind::Source) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) {
                    num += pos(i) * data.y(i);
                    den += pos(i);
                }
            }
            ratio(num, den)
        }
        (MetricId::Npv, EstimatorKind::OutcomeModel) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * neg(i) * (1.0 - data.m[i]);
                    den += data.v(i, survey) * neg(i);
                }
            }
            ratio(num, den)
        }
        (MetricId::Npv, EstimatorKind::Weighting) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) {
                    num += data.w[i] * neg(i) * (1.0 - data.y(i));
                    den += data.w[i] * neg(i);
                }
            }
            ratio(num, den)
        }
        (MetricId::Npv, EstimatorKind::DoublyRobust) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * neg(i) * (1.0 - data.m[i]);
                    den += data.v(i, survey) * neg(i);
                } else {
                    let resid = (1.0 - data.y(i)) - (1.0 - data.m[i]);
                    num += data.w[i] * neg(i) * resid;
                }
            }
            ratio(num, den)
        }
        (MetricId::Npv, EstimatorKind::Source) => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) {
                    num += neg(i) * (1.0 - data.y(i));
                    den += neg(i);
                }
            }
            ratio(num, den)
        }
        (MetricId::Risk, _) => oracle_risk(data, estimator, survey),
        (MetricId::Auc, _) => oracle_auc(data, estimator, survey),
    }
}

/// Brier-risk oracle (squared error loss).
fn oracle_risk(data: &OracleData, estimator: EstimatorKind, survey: bool) -> OracleResult {
    let n = data.ds.n();
    let loss = |y: f64, h: f64| (y - h) * (y - h);
    let expected_loss =
        |i: usize| data.m[i] * loss(1.0, data.h(i)) + (1.0 - data.m[i]) * loss(0.0, data.h(i));
    match estimator {
        EstimatorKind::OutcomeModel => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * expected_loss(i);
                    den += data.v(i, survey);
                }
            }
            ratio(num, den)
        }
        EstimatorKind::Weighting => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    den += data.v(i, survey);
                } else {
                    num += data.w[i] * loss(data.y(i), data.h(i));
                }
            }
            ratio(num, den)
        }
        EstimatorKind::DoublyRobust => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if data.is_target(i) {
                    num += data.v(i, survey) * expected_loss(i);
                    den += data.v(i, survey);
                } else {
                    num += data.w[i] * (loss(data.y(i), data.h(i)) - expected_loss(i));
                }
            }
            ratio(num, den)
        }
        EstimatorKind::Source => {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                if !data.is_target(i) {
                    num += loss(data.y(i), data.h(i));
                    den += 1.0;
                }
            }
            ratio(num, den)
        }
    }
}

/// Pair-enumeration AUC oracle over all ordered pairs `i != j`.
fn oracle_auc(data: &OracleData, estimator: EstimatorKind, survey: bool) -> OracleResult {
    let n = data.ds.n();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = if data.h(i) > data.h(j) { 1.0 } else { 0.0 };
            let d_out = if data.is_target(i) && data.is_target(j) {
                data.v(i, survey) * data.v(j, survey) * data.m[i] * (1.0 - data.m[j])
            } else {
                0.0
            };
            let d_w = if !data.is_target(i)
                && !data.is_target(j)
                && data.y(i) == 1.0
                && data.y(j) == 0.0
            {
                data.w[i] * data.w[j]
            } else {
                0.0
            };
            let d_cross = if !data.is_target(i) && !data.is_target(j) {
                data.w[i] * data.w[j] * data.m[i] * (1.0 - data.m[j])
            } else {
                0.0
            };
            let d_source = if !data.is_target(i)
                && !data.is_target(j)
                && data.y(i) == 1.0
                && data.y(j) == 0.0
            {
                1.0
            } else {
                0.0
            };
            let d = match estimator {
                EstimatorKind::OutcomeModel => d_out,
                EstimatorKind::Weighting => d_w,
                EstimatorKind::DoublyRobust => d_w + d_out - d_cross,
                EstimatorKind::Source => d_source,
            };
            num += d * k;
            den += d;
        }
    }
    ratio(num, den)
}

/// Exhaustive Youden oracle: evaluate the objective at every candidate via
/// the metric oracle and take the smallest maximizer.
pub fn oracle_youden(
    data: &OracleData,
    estimator: EstimatorKind,
    survey: bool,
) -> Result<(f64, f64), ()> {
    let mut scores: Vec<f64> = data
        .ds
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.r())
        .map(|(i, _)| data.h(i))
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    if scores.len() < 2 {
        return Err(());
    }
    let mut candidates = vec![f64::NEG_INFINITY];
    for pair in scores.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);

    let mut best: Option<(f64, f64)> = None;
    for &c in &candidates {
        let sens = oracle_metric(data, MetricId::Sensitivity, estimator, c, survey)?;
        let spec = oracle_metric(data, MetricId::Specificity, estimator, c, survey)?;
        let j = sens + spec - 1.0;
        if best.is_none_or(|(_, best_j)| j > best_j) {
            best = Some((c, j));
        }
    }
    Ok(best.unwrap())
}

/// Random dataset of at most 10 rows with scores on a lattice (so ties
/// occur), random survey weights, and random fitted values.
pub fn random_small_dataset<R: Rng>(rng: &mut R) -> OracleData {
    random_dataset_sized(rng, 5, 5)
}

pub fn random_dataset_sized<R: Rng>(
    rng: &mut R,
    max_target: usize,
    max_study: usize,
) -> OracleData {
    let n_target = rng.random_range(1..=max_target);
    let n_study = rng.random_range(1..=max_study);
    let n_studies = rng.random_range(1..=3u32);
    let mut rows = Vec::new();
    let mut m = Vec::new();
    let mut w = Vec::new();
    let lattice_score = |rng: &mut R| (rng.random_range(0..10) as f64) / 10.0 + 0.05;
    for _ in 0..n_target {
        let x = vec![rng.random::<f64>() * 2.0 - 1.0];
        let weight = 0.5 + 2.0 * rng.random::<f64>();
        rows.push(
            DataRow::target(x)
                .with_weight(weight)
                .with_score(lattice_score(rng)),
        );
        m.push(0.02 + 0.96 * rng.random::<f64>());
        w.push(0.1 + 3.9 * rng.random::<f64>());
    }
    for _ in 0..n_study {
        let x = vec![rng.random::<f64>() * 2.0 - 1.0];
        let study = rng.random_range(1..=n_studies);
        let y = rng.random::<f64>() < 0.5;
        let weight = 0.5 + 2.0 * rng.random::<f64>();
        rows.push(
            DataRow::study(study, x, y)
                .with_weight(weight)
                .with_score(lattice_score(rng)),
        );
        m.push(0.02 + 0.96 * rng.random::<f64>());
        w.push(0.1 + 3.9 * rng.random::<f64>());
    }
    OracleData {
        ds: AnalysisDataset::with_default_names(rows).expect("valid by construction"),
        m,
        w,
    }
}

/// Relative-or-absolute closeness at the oracle tolerance.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0_f64.max(a.abs().max(b.abs()))
}

/// Run the implementation against the direct-summation oracle on
/// `n_datasets` random small datasets: every measure, every estimator,
/// weighted and unweighted, to 1e-12, with matching error behavior.
pub fn assert_oracle_equivalence(n_datasets: usize, seed: u64) {
    use perfport::auc::{auc, TieRule};
    use perfport::error::Error;
    use perfport::inference::seed_stream;
    use perfport::metrics::{
        self, if_variance_sensitivity, NuisanceValues, WeightMode,
    };

    let mut rng = seed_stream(seed, 0);
    for dataset_idx in 0..n_datasets {
        let data = random_small_dataset(&mut rng);
        let nuis = NuisanceValues::new(&data.m, &data.w);
        let c = (rng.random_range(0..10) as f64) / 10.0;
        for survey in [false, true] {
            let mode = if survey { WeightMode::Survey } else { WeightMode::Unweighted };
            for metric in MetricId::ALL {
                for estimator in EstimatorKind::ALL {
                    let implementation: Result<f64, Error> = match metric {
                        MetricId::Sensitivity => {
                            metrics::sensitivity(&data.ds, nuis, c, estimator, mode)
                                .map(|e| e.value)
                        }
                        MetricId::Specificity => {
                            metrics::specificity(&data.ds, nuis, c, estimator, mode)
                                .map(|e| e.value)
                        }
                        MetricId::Ppv => {
                            metrics::ppv(&data.ds, nuis, c, estimator, mode).map(|e| e.value)
                        }
                        MetricId::Npv => {
                            metrics::npv(&data.ds, nuis, c, estimator, mode).map(|e| e.value)
                        }
                        MetricId::Risk => metrics::risk(
                            &data.ds,
                            nuis,
                            perfport::metrics::Loss::Brier,
                            estimator,
                            mode,
                        )
                        .map(|e| e.value),
                        MetricId::Auc => {
                            auc(&data.ds, nuis, estimator, mode, TieRule::Strict)
                                .map(|e| e.value)
                        }
                    };
                    let expected = oracle_metric(&data, metric, estimator, c, survey);
                    match (&implementation, &expected) {
                        (Ok(got), Ok(want)) => assert!(
                            close(*got, *want, 1e-12),
                            "dataset {dataset_idx}: {metric} {estimator} survey={survey} \
                             got {got}, oracle {want}"
                        ),
                        (Err(Error::ZeroDenominator { .. }), Err(())) => {}
                        (got, want) => panic!(
                            "dataset {dataset_idx}: {metric} {estimator} survey={survey} \
                             implementation {got:?} vs oracle {want:?}"
                        ),
                    }
                }
            }

            // Youden selection against the exhaustive oracle.
            for estimator in EstimatorKind::ALL {
                let implementation = metrics::youden_select(&data.ds, nuis, estimator, mode);
                let expected = oracle_youden(&data, estimator, survey);
                match (&implementation, &expected) {
                    (Ok(sel), Ok((c_star, j_star))) => {
                        assert!(
                            close(sel.youden_j, *j_star, 1e-12),
                            "dataset {dataset_idx}: youden {estimator} survey={survey} \
                             J {} vs oracle {j_star}",
                            sel.youden_j
                        );
                        // Objectives can tie to within rounding; thresholds
                        // must then agree or both be optimal.
                        if sel.threshold != *c_star {
                            let j_at = oracle_metric(
                                &data,
                                MetricId::Sensitivity,
                                estimator,
                                sel.threshold,
                                survey,
                            )
                            .unwrap()
                                + oracle_metric(
                                    &data,
                                    MetricId::Specificity,
                                    estimator,
                                    sel.threshold,
                                    survey,
                                )
                                .unwrap()
                                - 1.0;
                            assert!(
                                close(j_at, *j_star, 1e-12),
                                "dataset {dataset_idx}: youden {estimator} picked a \
                                 non-optimal threshold"
                            );
                        }
                    }
                    (Err(_), Err(())) => {}
                    (got, want) => panic!(
                        "dataset {dataset_idx}: youden {estimator} survey={survey} \
                         implementation {got:?} vs oracle {want:?}"
                    ),
                }
            }
        }

        // Influence-function variance is non-negative whenever defined.
        if let Ok(psi) = metrics::sensitivity(
            &data.ds,
            nuis,
            c,
            EstimatorKind::DoublyRobust,
            WeightMode::Unweighted,
        ) {
            if let Ok(var) = if_variance_sensitivity(&data.ds, nuis, c, psi.value) {
                assert!(var >= 0.0, "dataset {dataset_idx}: negative IF variance {var}");
            }
        }
    }
}
