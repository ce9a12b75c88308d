//! Exponential-tilt sensitivity analysis for violations of conditional
//! exchangeability.
//!
//! When the outcome law in the target population may differ from the law in
//! study `s`, the two are linked by a tilt `f(y | x, target) proportional to
//! exp(gamma * y) f(y | x, study s)` with a scalar sensitivity parameter
//! `gamma` per study. For a binary outcome the tilted success probability
//! has the closed form
//!
//! `b(m, gamma) = exp(gamma) m / (1 + m (exp(gamma) - 1))`,
//!
//! where `m` is the study's outcome probability at the same covariates.
//! `gamma = 0` recovers exchangeability. Outcome data are absent in the
//! target sample, so `gamma` is supplied a priori, scanned over a grid, or
//! calibrated so the tilted prevalence matches a known marginal prevalence
//! in the target population.
//!
//! Only the outcome-model form of the tilted sensitivity estimator exists;
//! weighting or doubly robust tilted variants are deliberately not provided.

use crate::dataset::AnalysisDataset;
use crate::error::{Error, Result};
use crate::inference::seed_stream;
use crate::kahan::KahanSum;
use crate::nuisance::{fit_study_outcome_model, BasisSpec, FitOptions};
use crate::scalar::{cast, cast_usize, is_positive, RandScalar, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the sensitivity parameters are chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TiltSpec {
    /// Fixed `gamma` per study, supplied a priori.
    Fixed { gamma: BTreeMap<u32, f64> },
    /// Calibrate each study's `gamma` against a known marginal prevalence
    /// in the target population.
    Calibrated {
        target_prevalence: f64,
        /// Initial bisection bracket; defaults to `[-10, 10]` and expands
        /// geometrically to `[-30, 30]` before giving up.
        #[serde(default)]
        bracket: Option<(f64, f64)>,
    },
}

/// Tilted success probability `b(m, gamma)`; `tilted_b` with `j = 0`.
#[inline]
pub fn tilted_prevalence<F: Scalar>(m: F, gamma: F) -> F {
    // Two algebraically equal forms keep exp() from overflowing either way.
    if gamma >= F::zero() {
        m / (m + (F::one() - m) * (-gamma).exp())
    } else {
        let e = gamma.exp();
        m * e / ((F::one() - m) + m * e)
    }
}

/// The estimator kernel `b^j`: the tilted success probability, multiplied
/// by the classification indicator when `j = 1`.
#[inline]
pub fn tilted_b<F: Scalar>(m: F, gamma: F, j: u8, indicator: bool) -> F {
    debug_assert!(m >= F::zero() && m <= F::one());
    let b = tilted_prevalence(m, gamma);
    match j {
        0 => b,
        _ => {
            if indicator {
                b
            } else {
                F::zero()
            }
        }
    }
}

/// Tilted outcome-model estimate of target sensitivity from one study.
#[derive(Debug, Clone, Serialize)]
pub struct TiltedEstimate<F> {
    pub study: u32,
    pub gamma: F,
    pub value: F,
    /// Residual of the calibration moment equation, when calibrated.
    pub calibration_residual: Option<F>,
}

/// Sensitivity in the target population transported from study `study`
/// under tilt `gamma`. `study_outcome_probs` holds the per-row predictions
/// of the outcome model fit on that study's rows alone; only target rows
/// enter the sums.
pub fn tilted_sensitivity<F: Scalar>(
    ds: &AnalysisDataset<F>,
    study: u32,
    study_outcome_probs: &[F],
    gamma: F,
    threshold: F,
) -> Result<TiltedEstimate<F>> {
    check_len(ds, study_outcome_probs)?;
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    for (i, row) in ds.rows().iter().enumerate() {
        if row.r() {
            continue;
        }
        let h = ds.score(i)?;
        let m = study_outcome_probs[i];
        num.add(tilted_b(m, gamma, 1, h > threshold));
        den.add(tilted_b(m, gamma, 0, false));
    }
    let den = den.total();
    if !is_positive(den) {
        return Err(Error::ZeroDenominator { context: "tilted sensitivity" });
    }
    Ok(TiltedEstimate {
        study,
        gamma,
        value: num.total() / den,
        calibration_residual: None,
    })
}

/// One row per grid point: the sensitivity-analysis curve for a study.
pub fn gamma_scan<F: Scalar>(
    ds: &AnalysisDataset<F>,
    study: u32,
    study_outcome_probs: &[F],
    grid: &[F],
    threshold: F,
) -> Result<Vec<TiltedEstimate<F>>> {
    grid.iter()
        .map(|&g| tilted_sensitivity(ds, study, study_outcome_probs, g, threshold))
        .collect()
}

/// Result of calibrating `gamma` against a known target prevalence.
#[derive(Debug, Clone, Serialize)]
pub struct CalibratedGamma<F> {
    pub gamma: F,
    /// `mean(tilted prevalence) - target_prevalence` at the returned root.
    pub residual: F,
    pub iterations: usize,
}

/// Solve for the `gamma` whose tilted mean prevalence over the target rows
/// equals `target_prevalence`, by bisection. The tilted mean is strictly
/// increasing in `gamma` whenever some prediction is interior to (0, 1), so
/// the root is unique when it exists; an unattainable prevalence reports the
/// achievable range instead.
pub fn calibrate_gamma<F: Scalar>(
    ds: &AnalysisDataset<F>,
    study_outcome_probs: &[F],
    target_prevalence: F,
    bracket: (F, F),
    tol: F,
) -> Result<CalibratedGamma<F>> {
    check_len(ds, study_outcome_probs)?;
    let target_m: Vec<F> = ds
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, row)| !row.r())
        .map(|(i, _)| study_outcome_probs[i])
        .collect();
    if target_m.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let n0: F = cast_usize(target_m.len());
    let gap = |gamma: F| -> F {
        let mut acc = KahanSum::new();
        for &m in &target_m {
            acc.add(tilted_prevalence(m, gamma));
        }
        acc.total() / n0 - target_prevalence
    };

    let limit: F = cast(30.0);
    let (mut lo, mut hi) = (bracket.0.max(-limit), bracket.1.min(limit));
    let two = F::one() + F::one();
    // Expand geometrically until the root is bracketed or the hard limit is
    // reached.
    loop {
        if gap(lo) <= F::zero() && gap(hi) >= F::zero() {
            break;
        }
        if lo <= -limit && hi >= limit {
            let achievable_lo = gap(-limit) + target_prevalence;
            let achievable_hi = gap(limit) + target_prevalence;
            return Err(Error::BracketFailure {
                target: target_prevalence.to_f64().unwrap_or(f64::NAN),
                lo: achievable_lo.to_f64().unwrap_or(f64::NAN),
                hi: achievable_hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        lo = (lo * two).max(-limit);
        hi = (hi * two).min(limit);
    }

    let mut iterations = 0;
    let mut mid = (lo + hi) / two;
    let mut residual = gap(mid);
    while residual.abs() >= tol && iterations < 500 {
        if residual < F::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = (lo + hi) / two;
        residual = gap(mid);
        iterations += 1;
    }
    Ok(CalibratedGamma { gamma: mid, residual, iterations })
}

/// Linear combination of per-study estimates; the weights must sum to one.
///
/// Inverse-variance weights are a reasonable default but not
/// variance-optimal here: the per-study estimates share the same target
/// sample and are therefore correlated.
pub fn combine_estimates<F: Scalar>(values: &[F], weights: &[F]) -> Result<F> {
    if values.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} estimates but {} weights",
            values.len(),
            weights.len()
        )));
    }
    let sum: F = kahan_pairwise(weights);
    if (sum - F::one()).abs() > cast(1e-10) {
        return Err(Error::WeightSumViolation { sum: sum.to_f64().unwrap_or(f64::NAN) });
    }
    let mut acc = KahanSum::new();
    for (v, w) in values.iter().zip(weights) {
        acc.add(*v * *w);
    }
    Ok(acc.total())
}

/// Weights proportional to inverse variance, normalized to sum to one.
pub fn inverse_variance_weights<F: Scalar>(variances: &[F]) -> Result<Vec<F>> {
    if variances.iter().any(|v| !is_positive(*v)) {
        return Err(Error::Config("variances must be positive".to_string()));
    }
    let raw: Vec<F> = variances.iter().map(|v| F::one() / *v).collect();
    let total = kahan_pairwise(&raw);
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn kahan_pairwise<F: Scalar>(values: &[F]) -> F {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(*v);
    }
    acc.total()
}

/// Binned cross-study compatibility diagnostic.
///
/// Under the tilt model with the assumed `gamma`s, every study's tilted
/// outcome law transports to the same target law, so the per-study tilted
/// prevalences should agree on any subset of target rows. The diagnostic
/// bins target rows by the pooled outcome model's prediction, compares the
/// studies' tilted prevalences within each bin, and takes the largest
/// absolute discrepancy across bins as its statistic. Its null distribution
/// is approximated by refitting the per-study models on study samples drawn
/// from the pooled study rows (sizes preserved), which is exact only when
/// the assumed `gamma`s are equal; this is a screening diagnostic, not an
/// omnibus test of distributional equality.
#[derive(Debug, Clone)]
pub struct TiltDiagnosticConfig {
    pub bins: usize,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

impl Default for TiltDiagnosticConfig {
    fn default() -> Self {
        Self { bins: 5, bootstrap_replicates: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BinDiagnostic<F> {
    /// Number of target rows in the bin.
    pub n_rows: usize,
    /// Tilted prevalence per study, ascending study label.
    pub prevalence_by_study: Vec<(u32, F)>,
    /// Largest absolute pairwise difference across studies.
    pub max_discrepancy: F,
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltDiagnostic<F> {
    pub bins: Vec<BinDiagnostic<F>>,
    /// Max discrepancy over all bins.
    pub statistic: F,
    /// Pooled-bootstrap p-value of the statistic.
    pub bootstrap_p: F,
    /// 95th percentile of the bootstrap null statistics.
    pub bootstrap_q95: F,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

pub fn tilt_compatibility_diagnostic<F: RandScalar>(
    ds: &AnalysisDataset<F>,
    pooled_outcome_probs: &[F],
    gammas: &BTreeMap<u32, F>,
    basis: &BasisSpec,
    opts: &FitOptions<F>,
    cfg: &TiltDiagnosticConfig,
) -> Result<TiltDiagnostic<F>> {
    check_len(ds, pooled_outcome_probs)?;
    let studies = ds.study_labels();
    if studies.len() < 2 {
        return Err(Error::InsufficientStudies { found: studies.len() });
    }
    for s in &studies {
        if !gammas.contains_key(s) {
            return Err(Error::Config(format!("no gamma supplied for study {s}")));
        }
    }
    if cfg.bins == 0 {
        return Err(Error::Config("bins must be >= 1".to_string()));
    }

    // Equal-count bins of target rows by pooled outcome probability.
    let mut target_rows: Vec<usize> = (0..ds.n()).filter(|&i| !ds.rows()[i].r()).collect();
    target_rows.sort_by(|&a, &b| {
        pooled_outcome_probs[a]
            .partial_cmp(&pooled_outcome_probs[b])
            .expect("probabilities are finite")
    });
    let n0 = target_rows.len();
    let n_bins = cfg.bins.min(n0.max(1));
    let bins_idx: Vec<&[usize]> = chunks_even(&target_rows, n_bins);

    // Statistic for a given set of per-study fits.
    let statistic_for = |fits: &[(u32, crate::nuisance::NuisanceFit<F>)]|
     -> Result<(Vec<BinDiagnostic<F>>, F)> {
        let mut bins = Vec::with_capacity(bins_idx.len());
        let mut overall = F::zero();
        for rows in &bins_idx {
            let mut prevalence_by_study = Vec::with_capacity(fits.len());
            let mut lo = F::infinity();
            let mut hi = F::neg_infinity();
            for (s, fit) in fits {
                let gamma = gammas[s];
                let mut acc = KahanSum::new();
                for &i in rows.iter() {
                    let m = fit.predict_m(&ds.rows()[i].x)?;
                    acc.add(tilted_prevalence(m, gamma));
                }
                let prevalence = acc.total() / cast_usize(rows.len());
                lo = lo.min(prevalence);
                hi = hi.max(prevalence);
                prevalence_by_study.push((*s, prevalence));
            }
            let max_discrepancy = hi - lo;
            overall = overall.max(max_discrepancy);
            bins.push(BinDiagnostic { n_rows: rows.len(), prevalence_by_study, max_discrepancy });
        }
        Ok((bins, overall))
    };

    let observed_fits: Vec<(u32, _)> = studies
        .iter()
        .map(|&s| fit_study_outcome_model(ds, s, basis, opts).map(|f| (s, f)))
        .collect::<Result<_>>()?;
    let (bins, statistic) = statistic_for(&observed_fits)?;

    // Pooled-bootstrap null: redraw each study's sample from the pooled
    // study rows and recompute the statistic.
    let study_rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.rows()[i].r()).collect();
    let sizes: Vec<(u32, usize)> = studies
        .iter()
        .map(|&s| (s, ds.rows().iter().filter(|r| r.source == s).count()))
        .collect();
    let mut null_stats = Vec::with_capacity(cfg.bootstrap_replicates);
    let mut failed = 0usize;
    for b in 0..cfg.bootstrap_replicates {
        let mut rng = seed_stream(cfg.seed, b as u64);
        let replicate: Result<F> = (|| {
            let mut fits = Vec::with_capacity(sizes.len());
            for &(s, n_s) in &sizes {
                let fit = crate::nuisance::fit_logistic(
                    (0..n_s).map(|_| {
                        let i = study_rows[rng.random_range(0..study_rows.len())];
                        let row = &ds.rows()[i];
                        (row.x.as_slice(), row.y == Some(true), F::one())
                    }),
                    crate::nuisance::NuisanceKind::Outcome,
                    basis,
                    opts,
                )?;
                fits.push((s, fit));
            }
            let (_, stat) = statistic_for(&fits)?;
            Ok(stat)
        })();
        match replicate {
            Ok(stat) => null_stats.push(stat),
            Err(_) => failed += 1,
        }
    }
    if null_stats.is_empty() {
        return Err(Error::TooManyFailures { failed, total: cfg.bootstrap_replicates });
    }

    let exceed = null_stats.iter().filter(|&&s| s >= statistic).count();
    let bootstrap_p =
        cast_usize::<F>(exceed + 1) / cast_usize::<F>(null_stats.len() + 1);
    null_stats.sort_by(|a, b| a.partial_cmp(b).expect("statistics are finite"));
    let q95_idx = ((null_stats.len() as f64) * 0.95).ceil() as usize;
    let bootstrap_q95 = null_stats[q95_idx.saturating_sub(1).min(null_stats.len() - 1)];

    Ok(TiltDiagnostic {
        bins,
        statistic,
        bootstrap_p,
        bootstrap_q95,
        replicates_used: null_stats.len(),
        replicates_failed: failed,
    })
}

/// Split a slice into `k` contiguous chunks whose sizes differ by at most 1.
fn chunks_even<T>(items: &[T], k: usize) -> Vec<&[T]> {
    let n = items.len();
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

fn check_len<F: Scalar>(ds: &AnalysisDataset<F>, values: &[F]) -> Result<()> {
    if values.len() != ds.n() {
        return Err(Error::Config(format!(
            "per-row values ({}) do not match dataset rows ({})",
            values.len(),
            ds.n()
        )));
    }
    Ok(())
}
