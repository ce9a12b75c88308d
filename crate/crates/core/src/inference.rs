//! Resampling inference.
//!
//! Two bootstrap designs are provided. The iid design resamples rows with
//! replacement separately within the target sample and within the pooled
//! study rows, so `n_0` and the total study count are preserved and the
//! two-sample structure the estimands condition on never degenerates. The
//! stratified two-stage design follows survey practice for the target
//! sample: primary sampling units are drawn with replacement, then secondary
//! units within each drawn PSU (rows directly, when no SSU labels exist),
//! while study rows are resampled iid.
//!
//! Every replicate owns a counter-based RNG stream keyed by its index, so
//! results are independent of the parallel execution schedule and
//! reproducible from `(seed, replicate)` alone.

use crate::dataset::AnalysisDataset;
use crate::error::{Error, Result};
use crate::scalar::{cast, cast_usize, RandScalar, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Reproducible RNG stream for one replicate. Streams with different
/// indices under the same master seed never overlap.
pub fn seed_stream(master_seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Derive an unrelated master seed for a sub-experiment (SplitMix64 step).
pub fn child_seed(master_seed: u64, tag: u64) -> u64 {
    let mut z = master_seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Resampling design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKind {
    Iid,
    StratifiedTwoStage,
}

/// Bootstrap controls. `refit_nuisances` is consumed by the analysis layer
/// when it builds the per-replicate statistic: on (the default) means every
/// replicate refits the nuisance models so their estimation uncertainty is
/// part of the interval; off freezes the original fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub kind: ResampleKind,
    pub replicates: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub refit_nuisances: bool,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self {
            kind: ResampleKind::Iid,
            replicates: 200,
            seed: 0,
            ci_level: 0.95,
            refit_nuisances: true,
        }
    }
}

impl BootstrapPlan {
    fn check(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidPlan("replicates must be >= 2".to_string()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidPlan("ci_level must be in (0, 1)".to_string()));
        }
        Ok(())
    }
}

/// Point estimate with bootstrap uncertainty. The percentile interval may
/// exclude the point estimate in skewed finite samples; only `lo <= hi` is
/// guaranteed.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalEstimate<F> {
    pub point: F,
    /// Replicate standard deviation.
    pub se: F,
    pub ci_lower: F,
    pub ci_upper: F,
    pub ci_level: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
    /// Failure counts keyed by [`Error::tag`].
    pub failure_reasons: BTreeMap<&'static str, usize>,
}

/// Run the bootstrap: `statistic` maps a (re)sampled dataset to a vector of
/// statistics, evaluated once on the original data for the point estimates
/// and once per replicate. Replicates whose statistic errors (separation,
/// zero denominators) are dropped and counted; more than 20% failures
/// aborts.
pub fn bootstrap<F, S>(
    ds: &AnalysisDataset<F>,
    plan: &BootstrapPlan,
    statistic: S,
) -> Result<Vec<IntervalEstimate<F>>>
where
    F: RandScalar,
    S: Fn(&AnalysisDataset<F>) -> Result<Vec<F>> + Sync,
{
    plan.check()?;
    let points = statistic(ds)?;
    let n_stats = points.len();

    let strata = Strata::build(ds, plan.kind)?;
    let replicate_results: Vec<Result<Vec<F>>> = (0..plan.replicates)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed_stream(plan.seed, k as u64);
            let indices = strata.draw(&mut rng);
            let resampled = ds.resample(&indices);
            let values = statistic(&resampled)?;
            if values.len() != n_stats {
                return Err(Error::Config(format!(
                    "statistic returned {} values on a replicate, {} on the original",
                    values.len(),
                    n_stats
                )));
            }
            Ok(values)
        })
        .collect();

    let mut used: Vec<&Vec<F>> = Vec::with_capacity(plan.replicates);
    let mut failure_reasons: BTreeMap<&'static str, usize> = BTreeMap::new();
    for result in &replicate_results {
        match result {
            Ok(values) => used.push(values),
            Err(e) => *failure_reasons.entry(e.tag()).or_insert(0) += 1,
        }
    }
    let failed = plan.replicates - used.len();
    if cast_usize::<f64>(failed) > 0.2 * cast_usize::<f64>(plan.replicates) {
        return Err(Error::TooManyFailures { failed, total: plan.replicates });
    }

    let alpha = (1.0 - plan.ci_level) / 2.0;
    let mut intervals = Vec::with_capacity(n_stats);
    for (j, &point) in points.iter().enumerate() {
        let mut draws: Vec<F> = used.iter().map(|v| v[j]).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).expect("statistics are finite"));
        intervals.push(IntervalEstimate {
            point,
            se: sample_sd(&draws),
            ci_lower: percentile(&draws, cast(alpha)),
            ci_upper: percentile(&draws, cast(1.0 - alpha)),
            ci_level: plan.ci_level,
            replicates_used: used.len(),
            replicates_failed: failed,
            failure_reasons: failure_reasons.clone(),
        });
    }
    Ok(intervals)
}

/// Precomputed resampling structure.
enum Strata {
    Iid {
        target: Vec<usize>,
        study: Vec<usize>,
    },
    TwoStage {
        /// PSU -> list of SSU row groups, labels ascending, rows in order.
        psus: Vec<Vec<Vec<usize>>>,
        study: Vec<usize>,
    },
}

impl Strata {
    fn build<F: Scalar>(ds: &AnalysisDataset<F>, kind: ResampleKind) -> Result<Self> {
        let study: Vec<usize> = (0..ds.n()).filter(|&i| ds.rows()[i].r()).collect();
        match kind {
            ResampleKind::Iid => {
                let target = (0..ds.n()).filter(|&i| !ds.rows()[i].r()).collect();
                Ok(Strata::Iid { target, study })
            }
            ResampleKind::StratifiedTwoStage => {
                // Without SSU labels each row is its own secondary unit.
                #[derive(PartialEq, Eq, PartialOrd, Ord)]
                enum SsuKey<'a> {
                    Label(&'a str),
                    Row(usize),
                }
                let mut groups: BTreeMap<&str, BTreeMap<SsuKey<'_>, Vec<usize>>> =
                    BTreeMap::new();
                for (i, row) in ds.rows().iter().enumerate() {
                    if row.r() {
                        continue;
                    }
                    let psu = row.psu.as_deref().ok_or(Error::MissingPsuLabels)?;
                    let key = match row.ssu.as_deref() {
                        Some(ssu) => SsuKey::Label(ssu),
                        None => SsuKey::Row(i),
                    };
                    groups.entry(psu).or_default().entry(key).or_default().push(i);
                }
                let psus = groups
                    .into_values()
                    .map(|ssus| ssus.into_values().collect())
                    .collect();
                Ok(Strata::TwoStage { psus, study })
            }
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        match self {
            Strata::Iid { target, study } => {
                let mut indices = Vec::with_capacity(target.len() + study.len());
                for _ in 0..target.len() {
                    indices.push(target[rng.random_range(0..target.len())]);
                }
                for _ in 0..study.len() {
                    indices.push(study[rng.random_range(0..study.len())]);
                }
                indices
            }
            Strata::TwoStage { psus, study } => {
                let mut indices = Vec::new();
                for _ in 0..psus.len() {
                    let psu = &psus[rng.random_range(0..psus.len())];
                    for _ in 0..psu.len() {
                        let ssu = &psu[rng.random_range(0..psu.len())];
                        indices.extend_from_slice(ssu);
                    }
                }
                for _ in 0..study.len() {
                    indices.push(study[rng.random_range(0..study.len())]);
                }
                indices
            }
        }
    }
}

/// Sample standard deviation (n - 1 denominator; 0 for fewer than 2 draws).
/// Shifted two-pass form, exact zero on identical inputs.
fn sample_sd<F: Scalar>(values: &[F]) -> F {
    if values.len() < 2 {
        return F::zero();
    }
    let n = cast_usize::<F>(values.len());
    let shift = values[0];
    let mean = values.iter().map(|&v| v - shift).sum::<F>() / n;
    let ss = values.iter().map(|&v| (v - shift - mean) * (v - shift - mean)).sum::<F>();
    (ss / (n - F::one())).sqrt()
}

/// Linear-interpolation quantile of sorted values (R type 7).
pub(crate) fn percentile<F: Scalar>(sorted: &[F], q: F) -> F {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = q * cast_usize::<F>(sorted.len() - 1);
    let lo = h.floor().to_usize().unwrap_or(0).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - h.floor();
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
