//! Threshold-based performance measures in the target population:
//! sensitivity, specificity, PPV, NPV, and loss-based risk, plus
//! Youden-index threshold selection and an influence-function variance for
//! the doubly robust sensitivity estimator.
//!
//! Classification convention throughout: positive means `score > c`,
//! negative means `score <= c`. Four estimator kinds are supported:
//!
//! * `om` averages the outcome regression over the target sample,
//! * `w` reweights study rows by participation odds,
//! * `dr` augments the outcome-model sums with odds-weighted residuals and
//!   is consistent when either nuisance is correct,
//! * `source` is the naive pooled empirical measure over study rows.
//!
//! Survey-weight variants multiply every target-sample term by the row's
//! sampling weight; with all weights equal to one they reduce exactly to the
//! unweighted forms. The `source` baseline is always unweighted.

use crate::dataset::AnalysisDataset;
use crate::error::{Error, Result};
use crate::kahan::KahanSum;
use crate::scalar::{cast_usize, is_positive, Scalar};
use serde::{Deserialize, Serialize};

/// Identifier for the six supported performance measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricId {
    Sensitivity,
    Specificity,
    Ppv,
    Npv,
    Risk,
    Auc,
}

impl MetricId {
    pub const ALL: [MetricId; 6] = [
        MetricId::Sensitivity,
        MetricId::Specificity,
        MetricId::Ppv,
        MetricId::Npv,
        MetricId::Risk,
        MetricId::Auc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricId::Sensitivity => "sensitivity",
            MetricId::Specificity => "specificity",
            MetricId::Ppv => "ppv",
            MetricId::Npv => "npv",
            MetricId::Risk => "risk",
            MetricId::Auc => "auc",
        }
    }
}

impl std::fmt::Display for MetricId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "om")]
    OutcomeModel,
    #[serde(rename = "w")]
    Weighting,
    #[serde(rename = "dr")]
    DoublyRobust,
    #[serde(rename = "source")]
    Source,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::OutcomeModel,
        EstimatorKind::Weighting,
        EstimatorKind::DoublyRobust,
        EstimatorKind::Source,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::OutcomeModel => "om",
            EstimatorKind::Weighting => "w",
            EstimatorKind::DoublyRobust => "dr",
            EstimatorKind::Source => "source",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss for risk estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Squared error `(y - h)^2`.
    Brier,
    /// Absolute error `|y - h|`.
    Absolute,
}

impl Loss {
    #[inline]
    pub fn eval<F: Scalar>(&self, y: F, h: F) -> F {
        let d = y - h;
        match self {
            Loss::Brier => d * d,
            Loss::Absolute => d.abs(),
        }
    }
}

/// Whether target-sample terms carry the rows' survey weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Unweighted,
    Survey,
}

impl WeightMode {
    #[inline]
    fn target_weight<F: Scalar>(&self, row_weight: F) -> F {
        match self {
            WeightMode::Unweighted => F::one(),
            WeightMode::Survey => row_weight,
        }
    }
}

/// A point estimate with its ratio internals kept for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct PerformanceEstimate<F> {
    pub metric: MetricId,
    pub estimator: EstimatorKind,
    /// Threshold the classification used; `None` for risk.
    pub threshold: Option<F>,
    pub value: F,
    pub numerator: F,
    pub denominator: F,
    /// Rows contributing non-zero mass to the denominator.
    pub n_effective: usize,
}

/// Per-row inputs shared by every estimator: the fitted outcome
/// probabilities and participation odds, aligned with the dataset rows.
/// Callers producing these from [`crate::nuisance::NuisanceFit`]s should use
/// the survey-weighted participation fit when evaluating in
/// [`WeightMode::Survey`].
#[derive(Debug, Clone, Copy)]
pub struct NuisanceValues<'a, F> {
    pub outcome_probs: &'a [F],
    pub participation_odds: &'a [F],
}

impl<'a, F: Scalar> NuisanceValues<'a, F> {
    pub fn new(outcome_probs: &'a [F], participation_odds: &'a [F]) -> Self {
        Self { outcome_probs, participation_odds }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.outcome_probs.len() != n || self.participation_odds.len() != n {
            return Err(Error::Config(format!(
                "nuisance value lengths ({}, {}) do not match dataset rows ({n})",
                self.outcome_probs.len(),
                self.participation_odds.len()
            )));
        }
        Ok(())
    }
}

/// Which side of the threshold a measure conditions on. `Positive` pairs the
/// indicator `score > c` with outcome class `y = 1` and model mass `m`;
/// `Negative` pairs `score <= c` with `y = 0` and mass `1 - m`.
#[derive(Clone, Copy)]
enum Side {
    Positive,
    Negative,
}

impl Side {
    #[inline]
    fn indicator<F: Scalar>(&self, score: F, c: F) -> F {
        let hit = match self {
            Side::Positive => score > c,
            Side::Negative => score <= c,
        };
        if hit {
            F::one()
        } else {
            F::zero()
        }
    }

    #[inline]
    fn class<F: Scalar>(&self, y: Option<bool>) -> F {
        let hit = match self {
            Side::Positive => y == Some(true),
            Side::Negative => y == Some(false),
        };
        if hit {
            F::one()
        } else {
            F::zero()
        }
    }

    #[inline]
    fn mass<F: Scalar>(&self, m: F) -> F {
        match self {
            Side::Positive => m,
            Side::Negative => F::one() - m,
        }
    }
}

/// Sensitivity `Pr[h(X) > c | Y = 1, S = 0]`.
pub fn sensitivity<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    threshold: F,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<PerformanceEstimate<F>> {
    conditional_ratio(ds, nuisances, threshold, kind, mode, Side::Positive, MetricId::Sensitivity)
}

/// Specificity `Pr[h(X) <= c | Y = 0, S = 0]`.
pub fn specificity<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    threshold: F,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<PerformanceEstimate<F>> {
    conditional_ratio(ds, nuisances, threshold, kind, mode, Side::Negative, MetricId::Specificity)
}

/// Positive predictive value `Pr[Y = 1 | h(X) > c, S = 0]`.
pub fn ppv<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    threshold: F,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<PerformanceEstimate<F>> {
    classification_ratio(ds, nuisances, threshold, kind, mode, Side::Positive, MetricId::Ppv)
}

/// Negative predictive value `Pr[Y = 0 | h(X) <= c, S = 0]`.
pub fn npv<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    threshold: F,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<PerformanceEstimate<F>> {
    classification_ratio(ds, nuisances, threshold, kind, mode, Side::Negative, MetricId::Npv)
}

/// Measures conditioned on the outcome class (sensitivity, specificity).
fn conditional_ratio<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuis: NuisanceValues<'_, F>,
    c: F,
    kind: EstimatorKind,
    mode: WeightMode,
    side: Side,
    metric: MetricId,
) -> Result<PerformanceEstimate<F>> {
    nuis.check(ds.n())?;
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    let mut n_effective = 0usize;

    for (i, row) in ds.rows().iter().enumerate() {
        let h = ds.score(i)?;
        let ind = side.indicator(h, c);
        let (num_i, den_i) = match kind {
            EstimatorKind::OutcomeModel => {
                if row.r() {
                    continue;
                }
                let v = mode.target_weight(row.weight);
                let mass = side.mass(nuis.outcome_probs[i]);
                (v * ind * mass, v * mass)
            }
            EstimatorKind::Weighting => {
                if !row.r() {
                    continue;
                }
                let w = nuis.participation_odds[i];
                let class = side.class(row.y);
                (w * ind * class, w * class)
            }
            EstimatorKind::DoublyRobust => {
                let mass = side.mass(nuis.outcome_probs[i]);
                if row.r() {
                    let w = nuis.participation_odds[i];
                    let resid = side.class::<F>(row.y) - mass;
                    (w * ind * resid, w * resid)
                } else {
                    let v = mode.target_weight(row.weight);
                    (v * ind * mass, v * mass)
                }
            }
            EstimatorKind::Source => {
                if !row.r() {
                    continue;
                }
                let class = side.class(row.y);
                (ind * class, class)
            }
        };
        if den_i != F::zero() {
            n_effective += 1;
        }
        num.add(num_i);
        den.add(den_i);
    }

    finish(metric, kind, Some(c), num.total(), den.total(), n_effective, metric.as_str())
}

/// Measures conditioned on the classification (PPV, NPV). The doubly robust
/// form is asymmetric: the numerator carries the odds-weighted augmentation
/// while the denominator is the plain (weighted) target-sample count of the
/// classification.
fn classification_ratio<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuis: NuisanceValues<'_, F>,
    c: F,
    kind: EstimatorKind,
    mode: WeightMode,
    side: Side,
    metric: MetricId,
) -> Result<PerformanceEstimate<F>> {
    nuis.check(ds.n())?;
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    let mut n_effective = 0usize;

    for (i, row) in ds.rows().iter().enumerate() {
        let h = ds.score(i)?;
        let ind = side.indicator(h, c);
        let (num_i, den_i) = match kind {
            EstimatorKind::OutcomeModel => {
                if row.r() {
                    continue;
                }
                let v = mode.target_weight(row.weight);
                (v * ind * side.mass(nuis.outcome_probs[i]), v * ind)
            }
            EstimatorKind::Weighting => {
                if !row.r() {
                    continue;
                }
                let w = nuis.participation_odds[i];
                (w * ind * side.class(row.y), w * ind)
            }
            EstimatorKind::DoublyRobust => {
                let mass = side.mass(nuis.outcome_probs[i]);
                if row.r() {
                    let w = nuis.participation_odds[i];
                    (w * ind * (side.class::<F>(row.y) - mass), F::zero())
                } else {
                    let v = mode.target_weight(row.weight);
                    (v * ind * mass, v * ind)
                }
            }
            EstimatorKind::Source => {
                if !row.r() {
                    continue;
                }
                (ind * side.class(row.y), ind)
            }
        };
        if den_i != F::zero() {
            n_effective += 1;
        }
        num.add(num_i);
        den.add(den_i);
    }

    finish(metric, kind, Some(c), num.total(), den.total(), n_effective, metric.as_str())
}

/// Risk (expected loss) in the target population.
pub fn risk<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    loss: Loss,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<PerformanceEstimate<F>> {
    nuisances.check(ds.n())?;
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    let mut n_effective = 0usize;

    for (i, row) in ds.rows().iter().enumerate() {
        let h = ds.score(i)?;
        // Conditional expected loss under the outcome model, for binary Y.
        let expected_loss = || {
            let m = nuisances.outcome_probs[i];
            m * loss.eval(F::one(), h) + (F::one() - m) * loss.eval(F::zero(), h)
        };
        let (num_i, den_i) = match kind {
            EstimatorKind::OutcomeModel => {
                if row.r() {
                    continue;
                }
                let v = mode.target_weight(row.weight);
                (v * expected_loss(), v)
            }
            EstimatorKind::Weighting => {
                if row.r() {
                    let w = nuisances.participation_odds[i];
                    (w * loss.eval(row.y_scalar(), h), F::zero())
                } else {
                    (F::zero(), mode.target_weight(row.weight))
                }
            }
            EstimatorKind::DoublyRobust => {
                if row.r() {
                    let w = nuisances.participation_odds[i];
                    (w * (loss.eval(row.y_scalar(), h) - expected_loss()), F::zero())
                } else {
                    let v = mode.target_weight(row.weight);
                    (v * expected_loss(), v)
                }
            }
            EstimatorKind::Source => {
                if !row.r() {
                    continue;
                }
                (loss.eval(row.y_scalar(), h), F::one())
            }
        };
        if den_i != F::zero() {
            n_effective += 1;
        }
        num.add(num_i);
        den.add(den_i);
    }

    finish(MetricId::Risk, kind, None, num.total(), den.total(), n_effective, "risk")
}

fn finish<F: Scalar>(
    metric: MetricId,
    estimator: EstimatorKind,
    threshold: Option<F>,
    numerator: F,
    denominator: F,
    n_effective: usize,
    context: &'static str,
) -> Result<PerformanceEstimate<F>> {
    if !is_positive(denominator) {
        return Err(Error::ZeroDenominator { context });
    }
    let value = numerator / denominator;
    debug_assert!(value.is_finite());
    Ok(PerformanceEstimate {
        metric,
        estimator,
        threshold,
        value,
        numerator,
        denominator,
        n_effective,
    })
}

/// Threshold selected by maximizing the Youden statistic
/// `sensitivity(c) + specificity(c) - 1` under the chosen estimator.
#[derive(Debug, Clone, Serialize)]
pub struct YoudenResult<F> {
    pub threshold: F,
    pub sensitivity: F,
    pub specificity: F,
    pub youden_j: F,
}

/// Youden-index cut-point selection.
///
/// Candidates are the midpoints between consecutive distinct observed scores
/// among study rows, with `-inf` and `+inf` sentinels appended; ties in the
/// objective break toward the smallest candidate. Needs at least two
/// distinct study-row scores.
pub fn youden_select<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<YoudenResult<F>> {
    nuisances.check(ds.n())?;

    let mut study_scores: Vec<F> = Vec::new();
    for (i, row) in ds.rows().iter().enumerate() {
        if row.r() {
            study_scores.push(ds.score(i)?);
        }
    }

    // Per-row positive and negative class masses such that, for every
    // estimator kind, sens(c) = sum of pos mass over rows with h > c divided
    // by its total, and spec(c) the mirror with h <= c.
    let mut items: Vec<(F, F, F)> = Vec::new(); // (score, pos mass, neg mass)
    for (i, row) in ds.rows().iter().enumerate() {
        let h = ds.score(i)?;
        let m = nuisances.outcome_probs[i];
        let w = nuisances.participation_odds[i];
        let y = row.y_scalar();
        let (pos, neg) = match kind {
            EstimatorKind::OutcomeModel => {
                if row.r() {
                    continue;
                }
                let v = mode.target_weight(row.weight);
                (v * m, v * (F::one() - m))
            }
            EstimatorKind::Weighting => {
                if !row.r() {
                    continue;
                }
                (w * y, w * (F::one() - y))
            }
            EstimatorKind::DoublyRobust => {
                if row.r() {
                    (w * (y - m), w * (m - y))
                } else {
                    let v = mode.target_weight(row.weight);
                    (v * m, v * (F::one() - m))
                }
            }
            EstimatorKind::Source => {
                if !row.r() {
                    continue;
                }
                (y, F::one() - y)
            }
        };
        items.push((h, pos, neg));
    }
    youden_core(items, study_scores)
}

/// Shared Youden engine over `(score, positive mass, negative mass)` rows,
/// with the candidate grid built from the supplied score set (midpoints of
/// consecutive distinct values plus infinite sentinels). Also used by the
/// simulation oracle on raw draws.
pub(crate) fn youden_core<F: Scalar>(
    mut items: Vec<(F, F, F)>,
    mut grid_scores: Vec<F>,
) -> Result<YoudenResult<F>> {
    grid_scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    grid_scores.dedup();
    if grid_scores.len() < 2 {
        return Err(Error::DegenerateScores);
    }
    let two = F::one() + F::one();
    let mut candidates = Vec::with_capacity(grid_scores.len() + 1);
    candidates.push(F::neg_infinity());
    for pair in grid_scores.windows(2) {
        candidates.push((pair[0] + pair[1]) / two);
    }
    candidates.push(F::infinity());

    items.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Cumulative masses over rows with score <= position.
    let mut pos_prefix = Vec::with_capacity(items.len() + 1);
    let mut neg_prefix = Vec::with_capacity(items.len() + 1);
    let (mut pos_acc, mut neg_acc) = (KahanSum::new(), KahanSum::new());
    pos_prefix.push(F::zero());
    neg_prefix.push(F::zero());
    for &(_, p, n) in &items {
        pos_acc.add(p);
        neg_acc.add(n);
        pos_prefix.push(pos_acc.total());
        neg_prefix.push(neg_acc.total());
    }
    let pos_total = pos_acc.total();
    let neg_total = neg_acc.total();
    if !is_positive(pos_total) {
        return Err(Error::ZeroDenominator { context: "youden sensitivity" });
    }
    if !is_positive(neg_total) {
        return Err(Error::ZeroDenominator { context: "youden specificity" });
    }

    let mut best: Option<YoudenResult<F>> = None;
    for &c in &candidates {
        // Rows with score <= c.
        let cut = items.partition_point(|&(h, _, _)| h <= c);
        let sens = (pos_total - pos_prefix[cut]) / pos_total;
        let spec = neg_prefix[cut] / neg_total;
        let j = sens + spec - F::one();
        let improves = match &best {
            None => true,
            Some(b) => j > b.youden_j,
        };
        if improves {
            best = Some(YoudenResult { threshold: c, sensitivity: sens, specificity: spec, youden_j: j });
        }
    }
    Ok(best.expect("candidate grid is non-empty"))
}

/// Values of all six measures, used by the simulation oracle and results
/// tables. `risk` is the Brier risk in the simulation engine.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricSet<F> {
    pub sensitivity: F,
    pub specificity: F,
    pub ppv: F,
    pub npv: F,
    pub risk: F,
    pub auc: F,
}

impl<F: Copy> MetricSet<F> {
    pub fn get(&self, metric: MetricId) -> F {
        match metric {
            MetricId::Sensitivity => self.sensitivity,
            MetricId::Specificity => self.specificity,
            MetricId::Ppv => self.ppv,
            MetricId::Npv => self.npv,
            MetricId::Risk => self.risk,
            MetricId::Auc => self.auc,
        }
    }

    pub fn set(&mut self, metric: MetricId, value: F) {
        match metric {
            MetricId::Sensitivity => self.sensitivity = value,
            MetricId::Specificity => self.specificity = value,
            MetricId::Ppv => self.ppv = value,
            MetricId::Npv => self.npv = value,
            MetricId::Risk => self.risk = value,
            MetricId::Auc => self.auc = value,
        }
    }
}

/// Influence-function variance estimate for the doubly robust sensitivity
/// estimator `psi` at threshold `c`. The marginal `Pr[S = 0]` is estimated
/// by `n_0 / n` and the target prevalence by the doubly robust plug-in; the
/// returned value estimates `Var(psi_hat)`, so `sqrt` of it is the standard
/// error. Survey weights are not part of this expansion; use the stratified
/// bootstrap for weighted designs.
pub fn if_variance_sensitivity<F: Scalar>(
    ds: &AnalysisDataset<F>,
    nuisances: NuisanceValues<'_, F>,
    threshold: F,
    psi: F,
) -> Result<F> {
    nuisances.check(ds.n())?;
    let n = ds.n();
    let n_target = ds.n_target();
    if n_target == 0 {
        return Err(Error::EmptyTarget);
    }

    // d_i = I(s=0) m_i + w_i I(r=1) (y_i - m_i); its mean over the target
    // sample size is the doubly robust estimate of the target prevalence.
    let mut d = Vec::with_capacity(n);
    let mut d_sum = KahanSum::new();
    for (i, row) in ds.rows().iter().enumerate() {
        let m = nuisances.outcome_probs[i];
        let di = if row.r() {
            nuisances.participation_odds[i] * (row.y_scalar() - m)
        } else {
            m
        };
        d.push(di);
        d_sum.add(di);
    }
    let alpha0 = d_sum.total() / cast_usize(n_target);
    if alpha0 == F::zero() {
        return Err(Error::ZeroDenominator { context: "if variance prevalence" });
    }

    let scale = cast_usize::<F>(n) / cast_usize::<F>(n_target);
    let mut phi = Vec::with_capacity(n);
    let mut phi_sum = KahanSum::new();
    for (i, di) in d.iter().enumerate() {
        let h = ds.score(i)?;
        let ind = if h > threshold { F::one() } else { F::zero() };
        let value = (ind - psi) * scale * *di / alpha0;
        phi.push(value);
        phi_sum.add(value);
    }
    let mean = phi_sum.total() / cast_usize(n);
    let mut ss = KahanSum::new();
    for v in &phi {
        let c = *v - mean;
        ss.add(c * c);
    }
    Ok(ss.total() / (cast_usize::<F>(n) * cast_usize::<F>(n)))
}
