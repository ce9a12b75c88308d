//! Synthetic data-generating process, Monte Carlo oracle, and the
//! replicated bias study.
//!
//! The default configuration draws a five-dimensional Gaussian covariate
//! vector with AR(1) covariance, selects observations into the pooled study
//! sample through a logistic model with quadratic terms, splits study
//! participants across three studies through a multinomial logit, and draws
//! a binary outcome from a second quadratic logistic model. The evaluated
//! model is the numerically estimated asymptotic limit of a logistic
//! regression fit in the study population; with main effects only it is
//! genuinely misspecified, with the quadratic terms added it is correct.
//!
//! "True" target-population performance is realized as a large Monte Carlo
//! oracle (closed forms for the AUC under this process are impractical);
//! every oracle value carries a chunked Monte Carlo standard error so test
//! tolerances stay principled.

use crate::auc::{auc, mann_whitney_auc, TieRule};
use crate::dataset::{AnalysisDataset, DataRow};
use crate::error::{Error, Result};
use crate::inference::{child_seed, seed_stream};
use crate::kahan::KahanSum;
use crate::metrics::{
    self, youden_core, EstimatorKind, Loss, MetricId, MetricSet, NuisanceValues, WeightMode,
};
use crate::nuisance::{
    fit_logistic, fit_outcome_model, fit_participation_model, BasisSpec, FitOptions,
    NuisanceKind,
};
use crate::scalar::{cast, cast_usize, expit, RandScalar, Scalar};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Intercept + linear + diagonal-quadratic linear predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpCoefficients<F> {
    pub intercept: F,
    pub linear: Vec<F>,
    pub quadratic: Vec<F>,
}

impl<F: Scalar> DgpCoefficients<F> {
    pub fn eval(&self, x: &[F]) -> F {
        let mut acc = self.intercept;
        for (xi, b) in x.iter().zip(&self.linear) {
            acc += *b * *xi;
        }
        for (xi, b) in x.iter().zip(&self.quadratic) {
            acc += *b * *xi * *xi;
        }
        acc
    }

    /// Indices of covariates with a non-zero quadratic coefficient.
    pub fn active_squares(&self) -> Vec<usize> {
        self.quadratic
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != F::zero())
            .map(|(j, _)| j)
            .collect()
    }
}

/// Specification regime for the evaluated prediction model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRegime {
    /// Basis includes the squares the outcome law actually uses.
    Correct,
    /// Linear main effects only; misspecified under the default process.
    MainEffectsOnly,
}

/// How study labels are assigned among study participants. Either way the
/// split across studies never reaches the estimators, which pool all study
/// rows; it shows up only in per-study sample sizes and per-study analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyAssignment {
    /// Assignment odds evaluated on an independent covariate draw, so the
    /// realized per-study sizes follow the population-average shares of the
    /// assignment model. The default.
    PopulationShares,
    /// Assignment odds evaluated at the participant's own covariates, which
    /// makes the study-specific covariate distributions differ (the shares
    /// then tilt with selection).
    RowConditional,
}

/// Which nuisance models are deliberately misspecified (fit without the
/// quadratic terms of the truth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceRegime {
    BothCorrect,
    OutcomeWrong,
    ParticipationWrong,
    BothWrong,
}

impl NuisanceRegime {
    pub const ALL: [NuisanceRegime; 4] = [
        NuisanceRegime::BothCorrect,
        NuisanceRegime::OutcomeWrong,
        NuisanceRegime::ParticipationWrong,
        NuisanceRegime::BothWrong,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NuisanceRegime::BothCorrect => "both_correct",
            NuisanceRegime::OutcomeWrong => "outcome_wrong",
            NuisanceRegime::ParticipationWrong => "participation_wrong",
            NuisanceRegime::BothWrong => "both_wrong",
        }
    }
}

/// Full parameterization of the process and the study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig<F: Scalar> {
    /// Total sample size per replicate (target + studies combined).
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Covariate dimension.
    pub dim: usize,
    /// AR(1) covariance parameter: cov(X_i, X_j) = ar_rho^|i-j|.
    pub ar_rho: F,
    /// Selection into the pooled study sample, Pr[R = 1 | X].
    pub selection: DgpCoefficients<F>,
    /// Outcome law, Pr[Y = 1 | X].
    pub outcome: DgpCoefficients<F>,
    /// Per-study log-odds coefficients (linear in x) against the reference
    /// study, which is the last of `study_log_odds.len() + 1` studies.
    pub study_log_odds: Vec<Vec<F>>,
    pub study_assignment: StudyAssignment,
    pub evaluated_model: ModelRegime,
    pub nuisance_regime: NuisanceRegime,
    /// Draws for the Monte Carlo oracle.
    pub oracle_draws: usize,
}

impl<F: Scalar> Default for SimulationConfig<F> {
    fn default() -> Self {
        let l13 = cast::<F>(1.3_f64.ln());
        let l08 = cast::<F>(0.8_f64.ln());
        let z = F::zero();
        Self {
            n: 2000,
            replicates: 1000,
            seed: 20240,
            dim: 5,
            ar_rho: cast(0.6),
            selection: DgpCoefficients {
                intercept: F::one(),
                linear: vec![cast(0.5), cast(0.5), cast(0.3), z, z],
                quadratic: vec![cast(0.3), cast(0.3), cast(0.3), z, z],
            },
            outcome: DgpCoefficients {
                intercept: F::one(),
                linear: vec![cast(0.5), cast(0.2), z, z, z],
                quadratic: vec![cast(0.3), cast(0.3), z, z, z],
            },
            study_log_odds: vec![vec![l13, l13, l13, z, z], vec![l08, l08, l08, z, z]],
            study_assignment: StudyAssignment::PopulationShares,
            evaluated_model: ModelRegime::MainEffectsOnly,
            nuisance_regime: NuisanceRegime::BothCorrect,
            oracle_draws: 2_000_000,
        }
    }
}

impl<F: Scalar> SimulationConfig<F> {
    /// Number of studies `K`.
    pub fn n_studies(&self) -> usize {
        self.study_log_odds.len() + 1
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0
            || self.selection.linear.len() != self.dim
            || self.selection.quadratic.len() != self.dim
            || self.outcome.linear.len() != self.dim
            || self.outcome.quadratic.len() != self.dim
            || self.study_log_odds.iter().any(|v| v.len() != self.dim)
        {
            return Err(Error::Config(
                "coefficient vectors must match the covariate dimension".to_string(),
            ));
        }
        let rho_ok = self.ar_rho > F::zero() && self.ar_rho < F::one();
        if !rho_ok {
            return Err(Error::Config("ar_rho must lie in (0, 1)".to_string()));
        }
        if self.study_log_odds.is_empty() {
            return Err(Error::Config("need at least two studies".to_string()));
        }
        Ok(())
    }

    /// Basis of the evaluated prediction model.
    pub fn evaluated_basis(&self) -> BasisSpec {
        match self.evaluated_model {
            ModelRegime::Correct => {
                BasisSpec::main_effects(self.dim).with_squares(&self.outcome.active_squares())
            }
            ModelRegime::MainEffectsOnly => BasisSpec::main_effects(self.dim),
        }
    }

    /// Nuisance bases implied by the regime: "wrong" drops the quadratic
    /// terms of the truth and keeps linear main effects only.
    pub fn nuisance_bases(&self) -> (BasisSpec, BasisSpec) {
        let outcome_correct =
            BasisSpec::main_effects(self.dim).with_squares(&self.outcome.active_squares());
        let participation_correct =
            BasisSpec::main_effects(self.dim).with_squares(&self.selection.active_squares());
        let plain = BasisSpec::main_effects(self.dim);
        match self.nuisance_regime {
            NuisanceRegime::BothCorrect => (outcome_correct, participation_correct),
            NuisanceRegime::OutcomeWrong => (plain.clone(), participation_correct),
            NuisanceRegime::ParticipationWrong => (outcome_correct, plain),
            NuisanceRegime::BothWrong => (plain.clone(), plain),
        }
    }

    /// Cholesky factor of the AR(1) covariance, row-major lower triangle.
    fn covariance_cholesky(&self) -> Vec<F> {
        let p = self.dim;
        let mut cov = vec![F::zero(); p * p];
        for i in 0..p {
            for j in 0..p {
                let lag = i.abs_diff(j) as i32;
                cov[i * p + j] = self.ar_rho.powi(lag);
            }
        }
        let mut l = vec![F::zero(); p * p];
        for i in 0..p {
            for j in 0..=i {
                let mut sum = cov[i * p + j];
                for k in 0..j {
                    sum -= l[i * p + k] * l[j * p + k];
                }
                if i == j {
                    l[i * p + i] = sum.sqrt();
                } else {
                    l[i * p + j] = sum / l[j * p + j];
                }
            }
        }
        l
    }
}

/// The evaluated prediction model: a logistic score on a fixed basis.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluatedModel<F> {
    pub basis_dimension: usize,
    pub coefficients: Vec<F>,
    #[serde(skip)]
    pub basis: BasisSpec,
}

impl<F: Scalar> EvaluatedModel<F> {
    pub fn new(basis: BasisSpec, coefficients: Vec<F>) -> Self {
        Self { basis_dimension: basis.dimension(), coefficients, basis }
    }

    /// Predicted probability `h(x)`.
    pub fn score(&self, x: &[F]) -> F {
        let z = self.basis.expand_vec(x);
        let mut lp = F::zero();
        for (zi, b) in z.iter().zip(&self.coefficients) {
            lp += *zi * *b;
        }
        expit(lp)
    }
}

/// One simulated dataset plus the target outcomes the process drew but the
/// dataset withholds (target rows carry no outcome by construction. The
/// shadow column exists for oracle-style checks only and is never visible
/// to estimators).
#[derive(Debug, Clone)]
pub struct SimulatedReplicate<F> {
    pub dataset: AnalysisDataset<F>,
    /// Aligned with `dataset` rows; `Some` exactly on target rows.
    pub withheld_target_outcomes: Vec<Option<bool>>,
}

/// Draw one replicate of size `config.n`. Same config and seed give an
/// identical dataset.
pub fn generate_replicate<F: RandScalar>(
    config: &SimulationConfig<F>,
    seed: u64,
) -> Result<SimulatedReplicate<F>> {
    let mut rng = seed_stream(seed, 0);
    generate_replicate_with(config, &mut rng)
}

/// Like [`generate_replicate`] with a caller-owned RNG stream.
pub fn generate_replicate_with<F: RandScalar, R: Rng>(
    config: &SimulationConfig<F>,
    rng: &mut R,
) -> Result<SimulatedReplicate<F>> {
    config.check()?;
    let chol = config.covariance_cholesky();
    let mut rows = Vec::with_capacity(config.n);
    let mut withheld = Vec::with_capacity(config.n);
    let mut x = vec![F::zero(); config.dim];
    let mut z = vec![F::zero(); config.dim];
    let mut assignment_x = vec![F::zero(); config.dim];
    for _ in 0..config.n {
        draw_covariates(config, &chol, rng, &mut z, &mut x);
        let in_study = F::uniform01(rng) < expit(config.selection.eval(&x));
        let y = F::uniform01(rng) < expit(config.outcome.eval(&x));
        if in_study {
            let study = match config.study_assignment {
                StudyAssignment::RowConditional => draw_study(config, &x, rng),
                StudyAssignment::PopulationShares => {
                    draw_covariates(config, &chol, rng, &mut z, &mut assignment_x);
                    draw_study(config, &assignment_x, rng)
                }
            };
            rows.push(DataRow::study(study, x.clone(), y));
            withheld.push(None);
        } else {
            rows.push(DataRow::target(x.clone()));
            withheld.push(Some(y));
        }
    }
    let dataset = AnalysisDataset::with_default_names(rows)?;
    Ok(SimulatedReplicate { dataset, withheld_target_outcomes: withheld })
}

fn draw_covariates<F: RandScalar, R: Rng>(
    config: &SimulationConfig<F>,
    chol: &[F],
    rng: &mut R,
    z: &mut [F],
    x: &mut [F],
) {
    let p = config.dim;
    for zi in z.iter_mut() {
        *zi = F::standard_normal(rng);
    }
    for i in 0..p {
        let mut acc = F::zero();
        for k in 0..=i {
            acc += chol[i * p + k] * z[k];
        }
        x[i] = acc;
    }
}

/// Multinomial study assignment given study membership: studies
/// `1..K-1` have odds `exp(coef . x)` against reference study `K`.
fn draw_study<F: RandScalar, R: Rng>(
    config: &SimulationConfig<F>,
    x: &[F],
    rng: &mut R,
) -> u32 {
    let mut odds = Vec::with_capacity(config.study_log_odds.len());
    let mut total = F::one();
    for coefs in &config.study_log_odds {
        let mut lp = F::zero();
        for (xi, b) in x.iter().zip(coefs) {
            lp += *b * *xi;
        }
        let o = lp.exp();
        odds.push(o);
        total += o;
    }
    let u = F::uniform01(rng) * total;
    let mut acc = F::zero();
    for (k, o) in odds.iter().enumerate() {
        acc += *o;
        if u < acc {
            return (k + 1) as u32;
        }
    }
    config.n_studies() as u32
}

/// Draw rows from the population conditional on study membership (`r =
/// true`) or target membership (`r = false`), invoking `sink(x, y)` per
/// accepted draw. Sequential and deterministic in the seed.
fn rejection_sample<F: RandScalar>(
    config: &SimulationConfig<F>,
    want_study: bool,
    count: usize,
    seed: u64,
    mut sink: impl FnMut(&[F], bool),
) {
    let chol = config.covariance_cholesky();
    let mut rng = seed_stream(seed, 0);
    let mut x = vec![F::zero(); config.dim];
    let mut z = vec![F::zero(); config.dim];
    let mut accepted = 0usize;
    while accepted < count {
        draw_covariates(config, &chol, &mut rng, &mut z, &mut x);
        let in_study = F::uniform01(&mut rng) < expit(config.selection.eval(&x));
        if in_study != want_study {
            continue;
        }
        let y = F::uniform01(&mut rng) < expit(config.outcome.eval(&x));
        sink(&x, y);
        accepted += 1;
    }
}

/// Numerically estimated asymptotic coefficients of the evaluated model: a
/// logistic regression on the evaluated basis, fit to `oracle_draws`
/// observations from the study population.
pub fn estimate_beta_star<F: RandScalar>(
    config: &SimulationConfig<F>,
    seed: u64,
) -> Result<EvaluatedModel<F>> {
    config.check()?;
    let basis = config.evaluated_basis();
    let mut xs: Vec<F> = Vec::with_capacity(config.oracle_draws * config.dim);
    let mut ys: Vec<bool> = Vec::with_capacity(config.oracle_draws);
    rejection_sample(config, true, config.oracle_draws, seed, |x, y| {
        xs.extend_from_slice(x);
        ys.push(y);
    });
    let fit = fit_logistic(
        (0..ys.len()).map(|i| (&xs[i * config.dim..(i + 1) * config.dim], ys[i], F::one())),
        NuisanceKind::Outcome,
        &basis,
        &FitOptions::default(),
    )?;
    if fit.separated {
        return Err(Error::SeparatedFit);
    }
    Ok(EvaluatedModel::new(basis, fit.coefficients))
}

/// Youden threshold of the evaluated model in the study population,
/// estimated from `oracle_draws` Monte Carlo draws.
pub fn oracle_youden_threshold<F: RandScalar>(
    config: &SimulationConfig<F>,
    model: &EvaluatedModel<F>,
    seed: u64,
) -> Result<F> {
    let mut items: Vec<(F, F, F)> = Vec::with_capacity(config.oracle_draws);
    let mut scores: Vec<F> = Vec::with_capacity(config.oracle_draws);
    rejection_sample(config, true, config.oracle_draws, seed, |x, y| {
        let h = model.score(x);
        scores.push(h);
        items.push((h, if y { F::one() } else { F::zero() }, if y { F::zero() } else { F::one() }));
    });
    Ok(youden_core(items, scores)?.threshold)
}

/// Monte Carlo truth for the six measures in the target population.
#[derive(Debug, Clone, Serialize)]
pub struct OracleTruth<F> {
    pub threshold: F,
    pub values: MetricSet<F>,
    /// Chunked Monte Carlo standard errors of each value.
    pub mc_se: MetricSet<F>,
    pub draws: usize,
    pub model_coefficients: Vec<F>,
}

const ORACLE_CHUNKS: usize = 16;

/// Empirical target-population performance of the model at `threshold`,
/// over `config.oracle_draws` draws with outcomes.
pub fn oracle_truth<F: RandScalar>(
    config: &SimulationConfig<F>,
    model: &EvaluatedModel<F>,
    threshold: F,
    seed: u64,
) -> Result<OracleTruth<F>> {
    let mut draws: Vec<(F, bool)> = Vec::with_capacity(config.oracle_draws);
    rejection_sample(config, false, config.oracle_draws, seed, |x, y| {
        draws.push((model.score(x), y));
    });

    let full = target_metrics(&draws, threshold)?;
    // Chunked replicate values for the Monte Carlo standard error.
    let chunk_len = (draws.len() / ORACLE_CHUNKS).max(1);
    let chunk_values: Vec<MetricSet<F>> = draws
        .chunks(chunk_len)
        .take(ORACLE_CHUNKS)
        .map(|c| target_metrics(c, threshold))
        .collect::<Result<_>>()?;
    let mut mc_se = MetricSet::default();
    let k = cast_usize::<F>(chunk_values.len());
    for metric in MetricId::ALL {
        let mean = chunk_values.iter().map(|m| m.get(metric)).sum::<F>() / k;
        let ss = chunk_values
            .iter()
            .map(|m| {
                let d = m.get(metric) - mean;
                d * d
            })
            .sum::<F>();
        let sd = (ss / (k - F::one())).sqrt();
        mc_se.set(metric, sd / k.sqrt());
    }

    Ok(OracleTruth {
        threshold,
        values: full,
        mc_se,
        draws: draws.len(),
        model_coefficients: model.coefficients.clone(),
    })
}

/// Empirical measures over labelled (score, outcome) draws.
fn target_metrics<F: Scalar>(draws: &[(F, bool)], threshold: F) -> Result<MetricSet<F>> {
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut brier = KahanSum::new();
    for &(h, y) in draws {
        let positive = h > threshold;
        match (y, positive) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
        let yf = if y { F::one() } else { F::zero() };
        brier.add((yf - h) * (yf - h));
    }
    let ratio = |a: usize, b: usize| -> Result<F> {
        if a + b == 0 {
            return Err(Error::ZeroDenominator { context: "oracle metric" });
        }
        Ok(cast_usize::<F>(a) / cast_usize::<F>(a + b))
    };
    let auc_value = mann_whitney_auc(
        draws.iter().filter(|(_, y)| *y).map(|&(h, _)| h),
        draws.iter().filter(|(_, y)| !*y).map(|&(h, _)| h),
    )?;
    Ok(MetricSet {
        sensitivity: ratio(tp, fn_)?,
        specificity: ratio(tn, fp)?,
        ppv: ratio(tp, fp)?,
        npv: ratio(tn, fn_)?,
        risk: brier.total() / cast_usize(draws.len()),
        auc: auc_value,
    })
}

/// One cell of the bias table.
#[derive(Debug, Clone, Serialize)]
pub struct BiasCell<F> {
    pub metric: MetricId,
    pub estimator: EstimatorKind,
    pub mean: F,
    pub bias: F,
    pub rel_bias: F,
    pub sd: F,
}

/// Results of the replicated bias study for one nuisance regime.
#[derive(Debug, Clone, Serialize)]
pub struct BiasStudyResult<F> {
    pub nuisance_regime: NuisanceRegime,
    pub evaluated_model: ModelRegime,
    pub truth: OracleTruth<F>,
    pub cells: Vec<BiasCell<F>>,
    pub replicates_used: usize,
    pub replicates_failed: usize,
    pub failure_reasons: BTreeMap<&'static str, usize>,
}

impl<F: Copy> BiasStudyResult<F> {
    pub fn cell(&self, metric: MetricId, estimator: EstimatorKind) -> &BiasCell<F> {
        self.cells
            .iter()
            .find(|c| c.metric == metric && c.estimator == estimator)
            .expect("all cells are populated")
    }
}

const TAG_BETA: u64 = 1;
const TAG_THRESHOLD: u64 = 2;
const TAG_TRUTH: u64 = 3;

/// One estimator family's six measures, tagged with its kind.
pub type EstimatorEstimates<F> = Vec<(EstimatorKind, MetricSet<F>)>;

/// All four estimators' estimates of all six measures on one dataset whose
/// scores are already attached. The classification threshold is the
/// evaluated model's own cut-point: pass the asymptotic Youden threshold
/// for the replicated study (the cut-point is part of the model under
/// evaluation, like its coefficients), or `None` to re-select it from the
/// dataset's study rows by the empirical Youden rule.
pub fn estimate_all<F: Scalar>(
    ds: &AnalysisDataset<F>,
    outcome_basis: &BasisSpec,
    participation_basis: &BasisSpec,
    threshold: Option<F>,
) -> Result<(EstimatorEstimates<F>, F)> {
    let opts = FitOptions::default();
    let m_fit = fit_outcome_model(ds, outcome_basis, &opts)?;
    let p_fit = fit_participation_model(ds, participation_basis, &opts, false)?;
    if m_fit.separated || p_fit.separated {
        return Err(Error::SeparatedFit);
    }
    let m = m_fit.predict_m_dataset(ds)?;
    let w = p_fit.predict_w_dataset(ds)?;
    let nuis = NuisanceValues::new(&m.values, &w.values);

    let threshold = match threshold {
        Some(c) => c,
        None => {
            metrics::youden_select(ds, nuis, EstimatorKind::Source, WeightMode::Unweighted)?
                .threshold
        }
    };

    let mut out = Vec::with_capacity(EstimatorKind::ALL.len());
    for kind in EstimatorKind::ALL {
        let set = MetricSet {
            sensitivity: metrics::sensitivity(ds, nuis, threshold, kind, WeightMode::Unweighted)?
                .value,
            specificity: metrics::specificity(ds, nuis, threshold, kind, WeightMode::Unweighted)?
                .value,
            ppv: metrics::ppv(ds, nuis, threshold, kind, WeightMode::Unweighted)?.value,
            npv: metrics::npv(ds, nuis, threshold, kind, WeightMode::Unweighted)?.value,
            risk: metrics::risk(ds, nuis, Loss::Brier, kind, WeightMode::Unweighted)?.value,
            auc: auc(ds, nuis, kind, WeightMode::Unweighted, TieRule::Strict)?.value,
        };
        out.push((kind, set));
    }
    Ok((out, threshold))
}

/// Run the full bias study: oracle truth once, then `config.replicates`
/// datasets, each analyzed with every estimator. Replicates that fail
/// (separation, zero denominators) are dropped and counted, up to a 20%
/// budget.
pub fn run_bias_study<F: RandScalar>(config: &SimulationConfig<F>) -> Result<BiasStudyResult<F>> {
    config.check()?;
    let model = estimate_beta_star(config, child_seed(config.seed, TAG_BETA))?;
    let threshold =
        oracle_youden_threshold(config, &model, child_seed(config.seed, TAG_THRESHOLD))?;
    let truth = oracle_truth(config, &model, threshold, child_seed(config.seed, TAG_TRUTH))?;

    let (outcome_basis, participation_basis) = config.nuisance_bases();
    let replicate_results: Vec<Result<EstimatorEstimates<F>>> = (0..config.replicates)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed_stream(config.seed, k as u64);
            let replicate = generate_replicate_with(config, &mut rng)?;
            let ds = replicate.dataset.with_scores(|x| model.score(x))?;
            estimate_all(&ds, &outcome_basis, &participation_basis, Some(threshold))
                .map(|(est, _)| est)
        })
        .collect();

    let mut used: Vec<&EstimatorEstimates<F>> = Vec::new();
    let mut failure_reasons: BTreeMap<&'static str, usize> = BTreeMap::new();
    for r in &replicate_results {
        match r {
            Ok(v) => used.push(v),
            Err(e) => *failure_reasons.entry(e.tag()).or_insert(0) += 1,
        }
    }
    let failed = config.replicates - used.len();
    if cast_usize::<f64>(failed) > 0.2 * cast_usize::<f64>(config.replicates) {
        return Err(Error::TooManyFailures { failed, total: config.replicates });
    }

    let n_used = cast_usize::<F>(used.len());
    let mut cells = Vec::new();
    for (idx, kind) in EstimatorKind::ALL.iter().enumerate() {
        for metric in MetricId::ALL {
            let mut acc = KahanSum::new();
            for rep in &used {
                acc.add(rep[idx].1.get(metric));
            }
            let mean = acc.total() / n_used;
            let mut ss = KahanSum::new();
            for rep in &used {
                let d = rep[idx].1.get(metric) - mean;
                ss.add(d * d);
            }
            let sd = if used.len() > 1 {
                (ss.total() / (n_used - F::one())).sqrt()
            } else {
                F::zero()
            };
            let truth_value = truth.values.get(metric);
            let bias = mean - truth_value;
            cells.push(BiasCell {
                metric,
                estimator: *kind,
                mean,
                bias,
                rel_bias: bias / truth_value,
                sd,
            });
        }
    }

    Ok(BiasStudyResult {
        nuisance_regime: config.nuisance_regime,
        evaluated_model: config.evaluated_model,
        truth,
        cells,
        replicates_used: used.len(),
        replicates_failed: failed,
        failure_reasons,
    })
}
