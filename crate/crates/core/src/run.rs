//! Analysis orchestration: a single JSON-serializable configuration drives
//! data evaluation, the simulation study, tilt scans, and gamma calibration.
//! This layer only composes the estimator modules; it computes no statistics
//! of its own. The CLI crate is a thin wrapper around these entry points.

use crate::auc::{auc, TieRule};
use crate::dataset::AnalysisDataset;
use crate::error::{Error, Result};
use crate::inference::{bootstrap, BootstrapPlan};
use crate::metrics::{
    self, EstimatorKind, Loss, MetricId, NuisanceValues, WeightMode, YoudenResult,
};
use crate::nuisance::{
    fit_outcome_model, fit_participation_model, fit_study_outcome_model, BasisSpec, BasisTerm,
    FitOptions, NuisanceFit,
};
use crate::simulation::{run_bias_study, BiasStudyResult, NuisanceRegime, SimulationConfig};
use crate::tilt::{calibrate_gamma, gamma_scan, inverse_variance_weights, combine_estimates};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;

/// One term of a basis expansion, referencing covariates by column name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub var: String,
    #[serde(default)]
    pub transform: Transform,
    /// Exponent for the `power` transform.
    #[serde(default)]
    pub degree: Option<u32>,
    /// Partner column for the `interaction` transform.
    #[serde(default)]
    pub with: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    Square,
    Power,
    Interaction,
}

/// Resolve named terms against the dataset's covariate columns.
pub fn resolve_basis(terms: &[TermSpec], names: &[String]) -> Result<BasisSpec> {
    let index_of = |var: &str| -> Result<usize> {
        names
            .iter()
            .position(|n| n == var)
            .ok_or_else(|| Error::MissingColumn(var.to_string()))
    };
    let mut resolved = Vec::with_capacity(terms.len());
    for term in terms {
        let j = index_of(&term.var)?;
        resolved.push(match term.transform {
            Transform::Identity => BasisTerm::Linear(j),
            Transform::Square => BasisTerm::Square(j),
            Transform::Power => BasisTerm::Power {
                var: j,
                degree: term.degree.ok_or_else(|| {
                    Error::Config(format!("term {:?} needs a degree", term.var))
                })?,
            },
            Transform::Interaction => {
                let partner = term.with.as_deref().ok_or_else(|| {
                    Error::Config(format!("term {:?} needs a partner column", term.var))
                })?;
                BasisTerm::Interaction(j, index_of(partner)?)
            }
        });
    }
    Ok(BasisSpec::new(resolved, true))
}

/// How the evaluated model's scores are obtained.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Use the `score` column of the data as-is.
    #[default]
    ScoreColumn,
    /// Logistic score `expit(intercept-first coefficients . basis(x))`.
    Logistic { terms: Vec<TermSpec>, coefficients: Vec<f64> },
}

/// Threshold rule for the classification metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    Fixed { c: f64 },
    Youden { estimator: EstimatorKind },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::Youden { estimator: EstimatorKind::OutcomeModel }
    }
}

/// Nuisance-model configuration; omitted bases default to intercept plus
/// linear main effects of every covariate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub outcome_terms: Option<Vec<TermSpec>>,
    pub participation_terms: Option<Vec<TermSpec>>,
    pub clip_epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            outcome_terms: None,
            participation_terms: None,
            clip_epsilon: 1e-6,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

impl NuisanceConfig {
    pub fn fit_options(&self) -> FitOptions<f64> {
        FitOptions { tol: self.tol, max_iter: self.max_iter, clip_epsilon: self.clip_epsilon }
    }
}

/// Tilt sensitivity-analysis configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltConfig {
    /// Gamma grid for `tilt-scan`.
    pub grid: Option<Vec<f64>>,
    /// Known marginal outcome prevalence in the target population, for
    /// `calibrate`.
    pub target_prevalence: Option<f64>,
    /// Bisection bracket override.
    pub bracket: Option<(f64, f64)>,
    /// Studies to analyze; defaults to every study label in the data.
    pub studies: Option<Vec<u32>>,
}

/// Simulation section: the process parameters plus the nuisance regimes to
/// sweep (defaults to the regime named in the process config).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: SimulationConfig<f64>,
    pub regimes: Option<Vec<NuisanceRegime>>,
}

/// Everything a run needs, straight from one JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Input data path; the CLI `--data` flag overrides it.
    pub data: Option<PathBuf>,
    pub model: ModelConfig,
    pub threshold: ThresholdRule,
    pub metrics: Vec<MetricId>,
    pub estimators: Vec<EstimatorKind>,
    /// Loss used by the risk metric.
    pub loss: Option<Loss>,
    pub use_survey_weights: bool,
    pub nuisance: NuisanceConfig,
    pub bootstrap: Option<BootstrapPlan>,
    pub tilt: TiltConfig,
    pub simulation: SimulateConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Stable hash of the canonical config JSON, embedded in every output.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_canonical_json().as_bytes()))
    }

    fn requested_metrics(&self) -> Vec<MetricId> {
        if self.metrics.is_empty() {
            MetricId::ALL.to_vec()
        } else {
            self.metrics.clone()
        }
    }

    fn requested_estimators(&self) -> Vec<EstimatorKind> {
        if self.estimators.is_empty() {
            EstimatorKind::ALL.to_vec()
        } else {
            self.estimators.clone()
        }
    }

    fn weight_mode(&self) -> WeightMode {
        if self.use_survey_weights {
            WeightMode::Survey
        } else {
            WeightMode::Unweighted
        }
    }

    fn loss(&self) -> Loss {
        self.loss.unwrap_or(Loss::Brier)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Run provenance embedded in every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub n_rows: usize,
    pub n_target: usize,
    pub n_studies: u32,
}

impl Provenance {
    fn new(config: &RunConfig, ds: &AnalysisDataset<f64>) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            n_rows: ds.n(),
            n_target: ds.n_target(),
            n_studies: ds.n_studies(),
        }
    }
}

/// Diagnostics block of an evaluation run.
#[derive(Debug, Clone, Serialize)]
pub struct RunDiagnostics {
    /// Clip events in the outcome-model predictions.
    pub outcome_clip_events: usize,
    /// Clip events in the participation-model predictions.
    pub participation_clip_events: usize,
    /// Target rows with participation probability at the lower clip bound.
    pub positivity_flagged_rows: Vec<usize>,
    pub outcome_fit_separated: bool,
    pub participation_fit_separated: bool,
    pub outcome_fit_converged: bool,
    pub participation_fit_converged: bool,
}

/// One (metric, estimator) cell: either an estimate (optionally with
/// bootstrap uncertainty) or an explicit error record.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub metric: MetricId,
    pub estimator: EstimatorKind,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub failed_replicates: Option<usize>,
    pub error: Option<String>,
}

/// Resolved threshold, with selection details when Youden was used.
#[derive(Debug, Clone, Serialize)]
pub struct ThresholdInfo {
    pub rule: ThresholdRule,
    pub value: f64,
    pub youden: Option<YoudenResult<f64>>,
}

/// Full evaluation output: the JSON artifact.
#[derive(Debug, Clone, Serialize)]
pub struct ResultBundle {
    pub provenance: Provenance,
    pub threshold: ThresholdInfo,
    pub cells: Vec<CellResult>,
    pub diagnostics: RunDiagnostics,
}

impl ResultBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    /// Table shaped like the reporting convention for multi-estimator
    /// results: one row per metric, one column per estimator, cells
    /// `estimate (se)`.
    pub fn to_csv(&self) -> String {
        let mut estimators: Vec<EstimatorKind> = Vec::new();
        let mut metrics: Vec<MetricId> = Vec::new();
        for cell in &self.cells {
            if !estimators.contains(&cell.estimator) {
                estimators.push(cell.estimator);
            }
            if !metrics.contains(&cell.metric) {
                metrics.push(cell.metric);
            }
        }
        let mut out = format!("# config_hash={}\n", self.provenance.config_hash);
        out.push_str("metric");
        for e in &estimators {
            let _ = write!(out, ",{e}");
        }
        out.push('\n');
        for m in &metrics {
            let _ = write!(out, "{m}");
            for e in &estimators {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.metric == *m && c.estimator == *e);
                out.push(',');
                match cell {
                    Some(c) => match (&c.estimate, &c.error) {
                        (Some(v), _) => match c.se {
                            Some(se) => {
                                let _ = write!(out, "\"{v:.6} ({se:.6})\"");
                            }
                            None => {
                                let _ = write!(out, "{v:.6}");
                            }
                        },
                        (None, Some(err)) => {
                            let _ = write!(out, "\"error: {err}\"");
                        }
                        (None, None) => out.push_str("\"\""),
                    },
                    None => out.push_str("\"\""),
                }
            }
            out.push('\n');
        }
        out
    }
}

struct FittedNuisances {
    outcome: NuisanceFit<f64>,
    participation: NuisanceFit<f64>,
    m: Vec<f64>,
    w: Vec<f64>,
    m_clips: usize,
    w_clips: usize,
}

fn fit_nuisances(config: &RunConfig, ds: &AnalysisDataset<f64>) -> Result<FittedNuisances> {
    let opts = config.nuisance.fit_options();
    let outcome_basis = match &config.nuisance.outcome_terms {
        Some(terms) => resolve_basis(terms, ds.covariate_names())?,
        None => BasisSpec::main_effects(ds.dim()),
    };
    let participation_basis = match &config.nuisance.participation_terms {
        Some(terms) => resolve_basis(terms, ds.covariate_names())?,
        None => BasisSpec::main_effects(ds.dim()),
    };
    let outcome = fit_outcome_model(ds, &outcome_basis, &opts)?;
    let participation =
        fit_participation_model(ds, &participation_basis, &opts, config.use_survey_weights)?;
    let m = outcome.predict_m_dataset(ds)?;
    let w = participation.predict_w_dataset(ds)?;
    Ok(FittedNuisances {
        outcome,
        participation,
        m_clips: m.clip_events(),
        w_clips: w.clip_events(),
        m: m.values,
        w: w.values,
    })
}

/// Re-evaluate frozen fits on (resampled) data.
fn frozen_values(
    fits: &FittedNuisances,
    ds: &AnalysisDataset<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        fits.outcome.predict_m_dataset(ds)?.values,
        fits.participation.predict_w_dataset(ds)?.values,
    ))
}

fn resolve_threshold(
    config: &RunConfig,
    ds: &AnalysisDataset<f64>,
    nuis: NuisanceValues<'_, f64>,
) -> Result<(f64, Option<YoudenResult<f64>>)> {
    match &config.threshold {
        ThresholdRule::Fixed { c } => Ok((*c, None)),
        ThresholdRule::Youden { estimator } => {
            let sel = metrics::youden_select(ds, nuis, *estimator, config.weight_mode())?;
            Ok((sel.threshold, Some(sel)))
        }
    }
}

fn cell_value(
    ds: &AnalysisDataset<f64>,
    nuis: NuisanceValues<'_, f64>,
    threshold: f64,
    metric: MetricId,
    estimator: EstimatorKind,
    loss: Loss,
    mode: WeightMode,
) -> Result<f64> {
    Ok(match metric {
        MetricId::Sensitivity => {
            metrics::sensitivity(ds, nuis, threshold, estimator, mode)?.value
        }
        MetricId::Specificity => {
            metrics::specificity(ds, nuis, threshold, estimator, mode)?.value
        }
        MetricId::Ppv => metrics::ppv(ds, nuis, threshold, estimator, mode)?.value,
        MetricId::Npv => metrics::npv(ds, nuis, threshold, estimator, mode)?.value,
        MetricId::Risk => metrics::risk(ds, nuis, loss, estimator, mode)?.value,
        MetricId::Auc => auc(ds, nuis, estimator, mode, TieRule::Strict)?.value,
    })
}

/// Attach scores to the dataset per the model config.
pub fn attach_scores(
    config: &RunConfig,
    ds: &AnalysisDataset<f64>,
) -> Result<AnalysisDataset<f64>> {
    match &config.model {
        ModelConfig::ScoreColumn => {
            for i in 0..ds.n() {
                ds.score(i)?;
            }
            Ok(ds.clone())
        }
        ModelConfig::Logistic { terms, coefficients } => {
            let basis = resolve_basis(terms, ds.covariate_names())?;
            if coefficients.len() != basis.dimension() {
                return Err(Error::Config(format!(
                    "{} coefficients for a basis of dimension {}",
                    coefficients.len(),
                    basis.dimension()
                )));
            }
            let coefs = coefficients.clone();
            ds.with_scores(move |x| {
                let z = basis.expand_vec(x);
                crate::scalar::expit(
                    z.iter().zip(&coefs).map(|(a, b)| a * b).sum::<f64>(),
                )
            })
        }
    }
}

/// Point estimation plus optional bootstrap for every requested
/// (metric, estimator) cell. Deterministic given the config and seed.
pub fn run_evaluate(config: &RunConfig, data: &AnalysisDataset<f64>) -> Result<ResultBundle> {
    let ds = attach_scores(config, data)?;
    let fits = fit_nuisances(config, &ds)?;
    let nuis = NuisanceValues::new(&fits.m, &fits.w);
    let mode = config.weight_mode();
    let loss = config.loss();

    let (threshold, youden) = resolve_threshold(config, &ds, nuis)?;

    let requested: Vec<(MetricId, EstimatorKind)> = config
        .requested_metrics()
        .iter()
        .flat_map(|m| config.requested_estimators().iter().map(|e| (*m, *e)).collect::<Vec<_>>())
        .collect();

    // Point estimates, isolating per-cell errors.
    let mut cells: Vec<CellResult> = Vec::with_capacity(requested.len());
    for &(metric, estimator) in &requested {
        match cell_value(&ds, nuis, threshold, metric, estimator, loss, mode) {
            Ok(v) => cells.push(CellResult {
                metric,
                estimator,
                estimate: Some(v),
                se: None,
                ci_lower: None,
                ci_upper: None,
                failed_replicates: None,
                error: None,
            }),
            Err(e) => cells.push(CellResult {
                metric,
                estimator,
                estimate: None,
                se: None,
                ci_lower: None,
                ci_upper: None,
                failed_replicates: None,
                error: Some(e.to_string()),
            }),
        }
    }

    // Bootstrap the cells that produced a point estimate.
    if let Some(plan) = &config.bootstrap {
        if plan.replicates >= 2 {
            let live: Vec<(MetricId, EstimatorKind)> = cells
                .iter()
                .filter(|c| c.estimate.is_some())
                .map(|c| (c.metric, c.estimator))
                .collect();
            let statistic = |sample: &AnalysisDataset<f64>| -> Result<Vec<f64>> {
                let (m, w);
                if plan.refit_nuisances {
                    let refit = fit_nuisances(config, sample)?;
                    if refit.outcome.separated || refit.participation.separated {
                        return Err(Error::SeparatedFit);
                    }
                    m = refit.m;
                    w = refit.w;
                } else {
                    (m, w) = frozen_values(&fits, sample)?;
                }
                let nuis = NuisanceValues::new(&m, &w);
                let (c, _) = resolve_threshold(config, sample, nuis)?;
                live.iter()
                    .map(|&(metric, estimator)| {
                        cell_value(sample, nuis, c, metric, estimator, loss, mode)
                    })
                    .collect()
            };
            let intervals = bootstrap(&ds, plan, statistic)?;
            for (idx, &(metric, estimator)) in live.iter().enumerate() {
                let interval = &intervals[idx];
                let cell = cells
                    .iter_mut()
                    .find(|c| c.metric == metric && c.estimator == estimator)
                    .expect("live cell exists");
                cell.se = Some(interval.se);
                cell.ci_lower = Some(interval.ci_lower);
                cell.ci_upper = Some(interval.ci_upper);
                cell.failed_replicates = Some(interval.replicates_failed);
            }
        }
    }

    let positivity = fits.participation.positivity_warning(&ds)?;
    Ok(ResultBundle {
        provenance: Provenance::new(config, &ds),
        threshold: ThresholdInfo { rule: config.threshold.clone(), value: threshold, youden },
        cells,
        diagnostics: RunDiagnostics {
            outcome_clip_events: fits.m_clips,
            participation_clip_events: fits.w_clips,
            positivity_flagged_rows: positivity.flagged_rows,
            outcome_fit_separated: fits.outcome.separated,
            participation_fit_separated: fits.participation.separated,
            outcome_fit_converged: fits.outcome.converged,
            participation_fit_converged: fits.participation.converged,
        },
    })
}

/// Simulation output across the requested nuisance regimes.
#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub config_hash: String,
    pub runs: Vec<BiasStudyResult<f64>>,
}

impl SimulateOutput {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("output serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str("metric,estimator,regime,truth,mean,bias,rel_bias,sd,failures\n");
        for run in &self.runs {
            for cell in &run.cells {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                    cell.metric,
                    cell.estimator,
                    run.nuisance_regime.as_str(),
                    run.truth.values.get(cell.metric),
                    cell.mean,
                    cell.bias,
                    cell.rel_bias,
                    cell.sd,
                    run.replicates_failed,
                );
            }
        }
        out
    }
}

/// Run the bias study for each requested regime.
pub fn run_simulate(config: &RunConfig) -> Result<SimulateOutput> {
    let base = &config.simulation.dgp;
    let regimes = config
        .simulation
        .regimes
        .clone()
        .unwrap_or_else(|| vec![base.nuisance_regime]);
    let mut runs = Vec::with_capacity(regimes.len());
    for regime in regimes {
        let mut dgp = base.clone();
        dgp.nuisance_regime = regime;
        runs.push(run_bias_study(&dgp)?);
    }
    Ok(SimulateOutput { config_hash: config.hash(), runs })
}

/// One row of a tilt scan.
#[derive(Debug, Clone, Serialize)]
pub struct TiltScanRow {
    pub study: u32,
    pub gamma: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltScanOutput {
    pub config_hash: String,
    pub threshold: f64,
    pub rows: Vec<TiltScanRow>,
}

impl TiltScanOutput {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str("study,gamma,psi_sens\n");
        for row in &self.rows {
            let _ = writeln!(out, "{},{:.10},{:.10}", row.study, row.gamma, row.value);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("output serializes")
    }
}

fn tilt_studies(config: &RunConfig, ds: &AnalysisDataset<f64>) -> Vec<u32> {
    config.tilt.studies.clone().unwrap_or_else(|| ds.study_labels())
}

fn per_study_outcome_probs(
    config: &RunConfig,
    ds: &AnalysisDataset<f64>,
    study: u32,
) -> Result<Vec<f64>> {
    let opts = config.nuisance.fit_options();
    let basis = match &config.nuisance.outcome_terms {
        Some(terms) => resolve_basis(terms, ds.covariate_names())?,
        None => BasisSpec::main_effects(ds.dim()),
    };
    let fit = fit_study_outcome_model(ds, study, &basis, &opts)?;
    Ok(fit.predict_m_dataset(ds)?.values)
}

/// Sensitivity-analysis curve: tilted sensitivity per (study, gamma).
pub fn run_tilt_scan(config: &RunConfig, data: &AnalysisDataset<f64>) -> Result<TiltScanOutput> {
    let grid = config
        .tilt
        .grid
        .clone()
        .ok_or_else(|| Error::Config("tilt-scan needs tilt.grid".to_string()))?;
    let ds = attach_scores(config, data)?;
    let fits = fit_nuisances(config, &ds)?;
    let nuis = NuisanceValues::new(&fits.m, &fits.w);
    let (threshold, _) = resolve_threshold(config, &ds, nuis)?;

    let mut rows = Vec::new();
    for study in tilt_studies(config, &ds) {
        let m_study = per_study_outcome_probs(config, &ds, study)?;
        for est in gamma_scan(&ds, study, &m_study, &grid, threshold)? {
            rows.push(TiltScanRow { study, gamma: est.gamma, value: est.value });
        }
    }
    Ok(TiltScanOutput { config_hash: config.hash(), threshold, rows })
}

/// Per-study calibration result.
#[derive(Debug, Clone, Serialize)]
pub struct CalibratedStudy {
    pub study: u32,
    pub gamma_hat: f64,
    pub residual: f64,
    pub value: f64,
    pub weight: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateOutput {
    pub config_hash: String,
    pub threshold: f64,
    pub target_prevalence: f64,
    pub per_study: Vec<CalibratedStudy>,
    /// Linear combination of the per-study estimates. Weights are inverse
    /// bootstrap variance when a bootstrap plan is configured, else equal;
    /// either way they sum to one. Inverse-variance weighting is not
    /// optimal here (the estimates share the target sample) but is a
    /// serviceable default.
    pub combined: f64,
}

impl CalibrateOutput {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config_hash={}\n", self.config_hash);
        out.push_str("study,gamma_hat,residual,psi_sens,weight,se\n");
        for s in &self.per_study {
            let _ = writeln!(
                out,
                "{},{:.10},{:.3e},{:.10},{:.6},{}",
                s.study,
                s.gamma_hat,
                s.residual,
                s.value,
                s.weight,
                s.se.map_or(String::new(), |v| format!("{v:.6}")),
            );
        }
        let _ = writeln!(out, "combined,,,{:.10},1.000000,", self.combined);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("output serializes")
    }
}

/// Calibrate each study's tilt against a known target prevalence, then
/// combine the per-study sensitivity estimates.
pub fn run_calibrate(config: &RunConfig, data: &AnalysisDataset<f64>) -> Result<CalibrateOutput> {
    let prevalence = config
        .tilt
        .target_prevalence
        .ok_or_else(|| Error::Config("calibrate needs tilt.target_prevalence".to_string()))?;
    let bracket = config.tilt.bracket.unwrap_or((-10.0, 10.0));
    let ds = attach_scores(config, data)?;
    let fits = fit_nuisances(config, &ds)?;
    let nuis = NuisanceValues::new(&fits.m, &fits.w);
    let (threshold, _) = resolve_threshold(config, &ds, nuis)?;

    let studies = tilt_studies(config, &ds);
    let mut values = Vec::with_capacity(studies.len());
    let mut partial: Vec<(u32, f64, f64, f64)> = Vec::with_capacity(studies.len());
    for &study in &studies {
        let m_study = per_study_outcome_probs(config, &ds, study)?;
        let cal = calibrate_gamma(&ds, &m_study, prevalence, bracket, 1e-10)?;
        let est = crate::tilt::tilted_sensitivity(&ds, study, &m_study, cal.gamma, threshold)?;
        values.push(est.value);
        partial.push((study, cal.gamma, cal.residual, est.value));
    }

    // Bootstrap SEs for inverse-variance weights, when a plan is given.
    let ses: Option<Vec<f64>> = match &config.bootstrap {
        Some(plan) if plan.replicates >= 2 => {
            let studies_for_stat = studies.clone();
            let statistic = move |sample: &AnalysisDataset<f64>| -> Result<Vec<f64>> {
                let fits = fit_nuisances(config, sample)?;
                let nuis = NuisanceValues::new(&fits.m, &fits.w);
                let (c, _) = resolve_threshold(config, sample, nuis)?;
                studies_for_stat
                    .iter()
                    .map(|&s| {
                        let m_study = per_study_outcome_probs(config, sample, s)?;
                        let cal = calibrate_gamma(sample, &m_study, prevalence, bracket, 1e-10)?;
                        Ok(crate::tilt::tilted_sensitivity(sample, s, &m_study, cal.gamma, c)?
                            .value)
                    })
                    .collect()
            };
            let intervals = bootstrap(&ds, plan, statistic)?;
            Some(intervals.iter().map(|i| i.se).collect())
        }
        _ => None,
    };

    let weights = match &ses {
        Some(ses) if ses.iter().all(|s| *s > 0.0) => {
            inverse_variance_weights(&ses.iter().map(|s| s * s).collect::<Vec<_>>())?
        }
        _ => vec![1.0 / studies.len() as f64; studies.len()],
    };
    let combined = combine_estimates(&values, &weights)?;

    let per_study = partial
        .into_iter()
        .zip(weights.iter())
        .enumerate()
        .map(|(i, ((study, gamma_hat, residual, value), weight))| CalibratedStudy {
            study,
            gamma_hat,
            residual,
            value,
            weight: *weight,
            se: ses.as_ref().map(|s| s[i]),
        })
        .collect();

    Ok(CalibrateOutput {
        config_hash: config.hash(),
        threshold,
        target_prevalence: prevalence,
        per_study,
        combined,
    })
}
