//! Nuisance models: the outcome regression `m(x) = Pr[Y = 1 | X = x, R = 1]`
//! and the participation regression `p(x) = Pr[R = 1 | X = x]` with its odds
//! transform `w(x) = (1 - p(x)) / p(x)`.
//!
//! Both are weighted logistic regressions on a user-declared basis expansion
//! of the covariates, fit by iteratively reweighted least squares with
//! step-halving. Fitted probabilities are clipped to
//! `[clip_epsilon, 1 - clip_epsilon]` before use; clip events on target rows
//! feed the positivity diagnostic.

use crate::dataset::{AnalysisDataset, PositivityWarning};
use crate::error::{Error, Result};
use crate::scalar::{cast, expit, logit, Scalar};

/// Which conditional probability a fit estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    /// `Pr[Y = 1 | X, R = 1]`, fit on study rows.
    Outcome,
    /// `Pr[R = 1 | X]`, fit on all rows with label `r`.
    Participation,
}

/// One column of the design matrix, as a pure function of the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTerm {
    /// `x[j]`
    Linear(usize),
    /// `x[j]^2`
    Square(usize),
    /// `x[j] * x[k]`
    Interaction(usize, usize),
    /// `x[j]^degree`
    Power { var: usize, degree: u32 },
}

impl BasisTerm {
    fn max_var(&self) -> usize {
        match *self {
            BasisTerm::Linear(j) | BasisTerm::Square(j) => j,
            BasisTerm::Interaction(j, k) => j.max(k),
            BasisTerm::Power { var, .. } => var,
        }
    }

    #[inline]
    fn eval<F: Scalar>(&self, x: &[F]) -> F {
        match *self {
            BasisTerm::Linear(j) => x[j],
            BasisTerm::Square(j) => x[j] * x[j],
            BasisTerm::Interaction(j, k) => x[j] * x[k],
            BasisTerm::Power { var, degree } => x[var].powi(degree as i32),
        }
    }
}

/// Ordered list of basis terms, with or without an intercept column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisSpec {
    pub terms: Vec<BasisTerm>,
    pub include_intercept: bool,
}

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>, include_intercept: bool) -> Self {
        Self { terms, include_intercept }
    }

    pub fn intercept_only() -> Self {
        Self { terms: Vec::new(), include_intercept: true }
    }

    /// Intercept plus linear main effects of all `p` covariates.
    pub fn main_effects(p: usize) -> Self {
        Self { terms: (0..p).map(BasisTerm::Linear).collect(), include_intercept: true }
    }

    /// Append square terms for the given covariates.
    pub fn with_squares(mut self, vars: &[usize]) -> Self {
        self.terms.extend(vars.iter().map(|&j| BasisTerm::Square(j)));
        self
    }

    /// Number of design-matrix columns.
    pub fn dimension(&self) -> usize {
        self.terms.len() + usize::from(self.include_intercept)
    }

    /// Error if any term indexes past the covariate dimension.
    pub fn check_dim(&self, p: usize) -> Result<()> {
        for term in &self.terms {
            if term.max_var() >= p {
                return Err(Error::BasisOutOfRange { index: term.max_var(), dim: p });
            }
        }
        Ok(())
    }

    /// Expand one covariate vector into design-matrix columns.
    pub fn expand<F: Scalar>(&self, x: &[F], out: &mut Vec<F>) {
        out.clear();
        if self.include_intercept {
            out.push(F::one());
        }
        out.extend(self.terms.iter().map(|t| t.eval(x)));
    }

    pub fn expand_vec<F: Scalar>(&self, x: &[F]) -> Vec<F> {
        let mut out = Vec::with_capacity(self.dimension());
        self.expand(x, &mut out);
        out
    }
}

/// IRLS controls.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions<F> {
    /// Convergence tolerance on the deviance change.
    pub tol: F,
    pub max_iter: usize,
    /// Probability clip bound in (0, 0.5).
    pub clip_epsilon: F,
}

impl<F: Scalar> Default for FitOptions<F> {
    fn default() -> Self {
        Self { tol: cast(1e-8), max_iter: 100, clip_epsilon: cast(1e-6) }
    }
}

/// A fitted logistic nuisance model.
#[derive(Debug, Clone)]
pub struct NuisanceFit<F> {
    pub kind: NuisanceKind,
    pub basis: BasisSpec,
    /// Coefficients aligned with the basis columns (intercept first if any).
    pub coefficients: Vec<F>,
    pub converged: bool,
    /// Monotone-likelihood flag: the data separates (or one label is absent)
    /// and the coefficients are on an escape path rather than at an interior
    /// maximum. The fit still predicts, but callers should treat it as a
    /// diagnostic signal; the simulation engine counts and drops such
    /// replicates.
    pub separated: bool,
    /// Final deviance `-2 * log-likelihood` (weighted).
    pub deviance: F,
    pub iterations: usize,
    pub clip_epsilon: F,
}

impl<F: Scalar> NuisanceFit<F> {
    /// Linear predictor for one covariate vector.
    fn linear_predictor(&self, x: &[F]) -> F {
        let mut acc = F::zero();
        let mut idx = 0;
        if self.basis.include_intercept {
            acc = self.coefficients[0];
            idx = 1;
        }
        for term in &self.basis.terms {
            acc += self.coefficients[idx] * term.eval(x);
            idx += 1;
        }
        acc
    }

    /// Fitted probability, clipped to `[eps, 1 - eps]`.
    pub fn predict_proba(&self, x: &[F]) -> F {
        clip(expit(self.linear_predictor(x)), self.clip_epsilon)
    }

    /// Outcome-model prediction `m(x)`; errors if this is not an outcome fit.
    pub fn predict_m(&self, x: &[F]) -> Result<F> {
        if self.kind != NuisanceKind::Outcome {
            return Err(Error::KindMismatch {
                expected: NuisanceKind::Outcome,
                found: self.kind,
            });
        }
        Ok(self.predict_proba(x))
    }

    /// Participation odds `w(x) = (1 - p(x)) / p(x)` with `p` clipped, so the
    /// odds are bounded by `[eps / (1 - eps), (1 - eps) / eps]`.
    pub fn predict_w(&self, x: &[F]) -> Result<F> {
        if self.kind != NuisanceKind::Participation {
            return Err(Error::KindMismatch {
                expected: NuisanceKind::Participation,
                found: self.kind,
            });
        }
        let p = self.predict_proba(x);
        Ok((F::one() - p) / p)
    }

    /// `m(x_i)` for every dataset row, with clip bookkeeping.
    pub fn predict_m_dataset(&self, ds: &AnalysisDataset<F>) -> Result<Predictions<F>> {
        if self.kind != NuisanceKind::Outcome {
            return Err(Error::KindMismatch {
                expected: NuisanceKind::Outcome,
                found: self.kind,
            });
        }
        Ok(self.predict_rows(ds, |p, _| p))
    }

    /// `w(x_i)` for every dataset row, with clip bookkeeping.
    pub fn predict_w_dataset(&self, ds: &AnalysisDataset<F>) -> Result<Predictions<F>> {
        if self.kind != NuisanceKind::Participation {
            return Err(Error::KindMismatch {
                expected: NuisanceKind::Participation,
                found: self.kind,
            });
        }
        Ok(self.predict_rows(ds, |p, one| (one - p) / p))
    }

    fn predict_rows(
        &self,
        ds: &AnalysisDataset<F>,
        transform: impl Fn(F, F) -> F,
    ) -> Predictions<F> {
        let eps = self.clip_epsilon;
        let mut values = Vec::with_capacity(ds.n());
        let mut clipped_low = Vec::new();
        let mut clipped_high = Vec::new();
        for (i, row) in ds.rows().iter().enumerate() {
            let raw = expit(self.linear_predictor(&row.x));
            if raw < eps {
                clipped_low.push(i);
            } else if raw > F::one() - eps {
                clipped_high.push(i);
            }
            values.push(transform(clip(raw, eps), F::one()));
        }
        Predictions { values, clipped_low, clipped_high }
    }

    /// Positivity diagnostic for a participation fit: target rows whose
    /// fitted participation probability sits at the lower clip bound.
    pub fn positivity_warning(&self, ds: &AnalysisDataset<F>) -> Result<PositivityWarning> {
        if self.kind != NuisanceKind::Participation {
            return Err(Error::KindMismatch {
                expected: NuisanceKind::Participation,
                found: self.kind,
            });
        }
        let eps = self.clip_epsilon;
        let flagged_rows = ds
            .rows()
            .iter()
            .enumerate()
            .filter(|(_, row)| {
                !row.r() && expit(self.linear_predictor(&row.x)) <= eps
            })
            .map(|(i, _)| i)
            .collect();
        Ok(PositivityWarning {
            clip_epsilon: eps.to_f64().unwrap_or(f64::NAN),
            flagged_rows,
        })
    }
}

/// Per-row predictions plus the rows whose raw probability was clipped.
#[derive(Debug, Clone)]
pub struct Predictions<F> {
    pub values: Vec<F>,
    pub clipped_low: Vec<usize>,
    pub clipped_high: Vec<usize>,
}

impl<F> Predictions<F> {
    pub fn clip_events(&self) -> usize {
        self.clipped_low.len() + self.clipped_high.len()
    }
}

#[inline]
fn clip<F: Scalar>(p: F, eps: F) -> F {
    p.max(eps).min(F::one() - eps)
}

/// Weighted logistic regression by IRLS with step-halving.
///
/// `rows` yields `(covariates, label, weight)`. Coefficients maximize the
/// weighted Bernoulli log-likelihood on the basis-expanded design;
/// `converged` is true iff the deviance change dropped below `opts.tol`
/// within `opts.max_iter` iterations. Separation is returned as a flagged
/// fit, not an error; exact collinearity of the design is
/// [`Error::RankDeficient`].
pub fn fit_logistic<'a, F, I>(
    rows: I,
    kind: NuisanceKind,
    basis: &BasisSpec,
    opts: &FitOptions<F>,
) -> Result<NuisanceFit<F>>
where
    F: Scalar,
    I: IntoIterator<Item = (&'a [F], bool, F)>,
{
    let q = basis.dimension();
    let mut design: Vec<F> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut weights: Vec<F> = Vec::new();
    let mut expanded = Vec::with_capacity(q);
    for (x, label, weight) in rows {
        basis.expand(x, &mut expanded);
        design.extend_from_slice(&expanded);
        labels.push(label);
        weights.push(weight);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyFit);
    }

    let n_pos = labels.iter().filter(|&&t| t).count();
    if n_pos == 0 || n_pos == n {
        // Monotone likelihood with certainty: place the intercept at the
        // clipped extreme and flag the fit.
        let mut coefficients = vec![F::zero(); q];
        if basis.include_intercept {
            let extreme = if n_pos == n {
                logit(F::one() - opts.clip_epsilon)
            } else {
                logit(opts.clip_epsilon)
            };
            coefficients[0] = extreme;
        }
        let deviance = deviance_at(&design, &labels, &weights, &coefficients, q);
        return Ok(NuisanceFit {
            kind,
            basis: basis.clone(),
            coefficients,
            converged: false,
            separated: true,
            deviance,
            iterations: 0,
            clip_epsilon: opts.clip_epsilon,
        });
    }

    let mut beta = vec![F::zero(); q];
    let mut deviance = deviance_at(&design, &labels, &weights, &beta, q);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    let mut gradient = vec![F::zero(); q];
    let mut hessian = vec![F::zero(); q * q];
    let mut delta = vec![F::zero(); q];
    let mut candidate = vec![F::zero(); q];

    while iterations < opts.max_iter {
        iterations += 1;

        // Score and expected information at the current coefficients.
        for g in gradient.iter_mut() {
            *g = F::zero();
        }
        for h in hessian.iter_mut() {
            *h = F::zero();
        }
        for i in 0..n {
            let z = &design[i * q..(i + 1) * q];
            let mu = expit(dot(z, &beta));
            let t = if labels[i] { F::one() } else { F::zero() };
            let w_row = weights[i];
            let resid = w_row * (t - mu);
            // Guard the working weight away from exact zero so the
            // information stays positive definite up to true collinearity.
            let info = (w_row * mu * (F::one() - mu)).max(cast(1e-300));
            for a in 0..q {
                gradient[a] += resid * z[a];
                let za_info = info * z[a];
                for b in a..q {
                    hessian[a * q + b] += za_info * z[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hessian[a * q + b] = hessian[b * q + a];
            }
        }

        delta.copy_from_slice(&gradient);
        cholesky_solve_in_place(&mut hessian, &mut delta, q)?;

        // Step-halving keeps the deviance non-increasing.
        let mut step = F::one();
        let mut accepted = false;
        for _ in 0..40 {
            for a in 0..q {
                candidate[a] = beta[a] + step * delta[a];
            }
            let cand_dev = deviance_at(&design, &labels, &weights, &candidate, q);
            if cand_dev <= deviance + cast(1e-10) {
                let change = deviance - cand_dev;
                beta.copy_from_slice(&candidate);
                deviance = cand_dev;
                accepted = true;
                if change < opts.tol {
                    converged = true;
                }
                break;
            }
            step /= F::one() + F::one();
        }
        if !accepted {
            // No descent direction left; the likelihood is locally flat.
            converged = true;
        }

        // Separation checks: runaway coefficients, or the fitted
        // probabilities of one label's rows all pinned at a clip bound.
        let runaway = beta.iter().any(|b| b.abs() > cast(30.0));
        if runaway || pinned_label(&design, &labels, &beta, q, opts.clip_epsilon) {
            separated = true;
            converged = false;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(NuisanceFit {
        kind,
        basis: basis.clone(),
        coefficients: beta,
        converged,
        separated,
        deviance,
        iterations,
        clip_epsilon: opts.clip_epsilon,
    })
}

/// Outcome model `m`: fit on study rows with label `y`, unit weight.
pub fn fit_outcome_model<F: Scalar>(
    ds: &AnalysisDataset<F>,
    basis: &BasisSpec,
    opts: &FitOptions<F>,
) -> Result<NuisanceFit<F>> {
    basis.check_dim(ds.dim())?;
    fit_logistic(
        ds.rows()
            .iter()
            .filter(|row| row.r())
            .map(|row| (row.x.as_slice(), row.y == Some(true), F::one())),
        NuisanceKind::Outcome,
        basis,
        opts,
    )
}

/// Per-study outcome model `m_s`: fit on rows of one study only.
pub fn fit_study_outcome_model<F: Scalar>(
    ds: &AnalysisDataset<F>,
    study: u32,
    basis: &BasisSpec,
    opts: &FitOptions<F>,
) -> Result<NuisanceFit<F>> {
    basis.check_dim(ds.dim())?;
    fit_logistic(
        ds.rows()
            .iter()
            .filter(|row| row.source == study)
            .map(|row| (row.x.as_slice(), row.y == Some(true), F::one())),
        NuisanceKind::Outcome,
        basis,
        opts,
    )
}

/// Participation model `p`: fit on all rows with label `r`. When
/// `survey_weighted` is set, rows contribute with their survey weight, which
/// is how the odds estimator absorbs a weighted target sample.
pub fn fit_participation_model<F: Scalar>(
    ds: &AnalysisDataset<F>,
    basis: &BasisSpec,
    opts: &FitOptions<F>,
    survey_weighted: bool,
) -> Result<NuisanceFit<F>> {
    basis.check_dim(ds.dim())?;
    fit_logistic(
        ds.rows().iter().map(|row| {
            let w = if survey_weighted { row.weight } else { F::one() };
            (row.x.as_slice(), row.r(), w)
        }),
        NuisanceKind::Participation,
        basis,
        opts,
    )
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn deviance_at<F: Scalar>(
    design: &[F],
    labels: &[bool],
    weights: &[F],
    beta: &[F],
    q: usize,
) -> F {
    let floor: F = cast(1e-300);
    let two: F = cast(2.0);
    let mut dev = F::zero();
    for i in 0..labels.len() {
        let mu = expit(dot(&design[i * q..(i + 1) * q], beta));
        let ll = if labels[i] { mu.max(floor).ln() } else { (F::one() - mu).max(floor).ln() };
        dev -= two * weights[i] * ll;
    }
    dev
}

fn pinned_label<F: Scalar>(
    design: &[F],
    labels: &[bool],
    beta: &[F],
    q: usize,
    eps: F,
) -> bool {
    let mut all_pos_high = true;
    let mut all_neg_low = true;
    for i in 0..labels.len() {
        let mu = expit(dot(&design[i * q..(i + 1) * q], beta));
        if labels[i] {
            if mu < F::one() - eps {
                all_pos_high = false;
            }
        } else if mu > eps {
            all_neg_low = false;
        }
        if !all_pos_high && !all_neg_low {
            return false;
        }
    }
    all_pos_high || all_neg_low
}

/// Solve `H x = b` in place for symmetric positive-definite `H` (row-major,
/// `q x q`). `b` holds the solution on return. A non-positive pivot relative
/// to the largest diagonal entry reports the offending column.
fn cholesky_solve_in_place<F: Scalar>(h: &mut [F], b: &mut [F], q: usize) -> Result<()> {
    let max_diag = (0..q)
        .map(|a| h[a * q + a])
        .fold(F::zero(), |acc, v| acc.max(v.abs()));
    let pivot_floor = max_diag * cast(1e-12);

    // In-place lower Cholesky factor.
    for a in 0..q {
        for b_col in 0..=a {
            let mut sum = h[a * q + b_col];
            for k in 0..b_col {
                sum -= h[a * q + k] * h[b_col * q + k];
            }
            if a == b_col {
                if sum <= pivot_floor {
                    return Err(Error::RankDeficient { column: a });
                }
                h[a * q + a] = sum.sqrt();
            } else {
                h[a * q + b_col] = sum / h[b_col * q + b_col];
            }
        }
    }
    // Forward then backward substitution.
    for a in 0..q {
        let mut sum = b[a];
        for k in 0..a {
            sum -= h[a * q + k] * b[k];
        }
        b[a] = sum / h[a * q + a];
    }
    for a in (0..q).rev() {
        let mut sum = b[a];
        for k in (a + 1)..q {
            sum -= h[k * q + a] * b[k];
        }
        b[a] = sum / h[a * q + a];
    }
    Ok(())
}
