//! The combined multi-study and target-sample dataset.
//!
//! Rows carry a source label `s`: `s = 0` marks the target sample (covariates
//! only, no outcome) and `s = 1..=K` marks the study an observation came from
//! (covariates plus a binary outcome). The derived indicator `r = (s != 0)`
//! flags membership in any study. Every estimator in the crate consumes this
//! type; it is immutable once constructed, so shared concurrent reads are
//! safe.
//!
//! Validation is complete-case: rows with missing or non-finite covariates
//! are rejected, never imputed. An outcome on a target row is an error rather
//! than silently ignored, which guards against label leakage from the target
//! sample into the estimators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// One observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRow<F> {
    /// Covariate vector, length `p`.
    pub x: Vec<F>,
    /// Source label: 0 = target sample, 1..=K = study id.
    pub source: u32,
    /// Binary outcome; present exactly on study rows.
    pub y: Option<bool>,
    /// Survey sampling weight, strictly positive. Defaults to 1.
    pub weight: F,
    /// Prediction-model score for this row, when already computed.
    pub score: Option<F>,
    /// Primary-sampling-unit label (survey designs).
    pub psu: Option<String>,
    /// Secondary-sampling-unit label (survey designs).
    pub ssu: Option<String>,
}

impl<F: Scalar> DataRow<F> {
    /// A target-sample row (covariates only).
    pub fn target(x: Vec<F>) -> Self {
        Self { x, source: 0, y: None, weight: F::one(), score: None, psu: None, ssu: None }
    }

    /// A study row with its observed outcome.
    pub fn study(source: u32, x: Vec<F>, y: bool) -> Self {
        debug_assert!(source >= 1);
        Self { x, source, y: Some(y), weight: F::one(), score: None, psu: None, ssu: None }
    }

    pub fn with_score(mut self, score: F) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_weight(mut self, weight: F) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_psu(mut self, psu: &str) -> Self {
        self.psu = Some(psu.to_string());
        self
    }

    pub fn with_ssu(mut self, ssu: &str) -> Self {
        self.ssu = Some(ssu.to_string());
        self
    }

    /// Study-membership indicator `r = I(s != 0)`.
    #[inline]
    pub fn r(&self) -> bool {
        self.source != 0
    }

    /// Outcome as a scalar (study rows only).
    #[inline]
    pub fn y_scalar(&self) -> F {
        match self.y {
            Some(true) => F::one(),
            _ => F::zero(),
        }
    }
}

/// Validated, immutable dataset combining the study samples and the target
/// sample. Row order is preserved end to end so results are reproducible
/// given a seed.
#[derive(Debug, Clone)]
pub struct AnalysisDataset<F> {
    rows: Vec<DataRow<F>>,
    n_studies: u32,
    covariate_names: Vec<String>,
}

impl<F: Scalar> AnalysisDataset<F> {
    /// Validates and wraps the rows. Returns the first invariant violation.
    pub fn new(rows: Vec<DataRow<F>>, covariate_names: Vec<String>) -> Result<Self> {
        let report = ValidationReport::for_rows(&rows, covariate_names.len());
        if let Some(violation) = report.violations.first() {
            return Err(violation.clone());
        }
        let n_studies = rows.iter().map(|r| r.source).max().unwrap_or(0);
        Ok(Self { rows, n_studies, covariate_names })
    }

    /// Like [`AnalysisDataset::new`] with generated covariate names `x1..xp`.
    pub fn with_default_names(rows: Vec<DataRow<F>>) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.x.len());
        Self::new(rows, default_covariate_names(p))
    }

    pub fn rows(&self) -> &[DataRow<F>] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Number of target-sample rows (`s = 0`).
    pub fn n_target(&self) -> usize {
        self.rows.iter().filter(|r| !r.r()).count()
    }

    /// Number of study rows (`s >= 1`).
    pub fn n_study(&self) -> usize {
        self.rows.iter().filter(|r| r.r()).count()
    }

    /// Largest study label `K`.
    pub fn n_studies(&self) -> u32 {
        self.n_studies
    }

    /// Study labels present in the data, ascending.
    pub fn study_labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> =
            self.rows.iter().filter(|r| r.r()).map(|r| r.source).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Covariate dimension `p`.
    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    /// Study-membership indicator per row: `r_i = I(s_i != 0)`.
    pub fn derive_r(&self) -> Vec<bool> {
        self.rows.iter().map(DataRow::r).collect()
    }

    /// Non-copying, order-preserving view of rows matching a predicate.
    pub fn subset<P>(&self, predicate: P) -> DatasetView<'_, F>
    where
        P: Fn(&DataRow<F>) -> bool,
    {
        let indices =
            (0..self.rows.len()).filter(|&i| predicate(&self.rows[i])).collect();
        DatasetView { dataset: self, indices }
    }

    /// Diagnostic re-validation of an already-constructed dataset.
    pub fn validate(&self) -> ValidationReport {
        ValidationReport::for_rows(&self.rows, self.covariate_names.len())
    }

    /// Copy of the dataset with scores computed from the covariates.
    pub fn with_scores<G: Fn(&[F]) -> F>(&self, model: G) -> Result<Self> {
        let mut rows = self.rows.clone();
        for (i, row) in rows.iter_mut().enumerate() {
            let s = model(&row.x);
            if !s.is_finite() {
                return Err(Error::NonFiniteScore { row: i });
            }
            row.score = Some(s);
        }
        Ok(Self {
            rows,
            n_studies: self.n_studies,
            covariate_names: self.covariate_names.clone(),
        })
    }

    /// Score of row `i`, or the error naming the row.
    #[inline]
    pub fn score(&self, i: usize) -> Result<F> {
        self.rows[i].score.ok_or(Error::MissingScore { row: i })
    }

    /// Materialize a resample of the dataset given row indices into `self`.
    /// Indices come from the bootstrap layer, which preserves the invariants
    /// (at least one target and one study row), so this skips re-validation.
    pub(crate) fn resample(&self, indices: &[usize]) -> Self {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Self {
            rows,
            n_studies: self.n_studies,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

pub fn default_covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Borrowed, index-based view over a dataset; composes with further subsets.
#[derive(Debug, Clone)]
pub struct DatasetView<'a, F> {
    dataset: &'a AnalysisDataset<F>,
    indices: Vec<usize>,
}

impl<'a, F: Scalar> DatasetView<'a, F> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Row indices into the underlying dataset, in original order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &'a DataRow<F>)> + '_ {
        self.indices.iter().map(move |&i| (i, &self.dataset.rows[i]))
    }

    /// Narrow the view further; equivalent to filtering on the conjunction.
    pub fn subset<P>(&self, predicate: P) -> DatasetView<'a, F>
    where
        P: Fn(&DataRow<F>) -> bool,
    {
        let indices = self
            .indices
            .iter()
            .copied()
            .filter(|&i| predicate(&self.dataset.rows[i]))
            .collect();
        DatasetView { dataset: self.dataset, indices }
    }
}

/// Outcome of validating candidate rows: pass/fail plus per-invariant counts.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub n_rows: usize,
    /// Target-sample size `n_0`.
    pub n_target: usize,
    /// Row counts per source label.
    pub source_counts: BTreeMap<u32, usize>,
    /// Every violation found, in row order where applicable.
    pub violations: Vec<Error>,
    /// Violation counts keyed by [`Error::tag`].
    pub violation_counts: BTreeMap<&'static str, usize>,
    /// Positivity diagnostic, attached after the participation model is fit.
    pub positivity: Option<PositivityWarning>,
}

/// Target rows whose estimated participation probability was clipped from
/// below. Positivity itself is untestable; near-zero fitted probabilities
/// are the observable symptom.
#[derive(Debug, Clone)]
pub struct PositivityWarning {
    pub clip_epsilon: f64,
    /// Indices of target rows with fitted participation probability at or
    /// below the clip threshold.
    pub flagged_rows: Vec<usize>,
}

impl ValidationReport {
    pub fn for_rows<F: Scalar>(rows: &[DataRow<F>], p: usize) -> Self {
        let mut violations = Vec::new();
        let mut source_counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut n_target = 0usize;

        for (i, row) in rows.iter().enumerate() {
            *source_counts.entry(row.source).or_insert(0) += 1;
            if row.source == 0 {
                n_target += 1;
                if row.y.is_some() {
                    violations.push(Error::OutcomeOnTarget { row: i });
                }
            } else if row.y.is_none() {
                violations.push(Error::MissingOutcome { row: i });
            }
            if row.x.len() != p {
                violations.push(Error::CovariateLength {
                    row: i,
                    expected: p,
                    found: row.x.len(),
                });
            }
            for (j, v) in row.x.iter().enumerate() {
                if !v.is_finite() {
                    violations.push(Error::NonFiniteCovariate { row: i, column: j });
                }
            }
            if !(row.weight.is_finite() && row.weight > F::zero()) {
                violations.push(Error::InvalidWeight { row: i });
            }
            if let Some(s) = row.score {
                if !s.is_finite() {
                    violations.push(Error::NonFiniteScore { row: i });
                }
            }
        }

        if n_target == 0 {
            violations.push(Error::EmptyTarget);
        }
        if n_target == rows.len() {
            violations.push(Error::EmptyStudies);
        }

        // psu/ssu labels, when used at all, must cover every target row so
        // the stratified bootstrap can resample the design.
        let target = || rows.iter().filter(|r| r.source == 0);
        let any_psu = target().any(|r| r.psu.is_some());
        let any_ssu = target().any(|r| r.ssu.is_some());
        if (any_psu && !target().all(|r| r.psu.is_some()))
            || (any_ssu && !target().all(|r| r.ssu.is_some() && r.psu.is_some()))
        {
            violations.push(Error::MissingPsuLabels);
        }

        let mut violation_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        for v in &violations {
            *violation_counts.entry(v.tag()).or_insert(0) += 1;
        }

        ValidationReport {
            n_rows: rows.len(),
            n_target,
            source_counts,
            violations,
            violation_counts,
            positivity: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn with_positivity(mut self, warning: PositivityWarning) -> Self {
        self.positivity = Some(warning);
        self
    }
}

/// CSV loading.
///
/// Header row required. Recognized columns: `source` (integer >= 0), `y`
/// (0/1 or empty), `weight` (positive real or empty, defaults to 1), `score`
/// (real or empty), `psu`, `ssu` (free-form labels or empty). Every other
/// column is a covariate, in header order. UTF-8, `.` decimal separator.
impl<F: Scalar> AnalysisDataset<F> {
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(e.to_string()))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Io(e.to_string()))?.clone();

        let mut source_col = None;
        let mut y_col = None;
        let mut weight_col = None;
        let mut score_col = None;
        let mut psu_col = None;
        let mut ssu_col = None;
        let mut covariate_cols: Vec<(usize, String)> = Vec::new();
        for (j, name) in headers.iter().enumerate() {
            match name {
                "source" => source_col = Some(j),
                "y" => y_col = Some(j),
                "weight" => weight_col = Some(j),
                "score" => score_col = Some(j),
                "psu" => psu_col = Some(j),
                "ssu" => ssu_col = Some(j),
                _ => covariate_cols.push((j, name.to_string())),
            }
        }
        let source_col =
            source_col.ok_or_else(|| Error::MissingColumn("source".to_string()))?;
        if covariate_cols.is_empty() {
            return Err(Error::Config("no covariate columns in header".to_string()));
        }

        let field = |record: &csv::StringRecord, j: usize| -> String {
            record.get(j).unwrap_or("").to_string()
        };
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Io(e.to_string()))?;
            let invalid = |column: &str, value: &str| Error::InvalidField {
                row: i,
                column: column.to_string(),
                value: value.to_string(),
            };

            let source_raw = field(&record, source_col);
            let source: u32 =
                source_raw.parse().map_err(|_| invalid("source", &source_raw))?;

            let y = match y_col.map(|j| field(&record, j)) {
                None => None,
                Some(s) if s.is_empty() => None,
                Some(s) => match s.as_str() {
                    "0" => Some(false),
                    "1" => Some(true),
                    _ => return Err(invalid("y", &s)),
                },
            };

            let weight = match weight_col.map(|j| field(&record, j)) {
                None => F::one(),
                Some(s) if s.is_empty() => F::one(),
                Some(s) => parse_scalar(&s).ok_or_else(|| invalid("weight", &s))?,
            };

            let score = match score_col.map(|j| field(&record, j)) {
                None => None,
                Some(s) if s.is_empty() => None,
                Some(s) => Some(parse_scalar(&s).ok_or_else(|| invalid("score", &s))?),
            };

            let opt_label = |col: Option<usize>| {
                col.map(|j| field(&record, j)).filter(|s| !s.is_empty())
            };

            let mut x = Vec::with_capacity(covariate_cols.len());
            for (j, name) in &covariate_cols {
                let raw = field(&record, *j);
                x.push(parse_scalar(&raw).ok_or_else(|| invalid(name, &raw))?);
            }

            rows.push(DataRow {
                x,
                source,
                y,
                weight,
                score,
                psu: opt_label(psu_col),
                ssu: opt_label(ssu_col),
            });
        }

        let names = covariate_cols.into_iter().map(|(_, name)| name).collect();
        Self::new(rows, names)
    }
}

fn parse_scalar<F: Scalar>(s: &str) -> Option<F> {
    s.parse::<f64>().ok().and_then(|v| F::from_f64(v))
}
