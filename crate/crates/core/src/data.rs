//! Strata, stratified datasets and their CSV form.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Target-population function `h(e)` of the propensity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HFunction {
    /// Combined population, `h = 1`.
    #[default]
    One,
    /// Treated population, `h = e`.
    Treated,
    /// Control population, `h = 1 - e`.
    Control,
    /// Overlap population, `h = e (1 - e)`.
    Overlap,
}

impl HFunction {
    pub const ALL: [HFunction; 4] = [
        HFunction::One,
        HFunction::Treated,
        HFunction::Control,
        HFunction::Overlap,
    ];

    pub fn value(self, e: f64) -> f64 {
        match self {
            HFunction::One => 1.0,
            HFunction::Treated => e,
            HFunction::Control => 1.0 - e,
            HFunction::Overlap => e * (1.0 - e),
        }
    }

    pub fn derivative(self, e: f64) -> f64 {
        match self {
            HFunction::One => 0.0,
            HFunction::Treated => 1.0,
            HFunction::Control => -1.0,
            HFunction::Overlap => 1.0 - 2.0 * e,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HFunction::One => "one",
            HFunction::Treated => "treated",
            HFunction::Control => "control",
            HFunction::Overlap => "overlap",
        }
    }
}

impl fmt::Display for HFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one" | "1" => Ok(HFunction::One),
            "treated" | "e" => Ok(HFunction::Treated),
            "control" => Ok(HFunction::Control),
            "overlap" => Ok(HFunction::Overlap),
            other => Err(Error::InvalidArgument(format!(
                "unknown h-function '{other}' (expected one, treated, control, overlap)"
            ))),
        }
    }
}

/// One stratum: outcomes, binary treatment and a covariate matrix whose first
/// column is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    id: String,
    outcomes: Vec<f64>,
    treatment: Vec<bool>,
    covariates: Matrix,
}

/// Row indices of the treated and control subjects of a stratum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSplit {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
}

impl Stratum {
    /// `covariates` must already contain the intercept column.
    pub fn new(
        id: impl Into<String>,
        outcomes: Vec<f64>,
        treatment: Vec<bool>,
        covariates: Matrix,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |msg: String| Error::Validation {
            stratum: id.clone(),
            msg,
        };
        let n = outcomes.len();
        if treatment.len() != n || covariates.rows() != n {
            return Err(invalid(format!(
                "row counts differ (outcomes {n}, treatment {}, covariates {})",
                treatment.len(),
                covariates.rows()
            )));
        }
        if n < 4 {
            return Err(invalid(format!("needs at least 4 subjects, has {n}")));
        }
        let n_t = treatment.iter().filter(|&&t| t).count();
        if n_t < 2 || n - n_t < 2 {
            return Err(invalid(format!(
                "needs at least 2 treated and 2 control subjects, has {n_t} treated and {} control",
                n - n_t
            )));
        }
        if covariates.cols() == 0 || (0..n).any(|i| covariates[(i, 0)] != 1.0) {
            return Err(invalid("first covariate column must be the constant 1".into()));
        }
        if outcomes.iter().chain(covariates.as_slice()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite value".into()));
        }
        Ok(Stratum {
            id,
            outcomes,
            treatment,
            covariates,
        })
    }

    /// Prepend the intercept column to `raw` (n × k, k may be 0).
    pub fn with_intercept(
        id: impl Into<String>,
        outcomes: Vec<f64>,
        treatment: Vec<bool>,
        raw: &Matrix,
    ) -> Result<Self> {
        let n = raw.rows();
        let d = raw.cols() + 1;
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let row = x.row_mut(i);
            row[0] = 1.0;
            row[1..].copy_from_slice(raw.row(i));
        }
        Stratum::new(id, outcomes, treatment, x)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    /// Number of covariates including the intercept.
    pub fn dim(&self) -> usize {
        self.covariates.cols()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }

    /// Subjects at `keep` (original order), revalidated.
    pub fn subset(&self, keep: &[usize]) -> Result<Stratum> {
        Stratum::new(
            self.id.clone(),
            keep.iter().map(|&i| self.outcomes[i]).collect(),
            keep.iter().map(|&i| self.treatment[i]).collect(),
            self.covariates.select_rows(keep),
        )
    }

    /// Same subjects with a different covariate matrix (intercept included).
    pub fn with_covariates(&self, covariates: Matrix) -> Result<Stratum> {
        Stratum::new(self.id.clone(), self.outcomes.clone(), self.treatment.clone(), covariates)
    }
}

/// Treated and control row indices, each in original row order.
pub fn split_groups(s: &Stratum) -> GroupSplit {
    let (treated, control) = (0..s.len()).partition(|&i| s.treatment[i]);
    GroupSplit { treated, control }
}

/// `S ≥ 2` independent strata with unique labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedDataset {
    strata: Vec<Stratum>,
    covariate_names: Vec<String>,
}

impl StratifiedDataset {
    pub fn new(strata: Vec<Stratum>, covariate_names: Vec<String>) -> Result<Self> {
        if strata.len() < 2 {
            return Err(Error::Dataset(format!(
                "S >= 2 strata required for testing, found {}",
                strata.len()
            )));
        }
        let mut seen = HashMap::new();
        for s in &strata {
            if seen.insert(s.id.clone(), ()).is_some() {
                return Err(Error::Dataset(format!("duplicate stratum id '{}'", s.id)));
            }
        }
        let d = strata[0].dim();
        if strata.iter().any(|s| s.dim() != d) {
            return Err(Error::Dataset("strata have different covariate counts".into()));
        }
        if covariate_names.len() + 1 != d {
            return Err(Error::Dataset(format!(
                "{} covariate names for {} non-intercept columns",
                covariate_names.len(),
                d - 1
            )));
        }
        Ok(StratifiedDataset {
            strata,
            covariate_names,
        })
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn total_n(&self) -> usize {
        self.strata.iter().map(Stratum::len).sum()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// `(n_s^t / N, n_s^c / N)` for stratum `s`.
    pub fn lambda_hat(&self, s: usize) -> (f64, f64) {
        let n = self.total_n() as f64;
        let st = &self.strata[s];
        (st.n_treated() as f64 / n, st.n_control() as f64 / n)
    }

    /// Keep only the intercept and the covariates at `columns` (indices into
    /// [`covariate_names`](Self::covariate_names)).
    pub fn select_covariates(&self, columns: &[usize]) -> Result<StratifiedDataset> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.covariate_names.len()) {
            return Err(Error::InvalidArgument(format!("covariate index {bad} out of range")));
        }
        let mut keep = vec![0];
        keep.extend(columns.iter().map(|c| c + 1));
        let strata = self
            .strata
            .iter()
            .map(|s| {
                let x = s.covariates();
                let m = Matrix::from_vec(
                    x.rows(),
                    keep.len(),
                    (0..x.rows()).flat_map(|i| keep.iter().map(move |&j| x[(i, j)])).collect(),
                );
                s.with_covariates(m)
            })
            .collect::<Result<Vec<_>>>()?;
        StratifiedDataset::new(
            strata,
            columns.iter().map(|&c| self.covariate_names[c].clone()).collect(),
        )
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub stratum_col: String,
    pub treatment_col: String,
    pub outcome_col: String,
    pub covariates: Vec<String>,
    pub delimiter: u8,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            stratum_col: "stratum".into(),
            treatment_col: "treatment".into(),
            outcome_col: "outcome".into(),
            covariates: Vec::new(),
            delimiter: b',',
        }
    }
}

fn parse_treatment(raw: &str) -> Option<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" => return Some(true),
        "false" => return Some(false),
        _ => {}
    }
    match raw.parse::<f64>() {
        Ok(v) if v == 1.0 => Some(true),
        Ok(v) if v == 0.0 => Some(false),
        _ => None,
    }
}

/// Read rows into strata without requiring `S ≥ 2`. Rows are grouped by
/// stratum label in order of first appearance; each stratum is validated.
/// Row numbers in errors count data rows from 1 (the header is not counted).
pub fn load_strata<R: Read>(source: R, schema: &Schema) -> Result<Vec<Stratum>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Dataset("input is empty (header row required)".into()));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(format!("column '{name}' not found in header")))
    };
    let s_col = col(&schema.stratum_col)?;
    let t_col = col(&schema.treatment_col)?;
    let y_col = col(&schema.outcome_col)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    struct Acc {
        y: Vec<f64>,
        t: Vec<bool>,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Acc> = HashMap::new();
    let mut n_rows = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest {
            row,
            msg: e.to_string(),
        })?;
        let cell = |j: usize, name: &str| -> Result<&str> {
            match rec.get(j) {
                Some(v) if !v.is_empty() && !v.eq_ignore_ascii_case("na") => Ok(v),
                _ => Err(Error::Ingest {
                    row,
                    msg: format!("missing value in column '{name}'"),
                }),
            }
        };
        let number = |j: usize, name: &str| -> Result<f64> {
            let raw = cell(j, name)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Ingest {
                    row,
                    msg: format!("cannot parse '{raw}' in column '{name}' as a number"),
                })
        };
        let label = cell(s_col, &schema.stratum_col)?.to_string();
        let traw = cell(t_col, &schema.treatment_col)?;
        let t = parse_treatment(traw).ok_or_else(|| Error::Ingest {
            row,
            msg: format!(
                "treatment value '{traw}' in column '{}' is not 0 or 1",
                schema.treatment_col
            ),
        })?;
        let y = number(y_col, &schema.outcome_col)?;
        let mut xs = Vec::with_capacity(x_cols.len());
        for (&j, name) in x_cols.iter().zip(&schema.covariates) {
            xs.push(number(j, name)?);
        }
        let acc = groups.entry(label.clone()).or_insert_with(|| {
            order.push(label);
            Acc {
                y: Vec::new(),
                t: Vec::new(),
                x: Vec::new(),
            }
        });
        acc.y.push(y);
        acc.t.push(t);
        acc.x.extend(xs);
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::Dataset("input has no data rows".into()));
    }
    order
        .into_iter()
        .map(|label| {
            let acc = groups.remove(&label).expect("label recorded on first sight");
            let raw = Matrix::from_vec(acc.y.len(), x_cols.len(), acc.x);
            Stratum::with_intercept(label, acc.y, acc.t, &raw)
        })
        .collect()
}

/// Ingest a full dataset (`S ≥ 2`).
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<StratifiedDataset> {
    let strata = load_strata(source, schema)?;
    StratifiedDataset::new(strata, schema.covariates.clone())
}

/// Write the dataset as CSV with columns `stratum, treatment, outcome,
/// <covariates...>`; values use the shortest representation that parses
/// back to the same bits.
pub fn write_csv<W: Write>(ds: &StratifiedDataset, sink: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
    let mut header = vec!["stratum".to_string(), "treatment".into(), "outcome".into()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.strata {
        for i in 0..s.len() {
            let mut rec = vec![
                s.id.clone(),
                if s.treatment[i] { "1".into() } else { "0".into() },
                s.outcomes[i].to_string(),
            ];
            rec.extend(s.covariates.row(i)[1..].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

impl StratifiedDataset {
    /// Schema matching [`write_csv`] output.
    pub fn csv_schema(&self) -> Schema {
        Schema {
            covariates: self.covariate_names.clone(),
            ..Schema::default()
        }
    }
}
