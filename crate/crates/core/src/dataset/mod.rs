//! Experiment data: loading, validation and covariate encoding.

mod encode;
mod schema;

pub use encode::{encode_covariates, AugmentedCovariates, ExtraColumn, MissingEncoding};
pub use schema::{CovariateKind, CovariateSpec, Schema};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: treatment value `{value}` is not 0 or 1")]
    InvalidTreatment { row: usize, value: String },
    #[error("row {row}: assignment probability {value} is outside (0, 1)")]
    InvalidProbability { row: usize, value: f64 },
    #[error("assignment probability is not constant within stratum `{0}`")]
    InconsistentProbability(String),
    #[error("duplicate unit id `{0}`")]
    DuplicateId(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as {kind}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        kind: &'static str,
    },
    #[error("experiment needs at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("stratum `{0}` has no treated or no control units")]
    EmptyArm(String),
    #[error("covariate `{0}` is missing for every unit")]
    AllMissing(String),
    #[error("covariate `{0}` encodes to a constant-zero column")]
    ConstantZero(String),
    #[error("extra column `{name}` has {got} rows, expected {expected}")]
    ExtraLength {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("non-finite value in column `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Type of a single covariate value. `Missing` is an explicit state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateValue {
    Real(f64),
    Integer(i64),
    Categorical(String),
    Boolean(bool),
    Missing,
}

impl CovariateValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, CovariateValue::Missing)
    }

    /// Numeric view used by the encoder; categorical values have none.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CovariateValue::Real(v) => Some(*v),
            CovariateValue::Integer(v) => Some(*v as f64),
            CovariateValue::Boolean(b) => Some(if *b { 1.0 } else { 0.0 }),
            CovariateValue::Categorical(_) | CovariateValue::Missing => None,
        }
    }

    /// Text used when the value is spelled out in a prompt.
    pub fn display(&self) -> Option<String> {
        match self {
            CovariateValue::Real(v) => Some(format!("{v}")),
            CovariateValue::Integer(v) => Some(v.to_string()),
            CovariateValue::Categorical(s) => Some(s.clone()),
            CovariateValue::Boolean(b) => Some(if *b { "yes" } else { "no" }.to_string()),
            CovariateValue::Missing => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    /// Covariates in schema order.
    pub covariates: Vec<(String, CovariateValue)>,
    pub text_fields: Vec<(String, String)>,
}

impl Unit {
    pub fn covariate(&self, name: &str) -> Option<&CovariateValue> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        self.text_fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    #[default]
    Continuous,
    Binary,
}

/// A randomized experiment under a Bernoulli design.
///
/// `p` holds the per-unit assignment probability. It is a design input and is
/// never estimated from `z`. Units in the same analysis stratum share one `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub units: Vec<Unit>,
    pub z: Vec<u8>,
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    pub strata: Option<Vec<String>>,
    pub outcome_kind: OutcomeKind,
    pub id_column: String,
    /// Categorical levels in first-appearance order, per covariate.
    pub levels: BTreeMap<String, Vec<String>>,
}

impl Experiment {
    /// Builds an experiment from in-memory vectors with a single global `p`.
    pub fn from_parts(units: Vec<Unit>, z: Vec<u8>, y: Vec<f64>, p: f64) -> Result<Self, DatasetError> {
        let n = units.len();
        let levels = collect_levels(&units);
        let exp = Experiment {
            units,
            z,
            y,
            p: vec![p; n],
            strata: None,
            outcome_kind: OutcomeKind::Continuous,
            id_column: "id".to_string(),
            levels,
        };
        exp.validate()?;
        Ok(exp)
    }

    /// Bare experiment without covariates; ids are `u0`, `u1`, ...
    pub fn simple(z: Vec<u8>, y: Vec<f64>, p: f64) -> Result<Self, DatasetError> {
        let units = (0..z.len())
            .map(|i| Unit {
                id: format!("u{i}"),
                covariates: Vec::new(),
                text_fields: Vec::new(),
            })
            .collect();
        Self::from_parts(units, z, y, p)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&z| z == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.units.iter().map(|u| u.id.as_str()).collect()
    }

    /// Covariate names in schema order.
    pub fn covariate_names(&self) -> Vec<String> {
        self.units
            .first()
            .map(|u| u.covariates.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default()
    }

    /// Returns the common `p` if every unit shares it.
    pub fn constant_p(&self) -> Option<f64> {
        let first = *self.p.first()?;
        self.p.iter().all(|&p| p == first).then_some(first)
    }

    /// Stratum labels in first-appearance order with their unit indices.
    /// Without a stratum column the whole experiment is one stratum `"all"`.
    pub fn strata_indices(&self) -> Vec<(String, Vec<usize>)> {
        match &self.strata {
            None => vec![("all".to_string(), (0..self.len()).collect())],
            Some(labels) => {
                let mut order: Vec<(String, Vec<usize>)> = Vec::new();
                let mut pos: HashMap<&str, usize> = HashMap::new();
                for (i, s) in labels.iter().enumerate() {
                    match pos.get(s.as_str()) {
                        Some(&k) => order[k].1.push(i),
                        None => {
                            pos.insert(s, order.len());
                            order.push((s.clone(), vec![i]));
                        }
                    }
                }
                order
            }
        }
    }

    /// Restriction to the given units, preserving their order. Validation is
    /// not re-run, so a subset may have an empty arm.
    pub fn subset(&self, idx: &[usize]) -> Experiment {
        Experiment {
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            p: idx.iter().map(|&i| self.p[i]).collect(),
            strata: self
                .strata
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
            outcome_kind: self.outcome_kind,
            id_column: self.id_column.clone(),
            levels: self.levels.clone(),
        }
    }

    /// Copy with a different assignment vector and outcomes; used by the
    /// simulation harness to re-randomize a fixed population.
    pub fn with_assignment(&self, z: Vec<u8>, y: Vec<f64>) -> Experiment {
        Experiment {
            z,
            y,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.units.len();
        if n < 2 {
            return Err(DatasetError::TooFewUnits(n));
        }
        if self.z.len() != n || self.y.len() != n || self.p.len() != n {
            return Err(DatasetError::Schema(format!(
                "vector lengths differ: units={n}, z={}, y={}, p={}",
                self.z.len(),
                self.y.len(),
                self.p.len()
            )));
        }
        for (row, &z) in self.z.iter().enumerate() {
            if z > 1 {
                return Err(DatasetError::InvalidTreatment {
                    row,
                    value: z.to_string(),
                });
            }
        }
        for (row, &p) in self.p.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(DatasetError::InvalidProbability { row, value: p });
            }
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite("outcome".to_string()));
        }
        let mut seen = HashSet::new();
        for u in &self.units {
            if !seen.insert(u.id.as_str()) {
                return Err(DatasetError::DuplicateId(u.id.clone()));
            }
        }
        for (label, idx) in self.strata_indices() {
            let p0 = self.p[idx[0]];
            if idx.iter().any(|&i| self.p[i] != p0) {
                return Err(DatasetError::InconsistentProbability(label));
            }
            let nt = idx.iter().filter(|&&i| self.z[i] == 1).count();
            if nt == 0 || nt == idx.len() {
                return Err(DatasetError::EmptyArm(label));
            }
        }
        Ok(())
    }

    /// Warning text when the realized treated share is implausible under the
    /// declared `p` (more than four binomial standard errors away).
    pub fn assignment_warning(&self) -> Option<String> {
        let mut msgs = Vec::new();
        for (label, idx) in self.strata_indices() {
            let n = idx.len() as f64;
            let p = self.p[idx[0]];
            let share = idx.iter().filter(|&&i| self.z[i] == 1).count() as f64 / n;
            let bound = 4.0 * (p * (1.0 - p) / n).sqrt();
            if (share - p).abs() > bound {
                msgs.push(format!(
                    "stratum `{label}`: treated share {share:.4} differs from declared p={p} by more than {bound:.4}"
                ));
            }
        }
        (!msgs.is_empty()).then(|| msgs.join("; "))
    }
}

fn collect_levels(units: &[Unit]) -> BTreeMap<String, Vec<String>> {
    let mut levels: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for u in units {
        for (name, v) in &u.covariates {
            if let CovariateValue::Categorical(s) = v {
                let entry = levels.entry(name.clone()).or_default();
                if !entry.contains(s) {
                    entry.push(s.clone());
                }
            }
        }
    }
    levels
}

/// Loads and validates an experiment from a CSV file with a header row.
pub fn load_experiment(path: impl AsRef<Path>, schema: &Schema) -> Result<Experiment, DatasetError> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    load_experiment_from_reader(reader, schema)
}

pub fn load_experiment_from_reader<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    schema: &Schema,
) -> Result<Experiment, DatasetError> {
    schema.check()?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, DatasetError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let z_col = col(&schema.treatment)?;
    let y_col = col(&schema.outcome)?;
    let p_col = match &schema.p_column {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let stratum_col = match &schema.stratum {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let cov_cols = schema
        .covariate_kinds()
        .map(|(name, kind)| Ok((name.clone(), *kind, col(name)?)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let text_cols = schema
        .text
        .iter()
        .map(|name| Ok((name.clone(), col(name)?)))
        .collect::<Result<Vec<_>, DatasetError>>()?;

    let mut units = Vec::new();
    let (mut z, mut y, mut p, mut strata) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let zv = match field(z_col) {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(DatasetError::InvalidTreatment {
                    row,
                    value: other.to_string(),
                })
            }
        };
        let yv = parse_f64(field(y_col), row, &schema.outcome)?;
        let pv = match (p_col, schema.p) {
            (Some(i), _) => parse_f64(field(i), row, schema.p_column.as_deref().unwrap_or("p"))?,
            (None, Some(p)) => p,
            (None, None) => return Err(DatasetError::Schema("no assignment probability".into())),
        };
        if !(pv > 0.0 && pv < 1.0) {
            return Err(DatasetError::InvalidProbability { row, value: pv });
        }
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (name, kind, i) in &cov_cols {
            covariates.push((name.clone(), kind.parse(field(*i), row, name)?));
        }
        let text_fields = text_cols
            .iter()
            .map(|(name, i)| (name.clone(), field(*i).to_string()))
            .collect();
        units.push(Unit {
            id: field(id_col).to_string(),
            covariates,
            text_fields,
        });
        z.push(zv);
        y.push(yv);
        p.push(pv);
        if let Some(i) = stratum_col {
            strata.push(field(i).to_string());
        }
    }
    let levels = collect_levels(&units);
    let exp = Experiment {
        units,
        z,
        y,
        p,
        strata: stratum_col.map(|_| strata),
        outcome_kind: schema.outcome_kind,
        id_column: schema.id.clone(),
        levels,
    };
    exp.validate()?;
    if exp.outcome_kind == OutcomeKind::Binary && exp.y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(DatasetError::Schema("binary outcome must be coded 0/1".into()));
    }
    if let Some(w) = exp.assignment_warning() {
        log::warn!("{w}");
    }
    Ok(exp)
}

fn parse_f64(s: &str, row: usize, column: &str) -> Result<f64, DatasetError> {
    let v: f64 = s.parse().map_err(|_| DatasetError::Parse {
        row,
        column: column.to_string(),
        value: s.to_string(),
        kind: "real",
    })?;
    if !v.is_finite() {
        return Err(DatasetError::NonFinite(column.to_string()));
    }
    Ok(v)
}
