use serde::{Deserialize, Serialize};

use super::{CovariateValue, DatasetError, OutcomeKind};

/// Column-to-role mapping for an experiment CSV, read from TOML:
///
/// ```toml
/// id = "id"
/// treatment = "z"
/// outcome = "y"
/// outcome_kind = "continuous"   # or "binary"
/// p = 0.5                       # or: p_column = "p"
/// stratum = "journal"           # optional analysis stratum
/// text = ["title", "abstract"]
///
/// [[covariates]]
/// name = "age"
/// kind = "real"                 # real | integer | categorical | boolean
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub id: String,
    pub treatment: String,
    pub outcome: String,
    #[serde(default)]
    pub outcome_kind: OutcomeKind,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub p_column: Option<String>,
    #[serde(default)]
    pub stratum: Option<String>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub text: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Real,
    Integer,
    Categorical,
    Boolean,
}

impl CovariateKind {
    /// Empty cells and the literal `NA` are missing.
    pub fn parse(self, raw: &str, row: usize, column: &str) -> Result<CovariateValue, DatasetError> {
        let raw = raw.trim();
        if raw.is_empty() || raw == "NA" {
            return Ok(CovariateValue::Missing);
        }
        let err = |kind: &'static str| DatasetError::Parse {
            row,
            column: column.to_string(),
            value: raw.to_string(),
            kind,
        };
        Ok(match self {
            CovariateKind::Real => {
                let v: f64 = raw.parse().map_err(|_| err("real"))?;
                if !v.is_finite() {
                    return Err(DatasetError::NonFinite(column.to_string()));
                }
                CovariateValue::Real(v)
            }
            CovariateKind::Integer => CovariateValue::Integer(raw.parse().map_err(|_| err("integer"))?),
            CovariateKind::Categorical => CovariateValue::Categorical(raw.to_string()),
            CovariateKind::Boolean => match raw.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" => CovariateValue::Boolean(true),
                "0" | "false" | "no" => CovariateValue::Boolean(false),
                _ => return Err(err("boolean")),
            },
        })
    }
}

impl Schema {
    pub fn from_toml_str(s: &str) -> Result<Self, DatasetError> {
        let schema: Schema = toml::from_str(s).map_err(|e| DatasetError::Schema(e.to_string()))?;
        schema.check()?;
        Ok(schema)
    }

    pub(crate) fn check(&self) -> Result<(), DatasetError> {
        match (self.p, &self.p_column) {
            (Some(_), Some(_)) => {
                return Err(DatasetError::Schema("set either `p` or `p_column`, not both".into()))
            }
            (None, None) => {
                return Err(DatasetError::Schema("one of `p` or `p_column` is required".into()))
            }
            (Some(p), None) if !(p > 0.0 && p < 1.0) => {
                return Err(DatasetError::InvalidProbability { row: 0, value: p })
            }
            _ => {}
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.covariates {
            if !names.insert(c.name.as_str()) {
                return Err(DatasetError::Schema(format!("covariate `{}` listed twice", c.name)));
            }
        }
        Ok(())
    }

    /// Iterator over `(name, kind)` in declaration order.
    pub fn covariate_kinds(&self) -> impl Iterator<Item = (&String, &CovariateKind)> {
        self.covariates.iter().map(|c| (&c.name, &c.kind))
    }
}
