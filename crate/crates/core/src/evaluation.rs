//! Did the LLM covariates help? Wald screening of the new columns and
//! side-by-side standard errors for several covariate recipes.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AugmentedCovariates, DatasetError, Experiment, ExtraColumn, OutcomeKind};
use crate::estimator::{adjusted_estimate, ess_ratio, EstimateResult, EstimatorError};
use crate::imputation::{impute, logistic_fit, ols_fit, ImputationError, LearnerConfig};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("at least one recipe is required; the first is the baseline")]
    NoRecipes,
    #[error("recipe `{recipe}` references absent column `{column}`")]
    UnknownColumn { recipe: String, column: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const TREATMENT_COLUMN: &str = "treatment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub covariate: String,
    pub coefficient: f64,
    pub se: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub model_kind: ModelKind,
    pub included_columns: Vec<String>,
    pub significant: bool,
}

/// Fits `y ~ base + llm + treatment` (logistic for binary outcomes) and
/// reports a Wald test for each LLM column. Advisory only: callers still
/// estimate with the column when it is not significant.
pub fn significance_test(
    experiment: &Experiment,
    base: &AugmentedCovariates,
    llm: &[ExtraColumn],
    alpha: f64,
) -> Result<Vec<SignificanceReport>, EvaluationError> {
    let full = base.append(llm)?;
    let n = experiment.len();
    let mut design = DMatrix::zeros(n, full.ncols() + 1);
    design.columns_mut(0, full.ncols()).copy_from(&full.matrix);
    for i in 0..n {
        design[(i, full.ncols())] = f64::from(experiment.z[i]);
    }
    let mut names = full.column_names.clone();
    names.push(TREATMENT_COLUMN.to_string());
    let (table, kind) = match experiment.outcome_kind {
        OutcomeKind::Continuous => (ols_fit(&experiment.y, &design, &names)?, ModelKind::Linear),
        OutcomeKind::Binary => (logistic_fit(&experiment.y, &design, &names)?.table, ModelKind::Logistic),
    };
    Ok(llm
        .iter()
        .map(|col| {
            let j = table.index(&col.name).expect("appended column is in the fit");
            SignificanceReport {
                covariate: col.name.clone(),
                coefficient: table.coefficients[j],
                se: table.standard_errors[j],
                statistic: table.statistics[j],
                p_value: table.p_values[j],
                model_kind: kind,
                included_columns: table.names.clone(),
                significant: table.p_values[j] < alpha,
            }
        })
        .collect())
}

/// A labelled covariate set: optionally the base columns, plus extra
/// columns by name (their `_missing` indicators come along).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub label: String,
    #[serde(default = "yes")]
    pub include_base: bool,
    #[serde(default)]
    pub extras: Vec<String>,
}

fn yes() -> bool {
    true
}

impl Recipe {
    pub fn base() -> Self {
        Recipe {
            label: "base".into(),
            include_base: true,
            extras: Vec::new(),
        }
    }

    pub fn base_plus(label: impl Into<String>, extras: &[&str]) -> Self {
        Recipe {
            label: label.into(),
            include_base: true,
            extras: extras.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Selects the recipe's columns from `x`.
    pub fn columns(&self, x: &AugmentedCovariates) -> Result<AugmentedCovariates, EvaluationError> {
        let mut names: Vec<&str> = Vec::new();
        if self.include_base {
            names.extend(x.column_names[..x.n_base].iter().map(String::as_str));
        }
        for extra in &self.extras {
            if x.column_index(extra).is_none() {
                return Err(EvaluationError::UnknownColumn {
                    recipe: self.label.clone(),
                    column: extra.clone(),
                });
            }
            names.push(extra);
            let indicator = format!("{extra}_missing");
            if let Some(j) = x.column_index(&indicator) {
                names.push(&x.column_names[j]);
            }
        }
        Ok(x.select_columns(&names)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub stratum: String,
    pub covariate_set_label: String,
    pub tau_hat: f64,
    pub se: f64,
    pub e2_c: f64,
    pub e2_t: f64,
    pub n: usize,
    pub p: f64,
    /// Versus the baseline recipe in the same stratum.
    pub ess: f64,
}

impl EstimateRow {
    fn new(stratum: &str, r: &EstimateResult) -> Self {
        EstimateRow {
            stratum: stratum.to_string(),
            covariate_set_label: r.covariate_set_label.clone(),
            tau_hat: r.tau_hat,
            se: r.se,
            e2_c: r.e2_c,
            e2_t: r.e2_t,
            n: r.n,
            p: r.p_used,
            ess: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub labels: Vec<String>,
    pub strata: Vec<String>,
    pub rows: Vec<EstimateRow>,
}

pub const OVERALL: &str = "overall";

/// Weights stratum estimates by stratum size; variances add with squared
/// weights because assignment is independent across strata.
pub fn combine_strata(parts: &[(String, EstimateResult)]) -> EstimateRow {
    let n: usize = parts.iter().map(|(_, r)| r.n).sum();
    let (mut tau, mut var, mut e2c, mut e2t) = (0.0, 0.0, 0.0, 0.0);
    for (_, r) in parts {
        let w = r.n as f64 / n as f64;
        tau += w * r.tau_hat;
        var += w * w * r.variance;
        e2c += w * r.e2_c;
        e2t += w * r.e2_t;
    }
    let p = if parts.windows(2).all(|w| w[0].1.p_used == w[1].1.p_used) {
        parts[0].1.p_used
    } else {
        f64::NAN
    };
    EstimateRow {
        stratum: OVERALL.to_string(),
        covariate_set_label: parts[0].1.covariate_set_label.clone(),
        tau_hat: tau,
        se: var.sqrt(),
        e2_c: e2c,
        e2_t: e2t,
        n,
        p,
        ess: 1.0,
    }
}

/// Fits one learner per recipe and stratum (cross-fitted within the
/// stratum) and tabulates the adjusted estimates. The first recipe is the
/// baseline for ESS ratios. With several strata an `overall` row per recipe
/// combines them.
pub fn compare_models(
    experiment: &Experiment,
    x: &AugmentedCovariates,
    recipes: &[Recipe],
    learner: &LearnerConfig,
) -> Result<ComparisonReport, EvaluationError> {
    if recipes.is_empty() {
        return Err(EvaluationError::NoRecipes);
    }
    let designs = recipes
        .iter()
        .map(|r| r.columns(x))
        .collect::<Result<Vec<_>, _>>()?;
    let strata = experiment.strata_indices();
    let jobs: Vec<(usize, usize)> = (0..strata.len())
        .flat_map(|s| (0..recipes.len()).map(move |r| (s, r)))
        .collect();
    let results: Vec<EstimateResult> = jobs
        .par_iter()
        .map(|&(s, r)| -> Result<EstimateResult, EvaluationError> {
            let idx = &strata[s].1;
            let sub = experiment.subset(idx);
            let design = designs[r].select_rows(idx);
            let (imputations, _) = impute(&sub, &design, learner)?;
            Ok(adjusted_estimate(&sub, &imputations, &recipes[r].label)?)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(jobs.len() + recipes.len());
    for (s, (label, _)) in strata.iter().enumerate() {
        let block = &results[s * recipes.len()..(s + 1) * recipes.len()];
        for r in block {
            let mut row = EstimateRow::new(label, r);
            row.ess = ess_ratio(block[0].se, r.se)?;
            rows.push(row);
        }
    }
    let mut strata_labels: Vec<String> = strata.iter().map(|(l, _)| l.clone()).collect();
    if strata.len() > 1 {
        let overall: Vec<EstimateRow> = (0..recipes.len())
            .map(|r| {
                let parts: Vec<(String, EstimateResult)> = strata
                    .iter()
                    .enumerate()
                    .map(|(s, (l, _))| (l.clone(), results[s * recipes.len() + r].clone()))
                    .collect();
                combine_strata(&parts)
            })
            .collect();
        for row in &overall {
            let mut row = row.clone();
            row.ess = ess_ratio(overall[0].se, row.se)?;
            rows.push(row);
        }
        strata_labels.push(OVERALL.to_string());
    }
    Ok(ComparisonReport {
        labels: recipes.iter().map(|r| r.label.clone()).collect(),
        strata: strata_labels,
        rows,
    })
}

impl ComparisonReport {
    pub fn get(&self, stratum: &str, label: &str) -> Option<&EstimateRow> {
        self.rows
            .iter()
            .find(|r| r.stratum == stratum && r.covariate_set_label == label)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvaluationError> {
        write_rows_csv(&self.rows, writer)
    }

    /// Two aligned tables: standard errors, then ESS ratios, strata by recipe.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (title, value) in [
            ("Standard errors", (|r: &EstimateRow| format!("{:.4}", r.se)) as fn(&EstimateRow) -> String),
            ("Effective sample size ratio vs baseline", |r: &EstimateRow| format!("{:.3}", r.ess)),
        ] {
            let width0 = self.strata.iter().map(String::len).chain([7]).max().unwrap();
            let widths: Vec<usize> = self.labels.iter().map(|l| l.len().max(8)).collect();
            let _ = writeln!(out, "{title}");
            let _ = write!(out, "{:<width0$}", "stratum");
            for (l, w) in self.labels.iter().zip(&widths) {
                let _ = write!(out, "  {l:>w$}");
            }
            out.push('\n');
            for s in &self.strata {
                let _ = write!(out, "{s:<width0$}");
                for (l, w) in self.labels.iter().zip(&widths) {
                    let cell = self.get(s, l).map(value).unwrap_or_else(|| "-".into());
                    let _ = write!(out, "  {cell:>w$}");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_rows_csv<W: Write>(rows: &[EstimateRow], writer: W) -> Result<(), EvaluationError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_significance_csv<W: Write>(reports: &[SignificanceReport], writer: W) -> Result<(), EvaluationError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "coefficient", "se", "statistic", "p_value", "model_kind", "significant"])?;
    for r in reports {
        let kind = match r.model_kind {
            ModelKind::Linear => "linear",
            ModelKind::Logistic => "logistic",
        };
        w.write_record([
            r.covariate.clone(),
            r.coefficient.to_string(),
            r.se.to_string(),
            r.statistic.to_string(),
            r.p_value.to_string(),
            kind.to_string(),
            if r.significant { "yes" } else { "not significant" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
