use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{CovariateValue, DatasetError, Experiment};

/// How a missing categorical value is represented. Numeric and boolean
/// covariates always use an indicator column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingEncoding {
    #[default]
    Indicator,
    /// Missing categorical values become their own `Unknown` level.
    OwnLevel,
}

/// A real-valued column appended to the encoded covariates, e.g. a pair
/// score or an out-of-bag prediction. `None` entries are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraColumn {
    pub name: String,
    pub values: Vec<Option<f64>>,
    pub provenance: String,
}

impl ExtraColumn {
    pub fn new(name: impl Into<String>, values: Vec<f64>, provenance: impl Into<String>) -> Self {
        ExtraColumn {
            name: name.into(),
            values: values.into_iter().map(Some).collect(),
            provenance: provenance.into(),
        }
    }

    pub fn with_missing(
        name: impl Into<String>,
        values: Vec<Option<f64>>,
        provenance: impl Into<String>,
    ) -> Self {
        ExtraColumn {
            name: name.into(),
            values,
            provenance: provenance.into(),
        }
    }
}

/// Encoded design matrix, one row per unit in experiment order.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCovariates {
    pub matrix: DMatrix<f64>,
    pub column_names: Vec<String>,
    /// Where each column came from: `covariate:<name>`, `missing:<name>` or
    /// the provenance string of an extra column.
    pub provenance: Vec<String>,
    /// Number of leading columns that came from the experiment's covariates.
    pub n_base: usize,
}

impl AugmentedCovariates {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn select_rows(&self, idx: &[usize]) -> AugmentedCovariates {
        AugmentedCovariates {
            matrix: self.matrix.select_rows(idx),
            column_names: self.column_names.clone(),
            provenance: self.provenance.clone(),
            n_base: self.n_base,
        }
    }

    /// Keeps the named columns in the given order.
    pub fn select_columns(&self, names: &[&str]) -> Result<AugmentedCovariates, DatasetError> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| DatasetError::MissingColumn(n.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n_base = idx.iter().filter(|&&i| i < self.n_base).count();
        Ok(AugmentedCovariates {
            matrix: self.matrix.select_columns(&idx),
            column_names: idx.iter().map(|&i| self.column_names[i].clone()).collect(),
            provenance: idx.iter().map(|&i| self.provenance[i].clone()).collect(),
            n_base,
        })
    }

    /// Only the columns derived from the experiment's own covariates.
    pub fn base(&self) -> AugmentedCovariates {
        let idx: Vec<usize> = (0..self.n_base).collect();
        AugmentedCovariates {
            matrix: self.matrix.select_columns(&idx),
            column_names: self.column_names[..self.n_base].to_vec(),
            provenance: self.provenance[..self.n_base].to_vec(),
            n_base: self.n_base,
        }
    }

    /// Appends extra columns (with missing indicators where needed).
    pub fn append(&self, extras: &[ExtraColumn]) -> Result<AugmentedCovariates, DatasetError> {
        let n = self.nrows();
        let mut cols: Vec<Vec<f64>> = (0..self.ncols())
            .map(|j| self.matrix.column(j).iter().copied().collect())
            .collect();
        let mut names = self.column_names.clone();
        let mut prov = self.provenance.clone();
        for extra in extras {
            if extra.values.len() != n {
                return Err(DatasetError::ExtraLength {
                    name: extra.name.clone(),
                    got: extra.values.len(),
                    expected: n,
                });
            }
            if extra.values.iter().all(Option::is_none) {
                return Err(DatasetError::AllMissing(extra.name.clone()));
            }
            if extra.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite(extra.name.clone()));
            }
            cols.push(extra.values.iter().map(|v| v.unwrap_or(0.0)).collect());
            names.push(extra.name.clone());
            prov.push(extra.provenance.clone());
            if extra.values.iter().any(Option::is_none) {
                cols.push(extra.values.iter().map(|v| if v.is_none() { 1.0 } else { 0.0 }).collect());
                names.push(format!("{}_missing", extra.name));
                prov.push(format!("missing:{}", extra.name));
            }
        }
        Ok(AugmentedCovariates {
            matrix: columns_to_matrix(n, &cols),
            column_names: names,
            provenance: prov,
            n_base: self.n_base,
        })
    }
}

fn columns_to_matrix(n: usize, cols: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// Encodes the experiment's covariates and appends `extras`.
///
/// Real and integer covariates map to one column each; booleans to a 0/1
/// column; categoricals to one-hot columns with the first-seen level dropped
/// as reference. A covariate with any missing value gets a `<name>_missing`
/// indicator and its value column holds 0 for those rows.
pub fn encode_covariates(
    experiment: &Experiment,
    extras: &[ExtraColumn],
    missing: MissingEncoding,
) -> Result<AugmentedCovariates, DatasetError> {
    let n = experiment.len();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut prov = Vec::new();

    for (j, name) in experiment.covariate_names().into_iter().enumerate() {
        let values: Vec<&CovariateValue> = experiment.units.iter().map(|u| &u.covariates[j].1).collect();
        let n_missing = values.iter().filter(|v| v.is_missing()).count();
        if n_missing == n {
            return Err(DatasetError::AllMissing(name));
        }
        let is_categorical = values.iter().any(|v| matches!(v, CovariateValue::Categorical(_)));
        if is_categorical {
            let levels = experiment.levels.get(&name).cloned().unwrap_or_default();
            for level in levels.iter().skip(1) {
                cols.push(
                    values
                        .iter()
                        .map(|v| matches!(v, CovariateValue::Categorical(s) if s == level) as u8 as f64)
                        .collect(),
                );
                names.push(format!("{name}={level}"));
                prov.push(format!("covariate:{name}"));
            }
            if n_missing > 0 {
                cols.push(values.iter().map(|v| v.is_missing() as u8 as f64).collect());
                match missing {
                    MissingEncoding::Indicator => {
                        names.push(format!("{name}_missing"));
                        prov.push(format!("missing:{name}"));
                    }
                    MissingEncoding::OwnLevel => {
                        names.push(format!("{name}=Unknown"));
                        prov.push(format!("covariate:{name}"));
                    }
                }
            }
        } else {
            let col: Vec<f64> = values.iter().map(|v| v.as_f64().unwrap_or(0.0)).collect();
            if col.iter().all(|&v| v == 0.0) {
                return Err(DatasetError::ConstantZero(name));
            }
            cols.push(col);
            names.push(name.clone());
            prov.push(format!("covariate:{name}"));
            if n_missing > 0 {
                cols.push(values.iter().map(|v| v.is_missing() as u8 as f64).collect());
                names.push(format!("{name}_missing"));
                prov.push(format!("missing:{name}"));
            }
        }
    }
    let n_base = cols.len();
    let base = AugmentedCovariates {
        matrix: columns_to_matrix(n, &cols),
        column_names: names,
        provenance: prov,
        n_base,
    };
    if extras.is_empty() {
        Ok(base)
    } else {
        base.append(extras)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Unit;
    use proptest::prelude::*;

    fn experiment(covs: Vec<Vec<(&str, CovariateValue)>>) -> Experiment {
        let n = covs.len();
        let units = covs
            .into_iter()
            .enumerate()
            .map(|(i, c)| Unit {
                id: format!("u{i}"),
                covariates: c.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                text_fields: vec![],
            })
            .collect();
        let z = (0..n).map(|i| (i % 2) as u8).collect();
        Experiment::from_parts(units, z, vec![0.0; n], 0.5).unwrap()
    }

    fn cat(s: &str) -> CovariateValue {
        CovariateValue::Categorical(s.to_string())
    }

    #[test]
    fn two_level_categorical_gives_one_column() {
        let e = experiment(vec![vec![("sex", cat("M"))], vec![("sex", cat("F"))], vec![("sex", cat("F"))]]);
        let x = encode_covariates(&e, &[], MissingEncoding::Indicator).unwrap();
        assert_eq!(x.column_names, vec!["sex=F"]);
        assert_eq!(x.matrix.column(0).as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn missing_numeric_gets_indicator() {
        let e = experiment(vec![
            vec![("age", CovariateValue::Real(30.0))],
            vec![("age", CovariateValue::Missing)],
        ]);
        let x = encode_covariates(&e, &[], MissingEncoding::Indicator).unwrap();
        assert_eq!(x.column_names, vec!["age", "age_missing"]);
        assert_eq!(x.matrix.column(0).as_slice(), &[30.0, 0.0]);
        assert_eq!(x.matrix.column(1).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn own_level_option_for_categoricals() {
        let e = experiment(vec![
            vec![("race", cat("A"))],
            vec![("race", CovariateValue::Missing)],
            vec![("race", cat("B"))],
        ]);
        let x = encode_covariates(&e, &[], MissingEncoding::OwnLevel).unwrap();
        assert_eq!(x.column_names, vec!["race=B", "race=Unknown"]);
    }

    #[test]
    fn extras_append_one_column() {
        let e = experiment(vec![vec![("sex", cat("M"))], vec![("sex", cat("F"))]]);
        let extra = ExtraColumn::new("pair_score", vec![0.25, 0.75], "pairs:q1");
        let x = encode_covariates(&e, &[extra], MissingEncoding::Indicator).unwrap();
        assert_eq!(x.ncols(), 2);
        assert_eq!(x.column_names[1], "pair_score");
        assert_eq!(x.n_base, 1);
        assert_eq!(x.provenance[1], "pairs:q1");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let e = experiment(vec![
            vec![("age", CovariateValue::Missing)],
            vec![("age", CovariateValue::Missing)],
        ]);
        assert!(matches!(
            encode_covariates(&e, &[], MissingEncoding::Indicator),
            Err(DatasetError::AllMissing(n)) if n == "age"
        ));
        let e = experiment(vec![vec![("sex", cat("M"))], vec![("sex", cat("F"))]]);
        let short = ExtraColumn::new("s", vec![1.0], "x");
        assert!(matches!(
            encode_covariates(&e, &[short], MissingEncoding::Indicator),
            Err(DatasetError::ExtraLength { .. })
        ));
    }

    #[test]
    fn missing_extra_values_use_indicator() {
        let e = experiment(vec![vec![("sex", cat("M"))], vec![("sex", cat("F"))]]);
        let extra = ExtraColumn::with_missing("score", vec![Some(0.5), None], "pairs");
        let x = encode_covariates(&e, &[extra], MissingEncoding::Indicator).unwrap();
        assert_eq!(x.column_names, vec!["sex=F", "score", "score_missing"]);
        assert_eq!(x.matrix.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn column_count_matches_construction(
            n_real in 0usize..4,
            n_levels in prop::collection::vec(2usize..5, 0..3),
            missing_mask in prop::collection::vec(any::<bool>(), 7),
            n_extra in 0usize..3,
        ) {
            let n = 12;
            let mut covs = vec![Vec::new(); n];
            let mut expected = 0;
            for r in 0..n_real {
                let has_missing = missing_mask[r];
                for (i, c) in covs.iter_mut().enumerate() {
                    let v = if has_missing && i == 3 { CovariateValue::Missing } else { CovariateValue::Real(i as f64 + 1.0) };
                    c.push((format!("r{r}"), v));
                }
                expected += 1 + has_missing as usize;
            }
            for (k, &levels) in n_levels.iter().enumerate() {
                let has_missing = missing_mask[4 + k];
                for (i, c) in covs.iter_mut().enumerate() {
                    let v = if has_missing && i == 5 { CovariateValue::Missing } else { cat(&format!("L{}", i % levels)) };
                    c.push((format!("c{k}"), v));
                }
                expected += levels - 1 + has_missing as usize;
            }
            let units: Vec<Unit> = covs.into_iter().enumerate().map(|(i, c)| Unit {
                id: format!("u{i}"), covariates: c, text_fields: vec![] }).collect();
            let z = (0..n).map(|i| (i % 2) as u8).collect();
            let e = Experiment::from_parts(units, z, vec![0.0; n], 0.5).unwrap();
            let extras: Vec<ExtraColumn> = (0..n_extra)
                .map(|k| ExtraColumn::new(format!("e{k}"), (0..n).map(|i| i as f64).collect(), "test"))
                .collect();
            let a = encode_covariates(&e, &extras, MissingEncoding::Indicator).unwrap();
            let b = encode_covariates(&e, &extras, MissingEncoding::Indicator).unwrap();
            prop_assert_eq!(a.ncols(), expected + n_extra);
            prop_assert_eq!(a.column_names.len(), a.ncols());
            prop_assert_eq!(a, b);
        }
    }
}
