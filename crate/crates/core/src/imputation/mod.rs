//! Cross-fitted outcome models.
//!
//! Every learner here returns predictions of both potential outcomes for
//! every unit such that unit i's predictions never depend on its own
//! `(Y_i, Z_i)`: leave-one-out for least squares, out-of-bag for forests.

pub mod forest;
pub mod linalg;
pub mod linear;
pub mod logistic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AugmentedCovariates, Experiment};
use crate::estimator::Imputations;

pub use forest::{normalize_importance, Forest, ForestConfig};
pub use linalg::{check_collinearity, ols_fit, wald_p_value, WaldTable};
pub use linear::{fit_loo, LinearMethod, LooFit};
pub use logistic::{logistic_fit, LogisticFit};

#[derive(Debug, Error, PartialEq)]
pub enum ImputationError {
    #[error("an arm needs at least 2 units for leave-one-out fitting, got {0}")]
    ArmTooSmall(usize),
    #[error("non-finite value in design or outcome")]
    NonFinite,
    #[error("unit `{unit}` was never out-of-bag; increase n_trees (currently {n_trees})")]
    NeverOutOfBag { unit: String, n_trees: usize },
    #[error("collinear columns: {}", .0.join(", "))]
    Collinear(Vec<String>),
    #[error("perfect or quasi-complete separation; logistic fit diverges")]
    Separation,
    #[error("IRLS did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("outcome must be coded 0/1")]
    NotBinary,
    #[error("outcome has a single class")]
    SingleClass,
    #[error("{rows} rows cannot support {cols} coefficients")]
    TooFewRows { rows: usize, cols: usize },
    #[error("design has {got} rows, experiment has {expected}")]
    RowMismatch { got: usize, expected: usize },
    #[error("invalid learner configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    #[default]
    LooLinear,
    RandomForest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    #[serde(default)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub rf: ForestConfig,
    #[serde(default = "default_per_arm")]
    pub per_arm: bool,
}

fn default_per_arm() -> bool {
    true
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            kind: LearnerKind::LooLinear,
            rf: ForestConfig::default(),
            per_arm: true,
        }
    }
}

impl LearnerConfig {
    pub fn loo_linear() -> Self {
        Self::default()
    }

    pub fn random_forest(rf: ForestConfig) -> Self {
        LearnerConfig {
            kind: LearnerKind::RandomForest,
            rf,
            per_arm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub learner: LearnerConfig,
    pub column_names: Vec<String>,
    /// Cross-fitted mean squared error of own-arm predictions.
    pub mse_t: f64,
    pub mse_c: f64,
    /// Mean decrease in impurity per column, summing to 1 (forests only).
    pub importance: Option<Vec<f64>>,
    /// Fallback rung per arm (linear only).
    pub linear_methods: Option<(LinearMethod, LinearMethod)>,
}

fn check_rows(experiment: &Experiment, x: &AugmentedCovariates) -> Result<(), ImputationError> {
    if x.nrows() != experiment.len() {
        return Err(ImputationError::RowMismatch {
            got: x.nrows(),
            expected: experiment.len(),
        });
    }
    if experiment.y.iter().any(|v| !v.is_finite()) {
        return Err(ImputationError::NonFinite);
    }
    Ok(())
}

fn arms(z: &[u8]) -> (Vec<usize>, Vec<usize>) {
    (0..z.len()).partition(|&i| z[i] == 1)
}

/// Leave-one-out arm means: own arm excludes the unit, the other arm uses
/// all of its units.
pub(crate) fn arm_mean_loo(z: &[u8], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ImputationError> {
    let (t, c) = arms(z);
    for arm in [&t, &c] {
        if arm.len() < 2 {
            return Err(ImputationError::ArmTooSmall(arm.len()));
        }
    }
    let st: f64 = t.iter().map(|&i| y[i]).sum();
    let sc: f64 = c.iter().map(|&i| y[i]).sum();
    let (nt, nc) = (t.len() as f64, c.len() as f64);
    let mut yt = vec![st / nt; y.len()];
    let mut yc = vec![sc / nc; y.len()];
    for &i in &t {
        yt[i] = (st - y[i]) / (nt - 1.0);
    }
    for &i in &c {
        yc[i] = (sc - y[i]) / (nc - 1.0);
    }
    Ok((yt, yc))
}

fn own_arm_mse(experiment: &Experiment, imp: &Imputations) -> (f64, f64) {
    let (t, c) = arms(&experiment.z);
    let mse = |idx: &[usize], pred: &[f64]| {
        idx.iter().map(|&i| (experiment.y[i] - pred[i]).powi(2)).sum::<f64>() / idx.len().max(1) as f64
    };
    (mse(&t, &imp.y_hat_t), mse(&c, &imp.y_hat_c))
}

/// Leave-one-out least-squares imputations.
pub fn loo_linear_impute(
    experiment: &Experiment,
    x: &AugmentedCovariates,
    config: &LearnerConfig,
) -> Result<(Imputations, FitReport), ImputationError> {
    check_rows(experiment, x)?;
    let n = experiment.len();
    let (imp, methods) = if config.per_arm {
        let (t, c) = arms(&experiment.z);
        let mut y_hat_t = vec![0.0; n];
        let mut y_hat_c = vec![0.0; n];
        let mut methods = Vec::new();
        for (own, other, out_own) in [(&t, &c, true), (&c, &t, false)] {
            let x_own = x.matrix.select_rows(own.iter());
            let y_own: Vec<f64> = own.iter().map(|&i| experiment.y[i]).collect();
            let fit = fit_loo(&x_own, &y_own)?;
            let other_pred = fit.predict(&x.matrix.select_rows(other.iter()));
            let target = if out_own { &mut y_hat_t } else { &mut y_hat_c };
            for (k, &i) in own.iter().enumerate() {
                target[i] = fit.loo[k];
            }
            for (k, &i) in other.iter().enumerate() {
                target[i] = other_pred[k];
            }
            methods.push(fit.method);
        }
        (
            Imputations {
                y_hat_t,
                y_hat_c,
                cross_fitted: true,
            },
            (methods[0], methods[1]),
        )
    } else {
        let (y_hat_t, y_hat_c, method) = linear::pooled_loo(&x.matrix, &experiment.z, &experiment.y)?;
        (
            Imputations {
                y_hat_t,
                y_hat_c,
                cross_fitted: true,
            },
            (method, method),
        )
    };
    let (mse_t, mse_c) = own_arm_mse(experiment, &imp);
    Ok((
        imp,
        FitReport {
            learner: config.clone(),
            column_names: x.column_names.clone(),
            mse_t,
            mse_c,
            importance: None,
            linear_methods: Some(methods),
        },
    ))
}

/// Out-of-bag random-forest imputations.
///
/// With `per_arm`, the control forest uses tree seeds `seed..seed+n_trees`
/// and the treated forest `seed+n_trees..seed+2·n_trees`. A unit's own-arm
/// prediction averages the trees where it was out-of-bag; its other-arm
/// prediction averages every tree of the other forest.
pub fn rf_impute(
    experiment: &Experiment,
    x: &AugmentedCovariates,
    config: &LearnerConfig,
) -> Result<(Imputations, FitReport), ImputationError> {
    check_rows(experiment, x)?;
    let n = experiment.len();
    let rf = &config.rf;
    let never_oob = |i: usize| ImputationError::NeverOutOfBag {
        unit: experiment.units[i].id.clone(),
        n_trees: rf.n_trees,
    };
    let mut raw_importance = vec![0.0; x.ncols()];
    let imp = if config.per_arm {
        let (t, c) = arms(&experiment.z);
        let mut y_hat_t = vec![0.0; n];
        let mut y_hat_c = vec![0.0; n];
        for (own, other, offset, is_treated) in [(&c, &t, 0u64, false), (&t, &c, rf.n_trees as u64, true)] {
            if own.is_empty() {
                return Err(ImputationError::ArmTooSmall(0));
            }
            let x_own = x.matrix.select_rows(own.iter());
            let y_own: Vec<f64> = own.iter().map(|&i| experiment.y[i]).collect();
            let forest = Forest::fit(&x_own, &y_own, rf, rf.seed.wrapping_add(offset))?;
            for (acc, v) in raw_importance.iter_mut().zip(&forest.raw_importance) {
                *acc += v;
            }
            let oob = forest.oob_predictions(&x_own);
            let other_pred = forest.predict(&x.matrix.select_rows(other.iter()));
            let target = if is_treated { &mut y_hat_t } else { &mut y_hat_c };
            for (k, &i) in own.iter().enumerate() {
                target[i] = oob[k].ok_or_else(|| never_oob(i))?;
            }
            for (k, &i) in other.iter().enumerate() {
                target[i] = other_pred[k];
            }
        }
        Imputations {
            y_hat_t,
            y_hat_c,
            cross_fitted: true,
        }
    } else {
        let with_z = |zval: Option<f64>| {
            let mut m = x.matrix.clone().insert_column(x.ncols(), 0.0);
            for i in 0..n {
                m[(i, x.ncols())] = zval.unwrap_or(experiment.z[i] as f64);
            }
            m
        };
        let forest = Forest::fit(&with_z(None), &experiment.y, rf, rf.seed)?;
        for (acc, v) in raw_importance.iter_mut().zip(&forest.raw_importance) {
            *acc += v;
        }
        let yt = forest.oob_predictions(&with_z(Some(1.0)));
        let yc = forest.oob_predictions(&with_z(Some(0.0)));
        Imputations {
            y_hat_t: (0..n).map(|i| yt[i].ok_or_else(|| never_oob(i))).collect::<Result<_, _>>()?,
            y_hat_c: (0..n).map(|i| yc[i].ok_or_else(|| never_oob(i))).collect::<Result<_, _>>()?,
            cross_fitted: true,
        }
    };
    let (mse_t, mse_c) = own_arm_mse(experiment, &imp);
    Ok((
        imp,
        FitReport {
            learner: config.clone(),
            column_names: x.column_names.clone(),
            mse_t,
            mse_c,
            importance: Some(normalize_importance(&raw_importance)),
            linear_methods: None,
        },
    ))
}

/// Dispatches on `config.kind`.
pub fn impute(
    experiment: &Experiment,
    x: &AugmentedCovariates,
    config: &LearnerConfig,
) -> Result<(Imputations, FitReport), ImputationError> {
    match config.kind {
        LearnerKind::LooLinear => loo_linear_impute(experiment, x, config),
        LearnerKind::RandomForest => rf_impute(experiment, x, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_covariates, ExtraColumn, MissingEncoding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn synthetic(n: usize, k: usize, seed: u64, signal: bool) -> (Experiment, AugmentedCovariates) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let s = if signal { cols[0][i] * 2.0 } else { 0.0 };
                s + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let e = Experiment::simple(z, y, 0.5).unwrap();
        let extras: Vec<ExtraColumn> = cols
            .into_iter()
            .enumerate()
            .map(|(j, c)| ExtraColumn::new(format!("x{j}"), c, "test"))
            .collect();
        let x = encode_covariates(&e, &extras, MissingEncoding::Indicator).unwrap();
        (e, x)
    }

    #[test]
    fn no_covariates_reproduces_arm_means() {
        let e = Experiment::simple(vec![1, 1, 1, 0, 0], vec![1.0, 2.0, 6.0, 4.0, 8.0], 0.5).unwrap();
        let x = encode_covariates(&e, &[], MissingEncoding::Indicator).unwrap();
        let (imp, report) = loo_linear_impute(&e, &x, &LearnerConfig::loo_linear()).unwrap();
        assert_eq!(imp.y_hat_t, vec![4.0, 3.5, 1.5, 3.0, 3.0]);
        assert_eq!(imp.y_hat_c, vec![6.0, 6.0, 6.0, 8.0, 4.0]);
        assert!(imp.cross_fitted);
        assert_eq!(report.linear_methods, Some((LinearMethod::InterceptOnly, LinearMethod::InterceptOnly)));
    }

    #[test]
    fn own_arm_prediction_invariant_to_own_outcome() {
        let (mut e, x) = synthetic(40, 2, 3, true);
        let cfg = LearnerConfig::loo_linear();
        let (before, _) = loo_linear_impute(&e, &x, &cfg).unwrap();
        e.y[6] += 50.0;
        let (after, _) = loo_linear_impute(&e, &x, &cfg).unwrap();
        // unit 6 is control
        assert!((before.y_hat_c[6] - after.y_hat_c[6]).abs() < 1e-9);
        assert_eq!(before.y_hat_t[6], after.y_hat_t[6]);
    }

    #[test]
    fn forest_is_deterministic() {
        let (e, x) = synthetic(120, 3, 5, true);
        let cfg = LearnerConfig::random_forest(ForestConfig {
            n_trees: 60,
            seed: 17,
            ..Default::default()
        });
        let (a, ra) = rf_impute(&e, &x, &cfg).unwrap();
        let (b, rb) = rf_impute(&e, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let imp = ra.importance.unwrap();
        assert!(imp.iter().all(|&v| v >= 0.0));
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(imp[0] > imp[1] && imp[0] > imp[2]);
    }

    #[test]
    fn single_tree_hits_coverage_error() {
        let (e, x) = synthetic(30, 1, 2, false);
        let cfg = LearnerConfig::random_forest(ForestConfig {
            n_trees: 1,
            max_depth: Some(0),
            seed: 1,
            ..Default::default()
        });
        assert!(matches!(rf_impute(&e, &x, &cfg), Err(ImputationError::NeverOutOfBag { .. })));
    }

    #[test]
    fn constant_arm_predicts_constant() {
        let (mut e, x) = synthetic(60, 2, 8, false);
        for i in 0..e.len() {
            if e.z[i] == 0 {
                e.y[i] = 3.5;
            }
        }
        let cfg = LearnerConfig::random_forest(ForestConfig {
            n_trees: 50,
            seed: 3,
            ..Default::default()
        });
        let (imp, _) = rf_impute(&e, &x, &cfg).unwrap();
        assert!(imp.y_hat_c.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn no_signal_oob_mse_near_outcome_variance() {
        // averaged over three datasets; a single draw fluctuates by ~5%
        let mut ratios = Vec::new();
        for seed in 0..3 {
            let (e, x) = synthetic(400, 5, 21 + seed, false);
            let cfg = LearnerConfig::random_forest(ForestConfig {
                n_trees: 500,
                seed,
                ..Default::default()
            });
            let (_, report) = rf_impute(&e, &x, &cfg).unwrap();
            for (arm, mse) in [(1u8, report.mse_t), (0u8, report.mse_c)] {
                let ys: Vec<f64> = (0..e.len()).filter(|&i| e.z[i] == arm).map(|i| e.y[i]).collect();
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                let var = ys.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
                ratios.push(mse / var);
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 1.0).abs() < 0.15, "{ratios:?}");
    }

    #[test]
    fn pooled_variants_are_cross_fitted() {
        let (e, x) = synthetic(80, 2, 9, true);
        let lin = LearnerConfig {
            per_arm: false,
            ..LearnerConfig::loo_linear()
        };
        let (imp, _) = loo_linear_impute(&e, &x, &lin).unwrap();
        assert!(imp.cross_fitted && imp.len() == 80);
        let rf = LearnerConfig {
            per_arm: false,
            ..LearnerConfig::random_forest(ForestConfig {
                n_trees: 100,
                seed: 2,
                ..Default::default()
            })
        };
        let (imp, report) = rf_impute(&e, &x, &rf).unwrap();
        assert!(imp.y_hat_t.iter().all(|v| v.is_finite()));
        assert_eq!(report.importance.unwrap().len(), 2);
    }
}
