//! Horvitz–Thompson and imputation-adjusted treatment-effect estimators for
//! Bernoulli designs, with the conservative design-based variance estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Experiment;

/// Above this many terms sums switch to compensated summation.
const KAHAN_THRESHOLD: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("no treated units")]
    NoTreated,
    #[error("no control units")]
    NoControl,
    #[error("assignment probability varies within the analyzed units; estimate per stratum")]
    NonConstantP,
    #[error("imputations are not cross-fitted; the unbiasedness guarantee would not hold")]
    NotCrossFitted,
    #[error("imputations have {got} rows, experiment has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("non-finite imputation at unit {0}")]
    NonFinite(usize),
    #[error("standard errors must be positive, got {0}")]
    NonPositiveSe(f64),
}

/// Per-unit predictions of both potential outcomes.
///
/// `cross_fitted` asserts that unit i's predictions were produced without
/// using unit i's own treatment and outcome (leave-one-out or out-of-bag).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputations {
    pub y_hat_t: Vec<f64>,
    pub y_hat_c: Vec<f64>,
    pub cross_fitted: bool,
}

impl Imputations {
    pub fn zeros(n: usize) -> Self {
        Imputations {
            y_hat_t: vec![0.0; n],
            y_hat_c: vec![0.0; n],
            cross_fitted: true,
        }
    }

    pub fn len(&self) -> usize {
        self.y_hat_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat_t.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Imputations {
        Imputations {
            y_hat_t: idx.iter().map(|&i| self.y_hat_t[i]).collect(),
            y_hat_c: idx.iter().map(|&i| self.y_hat_c[i]).collect(),
            cross_fitted: self.cross_fitted,
        }
    }

    /// m̂_i = p·ŷᶜ_i + (1−p)·ŷᵗ_i
    pub fn blend(&self, p: f64) -> Vec<f64> {
        self.y_hat_c
            .iter()
            .zip(&self.y_hat_t)
            .map(|(c, t)| p * c + (1.0 - p) * t)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub tau_hat: f64,
    pub e2_c: f64,
    pub e2_t: f64,
    pub variance: f64,
    pub se: f64,
    pub n: usize,
    pub p_used: f64,
    pub covariate_set_label: String,
    pub m_hat: Vec<f64>,
}

/// Components of the variance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceParts {
    pub e2_c: f64,
    pub e2_t: f64,
    pub variance: f64,
}

/// Known potential outcomes of a synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub y_t: Vec<f64>,
    pub y_c: Vec<f64>,
    pub tau_i: Vec<f64>,
    pub tau_bar: f64,
}

impl SyntheticTruth {
    pub fn new(y_t: Vec<f64>, y_c: Vec<f64>) -> Self {
        let tau_i: Vec<f64> = y_t.iter().zip(&y_c).map(|(t, c)| t - c).collect();
        let tau_bar = sum(&tau_i) / tau_i.len() as f64;
        SyntheticTruth {
            y_t,
            y_c,
            tau_i,
            tau_bar,
        }
    }

    /// Observed outcomes under assignment `z`.
    pub fn observe(&self, z: &[u8]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| if zi == 1 { self.y_t[i] } else { self.y_c[i] })
            .collect()
    }
}

/// Sample average treatment effect of a synthetic population.
pub fn sample_ate(truth: &SyntheticTruth) -> f64 {
    sum(&truth.tau_i) / truth.tau_i.len() as f64
}

/// Sums in unit order; compensated above `KAHAN_THRESHOLD` terms.
pub(crate) fn sum(values: &[f64]) -> f64 {
    if values.len() <= KAHAN_THRESHOLD {
        return values.iter().sum();
    }
    let mut total = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let y = v - comp;
        let t = total + y;
        comp = (t - total) - y;
        total = t;
    }
    total
}

fn common_p(experiment: &Experiment) -> Result<f64, EstimatorError> {
    experiment.constant_p().ok_or(EstimatorError::NonConstantP)
}

fn arm_counts(experiment: &Experiment) -> Result<(usize, usize), EstimatorError> {
    let n_t = experiment.n_treated();
    let n_c = experiment.len() - n_t;
    if n_t == 0 {
        return Err(EstimatorError::NoTreated);
    }
    if n_c == 0 {
        return Err(EstimatorError::NoControl);
    }
    Ok((n_t, n_c))
}

fn check_imputations(experiment: &Experiment, imp: &Imputations) -> Result<(), EstimatorError> {
    let n = experiment.len();
    for got in [imp.y_hat_t.len(), imp.y_hat_c.len()] {
        if got != n {
            return Err(EstimatorError::LengthMismatch { got, expected: n });
        }
    }
    if let Some(i) = (0..n).find(|&i| !imp.y_hat_t[i].is_finite() || !imp.y_hat_c[i].is_finite()) {
        return Err(EstimatorError::NonFinite(i));
    }
    Ok(())
}

/// Horvitz–Thompson estimate; equivalent to the adjusted estimator with all
/// imputations zero, and its variance is reported the same way.
pub fn ht_estimate(experiment: &Experiment) -> Result<EstimateResult, EstimatorError> {
    let imp = Imputations::zeros(experiment.len());
    estimate_with(experiment, &imp, "none")
}

/// Imputation-adjusted estimate. Refuses imputations that are not cross-fitted.
pub fn adjusted_estimate(
    experiment: &Experiment,
    imputations: &Imputations,
    label: &str,
) -> Result<EstimateResult, EstimatorError> {
    if !imputations.cross_fitted {
        return Err(EstimatorError::NotCrossFitted);
    }
    estimate_with(experiment, imputations, label)
}

fn estimate_with(
    experiment: &Experiment,
    imputations: &Imputations,
    label: &str,
) -> Result<EstimateResult, EstimatorError> {
    check_imputations(experiment, imputations)?;
    let p = common_p(experiment)?;
    arm_counts(experiment)?;
    let n = experiment.len();
    let m_hat = imputations.blend(p);

    let mut treated = Vec::with_capacity(n);
    let mut control = Vec::with_capacity(n);
    for i in 0..n {
        let r = experiment.y[i] - m_hat[i];
        if experiment.z[i] == 1 {
            treated.push(r / p);
        } else {
            control.push(r / (1.0 - p));
        }
    }
    let nf = n as f64;
    let tau_hat = sum(&treated) / nf - sum(&control) / nf;
    let parts = variance_estimate(experiment, imputations)?;
    Ok(EstimateResult {
        tau_hat,
        e2_c: parts.e2_c,
        e2_t: parts.e2_t,
        variance: parts.variance,
        se: parts.variance.sqrt(),
        n,
        p_used: p,
        covariate_set_label: label.to_string(),
        m_hat,
    })
}

/// Arm-wise mean squared prediction errors and the variance estimate
/// `(1/N)[p/(1−p)·Ê_c² + (1−p)/p·Ê_t² + 2·sqrt(Ê_c²·Ê_t²)]`.
pub fn variance_estimate(
    experiment: &Experiment,
    imputations: &Imputations,
) -> Result<VarianceParts, EstimatorError> {
    check_imputations(experiment, imputations)?;
    let p = common_p(experiment)?;
    let (n_t, n_c) = arm_counts(experiment)?;
    let mut sq_t = Vec::with_capacity(n_t);
    let mut sq_c = Vec::with_capacity(n_c);
    for i in 0..experiment.len() {
        if experiment.z[i] == 1 {
            sq_t.push((experiment.y[i] - imputations.y_hat_t[i]).powi(2));
        } else {
            sq_c.push((experiment.y[i] - imputations.y_hat_c[i]).powi(2));
        }
    }
    let e2_t = sum(&sq_t) / n_t as f64;
    let e2_c = sum(&sq_c) / n_c as f64;
    Ok(VarianceParts {
        e2_c,
        e2_t,
        variance: variance_formula(e2_c, e2_t, p, experiment.len()),
    })
}

pub fn variance_formula(e2_c: f64, e2_t: f64, p: f64, n: usize) -> f64 {
    (p / (1.0 - p) * e2_c + (1.0 - p) / p * e2_t + 2.0 * (e2_c * e2_t).sqrt()) / n as f64
}

/// Effective sample size ratio `(se_base / se_new)²`.
pub fn ess_ratio(se_base: f64, se_new: f64) -> Result<f64, EstimatorError> {
    for se in [se_base, se_new] {
        if !(se > 0.0) || !se.is_finite() {
            return Err(EstimatorError::NonPositiveSe(se));
        }
    }
    Ok((se_base / se_new).powi(2))
}

/// Runs `f` separately in every analysis stratum. Strata are never pooled.
pub fn by_stratum<F>(experiment: &Experiment, mut f: F) -> Result<Vec<(String, EstimateResult)>, EstimatorError>
where
    F: FnMut(&Experiment, &[usize]) -> Result<EstimateResult, EstimatorError>,
{
    experiment
        .strata_indices()
        .into_iter()
        .map(|(label, idx)| {
            let sub = experiment.subset(&idx);
            f(&sub, &idx).map(|r| (label, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four() -> Experiment {
        Experiment::simple(vec![1, 1, 0, 0], vec![2.0, 4.0, 1.0, 3.0], 0.5).unwrap()
    }

    #[test]
    fn ht_difference_in_means() {
        assert_eq!(ht_estimate(&four()).unwrap().tau_hat, 1.0);
        let e = Experiment::simple(vec![1, 0], vec![5.0, 5.0], 0.5).unwrap();
        assert_eq!(ht_estimate(&e).unwrap().tau_hat, 0.0);
        let e = Experiment::simple(vec![1, 0, 0], vec![6.0, 3.0, 3.0], 1.0 / 3.0).unwrap();
        // (1/3)(6/(1/3)) − (1/3)(3/(2/3) + 3/(2/3)) = 6 − 3
        assert!((ht_estimate(&e).unwrap().tau_hat - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ht_variance_uses_raw_outcomes() {
        let r = ht_estimate(&four()).unwrap();
        assert_eq!(r.e2_t, 10.0);
        assert_eq!(r.e2_c, 5.0);
        assert_eq!(r.covariate_set_label, "none");
    }

    #[test]
    fn hand_computed_adjusted_example() {
        let imp = Imputations {
            y_hat_c: vec![1.0, 2.0, 1.0, 2.0],
            y_hat_t: vec![3.0, 4.0, 2.0, 4.0],
            cross_fitted: true,
        };
        let r = adjusted_estimate(&four(), &imp, "hand").unwrap();
        assert_eq!(r.m_hat, vec![2.0, 3.0, 1.5, 3.0]);
        assert!((r.tau_hat - 0.75).abs() < 1e-15);
        assert!((r.e2_t - 0.5).abs() < 1e-15);
        // control residuals y − ŷᶜ = (0, 1)
        assert!((r.e2_c - 0.5).abs() < 1e-15);
        assert!((r.variance - 0.5).abs() < 1e-15);
        assert_eq!(r.se, r.variance.sqrt());
    }

    #[test]
    fn variance_constants() {
        let v = variance_formula(1.0, 1.0, 0.5, 100);
        assert!((v - 0.04).abs() < 1e-15);
        assert!((v.sqrt() - 0.2).abs() < 1e-15);
        assert_eq!(variance_formula(0.0, 0.0, 0.3, 10), 0.0);
    }

    #[test]
    fn refuses_bad_inputs() {
        let mut imp = Imputations::zeros(4);
        imp.cross_fitted = false;
        assert_eq!(adjusted_estimate(&four(), &imp, "x"), Err(EstimatorError::NotCrossFitted));
        assert!(matches!(
            adjusted_estimate(&four(), &Imputations::zeros(3), "x"),
            Err(EstimatorError::LengthMismatch { .. })
        ));
        let mut e = four();
        e.z = vec![1, 1, 1, 1];
        assert_eq!(ht_estimate(&e), Err(EstimatorError::NoControl));
        e.z = vec![0, 0, 0, 0];
        assert_eq!(ht_estimate(&e), Err(EstimatorError::NoTreated));
        let mut e = four();
        e.p = vec![0.5, 0.5, 0.4, 0.4];
        assert_eq!(ht_estimate(&e), Err(EstimatorError::NonConstantP));
    }

    #[test]
    fn ess_values() {
        assert!((ess_ratio(0.1227, 0.0977).unwrap() - 1.577).abs() < 0.005);
        assert_eq!(ess_ratio(0.3, 0.3).unwrap(), 1.0);
        assert!((ess_ratio(0.009577, 0.009571).unwrap() - 1.0013).abs() < 1e-4);
        assert!(ess_ratio(0.0, 1.0).is_err());
        assert!(ess_ratio(1.0, -1.0).is_err());
    }

    #[test]
    fn sample_ate_examples() {
        assert_eq!(sample_ate(&SyntheticTruth::new(vec![2.0; 3], vec![1.0; 3])), 1.0);
        assert_eq!(sample_ate(&SyntheticTruth::new(vec![4.0, 7.0], vec![4.0, 7.0])), 0.0);
        let t = SyntheticTruth::new(vec![3.0, 5.0], vec![1.0, 1.0]);
        assert_eq!(sample_ate(&t), 3.0);
        assert_eq!(t.tau_bar, 3.0);
    }

    #[test]
    fn kahan_path_matches_exact_sum() {
        let values: Vec<f64> = (0..200_001).map(|i| if i == 0 { 1e16 } else { 1.0 }).collect();
        assert_eq!(sum(&values), 1e16 + 200_000.0);
    }

    #[test]
    fn stratified_estimates_stay_separate() {
        let mut e = Experiment::simple(vec![1, 0, 1, 0], vec![5.0, 1.0, 2.0, 2.0], 0.5).unwrap();
        e.strata = Some(vec!["a".into(), "a".into(), "b".into(), "b".into()]);
        e.p = vec![0.5, 0.5, 0.3, 0.3];
        let rows = by_stratum(&e, |sub, _| ht_estimate(sub)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1.tau_hat, 4.0);
        assert_eq!(rows[1].1.p_used, 0.3);
    }

    fn design() -> impl Strategy<Value = (Vec<u8>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (4usize..40, 0.1f64..0.9).prop_flat_map(|(n, p)| {
            (
                prop::collection::vec(0u8..2, n).prop_filter("both arms", |z| z.contains(&0) && z.contains(&1)),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                Just(p),
            )
        })
    }

    proptest! {
        #[test]
        fn zero_imputations_collapse_to_ht((z, y, _, _, p) in design()) {
            let e = Experiment::simple(z, y, p).unwrap();
            let a = adjusted_estimate(&e, &Imputations::zeros(e.len()), "none").unwrap();
            let h = ht_estimate(&e).unwrap();
            prop_assert_eq!(a.tau_hat.to_bits(), h.tau_hat.to_bits());
            prop_assert_eq!(a.variance.to_bits(), h.variance.to_bits());
        }

        #[test]
        fn shift_invariance((z, y, yt, yc, p) in design(), c in -50.0f64..50.0) {
            let e = Experiment::simple(z.clone(), y.clone(), p).unwrap();
            let imp = Imputations { y_hat_t: yt.clone(), y_hat_c: yc.clone(), cross_fitted: true };
            let base = adjusted_estimate(&e, &imp, "x").unwrap();
            let shifted = Experiment::simple(z, y.iter().map(|v| v + c).collect(), p).unwrap();
            let imp2 = Imputations {
                y_hat_t: yt.iter().map(|v| v + c).collect(),
                y_hat_c: yc.iter().map(|v| v + c).collect(),
                cross_fitted: true,
            };
            let moved = adjusted_estimate(&shifted, &imp2, "x").unwrap();
            prop_assert!((base.tau_hat - moved.tau_hat).abs() < 1e-9);
            prop_assert!((base.variance - moved.variance).abs() < 1e-9 * (1.0 + base.variance));
        }

        #[test]
        fn cross_term_is_nonnegative((z, y, yt, yc, p) in design()) {
            let e = Experiment::simple(z, y, p).unwrap();
            let imp = Imputations { y_hat_t: yt, y_hat_c: yc, cross_fitted: true };
            let r = adjusted_estimate(&e, &imp, "x").unwrap();
            let floor = (p / (1.0 - p) * r.e2_c + (1.0 - p) / p * r.e2_t) / e.len() as f64;
            prop_assert!(r.variance >= floor);
            for i in 0..e.len() {
                prop_assert_eq!(r.m_hat[i], p * imp.y_hat_c[i] + (1.0 - p) * imp.y_hat_t[i]);
            }
        }

        #[test]
        fn perfect_predictions_recover_constant_effect(
            (z, _, _, yc, p) in design(), tau in -5.0f64..5.0
        ) {
            let yt: Vec<f64> = yc.iter().map(|c| c + tau).collect();
            let truth = SyntheticTruth::new(yt.clone(), yc.clone());
            let e = Experiment::simple(z.clone(), truth.observe(&z), p).unwrap();
            let imp = Imputations { y_hat_t: yt, y_hat_c: yc, cross_fitted: true };
            let r = adjusted_estimate(&e, &imp, "oracle").unwrap();
            prop_assert!((r.tau_hat - tau).abs() < 1e-10);
            prop_assert!(r.variance < 1e-20);
        }
    }
}
