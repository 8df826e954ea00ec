use nalgebra::{DMatrix, DVector};

use super::linalg::{check_collinearity, gram_cholesky, with_intercept, WaldTable};
use super::ImputationError;

const MAX_ITER: usize = 50;
const SCORE_TOL: f64 = 1e-8;
/// Linear predictors this large mean fitted probabilities within ~1e-13 of
/// 0 or 1: the likelihood is being maximized at infinity.
const DIVERGENCE_ETA: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub table: WaldTable,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn coefficients(&self) -> &[f64] {
        &self.table.coefficients
    }

    pub fn standard_errors(&self) -> &[f64] {
        &self.table.standard_errors
    }

    pub fn p_values(&self) -> &[f64] {
        &self.table.p_values
    }
}

/// Logistic regression of a 0/1 outcome on `1 + x` by iteratively
/// reweighted least squares. Standard errors come from the inverse observed
/// information at the optimum; p-values are two-sided Wald tests.
pub fn logistic_fit(y: &[f64], x: &DMatrix<f64>, names: &[String]) -> Result<LogisticFit, ImputationError> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ImputationError::NotBinary);
    }
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == y.len() {
        return Err(ImputationError::SingleClass);
    }
    let design = with_intercept(x);
    let mut all_names = vec!["(Intercept)".to_string()];
    all_names.extend(names.iter().cloned());
    check_collinearity(&design, &all_names)?;

    let (n, k) = design.shape();
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(k);
    let mut iterations = 0;
    loop {
        let eta = &design * &beta;
        if eta.iter().any(|e| e.abs() > DIVERGENCE_ETA) {
            return Err(ImputationError::Separation);
        }
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| m * (1.0 - m));
        let score = design.transpose() * (&yv - &mu);
        let info = {
            let mut xw = design.clone();
            for i in 0..n {
                xw.row_mut(i).scale_mut(w[i]);
            }
            design.transpose() * xw
        };
        let converged = score.amax() < SCORE_TOL;
        if converged || iterations == MAX_ITER {
            if !converged {
                return Err(ImputationError::NoConvergence(MAX_ITER));
            }
            let chol = gram_cholesky(&info).ok_or(ImputationError::Separation)?;
            let cov = chol.inverse();
            let se: Vec<f64> = (0..k).map(|j| cov[(j, j)].sqrt()).collect();
            return Ok(LogisticFit {
                table: WaldTable::new(all_names, beta.iter().copied().collect(), se),
                iterations,
            });
        }
        let chol = gram_cholesky(&info).ok_or(ImputationError::Separation)?;
        beta += chol.solve(&score);
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn separated_data_is_rejected() {
        let xs: Vec<f64> = (0..40).map(|i| (i as f64 - 19.5) / 7.0).collect();
        let y: Vec<f64> = xs.iter().map(|&v| (v > 0.0) as u8 as f64).collect();
        let x = DMatrix::from_column_slice(40, 1, &xs);
        assert!(matches!(logistic_fit(&y, &x, &["x".into()]), Err(ImputationError::Separation)));
    }

    #[test]
    fn null_model_on_balanced_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rejections = 0;
        for _ in 0..200 {
            let y: Vec<f64> = (0..200).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
            if y.iter().all(|&v| v == y[0]) {
                continue;
            }
            let fit = logistic_fit(&y, &DMatrix::zeros(200, 0), &[]).unwrap();
            let mean = y.iter().sum::<f64>() / 200.0;
            assert!((fit.coefficients()[0] - (mean / (1.0 - mean)).ln()).abs() < 1e-8);
            rejections += (fit.p_values()[0] < 0.05) as usize;
        }
        assert!(rejections < 25, "{rejections}");
    }

    #[test]
    fn recovers_known_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 5000;
        let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|&v| {
                let prob = 1.0 / (1.0 + (-(-1.0 + 2.0 * v)).exp());
                rng.gen_bool(prob) as u8 as f64
            })
            .collect();
        let fit = logistic_fit(&y, &DMatrix::from_column_slice(n, 1, &xs), &["x".into()]).unwrap();
        assert!((fit.coefficients()[0] + 1.0).abs() < 3.0 * fit.standard_errors()[0]);
        assert!((fit.coefficients()[1] - 2.0).abs() < 3.0 * fit.standard_errors()[1]);
    }

    #[test]
    fn rejects_non_binary_and_single_class() {
        let x = DMatrix::zeros(3, 0);
        assert!(matches!(logistic_fit(&[0.0, 2.0, 1.0], &x, &[]), Err(ImputationError::NotBinary)));
        assert!(matches!(logistic_fit(&[1.0, 1.0, 1.0], &x, &[]), Err(ImputationError::SingleClass)));
    }
}
