//! Small dense least-squares helpers shared by the linear learners and the
//! regression tables.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ContinuousCDF, Normal};

use super::ImputationError;

/// Relative pivot threshold below which a scaled Gram matrix counts as
/// rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Prepends an intercept column.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

/// Cholesky of `XᵀX + penalty` after scaling columns to unit norm; returns
/// `None` when the scaled matrix is numerically singular.
pub(crate) fn gram_cholesky(gram: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let k = gram.nrows();
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let d = gram[(j, j)];
            if d > 0.0 {
                d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(k, k, |i, j| gram[(i, j)] / (scale[i] * scale[j]));
    let chol = Cholesky::new(scaled)?;
    let l = chol.l_dirty();
    if (0..k).any(|j| l[(j, j)] * l[(j, j)] < RANK_TOL) {
        return None;
    }
    Cholesky::new(gram.clone())
}

/// Name-reporting collinearity check. Columns are tested in order against
/// the span of the earlier ones.
pub fn check_collinearity(x: &DMatrix<f64>, names: &[String]) -> Result<(), ImputationError> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut accepted: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            return Err(ImputationError::Collinear(vec![names[j].clone()]));
        }
        let mut r = col.clone();
        for q in &basis {
            let proj = q.dot(&r);
            r -= q * proj;
        }
        let rn = r.norm();
        if rn / norm < 1e-9 {
            let prev = x.select_columns(&accepted);
            let coef = solve_ls(&prev, &col).unwrap_or_else(|| DVector::zeros(accepted.len()));
            let mut involved: Vec<String> = accepted
                .iter()
                .zip(coef.iter())
                .filter(|(_, c)| c.abs() > 1e-6)
                .map(|(&i, _)| names[i].clone())
                .collect();
            involved.push(names[j].clone());
            return Err(ImputationError::Collinear(involved));
        }
        basis.push(r / rn);
        accepted.push(j);
    }
    Ok(())
}

fn solve_ls(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let gram = x.transpose() * x;
    let chol = Cholesky::new(gram)?;
    Some(chol.solve(&(x.transpose() * y)))
}

/// Coefficient table of a fitted regression with normal-approximation Wald
/// tests.
#[derive(Debug, Clone, PartialEq)]
pub struct WaldTable {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub statistics: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl WaldTable {
    pub(crate) fn new(names: Vec<String>, coefficients: Vec<f64>, standard_errors: Vec<f64>) -> Self {
        let statistics: Vec<f64> = coefficients
            .iter()
            .zip(&standard_errors)
            .map(|(b, s)| b / s)
            .collect();
        let p_values = statistics.iter().map(|&z| wald_p_value(z)).collect();
        WaldTable {
            names,
            coefficients,
            standard_errors,
            statistics,
            p_values,
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Two-sided p-value of a standard normal statistic.
pub fn wald_p_value(z: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * normal.sf(z.abs())).clamp(0.0, 1.0)
}

/// Ordinary least squares with an intercept and classical standard errors
/// `σ̂²(XᵀX)⁻¹`, `σ̂² = RSS/(n−k)`.
pub fn ols_fit(y: &[f64], x: &DMatrix<f64>, names: &[String]) -> Result<WaldTable, ImputationError> {
    let design = with_intercept(x);
    let mut all_names = vec!["(Intercept)".to_string()];
    all_names.extend(names.iter().cloned());
    check_collinearity(&design, &all_names)?;
    let (n, k) = design.shape();
    if n <= k {
        return Err(ImputationError::TooFewRows { rows: n, cols: k });
    }
    let gram = design.transpose() * &design;
    let chol = gram_cholesky(&gram).ok_or_else(|| ImputationError::Collinear(all_names.clone()))?;
    let yv = DVector::from_column_slice(y);
    let beta = chol.solve(&(design.transpose() * &yv));
    let resid = &yv - &design * &beta;
    let sigma2 = resid.norm_squared() / (n - k) as f64;
    let inv = chol.inverse();
    let se: Vec<f64> = (0..k).map(|j| (sigma2 * inv[(j, j)]).sqrt()).collect();
    Ok(WaldTable::new(all_names, beta.iter().copied().collect(), se))
}
