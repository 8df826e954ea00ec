//! Leave-one-out least-squares imputation via the hat-matrix identity
//! `ŷ₍₋ᵢ₎ = yᵢ − eᵢ / (1 − hᵢᵢ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{gram_cholesky, with_intercept};
use super::ImputationError;

const RIDGE_PENALTY: f64 = 1e-6;
/// Leverage at or above this is treated as a point the fit interpolates.
const MAX_LEVERAGE: f64 = 1.0 - 1e-8;

/// Which rung of the fallback chain produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMethod {
    Ols,
    Ridge,
    InterceptOnly,
}

/// Least-squares fit with leave-one-out predictions for its training rows.
#[derive(Debug, Clone)]
pub struct LooFit {
    pub method: LinearMethod,
    /// Coefficients on `[1, x]`; columns that are zero throughout the training
    /// rows get coefficient 0.
    pub beta: DVector<f64>,
    pub loo: Vec<f64>,
}

impl LooFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.beta[0] + (0..x.ncols()).map(|j| x[(i, j)] * self.beta[j + 1]).sum::<f64>())
            .collect()
    }
}

/// Fits `y ~ 1 + x` and returns leave-one-out predictions for every row,
/// walking the fallback chain OLS → ridge → intercept-only.
pub fn fit_loo(x: &DMatrix<f64>, y: &[f64]) -> Result<LooFit, ImputationError> {
    let n = y.len();
    if n < 2 {
        return Err(ImputationError::ArmTooSmall(n));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(ImputationError::NonFinite);
    }
    let active: Vec<usize> = (0..x.ncols())
        .filter(|&j| x.column(j).iter().any(|&v| v != 0.0))
        .collect();
    let design = with_intercept(&x.select_columns(&active));
    let k = design.ncols();
    let yv = DVector::from_column_slice(y);
    let gram = design.transpose() * &design;

    let expand = |b: DVector<f64>| {
        let mut full = DVector::zeros(x.ncols() + 1);
        full[0] = b[0];
        for (pos, &j) in active.iter().enumerate() {
            full[j + 1] = b[pos + 1];
        }
        full
    };

    if k > 1 {
        let attempts = [(LinearMethod::Ols, 0.0), (LinearMethod::Ridge, RIDGE_PENALTY)];
        for (method, penalty) in attempts {
            if method == LinearMethod::Ols && n <= k {
                continue;
            }
            let mut g = gram.clone();
            for j in 1..k {
                g[(j, j)] += penalty;
            }
            let chol = if method == LinearMethod::Ols {
                gram_cholesky(&g)
            } else {
                nalgebra::Cholesky::new(g)
            };
            let Some(chol) = chol else { continue };
            let beta = chol.solve(&(design.transpose() * &yv));
            let fitted = &design * &beta;
            let inv = chol.inverse();
            let mut loo = Vec::with_capacity(n);
            let mut ok = true;
            for i in 0..n {
                let row = design.row(i).transpose();
                let h = (row.transpose() * &inv * &row)[(0, 0)];
                if !(h < MAX_LEVERAGE) {
                    ok = false;
                    break;
                }
                loo.push(y[i] - (y[i] - fitted[i]) / (1.0 - h));
            }
            if ok {
                return Ok(LooFit {
                    method,
                    beta: expand(beta),
                    loo,
                });
            }
        }
    }

    let total: f64 = y.iter().sum();
    let mean = total / n as f64;
    let loo = y.iter().map(|v| (total - v) / (n - 1) as f64).collect();
    let mut beta = DVector::zeros(x.ncols() + 1);
    beta[0] = mean;
    Ok(LooFit {
        method: LinearMethod::InterceptOnly,
        beta,
        loo,
    })
}

/// Pooled fit `y ~ 1 + z + x` with both potential-outcome predictions for
/// every unit taken from the model refit without that unit.
pub(crate) fn pooled_loo(x: &DMatrix<f64>, z: &[u8], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, LinearMethod), ImputationError> {
    let n = y.len();
    let zcol = DMatrix::from_iterator(n, 1, z.iter().map(|&v| v as f64));
    let xz = {
        let mut m = DMatrix::zeros(n, x.ncols() + 1);
        m.set_column(0, &zcol.column(0));
        for j in 0..x.ncols() {
            m.set_column(j + 1, &x.column(j));
        }
        m
    };
    let design = with_intercept(&xz);
    let k = design.ncols();
    let yv = DVector::from_column_slice(y);
    let gram = design.transpose() * &design;
    for (method, penalty) in [(LinearMethod::Ols, 0.0), (LinearMethod::Ridge, RIDGE_PENALTY)] {
        if method == LinearMethod::Ols && n <= k {
            continue;
        }
        let mut g = gram.clone();
        for j in 1..k {
            g[(j, j)] += penalty;
        }
        let chol = if method == LinearMethod::Ols {
            gram_cholesky(&g)
        } else {
            nalgebra::Cholesky::new(g)
        };
        let Some(chol) = chol else { continue };
        let beta = chol.solve(&(design.transpose() * &yv));
        let inv = chol.inverse();
        let fitted = &design * &beta;
        let mut yt = Vec::with_capacity(n);
        let mut yc = Vec::with_capacity(n);
        let mut ok = true;
        for i in 0..n {
            let row = design.row(i).transpose();
            let a_row = &inv * &row;
            let h = row.dot(&a_row);
            if !(h < MAX_LEVERAGE) {
                ok = false;
                break;
            }
            // β₍₋ᵢ₎ = β − A⁻¹xᵢ eᵢ / (1 − hᵢᵢ)
            let beta_i = &beta - a_row * ((y[i] - fitted[i]) / (1.0 - h));
            let mut at = row.clone();
            at[1] = 1.0;
            let mut ac = row;
            ac[1] = 0.0;
            yt.push(at.dot(&beta_i));
            yc.push(ac.dot(&beta_i));
        }
        if ok {
            return Ok((yt, yc, method));
        }
    }
    let (yt, yc) = super::arm_mean_loo(z, y)?;
    Ok((yt, yc, LinearMethod::InterceptOnly))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force: refit without row i, predict row i.
    fn refit_oracle(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        (0..n)
            .map(|i| {
                let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
                let xd = with_intercept(&x.select_rows(&keep));
                let yd = DVector::from_iterator(n - 1, keep.iter().map(|&r| y[r]));
                let beta = (xd.transpose() * &xd).try_inverse().unwrap() * xd.transpose() * yd;
                let row = with_intercept(&x.select_rows(&[i]));
                (row * beta)[0]
            })
            .collect()
    }

    #[test]
    fn intercept_only_two_points() {
        let x = DMatrix::zeros(2, 0);
        let fit = fit_loo(&x, &[1.0, 3.0]).unwrap();
        assert_eq!(fit.method, LinearMethod::InterceptOnly);
        assert_eq!(fit.loo, vec![3.0, 1.0]);
    }

    #[test]
    fn exact_line_has_zero_loo_residuals() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let x = DMatrix::from_column_slice(4, 1, &xs);
        let y: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        let fit = fit_loo(&x, &y).unwrap();
        assert_eq!(fit.method, LinearMethod::Ols);
        for (p, t) in fit.loo.iter().zip(&y) {
            assert!((p - t).abs() <= 1e-9);
        }
    }

    #[test]
    fn hat_identity_matches_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = DMatrix::from_fn(30, 3, |_, _| rng.gen_range(-2.0..2.0));
            let y: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let fast = fit_loo(&x, &y).unwrap().loo;
            let slow = refit_oracle(&x, &y);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicated_column_uses_ridge_loo() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 12;
        let base = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let x = base.clone().insert_column(2, 0.0);
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 2 { x[(i, 0)] } else { x[(i, j)] });
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fit = fit_loo(&x, &y).unwrap();
        assert_eq!(fit.method, LinearMethod::Ridge);
        for i in 0..n {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let xd = with_intercept(&x.select_rows(&keep));
            let mut g = xd.transpose() * &xd;
            for j in 1..4 {
                g[(j, j)] += RIDGE_PENALTY;
            }
            let yd = DVector::from_iterator(n - 1, keep.iter().map(|&r| y[r]));
            let beta = g.try_inverse().unwrap() * xd.transpose() * yd;
            let pred = (with_intercept(&x.select_rows(&[i])) * beta)[0];
            assert!((pred - fit.loo[i]).abs() < 1e-6 * pred.abs().max(1.0), "{pred} {}", fit.loo[i]);
        }
    }

    #[test]
    fn single_point_arm_is_an_error() {
        assert!(matches!(fit_loo(&DMatrix::zeros(1, 0), &[1.0]), Err(ImputationError::ArmTooSmall(1))));
    }

    #[test]
    fn zero_column_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.gen_range(-1.0..1.0));
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = fit_loo(&x, &y).unwrap();
        let xz = x.clone().insert_column(2, 0.0);
        let b = fit_loo(&xz, &y).unwrap();
        assert_eq!(a.loo, b.loo);
        assert_eq!(b.beta[3], 0.0);
    }

    #[test]
    fn loo_prediction_ignores_own_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(15, 2, |_, _| rng.gen_range(-1.0..1.0));
        let mut y: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before = fit_loo(&x, &y).unwrap().loo[4];
        y[4] += 100.0;
        let after = fit_loo(&x, &y).unwrap().loo[4];
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn rejects_nan() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, f64::NAN, 2.0]);
        assert!(matches!(fit_loo(&x, &[1.0, 2.0, 3.0]), Err(ImputationError::NonFinite)));
    }

    #[test]
    fn pooled_matches_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 25;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let z: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (yt, yc, method) = pooled_loo(&x, &z, &y).unwrap();
        assert_eq!(method, LinearMethod::Ols);
        for i in [0usize, 7, 24] {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let design = |rows: &[usize], zval: Option<f64>| {
                DMatrix::from_fn(rows.len(), 4, |r, c| match c {
                    0 => 1.0,
                    1 => zval.unwrap_or(z[rows[r]] as f64),
                    _ => x[(rows[r], c - 2)],
                })
            };
            let xd = design(&keep, None);
            let yd = DVector::from_iterator(n - 1, keep.iter().map(|&r| y[r]));
            let beta = (xd.transpose() * &xd).try_inverse().unwrap() * xd.transpose() * yd;
            let t = (design(&[i], Some(1.0)) * &beta)[0];
            let c = (design(&[i], Some(0.0)) * &beta)[0];
            assert!((t - yt[i]).abs() < 1e-9);
            assert!((c - yc[i]).abs() < 1e-9);
        }
    }
}
