//! Parametric nuisance models: logistic propensity by IRLS, linear outcome means by least squares.

use nalgebra::{DMatrix, DVector};

use super::Predictor;
use crate::data::dot;
use crate::error::{Error, Result};

#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub coefficients: Vec<f64>,
}

impl Predictor for LogisticModel {
    fn predict(&self, x: &[f64]) -> f64 {
        expit(dot(x, &self.coefficients))
    }
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
}

impl Predictor for LinearModel {
    fn predict(&self, x: &[f64]) -> f64 {
        dot(x, &self.coefficients)
    }
}

#[derive(Debug, Clone)]
pub struct IrlsFit {
    pub model: LogisticModel,
    pub iterations: usize,
    /// `‖Xᵀ(y - p)‖∞` at the returned coefficients.
    pub score_norm: f64,
}

const SEPARATION_COEF: f64 = 1e3;
const SEPARATION_FIT: f64 = 1e-7;

/// Maximize the binomial log-likelihood of binary `y` on the rows of `x`
/// (row-major, `l` columns) by Newton/IRLS steps, jittering the normal equations only when singular.
pub fn fit_logistic_irls(
    x: &[f64],
    l: usize,
    y: &[u8],
    tolerance: f64,
    max_iter: usize,
    ridge: f64,
) -> Result<IrlsFit> {
    let n = y.len();
    let xm = DMatrix::from_row_slice(n, l, x);
    let yv = DVector::from_iterator(n, y.iter().map(|&a| a as f64));
    let mut beta = DVector::<f64>::zeros(l);

    let score = |beta: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let p = (&xm * beta).map(expit);
        let g = xm.transpose() * (&yv - &p);
        (p, g)
    };

    for iter in 1..=max_iter {
        let (p, grad) = score(&beta);
        if p.iter().zip(yv.iter()).all(|(pi, yi)| (pi - yi).abs() < SEPARATION_FIT) {
            return Err(Error::Separation {
                max_coef: beta.amax(),
            });
        }
        let w = p.map(|pi| pi * (1.0 - pi));
        let mut xtwx = DMatrix::<f64>::zeros(l, l);
        for (i, row) in xm.row_iter().enumerate() {
            xtwx.ger(w[i], &row.transpose(), &row.transpose(), 1.0);
        }
        for k in 0..l {
            xtwx[(k, k)] += ridge;
        }
        let step = xtwx
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .or_else(|| xtwx.lu().solve(&grad))
            .ok_or_else(|| Error::NumericalFailure("singular IRLS system".into()))?;
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) || beta.amax() > SEPARATION_COEF {
            return Err(Error::Separation {
                max_coef: beta.amax(),
            });
        }
        if step.amax() < tolerance {
            let (_, g) = score(&beta);
            return Ok(IrlsFit {
                model: LogisticModel {
                    coefficients: beta.iter().copied().collect(),
                },
                iterations: iter,
                score_norm: g.amax(),
            });
        }
    }
    let (_, g) = score(&beta);
    Err(Error::NoConvergence {
        iterations: max_iter,
        gradient_norm: g.amax(),
    })
}

/// Ordinary least squares (with ridge jitter) on a row subset.
pub fn fit_linear(x: &[f64], l: usize, y: &[f64], rows: &[usize], ridge: f64) -> Result<LinearModel> {
    let mut xtx = DMatrix::<f64>::zeros(l, l);
    let mut xty = DVector::<f64>::zeros(l);
    for &i in rows {
        let r = DVector::from_column_slice(&x[i * l..(i + 1) * l]);
        xtx.ger(1.0, &r, &r, 1.0);
        xty.axpy(y[i], &r, 1.0);
    }
    let coef = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => {
            // jitter only when the plain normal equations are singular
            for k in 0..l {
                xtx[(k, k)] += ridge;
            }
            xtx.clone()
                .cholesky()
                .map(|c| c.solve(&xty))
                .or_else(|| xtx.lu().solve(&xty))
                .ok_or_else(|| Error::NumericalFailure("singular least-squares system".into()))?
        }
    };
    Ok(LinearModel {
        coefficients: coef.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_balanced() {
        let fit = fit_logistic_irls(&[1.0; 4], 1, &[0, 1, 0, 1], 1e-8, 100, 1e-8).unwrap();
        assert!(fit.model.coefficients[0].abs() < 1e-12);
        assert!((fit.model.predict(&[1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_equations_hold() {
        let x: Vec<f64> = (0..50).flat_map(|i| [1.0, (i as f64 * 0.37).sin() * 2.0]).collect();
        let y: Vec<u8> = (0..50).map(|i| ((i * 7919) % 11 < 5) as u8).collect();
        let fit = fit_logistic_irls(&x, 2, &y, 1e-8, 100, 1e-8).unwrap();
        assert!(fit.score_norm < 1e-6, "{}", fit.score_norm);
    }

    #[test]
    fn detects_separation() {
        let x: Vec<f64> = (0..20).flat_map(|i| [1.0, i as f64 - 9.5]).collect();
        let y: Vec<u8> = (0..20).map(|i| (i >= 10) as u8).collect();
        let err = fit_logistic_irls(&x, 2, &y, 1e-8, 100, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "{err}");
    }

    #[test]
    fn reports_non_convergence() {
        let x: Vec<f64> = (0..40).flat_map(|i| [1.0, (i as f64).cos()]).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 3 == 0) as u8).collect();
        let err = fit_logistic_irls(&x, 2, &y, 1e-300, 2, 1e-8).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 2, .. }));
    }

    #[test]
    fn least_squares_recovers_line() {
        let x: Vec<f64> = (0..10).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        let rows: Vec<usize> = (0..10).collect();
        let m = fit_linear(&x, 2, &y, &rows, 0.0).unwrap();
        assert!((m.coefficients[0] - 3.0).abs() < 1e-10);
        assert!((m.coefficients[1] + 0.5).abs() < 1e-10);
    }
}
