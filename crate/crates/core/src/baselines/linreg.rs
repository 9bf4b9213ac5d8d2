//! Ridge-guarded least squares with an unpenalized intercept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// In-place Cholesky solve of `A z = b` for symmetric positive definite `A`
/// (row-major n×n). Returns `None` when a pivot is not positive.
fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Some(b)
}

/// Minimizes ‖Xβ + β₀ − y‖² + λ‖β‖² through the normal equations on centred data.
pub fn linreg_fit(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<LinearModel> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::invalid(format!("linreg needs matching non-empty data ({n} rows, {} targets)", y.len())));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::shape("ragged design matrix"));
    }
    let mean_x: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    let mut c = vec![0.0; p];
    for (row, &yi) in x.iter().zip(y) {
        for j in 0..p {
            c[j] = row[j] - mean_x[j];
        }
        let dy = yi - mean_y;
        for j in 0..p {
            if c[j] == 0.0 {
                continue;
            }
            b[j] += c[j] * dy;
            for k in 0..=j {
                a[j * p + k] += c[j] * c[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[k * p + j] = a[j * p + k];
        }
        a[j * p + j] += ridge;
    }
    let coef = if p == 0 {
        Vec::new()
    } else {
        cholesky_solve(a, b, p).ok_or_else(|| Error::invalid("normal equations are singular even with the ridge term"))?
    };
    let intercept = mean_y - coef.iter().zip(&mean_x).map(|(b, m)| b * m).sum::<f64>();
    if !intercept.is_finite() || coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite regression coefficients"));
    }
    Ok(LinearModel { coef, intercept })
}
