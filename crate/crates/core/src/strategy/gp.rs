//! Gaussian-process regression with a fixed squared-exponential kernel.
//!
//! Observations are standardized before fitting and predictions are mapped
//! back, so the reported standard deviation is in units of the observed
//! metric (`signal_var` scaled by the sample variance of `y`).

use serde::{Deserialize, Serialize};

use super::StrategyError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            length_scale: 0.5,
            signal_var: 1.0,
            noise_var: 1e-4,
        }
    }
}

impl KernelParams {
    pub fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_var * (-sq / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateState {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub kernel: KernelParams,
    pub f_best: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

/// A fitted posterior, reusable across many queries.
#[derive(Debug, Clone)]
pub struct FittedGp {
    x: Vec<Vec<f64>>,
    kernel: KernelParams,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
}

/// Lower-triangular `L` with `a = L Lᵀ`, or `None` if `a` is not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d.is_nan() || d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn forward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn backward_solve_transposed(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

impl FittedGp {
    pub fn fit(state: &SurrogateState) -> Result<FittedGp, StrategyError> {
        let n = state.x.len();
        if n == 0 || state.y.len() != n {
            return Err(StrategyError::NoObservations);
        }
        let y_mean = state.y.iter().sum::<f64>() / n as f64;
        let var = state.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = state.y.iter().map(|v| (v - y_mean) / y_scale).collect();

        let base: Vec<Vec<f64>> = state
            .x
            .iter()
            .map(|a| state.x.iter().map(|b| state.kernel.k(a, b)).collect())
            .collect();
        let mut noise = state.kernel.noise_var;
        let chol = loop {
            let mut m = base.clone();
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += noise;
            }
            if let Some(l) = cholesky(&m) {
                break l;
            }
            noise *= 10.0;
            if noise > 1e-2 {
                return Err(StrategyError::NotPositiveDefinite);
            }
        };
        let alpha = backward_solve_transposed(&chol, &forward_solve(&chol, &ys));
        Ok(FittedGp {
            x: state.x.clone(),
            kernel: state.kernel,
            chol,
            alpha,
            y_mean,
            y_scale,
        })
    }

    /// Standard deviation the observations were divided by before fitting.
    pub fn y_scale(&self) -> f64 {
        self.y_scale
    }

    pub fn predict(&self, query: &[f64]) -> Prediction {
        let ks: Vec<f64> = self.x.iter().map(|xi| self.kernel.k(xi, query)).collect();
        let mean_std: f64 = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_solve(&self.chol, &ks);
        let var = (self.kernel.k(query, query) - v.iter().map(|t| t * t).sum::<f64>()).max(0.0);
        Prediction {
            mean: self.y_mean + self.y_scale * mean_std,
            std: self.y_scale * var.sqrt(),
        }
    }
}

/// Posterior mean and standard deviation at `query`.
pub fn gp_fit_predict(state: &SurrogateState, query: &[f64]) -> Result<Prediction, StrategyError> {
    Ok(FittedGp::fit(state)?.predict(query))
}
