//! One-dimensional Gaussian-process regression with a squared-exponential
//! kernel.
//!
//! The prior mean is `x + c`: the process models the residual `y - x` around
//! its sample mean `c`. Bound targets (hourly max / min) track the hourly mean
//! closely, so this keeps extrapolation sensible and makes flat data exact.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Hyperparameters {
    fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.length_scale;
        self.signal_var * (-0.5 * d * d).exp()
    }
}

const JITTER: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GpRegressor {
    inputs: Vec<f64>,
    weights: DVector<f64>,
    residual_mean: f64,
    hyper: Hyperparameters,
    log_marginal_likelihood: f64,
}

impl GpRegressor {
    /// Fits with fixed hyperparameters.
    pub fn fit(inputs: &[f64], targets: &[f64], hyper: Hyperparameters) -> Result<Self> {
        check_inputs(inputs, targets)?;
        let residuals: Vec<f64> = targets.iter().zip(inputs).map(|(y, x)| y - x).collect();
        let residual_mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let centered = DVector::from_iterator(residuals.len(), residuals.iter().map(|r| r - residual_mean));
        Self::fit_centered(inputs, &centered, residual_mean, hyper)
    }

    /// Fits hyperparameters by maximising the log marginal likelihood over a
    /// fixed grid scaled to the data.
    pub fn fit_grid(inputs: &[f64], targets: &[f64]) -> Result<Self> {
        check_inputs(inputs, targets)?;
        let n = inputs.len() as f64;
        let residuals: Vec<f64> = targets.iter().zip(inputs).map(|(y, x)| y - x).collect();
        let residual_mean = residuals.iter().sum::<f64>() / n;
        let centered = DVector::from_iterator(residuals.len(), residuals.iter().map(|r| r - residual_mean));
        let var = centered.norm_squared() / n;
        let (lo, hi) = inputs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        let span = hi - lo;

        if var <= f64::EPSILON * f64::EPSILON * (1.0 + residual_mean * residual_mean) {
            let hyper = Hyperparameters {
                length_scale: span,
                signal_var: 0.0,
                noise_var: 0.0,
            };
            return Ok(GpRegressor {
                inputs: inputs.to_vec(),
                weights: DVector::zeros(inputs.len()),
                residual_mean,
                hyper,
                log_marginal_likelihood: f64::INFINITY,
            });
        }

        let mut best: Option<GpRegressor> = None;
        for ls in [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2] {
            for sv in [0.25, 1.0, 4.0, 16.0] {
                for nv in [1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 0.5] {
                    let hyper = Hyperparameters {
                        length_scale: ls * span,
                        signal_var: sv * var,
                        noise_var: nv * var,
                    };
                    let Ok(model) = Self::fit_centered(inputs, &centered, residual_mean, hyper) else {
                        continue;
                    };
                    let better = best
                        .as_ref()
                        .is_none_or(|b| model.log_marginal_likelihood > b.log_marginal_likelihood);
                    if better {
                        best = Some(model);
                    }
                }
            }
        }
        best.ok_or_else(|| Error::DegenerateInput("no hyperparameter setting gave a valid fit".into()))
    }

    fn fit_centered(
        inputs: &[f64],
        centered: &DVector<f64>,
        residual_mean: f64,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        let n = inputs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let mut v = hyper.kernel(inputs[i], inputs[j]);
            if i == j {
                v += hyper.noise_var + JITTER * (1.0 + hyper.signal_var);
            }
            v
        });
        let chol =
            Cholesky::new(k).ok_or_else(|| Error::DegenerateInput("kernel matrix not positive definite".into()))?;
        let weights = chol.solve(centered);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let lml = -0.5 * centered.dot(&weights) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(GpRegressor {
            inputs: inputs.to_vec(),
            weights,
            residual_mean,
            hyper,
            log_marginal_likelihood: lml,
        })
    }

    /// Posterior mean at `x`.
    pub fn predict(&self, x: f64) -> f64 {
        let s: f64 = self
            .inputs
            .iter()
            .zip(self.weights.iter())
            .map(|(xi, w)| self.hyper.kernel(x, *xi) * w)
            .sum();
        x + self.residual_mean + s
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }
}

fn check_inputs(inputs: &[f64], targets: &[f64]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::Parameter(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite training value".into()));
    }
    let first = inputs.first().copied().unwrap_or(0.0);
    if !inputs.iter().any(|x| *x != first) {
        return Err(Error::DegenerateInput(
            "bound model needs at least two distinct hourly means".into(),
        ));
    }
    Ok(())
}
