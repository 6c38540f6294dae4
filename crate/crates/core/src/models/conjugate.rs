use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_dim, JointPredictive, SequenceModel};
use crate::error::{ensure_finite, invalid, Result};
use crate::numerics::{Gaussian, MultivariateGaussian};

/// Normal-normal conjugate model: θ ~ N(μ, σ²), Y | θ ~ N(θ, τ²).
///
/// The posterior is recomputed from the sufficient statistics (n, Σy) on
/// every update, so it is independent of observation order bit for bit.
/// `sigma0 = 0` pins θ at the prior mean; `tau = 0` makes the first
/// observation reveal θ exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjGaussianState {
    pub mu0: f64,
    pub sigma0: f64,
    pub tau: f64,
    pub t: usize,
    pub sum: f64,
    pub mu_t: f64,
    pub var_t: f64,
}

impl ConjGaussianState {
    pub fn new(mu0: f64, sigma0: f64, tau: f64) -> Result<Self> {
        ensure_finite(mu0, "prior mean")?;
        ensure_finite(sigma0, "prior std")?;
        ensure_finite(tau, "noise std")?;
        if sigma0 < 0.0 || tau < 0.0 {
            return Err(invalid(format!(
                "negative std (sigma0={sigma0}, tau={tau})"
            )));
        }
        Ok(Self {
            mu0,
            sigma0,
            tau,
            t: 0,
            sum: 0.0,
            mu_t: mu0,
            var_t: sigma0 * sigma0,
        })
    }

    /// A deterministic arm that always yields `value`.
    pub fn constant(value: f64) -> Result<Self> {
        Self::new(value, 0.0, 0.0)
    }

    fn posterior(mu0: f64, sigma0: f64, tau: f64, n: usize, sum: f64) -> (f64, f64) {
        if sigma0 == 0.0 || n == 0 {
            return (mu0, sigma0 * sigma0);
        }
        if tau == 0.0 {
            return (sum / n as f64, 0.0);
        }
        let prior_prec = 1.0 / (sigma0 * sigma0);
        let noise_prec = 1.0 / (tau * tau);
        let prec = prior_prec + n as f64 * noise_prec;
        ((prior_prec * mu0 + sum * noise_prec) / prec, 1.0 / prec)
    }

    pub fn predictive_dist(&self) -> Gaussian {
        Gaussian {
            mean: self.mu_t,
            std: (self.var_t + self.tau * self.tau).sqrt(),
        }
    }

    /// Posterior over θ.
    pub fn posterior_dist(&self) -> Gaussian {
        Gaussian {
            mean: self.mu_t,
            std: self.var_t.sqrt(),
        }
    }

    pub fn update(&self, y: f64) -> Result<Self> {
        ensure_finite(y, "observation")?;
        let t = self.t + 1;
        let sum = self.sum + y;
        let (mu_t, var_t) = Self::posterior(self.mu0, self.sigma0, self.tau, t, sum);
        Ok(Self {
            t,
            sum,
            mu_t,
            var_t,
            ..*self
        })
    }
}

/// Posterior update after observing `y`.
pub fn cg_condition(state: &ConjGaussianState, y: f64) -> Result<ConjGaussianState> {
    state.update(y)
}

/// One-step predictive N(a_t, σ_t² + τ²).
pub fn cg_predictive(state: &ConjGaussianState) -> Gaussian {
    state.predictive_dist()
}

impl SequenceModel for ConjGaussianState {
    fn input_dim(&self) -> usize {
        0
    }

    fn num_observations(&self) -> usize {
        self.t
    }

    fn condition(&self, x: &[f64], y: f64) -> Result<Self> {
        check_dim(0, x)?;
        self.update(y)
    }

    fn predictive(&self, x: &[f64]) -> Result<Gaussian> {
        check_dim(0, x)?;
        Ok(self.predictive_dist())
    }
}

impl JointPredictive for ConjGaussianState {
    /// N(a_t·1, τ²I + σ_t²·11ᵀ) over `xs.len()` future observations.
    fn joint_predictive(&self, xs: &[Vec<f64>]) -> Result<MultivariateGaussian> {
        for x in xs {
            check_dim(0, x)?;
        }
        let k = xs.len();
        let tau2 = self.tau * self.tau;
        let cov = DMatrix::from_fn(k, k, |i, j| self.var_t + if i == j { tau2 } else { 0.0 });
        MultivariateGaussian::new(DVector::from_element(k, self.mu_t), cov)
    }
}
