use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_dim, JointPredictive, SequenceModel};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::numerics::{Gaussian, MultivariateGaussian, JITTER_LADDER};

/// Retained as the documented switch-over size; conditioning is always
/// incremental, see [`GpState::refactorized`] for the batch path.
pub const FULL_REFACTOR_LIMIT: usize = 512;

/// Zero-mean GP prior: covariance function plus (possibly input-dependent)
/// observation noise variance.
pub trait GpPrior: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn kernel(&self, a: &[f64], b: &[f64]) -> f64;
    fn noise_var(&self, x: &[f64]) -> f64;
}

/// K(x, x') = σ_f² exp(−‖x − x'‖² / 2ℓ²) with homoscedastic noise σ².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfPrior {
    pub signal_std: f64,
    pub lengthscale: f64,
    pub noise_std: f64,
    pub dim: usize,
}

impl RbfPrior {
    pub fn new(signal_std: f64, lengthscale: f64, noise_std: f64, dim: usize) -> Result<Self> {
        for (v, what) in [
            (signal_std, "signal std"),
            (lengthscale, "lengthscale"),
            (noise_std, "noise std"),
        ] {
            ensure_finite(v, what)?;
        }
        if signal_std <= 0.0 || lengthscale <= 0.0 || noise_std < 0.0 {
            return Err(invalid(format!(
                "RBF prior needs σ_f > 0, ℓ > 0, σ ≥ 0 (got {signal_std}, {lengthscale}, {noise_std})"
            )));
        }
        Ok(Self {
            signal_std,
            lengthscale,
            noise_std,
            dim,
        })
    }

    /// σ_f = 1, ℓ = 1, σ = 0.1.
    pub fn standard(dim: usize) -> Self {
        Self {
            signal_std: 1.0,
            lengthscale: 1.0,
            noise_std: 0.1,
            dim,
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

impl GpPrior for RbfPrior {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let s2 = self.signal_std * self.signal_std;
        s2 * (-sq_dist(a, b) / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    fn noise_var(&self, _x: &[f64]) -> f64 {
        self.noise_std * self.noise_std
    }
}

/// GP posterior over a growing set of observations.
///
/// The Cholesky factor of K(X, X) + noise is stored row by row behind
/// `Arc`s, so cloning a state (as autoregressive generation does on every
/// step) costs O(t) pointer copies and extending it costs O(t²).
#[derive(Clone)]
pub struct GpState {
    prior: Arc<dyn GpPrior>,
    xs: Vec<Arc<[f64]>>,
    ys: Vec<f64>,
    chol_rows: Vec<Arc<[f64]>>,
    // w = L⁻¹ y
    w: Vec<f64>,
    diag_jitter: Vec<f64>,
}

impl fmt::Debug for GpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GpState")
            .field("prior", &self.prior)
            .field("t", &self.ys.len())
            .finish()
    }
}

impl GpState {
    pub fn new<P: GpPrior + 'static>(prior: P) -> Self {
        Self::from_arc(Arc::new(prior))
    }

    pub fn from_arc(prior: Arc<dyn GpPrior>) -> Self {
        Self {
            prior,
            xs: Vec::new(),
            ys: Vec::new(),
            chol_rows: Vec::new(),
            w: Vec::new(),
            diag_jitter: Vec::new(),
        }
    }

    pub fn prior(&self) -> &Arc<dyn GpPrior> {
        &self.prior
    }

    pub fn xs(&self) -> impl Iterator<Item = &[f64]> {
        self.xs.iter().map(|x| &**x)
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    /// Largest diagonal jitter added while extending the factor.
    pub fn max_jitter(&self) -> f64 {
        self.diag_jitter.iter().copied().fold(0.0, f64::max)
    }

    /// Solves L v = k where k_i = K(x_i, x).
    fn forward_solve(&self, x: &[f64]) -> Vec<f64> {
        let n = self.xs.len();
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.chol_rows[i];
            let mut acc = self.prior.kernel(&self.xs[i], x);
            for (l, vj) in row[..i].iter().zip(&v) {
                acc -= l * vj;
            }
            v.push(acc / row[i]);
        }
        v
    }

    pub fn update(&self, x: &[f64], y: f64) -> Result<Self> {
        check_dim(self.prior.input_dim(), x)?;
        ensure_finite(y, "observation")?;
        let l = self.forward_solve(x);
        let kxx = self.prior.kernel(x, x) + self.prior.noise_var(x);
        let d2 = kxx - l.iter().map(|v| v * v).sum::<f64>();
        let mut jitter = 0.0;
        if d2 <= 0.0 || !d2.is_finite() {
            jitter = JITTER_LADDER.iter().copied().find(|j| d2 + j > 0.0).ok_or(
                Error::NotPositiveDefinite {
                    jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
                },
            )?;
        }
        let d = (d2 + jitter).sqrt();
        let wn = (y - l.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>()) / d;
        ensure_finite(wn, "GP weight")?;

        let mut row = l;
        row.push(d);
        let mut next = self.clone();
        next.xs.push(Arc::from(x));
        next.ys.push(y);
        next.chol_rows.push(Arc::from(row));
        next.w.push(wn);
        next.diag_jitter.push(jitter);
        Ok(next)
    }

    /// Latent f posterior at `x`: (mean, variance) without observation noise.
    pub fn latent(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(self.prior.input_dim(), x)?;
        let v = self.forward_solve(x);
        let mean = v.iter().zip(&self.w).map(|(a, b)| a * b).sum();
        let var = (self.prior.kernel(x, x) - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        Ok((mean, var))
    }

    pub fn predictive_at(&self, x: &[f64]) -> Result<Gaussian> {
        let (mean, var) = self.latent(x)?;
        Gaussian::new(mean, (var + self.prior.noise_var(x)).sqrt())
    }

    /// Same posterior computed by a batch Cholesky of the full Gram matrix.
    /// Slow; used to cross-check the incremental factor.
    pub fn refactorized(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = self.xs.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            let mut k = self.prior.kernel(&self.xs[i], &self.xs[j]);
            if i == j {
                k += self.prior.noise_var(&self.xs[i]) + self.diag_jitter[i];
            }
            k
        });
        let chol = gram
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
        let l = chol.l();
        let w = l
            .solve_lower_triangular(&DVector::from_column_slice(&self.ys))
            .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
        Ok((l, w))
    }

    /// Lower factor assembled from the incremental rows.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        let n = self.xs.len();
        DMatrix::from_fn(n, n, |i, j| if j <= i { self.chol_rows[i][j] } else { 0.0 })
    }
}

pub fn gp_condition(state: &GpState, x: &[f64], y: f64) -> Result<GpState> {
    state.update(x, y)
}

pub fn gp_predictive(state: &GpState, x: &[f64]) -> Result<Gaussian> {
    state.predictive_at(x)
}

pub fn gp_joint_predictive(
    state: &GpState,
    xs_target: &[Vec<f64>],
) -> Result<MultivariateGaussian> {
    state.joint_predictive(xs_target)
}

impl SequenceModel for GpState {
    fn input_dim(&self) -> usize {
        self.prior.input_dim()
    }

    fn num_observations(&self) -> usize {
        self.ys.len()
    }

    fn condition(&self, x: &[f64], y: f64) -> Result<Self> {
        self.update(x, y)
    }

    fn predictive(&self, x: &[f64]) -> Result<Gaussian> {
        self.predictive_at(x)
    }
}

impl JointPredictive for GpState {
    /// (μ_P, K_P) with the observation noise on the diagonal of K_P.
    fn joint_predictive(&self, xs: &[Vec<f64>]) -> Result<MultivariateGaussian> {
        let m = xs.len();
        let mut vs = Vec::with_capacity(m);
        let mut mean = DVector::zeros(m);
        for (j, x) in xs.iter().enumerate() {
            check_dim(self.prior.input_dim(), x)?;
            let v = self.forward_solve(x);
            mean[j] = v.iter().zip(&self.w).map(|(a, b)| a * b).sum();
            vs.push(v);
        }
        let mut cov = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let reduce: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                let mut c = self.prior.kernel(&xs[i], &xs[j]) - reduce;
                if i == j {
                    c = c.max(0.0) + self.prior.noise_var(&xs[i]);
                }
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        MultivariateGaussian::new(mean, cov)
    }
}
