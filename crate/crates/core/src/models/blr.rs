use nalgebra::{DMatrix, DVector};

use super::{check_dim, JointPredictive, SequenceModel};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::numerics::{Gaussian, MultivariateGaussian};

/// Bayesian linear regression: θ ~ N(μ, Σ), Y = θᵀX + ε, ε ~ N(0, τ²).
#[derive(Clone, Debug)]
pub struct BlrState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub tau: f64,
    t: usize,
}

impl BlrState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, tau: f64) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        ensure_finite(tau, "noise std")?;
        if tau <= 0.0 {
            return Err(invalid(format!(
                "BLR noise std must be positive, got {tau}"
            )));
        }
        // validates symmetry and positive semi-definiteness
        MultivariateGaussian::new(mean.clone(), cov.clone())?;
        Ok(Self {
            mean,
            cov,
            tau,
            t: 0,
        })
    }

    /// θ ~ N(0, I_d).
    pub fn standard(dim: usize, tau: f64) -> Result<Self> {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim), tau)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Rank-one conjugate update: Σ' = Σ − Σx xᵀΣ / s, μ' = μ + Σx (y − xᵀμ) / s,
    /// with s = xᵀΣx + τ².
    pub fn update(&self, x: &[f64], y: f64) -> Result<Self> {
        check_dim(self.dim(), x)?;
        ensure_finite(y, "observation")?;
        let xv = DVector::from_column_slice(x);
        let sx = &self.cov * &xv;
        let s = xv.dot(&sx) + self.tau * self.tau;
        let resid = y - xv.dot(&self.mean);
        let mean = &self.mean + &sx * (resid / s);
        let mut cov = &self.cov - (&sx * sx.transpose()) / s;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean,
            cov,
            tau: self.tau,
            t: self.t + 1,
        })
    }

    /// N(μ'ᵀx, xᵀΣ'x + τ²).
    pub fn predictive_at(&self, x: &[f64]) -> Result<Gaussian> {
        check_dim(self.dim(), x)?;
        let xv = DVector::from_column_slice(x);
        let var = xv.dot(&(&self.cov * &xv)).max(0.0) + self.tau * self.tau;
        Gaussian::new(xv.dot(&self.mean), var.sqrt())
    }

    /// Rows of X stacked into a matrix.
    pub(crate) fn design(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for x in xs {
            check_dim(self.dim(), x)?;
        }
        Ok(DMatrix::from_fn(xs.len(), self.dim(), |i, j| xs[i][j]))
    }
}

pub fn blr_condition(state: &BlrState, x: &[f64], y: f64) -> Result<BlrState> {
    state.update(x, y)
}

pub fn blr_predictive(state: &BlrState, x: &[f64]) -> Result<Gaussian> {
    state.predictive_at(x)
}

impl SequenceModel for BlrState {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn num_observations(&self) -> usize {
        self.t
    }

    fn condition(&self, x: &[f64], y: f64) -> Result<Self> {
        self.update(x, y)
    }

    fn predictive(&self, x: &[f64]) -> Result<Gaussian> {
        self.predictive_at(x)
    }
}

impl JointPredictive for BlrState {
    /// N(Xμ', XΣ'Xᵀ + τ²I).
    fn joint_predictive(&self, xs: &[Vec<f64>]) -> Result<MultivariateGaussian> {
        let x = self.design(xs)?;
        let k = xs.len();
        let mut cov = &x * &self.cov * x.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        cov += DMatrix::identity(k, k) * (self.tau * self.tau);
        MultivariateGaussian::new(&x * &self.mean, cov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_predictive_at_unit_vector() {
        let s = BlrState::standard(3, 1.0).unwrap();
        let p = blr_predictive(&s, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert!((p.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_reduction_matches_conjugate_example() {
        let s = BlrState::standard(3, 1.0).unwrap();
        let s1 = blr_condition(&s, &[1.0, 0.0, 0.0], 2.0).unwrap();
        let p = blr_predictive(&s1, &[1.0, 0.0, 0.0]).unwrap();
        assert!((p.mean - 1.0).abs() < 1e-14);
        assert!((p.std - 1.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn orthogonal_probe_is_unaffected() {
        let s = BlrState::standard(3, 1.0)
            .unwrap()
            .update(&[1.0, 0.0, 0.0], 2.0)
            .unwrap()
            .update(&[0.0, 1.0, 0.0], -1.0)
            .unwrap();
        let p = blr_predictive(&s, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert!((p.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let s = BlrState::standard(2, 1.0).unwrap();
        assert!(matches!(
            s.update(&[1.0], 0.0),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
        assert!(s.predictive_at(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn conditioning_never_increases_diagonal() {
        let mut s = BlrState::standard(3, 0.5).unwrap();
        let xs = [
            [0.3, -1.0, 2.0],
            [1.5, 0.2, 0.0],
            [-0.7, 0.7, 0.7],
            [0.0, 0.0, 1.0],
        ];
        for (i, x) in xs.iter().enumerate() {
            let next = s.update(x, i as f64 - 1.0).unwrap();
            for j in 0..3 {
                assert!(next.cov[(j, j)] <= s.cov[(j, j)] + 1e-10);
            }
            s = next;
        }
    }
}
