use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use crate::error::{ensure_finite, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Jitter ladder for factorizing nearly singular covariances.
pub const JITTER_LADDER: [f64; 3] = [1e-10, 1e-9, 1e-8];

/// Univariate normal distribution N(mean, std²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        ensure_finite(mean, "gaussian mean")?;
        ensure_finite(std, "gaussian std")?;
        if std < 0.0 {
            return Err(Error::InvalidArgument(format!("negative std {std}")));
        }
        Ok(Self { mean, std })
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    pub fn logpdf(&self, y: f64) -> Result<f64> {
        gaussian_logpdf(*self, y)
    }

    pub fn pdf(&self, y: f64) -> Result<f64> {
        self.logpdf(y).map(f64::exp)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        if self.std == 0.0 {
            self.mean
        } else {
            self.mean + self.std * rng.standard_normal()
        }
    }
}

/// ln N(y; mean, std²).
pub fn gaussian_logpdf(g: Gaussian, y: f64) -> Result<f64> {
    ensure_finite(y, "observation")?;
    ensure_finite(g.mean, "gaussian mean")?;
    ensure_finite(g.std, "gaussian std")?;
    if g.std == 0.0 {
        return Err(Error::DegenerateDensity);
    }
    let z = (y - g.mean) / g.std;
    Ok(-0.5 * LN_2PI - g.std.ln() - 0.5 * z * z)
}

/// Standard normal CDF via the complementary error function, which keeps
/// full relative precision in the lower tail.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Inverse of [`normal_cdf`] on (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

/// Lower Cholesky factor with the jitter ladder applied when the plain
/// factorization fails. Returns the factor and the jitter that was used.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        if c.l_dirty()
            .diagonal()
            .iter()
            .all(|d| d.is_finite() && *d > 0.0)
        {
            return Ok((c, 0.0));
        }
    }
    let n = a.nrows();
    for jitter in JITTER_LADDER {
        let shifted = a + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

pub(crate) fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct MultivariateGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    jitter: f64,
}

impl MultivariateGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("multivariate gaussian parameters"));
        }
        let scale = cov.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let asymmetry = max_asymmetry(&cov);
        if asymmetry > 1e-10 * scale {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let (c, jitter) = cholesky_with_jitter(&cov)?;
        Ok(Self {
            mean,
            cov,
            chol: c.unpack(),
            jitter,
        })
    }

    pub fn from_parts(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.len(),
            });
        }
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        Self::new(DVector::from_vec(mean), m)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular factor of `cov + jitter·I`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Same mean, covariance with all off-diagonal entries zeroed.
    pub fn diagonalized(&self) -> Result<Self> {
        let diag = DMatrix::from_diagonal(&self.cov.diagonal());
        Self::new(self.mean.clone(), diag)
    }

    /// Marginal of coordinate `i`.
    pub fn marginal(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.mean[i],
            std: self.cov[(i, i)].max(0.0).sqrt(),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.standard_normal());
        &self.mean + &self.chol * z
    }

    pub fn logpdf(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
            });
        }
        let diff = DVector::from_column_slice(y) - &self.mean;
        let w = self
            .chol
            .solve_lower_triangular(&diff)
            .ok_or(Error::NotPositiveDefinite {
                jitter: self.jitter,
            })?;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det() + w.norm_squared()))
    }
}

/// KL(p ‖ q) between two multivariate normals of equal dimension.
pub fn mvn_kl(p: &MultivariateGaussian, q: &MultivariateGaussian) -> Result<f64> {
    let k = p.dim();
    if q.dim() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: q.dim(),
        });
    }
    let singular = Error::NotPositiveDefinite { jitter: q.jitter };
    // tr(Σq⁻¹ Σp) = ‖Lq⁻¹ Lp‖_F²
    let m = q.chol.solve_lower_triangular(&p.chol).ok_or(singular)?;
    let trace = m.norm_squared();
    let diff = &q.mean - &p.mean;
    let w = q
        .chol
        .solve_lower_triangular(&diff)
        .ok_or(Error::NotPositiveDefinite { jitter: q.jitter })?;
    let maha = w.norm_squared();
    Ok(0.5 * (trace + maha - k as f64 + q.log_det() - p.log_det()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logpdf_reference_values() {
        let std_normal = Gaussian::new(0.0, 1.0).unwrap();
        assert!((std_normal.logpdf(0.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-14);
        let shifted = Gaussian::new(1.0, 1.0).unwrap();
        assert!((shifted.logpdf(1.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-14);
        let wide = Gaussian::new(0.0, 2.0).unwrap();
        assert!((wide.logpdf(2.0).unwrap() + 2.112_085_713_764_618).abs() < 1e-14);
    }

    #[test]
    fn logpdf_errors() {
        let g = Gaussian {
            mean: 0.0,
            std: 0.0,
        };
        assert!(matches!(g.logpdf(0.0), Err(Error::DegenerateDensity)));
        let g = Gaussian {
            mean: 0.0,
            std: 1.0,
        };
        assert!(matches!(g.logpdf(f64::NAN), Err(Error::NonFinite(_))));
        assert!(Gaussian::new(f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        // high-precision references (mpmath, 30 digits)
        let cases = [
            (-1.0, 0.158_655_253_931_457_05),
            (-3.5, 2.326_290_790_355_250_4e-4),
            (2.2, 0.986_096_552_486_501_4),
            (-8.0, 6.220_960_574_271_784e-16),
        ];
        for (z, want) in cases {
            assert!(
                (normal_cdf(z) - want).abs() <= 1e-12,
                "z={z} got {:e} diff {:e}",
                normal_cdf(z),
                normal_cdf(z) - want
            );
        }
        assert!((normal_cdf(40.0) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_examples() {
        let p = MultivariateGaussian::from_parts(vec![0.0], vec![vec![1.0]]).unwrap();
        let q = MultivariateGaussian::from_parts(vec![1.0], vec![vec![1.0]]).unwrap();
        assert!((mvn_kl(&p, &q).unwrap() - 0.5).abs() < 1e-14);
        assert!(mvn_kl(&p, &p).unwrap().abs() < 1e-14);

        let p =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.5, 1.0]])
                .unwrap();
        let q = p.diagonalized().unwrap();
        assert!((mvn_kl(&p, &q).unwrap() - 0.143_841_036_225_890_46).abs() < 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = MultivariateGaussian::from_parts(vec![0.0], vec![vec![1.0]]).unwrap();
        let q =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
                .unwrap();
        assert!(matches!(
            mvn_kl(&p, &q),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jitter_rescues_rank_deficient_cov() {
        // rank one
        let g =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![1.0, 1.0], vec![1.0, 1.0]])
                .unwrap();
        assert!(g.jitter() > 0.0 && g.jitter() <= 1e-8);
    }

    #[test]
    fn indefinite_cov_fails() {
        let r =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn asymmetric_cov_rejected() {
        let r =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![1.0, 0.2], vec![0.1, 1.0]]);
        assert!(matches!(r, Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn mvn_logpdf_matches_univariate() {
        let g = MultivariateGaussian::from_parts(vec![1.0], vec![vec![4.0]]).unwrap();
        let u = Gaussian::new(1.0, 2.0).unwrap();
        assert!((g.logpdf(&[2.5]).unwrap() - u.logpdf(2.5).unwrap()).abs() < 1e-13);
    }
}
