//! Shared numerics: seeded random streams, univariate and multivariate
//! normals, Gaussian KL divergence and streaming summary statistics.

mod gaussian;
mod rng;
mod stats;

pub use gaussian::{
    cholesky_with_jitter, gaussian_logpdf, mvn_kl, normal_cdf, normal_quantile, Gaussian,
    MultivariateGaussian, JITTER_LADDER,
};
pub use rng::RngStream;
pub use stats::{least_squares_slope, MeanSe, RunningStats};

/// Standard normal CDF, Φ(z).
pub fn erf_based_normal_cdf(z: f64) -> f64 {
    normal_cdf(z)
}
