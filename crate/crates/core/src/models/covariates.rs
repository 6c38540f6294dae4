use serde::{Deserialize, Serialize};

use crate::numerics::RngStream;

/// Distribution of covariates X ~ P_X, drawn i.i.d.
pub trait CovariateDist: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut RngStream) -> Vec<f64>;
}

/// Non-contextual setting: every covariate is the empty vector.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoCovariates;

impl CovariateDist for NoCovariates {
    fn dim(&self) -> usize {
        0
    }

    fn sample(&self, _rng: &mut RngStream) -> Vec<f64> {
        Vec::new()
    }
}

/// Uniform on the box [low, high]^dim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub dim: usize,
    pub low: f64,
    pub high: f64,
}

impl UniformBox {
    /// U[-2, 2]^dim, the covariate law of the GP experiments.
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            dim,
            low: -half_width,
            high: half_width,
        }
    }
}

impl CovariateDist for UniformBox {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        (0..self.dim)
            .map(|_| rng.uniform_range(self.low, self.high))
            .collect()
    }
}
