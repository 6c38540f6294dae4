//! Exact exchangeable predictive models behind a single sequence-model
//! interface, plus small discrete models used to probe exchangeability.
//!
//! A model state is an immutable value: [`SequenceModel::condition`]
//! returns a new state and leaves the receiver untouched. Non-contextual
//! models take an empty input slice.

mod blr;
mod conjugate;
mod covariates;
mod discrete;
mod gp;

pub use blr::{blr_condition, blr_predictive, BlrState};
pub use conjugate::{cg_condition, cg_predictive, ConjGaussianState};
pub use covariates::{CovariateDist, NoCovariates, UniformBox};
pub use discrete::{
    cid_ce_predictive, BetaBernoulli, CidCounterexample, CidCounterexampleState,
    DiscretePredictive, IidCategorical,
};
pub(crate) use gp::sq_dist;
pub use gp::{
    gp_condition, gp_joint_predictive, gp_predictive, GpPrior, GpState, RbfPrior,
    FULL_REFACTOR_LIMIT,
};

use crate::error::Result;
use crate::numerics::{Gaussian, MultivariateGaussian, RngStream};

pub trait SequenceModel: Clone + Send + Sync {
    /// Length of the covariate vector; zero for non-contextual models.
    fn input_dim(&self) -> usize;

    /// Number of observations conditioned on so far.
    fn num_observations(&self) -> usize;

    fn condition(&self, x: &[f64], y: f64) -> Result<Self>;

    /// One-step predictive distribution of the next outcome at `x`.
    fn predictive(&self, x: &[f64]) -> Result<Gaussian>;

    fn sample_next(&self, x: &[f64], rng: &mut RngStream) -> Result<f64> {
        Ok(self.predictive(x)?.sample(rng))
    }

    fn logpdf(&self, x: &[f64], y: f64) -> Result<f64> {
        self.predictive(x)?.logpdf(y)
    }

    fn condition_all<'a, I>(&self, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let mut state = self.clone();
        for (x, y) in pairs {
            state = state.condition(x, y)?;
        }
        Ok(state)
    }
}

/// Models whose joint predictive over several future inputs is available
/// in closed form.
pub trait JointPredictive {
    fn joint_predictive(&self, xs: &[Vec<f64>]) -> Result<MultivariateGaussian>;
}

pub(crate) fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(crate::Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("covariate"));
    }
    Ok(())
}
