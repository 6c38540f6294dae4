//! One-step (marginal) and multi-step (autoregressive) inference over any
//! [`SequenceModel`], and the log-loss metrics used to compare them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::SequenceModel;
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceKind {
    OneStep,
    MultiStep,
}

impl InferenceKind {
    pub fn label(self) -> &'static str {
        match self {
            InferenceKind::OneStep => "one_step",
            InferenceKind::MultiStep => "multi_step",
        }
    }
}

/// Inference regime and number of generations J (always 1 for one-step).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceMode {
    kind: InferenceKind,
    j_generations: usize,
}

impl InferenceMode {
    pub fn one_step() -> Self {
        Self {
            kind: InferenceKind::OneStep,
            j_generations: 1,
        }
    }

    pub fn multi_step(j: usize) -> Result<Self> {
        if j == 0 {
            return Err(invalid("multi-step inference needs J ≥ 1"));
        }
        Ok(Self {
            kind: InferenceKind::MultiStep,
            j_generations: j,
        })
    }

    pub fn new(kind: InferenceKind, j: usize) -> Result<Self> {
        match kind {
            InferenceKind::OneStep => Ok(Self::one_step()),
            InferenceKind::MultiStep => Self::multi_step(j),
        }
    }

    pub fn kind(&self) -> InferenceKind {
        self.kind
    }

    pub fn j(&self) -> usize {
        self.j_generations
    }
}

/// J generated trajectories over the requested target inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// `samples[j][i]` is the i-th generated outcome of trajectory j.
    pub samples: Vec<Vec<f64>>,
    /// Log predictive density of each generated value, same layout.
    pub logpdf_terms: Vec<Vec<f64>>,
}

impl GenerationResult {
    pub fn trajectory_means(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
            .collect()
    }
}

/// Ancestral sampling along one trajectory; returns the values and the log
/// density of each under the predictive it was drawn from. Degenerate
/// (zero-std) predictives contribute a log density of +∞.
pub fn generate_path<M: SequenceModel>(
    model: &M,
    xs_target: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut state = model.clone();
    let mut ys = Vec::with_capacity(xs_target.len());
    let mut lps = Vec::with_capacity(xs_target.len());
    for (i, x) in xs_target.iter().enumerate() {
        let pred = state.predictive(x)?;
        let y = pred.sample(rng);
        lps.push(if pred.std > 0.0 {
            pred.logpdf(y)?
        } else {
            f64::INFINITY
        });
        ys.push(y);
        if i + 1 < xs_target.len() {
            state = state.condition(x, y)?;
        }
    }
    Ok((ys, lps))
}

/// Draws `j` independent autoregressive trajectories over `xs_target`.
/// Trajectory k uses the sub-stream `rng.derive_index(k)`; `model` is not
/// modified.
pub fn generate_multistep<M: SequenceModel>(
    model: &M,
    xs_target: &[Vec<f64>],
    j: usize,
    rng: &mut RngStream,
) -> Result<GenerationResult> {
    if j == 0 {
        return Err(invalid("j must be at least 1"));
    }
    let base = rng.derive("generate");
    let mut samples = Vec::with_capacity(j);
    let mut logpdf_terms = Vec::with_capacity(j);
    for k in 0..j {
        let mut r = base.derive_index(k as u64);
        let (ys, lps) = generate_path(model, xs_target, &mut r)?;
        samples.push(ys);
        logpdf_terms.push(lps);
    }
    // advance the caller's stream so repeated calls differ
    rng.uniform();
    Ok(GenerationResult {
        samples,
        logpdf_terms,
    })
}

/// −ln P̂(y | x, context).
pub fn onestep_logloss<M: SequenceModel>(model: &M, x: &[f64], y: f64) -> Result<f64> {
    Ok(-model.logpdf(x, y)?)
}

/// −Σ_i ln P̂(y_i | context, y_{<i}) with each term conditioned on the true
/// preceding targets.
pub fn multistep_logloss<M: SequenceModel>(model: &M, targets: &[(Vec<f64>, f64)]) -> Result<f64> {
    let mut state = model.clone();
    let mut total = 0.0;
    for (i, (x, y)) in targets.iter().enumerate() {
        total -= state.logpdf(x, *y)?;
        if i + 1 < targets.len() {
            state = state.condition(x, *y)?;
        }
    }
    Ok(total)
}

/// −Σ_i ln P̂(y_i | context), every term using the context only.
pub fn marginal_product_logloss<M: SequenceModel>(
    model: &M,
    targets: &[(Vec<f64>, f64)],
) -> Result<f64> {
    targets
        .iter()
        .try_fold(0.0, |acc, (x, y)| Ok(acc - model.logpdf(x, *y)?))
}

/// Mean of one autoregressive chain of J generations at `x_probe`.
/// For one-step this is a single predictive draw.
pub fn posterior_mean_estimate<M: SequenceModel>(
    model: &M,
    x_probe: &[f64],
    mode: InferenceMode,
    rng: &mut RngStream,
) -> Result<f64> {
    let j = mode.j();
    let mut state = model.clone();
    let mut sum = 0.0;
    for i in 0..j {
        let y = state.sample_next(x_probe, rng)?;
        sum += y;
        if i + 1 < j {
            state = state.condition(x_probe, y)?;
        }
    }
    Ok(sum / j as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConjGaussianState, GpState, RbfPrior};
    use crate::numerics::RunningStats;

    fn cg(mu: f64, sigma: f64, tau: f64) -> ConjGaussianState {
        ConjGaussianState::new(mu, sigma, tau).unwrap()
    }

    fn empty(n: usize) -> Vec<Vec<f64>> {
        vec![Vec::new(); n]
    }

    #[test]
    fn deterministic_process_generates_constant() {
        let m = cg(5.0, 0.0, 0.0);
        let g = generate_multistep(&m, &empty(4), 3, &mut RngStream::new(1)).unwrap();
        assert!(g.samples.iter().flatten().all(|&y| y == 5.0));
        assert_eq!(g.samples.len(), 3);
        assert_eq!(g.samples[0].len(), 4);
    }

    #[test]
    fn noiseless_trajectory_is_constant() {
        let m = cg(0.0, 1.0, 0.0);
        for seed in 0..1000 {
            let g = generate_multistep(&m, &empty(3), 1, &mut RngStream::new(seed)).unwrap();
            let s = &g.samples[0];
            assert_eq!(s[0], s[1]);
            assert_eq!(s[1], s[2]);
        }
        assert_eq!(m.t, 0);
    }

    #[test]
    fn onestep_logloss_examples() {
        let m = cg(0.0, 1.0, 1.0);
        let v = onestep_logloss(&m, &[], 0.0).unwrap();
        assert!((v - 1.2655121234846454).abs() < 1e-12);

        let gp = GpState::new(RbfPrior::standard(1));
        let v = onestep_logloss(&gp, &[0.0], 0.0).unwrap();
        assert!((v - 0.9239136986312568).abs() < 1e-12);

        let degenerate = cg(0.0, 0.0, 0.0);
        assert!(matches!(
            onestep_logloss(&degenerate, &[], 0.0),
            Err(crate::Error::DegenerateDensity)
        ));
    }

    #[test]
    fn single_target_reduces_to_onestep() {
        let m = cg(0.2, 0.7, 1.1).update(0.4).unwrap();
        let t = vec![(vec![], 1.3)];
        let one = onestep_logloss(&m, &[], 1.3).unwrap();
        assert_eq!(multistep_logloss(&m, &t).unwrap(), one);
        assert_eq!(marginal_product_logloss(&m, &t).unwrap(), one);
        let two = vec![(vec![], 1.3), (vec![], 1.3)];
        assert_eq!(marginal_product_logloss(&m, &two).unwrap(), 2.0 * one);
    }

    #[test]
    fn posterior_mean_estimate_edge_cases() {
        let m = cg(0.0, 1.0, 1.0);
        let mut a = RngStream::new(9);
        let mut b = RngStream::new(9);
        let est = posterior_mean_estimate(&m, &[], InferenceMode::one_step(), &mut a).unwrap();
        let draw = m.sample_next(&[], &mut b).unwrap();
        assert_eq!(est, draw);

        let pinned = cg(2.0, 0.0, 1.0);
        let stats: RunningStats = (0..200)
            .map(|_| {
                posterior_mean_estimate(
                    &pinned,
                    &[],
                    InferenceMode::multi_step(100).unwrap(),
                    &mut a,
                )
                .unwrap()
            })
            .collect();
        // per-estimate std τ/√J = 0.1
        assert!((stats.mean() - 2.0).abs() < 4.0 * 0.1 / (200f64).sqrt());
        assert!((stats.variance() - 0.01).abs() < 0.003);
    }

    #[test]
    fn noiseless_chain_returns_exact_theta() {
        let m = cg(0.3, 1.0, 0.0);
        let mut r = RngStream::new(4);
        let mut r2 = r.clone();
        let est = posterior_mean_estimate(&m, &[], InferenceMode::multi_step(30).unwrap(), &mut r)
            .unwrap();
        let theta = m.sample_next(&[], &mut r2).unwrap();
        assert!((est - theta).abs() < 1e-12);
    }

    #[test]
    fn invalid_modes() {
        assert!(InferenceMode::multi_step(0).is_err());
        assert_eq!(
            InferenceMode::new(InferenceKind::OneStep, 7).unwrap().j(),
            1
        );
    }
}
