//! The expected log-likelihood gap between joint (multi-step) and
//! marginal-product (one-step) predictive models, by closed form, by
//! Gaussian KL, and by Monte Carlo.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Result};
use crate::models::{BlrState, CovariateDist, GpState, JointPredictive, SequenceModel};
use crate::numerics::{mvn_kl, MultivariateGaussian, RngStream, RunningStats};

/// Sequences per RNG chunk in Monte-Carlo estimates. Chunks are reduced in
/// index order, so results do not depend on the worker count.
const MC_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub closed_form: Option<f64>,
    pub mc_estimate: f64,
    pub mc_std_error: f64,
    pub n_samples: usize,
}

impl GapReport {
    /// |MC − closed form| in standard errors; `None` without a closed form.
    pub fn z_score(&self) -> Option<f64> {
        let cf = self.closed_form?;
        let diff = (self.mc_estimate - cf).abs();
        if self.mc_std_error > 0.0 {
            Some(diff / self.mc_std_error)
        } else if diff < 1e-12 {
            Some(0.0)
        } else {
            Some(f64::INFINITY)
        }
    }
}

/// Posterior variance of θ after t observations, σ′² = (1/σ² + t/τ²)⁻¹.
pub fn conjugate_posterior_var(sigma: f64, tau: f64, t: usize) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        1.0 / (1.0 / (sigma * sigma) + t as f64 / (tau * tau))
    }
}

/// ½[K ln(1 + r) − ln(1 + K r)] with r = σ′²/τ² and K = T − t.
pub fn gap_closed_form_gaussian(sigma: f64, tau: f64, t: usize, big_t: usize) -> Result<f64> {
    ensure_finite(sigma, "sigma")?;
    ensure_finite(tau, "tau")?;
    if tau <= 0.0 || sigma < 0.0 {
        return Err(invalid(format!(
            "need τ > 0 and σ ≥ 0 (got σ={sigma}, τ={tau})"
        )));
    }
    if big_t <= t {
        return Err(invalid(format!("horizon T={big_t} must exceed t={t}")));
    }
    let k = (big_t - t) as f64;
    let r = conjugate_posterior_var(sigma, tau, t) / (tau * tau);
    Ok((0.5 * (k * r.ln_1p() - (k * r).ln_1p())).max(0.0))
}

/// Joint predictive of the T − t future outcomes of the normal-normal model
/// after t observations: τ²I + σ′²·11ᵀ.
pub fn assemble_conjugate_joint(
    sigma: f64,
    tau: f64,
    t: usize,
    big_t: usize,
) -> Result<MultivariateGaussian> {
    if big_t <= t {
        return Err(invalid(format!("horizon T={big_t} must exceed t={t}")));
    }
    let k = big_t - t;
    let v = conjugate_posterior_var(sigma, tau, t);
    let tau2 = tau * tau;
    let cov = DMatrix::from_fn(k, k, |i, j| v + if i == j { tau2 } else { 0.0 });
    MultivariateGaussian::new(DVector::zeros(k), cov)
}

/// KL(N(μ, Σ) ‖ N(μ, diag Σ)) = ½ (Σ ln Σ_ii − ln |Σ|).
pub fn kl_diagonalization(joint: &MultivariateGaussian) -> Result<f64> {
    let cov = joint.cov();
    let mut log_diag = 0.0;
    for i in 0..joint.dim() {
        let d = cov[(i, i)];
        if d <= 0.0 {
            return Err(crate::Error::NotPositiveDefinite {
                jitter: joint.jitter(),
            });
        }
        log_diag += d.ln();
    }
    Ok(0.5 * (log_diag - joint.log_det()))
}

/// Diagonalization KL of the BLR joint predictive N(Xμ′, XΣ′Xᵀ + τ²I).
pub fn kl_blr(xs_target: &[Vec<f64>], state: &BlrState) -> Result<f64> {
    kl_diagonalization(&state.joint_predictive(xs_target)?)
}

/// KL between the GP joint posterior predictive and its diagonalization.
pub fn kl_gp(state: &GpState, xs_target: &[Vec<f64>]) -> Result<f64> {
    let joint = state.joint_predictive(xs_target)?;
    mvn_kl(&joint, &joint.diagonalized()?)
}

struct GapSample {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

fn draw_sequence<M: SequenceModel>(
    model: &M,
    big_t: usize,
    covariates: &dyn CovariateDist,
    rng: &mut RngStream,
) -> Result<GapSample> {
    let x: Vec<Vec<f64>> = (0..big_t).map(|_| covariates.sample(rng)).collect();
    let mut state = model.clone();
    let mut y = Vec::with_capacity(big_t);
    for xi in &x {
        let yi = state.sample_next(xi, rng)?;
        state = state.condition(xi, yi)?;
        y.push(yi);
    }
    Ok(GapSample { x, y })
}

fn chunked_mc<F>(n: usize, rng: &RngStream, per_chunk: F) -> Result<RunningStats>
where
    F: Fn(usize, &mut RngStream) -> Result<RunningStats> + Sync,
{
    let n_chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<Result<RunningStats>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut r = rng.derive_index(c as u64);
            per_chunk(len, &mut r)
        })
        .collect();
    let mut total = RunningStats::new();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Monte-Carlo estimate of E[ln P^J(y_{t+1:T}) − ln P^M(y_{t+1:T})] with
/// sequences drawn from `model` itself (covariates i.i.d. from
/// `covariates`).
pub fn gap_monte_carlo<M: SequenceModel>(
    model: &M,
    t: usize,
    big_t: usize,
    n_seq: usize,
    covariates: &dyn CovariateDist,
    rng: &mut RngStream,
) -> Result<GapReport> {
    if big_t <= t {
        return Err(invalid(format!("horizon T={big_t} must exceed t={t}")));
    }
    if n_seq < 100 {
        return Err(invalid(format!("need at least 100 sequences, got {n_seq}")));
    }
    if covariates.dim() != model.input_dim() {
        return Err(crate::Error::DimensionMismatch {
            expected: model.input_dim(),
            got: covariates.dim(),
        });
    }
    let base = rng.derive("gap_mc");
    rng.uniform();
    let stats = chunked_mc(n_seq, &base, |len, r| {
        let mut acc = RunningStats::new();
        for _ in 0..len {
            let s = draw_sequence(model, big_t, covariates, r)?;
            let mut context = model.clone();
            for i in 0..t {
                context = context.condition(&s.x[i], s.y[i])?;
            }
            let mut running = context.clone();
            let mut diff = 0.0;
            for i in t..big_t {
                diff += running.logpdf(&s.x[i], s.y[i])? - context.logpdf(&s.x[i], s.y[i])?;
                if i + 1 < big_t {
                    running = running.condition(&s.x[i], s.y[i])?;
                }
            }
            acc.push(diff);
        }
        Ok(acc)
    })?;
    Ok(GapReport {
        closed_form: None,
        mc_estimate: stats.mean(),
        mc_std_error: stats.std_error(),
        n_samples: n_seq,
    })
}

/// E over x_{1:T} and y_{1:t} of the diagonalization KL of the joint
/// predictive at x_{t+1:T}: the exact gap for Gaussian models, up to the
/// outer Monte-Carlo average.
pub fn expected_diagonalization_kl<M>(
    model: &M,
    t: usize,
    big_t: usize,
    n_sets: usize,
    covariates: &dyn CovariateDist,
    rng: &mut RngStream,
) -> Result<RunningStats>
where
    M: SequenceModel + JointPredictive,
{
    if big_t <= t {
        return Err(invalid(format!("horizon T={big_t} must exceed t={t}")));
    }
    let base = rng.derive("expected_kl");
    rng.uniform();
    chunked_mc(n_sets, &base, |len, r| {
        let mut acc = RunningStats::new();
        for _ in 0..len {
            let s = draw_sequence(model, t, covariates, r)?;
            let mut context = model.clone();
            for i in 0..t {
                context = context.condition(&s.x[i], s.y[i])?;
            }
            let targets: Vec<Vec<f64>> = (t..big_t).map(|_| covariates.sample(r)).collect();
            acc.push(kl_diagonalization(&context.joint_predictive(&targets)?)?);
        }
        Ok(acc)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConjGaussianState, NoCovariates, RbfPrior};

    const GAP_1_1_0_2: f64 = 0.14384103622589046;

    #[test]
    fn closed_form_examples() {
        assert_eq!(gap_closed_form_gaussian(1.3, 0.4, 3, 4).unwrap(), 0.0);
        assert_eq!(gap_closed_form_gaussian(0.0, 1.0, 0, 10).unwrap(), 0.0);
        let g = gap_closed_form_gaussian(1.0, 1.0, 0, 2).unwrap();
        assert!((g - GAP_1_1_0_2).abs() < 1e-15);
        assert!(gap_closed_form_gaussian(1.0, 1.0, 2, 2).is_err());
    }

    #[test]
    fn diagonalization_examples() {
        let diag =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![2.0, 0.0], vec![0.0, 3.0]])
                .unwrap();
        assert!(kl_diagonalization(&diag).unwrap().abs() < 1e-15);
        let c =
            MultivariateGaussian::from_parts(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.5, 1.0]])
                .unwrap();
        assert!((kl_diagonalization(&c).unwrap() - GAP_1_1_0_2).abs() < 1e-14);
        let j = assemble_conjugate_joint(1.0, 1.0, 0, 2).unwrap();
        assert_eq!(j.cov()[(0, 0)], 2.0);
        assert!((kl_diagonalization(&j).unwrap() - GAP_1_1_0_2).abs() < 1e-14);
        assert!((mvn_kl(&c, &c.diagonalized().unwrap()).unwrap() - GAP_1_1_0_2).abs() < 1e-14);
    }

    #[test]
    fn blr_examples() {
        let s = BlrState::standard(3, 1.0).unwrap();
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        assert!(kl_blr(&[e1.clone()], &s).unwrap().abs() < 1e-15);
        assert!((kl_blr(&[e1.clone(), e1.clone()], &s).unwrap() - GAP_1_1_0_2).abs() < 1e-14);
        assert!(kl_blr(&[e1, e2], &s).unwrap().abs() < 1e-15);
    }

    #[test]
    fn gp_examples() {
        let s = GpState::new(RbfPrior::standard(1));
        assert!(kl_gp(&s, &[vec![0.2]]).unwrap().abs() < 1e-15);
        assert!(kl_gp(&s, &[vec![0.0], vec![10.0]]).unwrap() < 1e-12);
        let v = kl_gp(&s, &[vec![0.5], vec![0.5]]).unwrap();
        assert!((v - 1.9634680628117216).abs() < 1e-10, "{v}");
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let m = ConjGaussianState::new(0.0, 1.0, 1.0).unwrap();
        let rep =
            gap_monte_carlo(&m, 0, 2, 20_000, &NoCovariates, &mut RngStream::new(11)).unwrap();
        assert!(rep.mc_std_error > 0.0);
        assert!((rep.mc_estimate - GAP_1_1_0_2).abs() < 4.0 * rep.mc_std_error);

        let pinned = ConjGaussianState::new(0.0, 0.0, 1.0).unwrap();
        let rep =
            gap_monte_carlo(&pinned, 0, 5, 1000, &NoCovariates, &mut RngStream::new(1)).unwrap();
        assert_eq!(rep.mc_estimate, 0.0);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let m = ConjGaussianState::new(0.0, 0.5, 1.0).unwrap();
        let a = gap_monte_carlo(&m, 1, 4, 3000, &NoCovariates, &mut RngStream::new(5)).unwrap();
        let b = gap_monte_carlo(&m, 1, 4, 3000, &NoCovariates, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(gap_monte_carlo(&m, 1, 4, 99, &NoCovariates, &mut RngStream::new(5)).is_err());
    }

    #[test]
    fn monotone_in_parameters() {
        let sigmas = [0.1, 0.5, 1.0, 2.0];
        for w in sigmas.windows(2) {
            assert!(
                gap_closed_form_gaussian(w[0], 1.0, 1, 6).unwrap()
                    <= gap_closed_form_gaussian(w[1], 1.0, 1, 6).unwrap()
            );
        }
        for k in 2..10 {
            assert!(
                gap_closed_form_gaussian(1.0, 1.0, 1, 1 + k).unwrap()
                    <= gap_closed_form_gaussian(1.0, 1.0, 1, 2 + k).unwrap()
            );
        }
        for t in 0..10 {
            assert!(
                gap_closed_form_gaussian(1.0, 1.0, t + 1, t + 6).unwrap()
                    <= gap_closed_form_gaussian(1.0, 1.0, t, t + 5).unwrap()
            );
        }
    }
}
