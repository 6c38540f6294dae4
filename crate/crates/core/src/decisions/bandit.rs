use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CurveSummary, ResultRow};
use crate::error::{invalid, Result};
use crate::inference::{posterior_mean_estimate, InferenceMode};
use crate::models::{ConjGaussianState, SequenceModel};
use crate::numerics::RngStream;

/// One arm: either Gaussian (θ ~ N(μ, σ²), reward ~ N(θ, τ²)) or a
/// deterministic constant reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditArmSpec {
    pub name: String,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub constant_reward: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArmKind {
    Gaussian { mu: f64, sigma: f64, tau: f64 },
    Constant(f64),
}

impl BanditArmSpec {
    pub fn gaussian(name: &str, mu: f64, sigma: f64, tau: f64) -> Self {
        Self {
            name: name.to_string(),
            mu: Some(mu),
            sigma: Some(sigma),
            tau: Some(tau),
            constant_reward: None,
        }
    }

    pub fn constant(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            mu: None,
            sigma: None,
            tau: None,
            constant_reward: Some(value),
        }
    }

    pub fn kind(&self) -> Result<ArmKind> {
        match (self.mu, self.sigma, self.tau, self.constant_reward) {
            (Some(mu), Some(sigma), Some(tau), None) => {
                if !(mu.is_finite() && sigma.is_finite() && tau.is_finite())
                    || sigma < 0.0
                    || tau < 0.0
                {
                    return Err(invalid(format!(
                        "arm `{}`: need finite μ, σ ≥ 0, τ ≥ 0",
                        self.name
                    )));
                }
                Ok(ArmKind::Gaussian { mu, sigma, tau })
            }
            (None, None, None, Some(c)) if c.is_finite() => Ok(ArmKind::Constant(c)),
            _ => Err(invalid(format!(
                "arm `{}` must set either all of mu/sigma/tau or only constant_reward",
                self.name
            ))),
        }
    }

    /// Exact prior predictive model of this arm's rewards.
    pub fn prior_model(&self) -> Result<ConjGaussianState> {
        match self.kind()? {
            ArmKind::Gaussian { mu, sigma, tau } => ConjGaussianState::new(mu, sigma, tau),
            ArmKind::Constant(c) => ConjGaussianState::constant(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BanditRunConfig {
    pub arms: Vec<BanditArmSpec>,
    pub horizon: usize,
    pub mode: InferenceMode,
    pub n_reps: usize,
    pub seed: u64,
}

impl BanditRunConfig {
    pub fn validate(&self) -> Result<Vec<ArmKind>> {
        if self.arms.is_empty() {
            return Err(invalid("no arms"));
        }
        if self.horizon == 0 || self.n_reps == 0 {
            return Err(invalid("horizon and n_reps must be at least 1"));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("arm names must be unique"));
        }
        self.arms.iter().map(BanditArmSpec::kind).collect()
    }
}

/// Known-mean noisy arm against a constant 0.
pub fn one_armed_instance(mu: f64, tau: f64) -> Vec<BanditArmSpec> {
    vec![
        BanditArmSpec::gaussian("noisy", mu, 0.0, tau),
        BanditArmSpec::constant("zero", 0.0),
    ]
}

/// Arm C (μ=0, σ=0.5, τ=0.5) and arm D (μ=0, σ=0.9, τ=0.1).
pub fn arms_c_d() -> Vec<BanditArmSpec> {
    vec![
        BanditArmSpec::gaussian("C", 0.0, 0.5, 0.5),
        BanditArmSpec::gaussian("D", 0.0, 0.9, 0.1),
    ]
}

/// One replication's decisions and outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditTrace {
    pub theta: Vec<f64>,
    pub arms: Vec<usize>,
    pub rewards: Vec<f64>,
    /// max_a t·θ*_a − Σ_{s≤t} Y_s.
    pub cumulative_regret: Vec<f64>,
    /// Whether the pulled arm had a strictly lower θ* than the best arm.
    pub wrong: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub label: String,
    pub horizon: usize,
    pub traces: Vec<BanditTrace>,
    pub regret: CurveSummary,
}

impl RegretCurve {
    fn from_traces(label: String, horizon: usize, traces: Vec<BanditTrace>) -> Self {
        let regret = CurveSummary::from_rows(
            traces.iter().map(|t| t.cumulative_regret.as_slice()),
            horizon,
        );
        Self {
            label,
            horizon,
            traces,
            regret,
        }
    }

    /// Fraction of all decisions that pulled a suboptimal arm.
    pub fn wrong_pull_rate(&self) -> f64 {
        let (w, n) = self
            .traces
            .iter()
            .flat_map(|t| &t.wrong)
            .fold((0usize, 0usize), |(w, n), &b| (w + b as usize, n + 1));
        w as f64 / n.max(1) as f64
    }

    pub fn final_regret(&self) -> (f64, f64) {
        let i = self.horizon - 1;
        (self.regret.mean[i], self.regret.se[i])
    }

    pub fn rows(&self, experiment_id: &str) -> Vec<ResultRow> {
        let mut rows = Vec::with_capacity(self.traces.len() * self.horizon);
        for (r, tr) in self.traces.iter().enumerate() {
            for s in 0..self.horizon {
                rows.push(ResultRow {
                    experiment_id: experiment_id.to_string(),
                    replication: r,
                    step: s + 1,
                    arm_or_x_index: tr.arms[s],
                    reward_or_loss: tr.rewards[s],
                    cumulative_regret_or_nll: tr.cumulative_regret[s],
                });
            }
        }
        rows
    }
}

/// Per-replication environment: latent means and one reward stream per arm.
struct Environment {
    theta: Vec<f64>,
    kinds: Vec<ArmKind>,
    reward_rngs: Vec<RngStream>,
}

impl Environment {
    fn new(arms: &[BanditArmSpec], kinds: &[ArmKind], rep: &RngStream) -> Self {
        let env = rep.derive("env");
        let mut theta = Vec::with_capacity(arms.len());
        let mut reward_rngs = Vec::with_capacity(arms.len());
        for (arm, kind) in arms.iter().zip(kinds) {
            let a = env.derive(&arm.name);
            let mut th = a.derive("theta");
            theta.push(match *kind {
                ArmKind::Gaussian { mu, sigma, .. } => th.normal(mu, sigma),
                ArmKind::Constant(c) => c,
            });
            reward_rngs.push(a.derive("reward"));
        }
        Self {
            theta,
            kinds: kinds.to_vec(),
            reward_rngs,
        }
    }

    fn pull(&mut self, a: usize) -> f64 {
        match self.kinds[a] {
            ArmKind::Gaussian { tau, .. } => self.reward_rngs[a].normal(self.theta[a], tau),
            ArmKind::Constant(c) => c,
        }
    }

    fn best(&self) -> f64 {
        self.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

trait Agent {
    fn choose(&mut self) -> Result<usize>;
    fn observe(&mut self, arm: usize, y: f64) -> Result<()>;
}

/// Thompson sampling through sequence models: each arm's statistic is the
/// mean of an autoregressive chain of J generations (J = 1 for one-step).
struct SeqModelAgent<M> {
    models: Vec<M>,
    rngs: Vec<RngStream>,
    mode: InferenceMode,
}

impl<M: SequenceModel> Agent for SeqModelAgent<M> {
    fn choose(&mut self) -> Result<usize> {
        let stats = self
            .models
            .iter()
            .zip(self.rngs.iter_mut())
            .map(|(m, r)| posterior_mean_estimate(m, &[], self.mode, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(argmax_lowest(&stats))
    }

    fn observe(&mut self, arm: usize, y: f64) -> Result<()> {
        self.models[arm] = self.models[arm].condition(&[], y)?;
        Ok(())
    }
}

/// Thompson sampling on the closed-form normal-normal posteriors.
struct ExactAgent {
    posteriors: Vec<ConjGaussianState>,
    rngs: Vec<RngStream>,
}

impl Agent for ExactAgent {
    fn choose(&mut self) -> Result<usize> {
        let draws: Vec<f64> = self
            .posteriors
            .iter()
            .zip(self.rngs.iter_mut())
            .map(|(p, r)| p.posterior_dist().sample(r))
            .collect();
        Ok(argmax_lowest(&draws))
    }

    fn observe(&mut self, arm: usize, y: f64) -> Result<()> {
        self.posteriors[arm] = self.posteriors[arm].update(y)?;
        Ok(())
    }
}

fn run_reps<A, F>(
    config: &BanditRunConfig,
    kinds: &[ArmKind],
    rng: &RngStream,
    make_agent: F,
) -> Result<Vec<BanditTrace>>
where
    A: Agent,
    F: Fn(Vec<RngStream>) -> A + Sync,
{
    let reps = rng.derive("bandit").derive("rep");
    (0..config.n_reps)
        .into_par_iter()
        .map(|r| {
            let rep = reps.derive_index(r as u64);
            let mut env = Environment::new(&config.arms, kinds, &rep);
            let agent_root = rep.derive("agent");
            let mut agent = make_agent(
                config
                    .arms
                    .iter()
                    .map(|a| agent_root.derive(&a.name))
                    .collect(),
            );
            let best = env.best();
            let mut trace = BanditTrace {
                theta: env.theta.clone(),
                arms: Vec::with_capacity(config.horizon),
                rewards: Vec::with_capacity(config.horizon),
                cumulative_regret: Vec::with_capacity(config.horizon),
                wrong: Vec::with_capacity(config.horizon),
            };
            let mut total = 0.0;
            for s in 0..config.horizon {
                let a = agent.choose()?;
                let y = env.pull(a);
                agent.observe(a, y)?;
                total += y;
                trace.arms.push(a);
                trace.rewards.push(y);
                trace.cumulative_regret.push((s + 1) as f64 * best - total);
                trace.wrong.push(env.theta[a] < best);
            }
            Ok(trace)
        })
        .collect()
}

/// Thompson sampling with one sequence model per arm (all at their prior
/// state). Random streams are keyed by arm name, so relabeling arms permutes
/// decisions consistently.
pub fn run_thompson_seqmodel<M: SequenceModel>(
    config: &BanditRunConfig,
    models: &[M],
    rng: &RngStream,
) -> Result<RegretCurve> {
    let kinds = config.validate()?;
    if models.len() != config.arms.len() {
        return Err(invalid(format!(
            "{} models for {} arms",
            models.len(),
            config.arms.len()
        )));
    }
    if models
        .iter()
        .any(|m| m.num_observations() != 0 || m.input_dim() != 0)
    {
        return Err(invalid(
            "bandit models must be non-contextual and unconditioned",
        ));
    }
    let mode = config.mode;
    let traces = run_reps(config, &kinds, rng, |rngs| SeqModelAgent {
        models: models.to_vec(),
        rngs,
        mode,
    })?;
    Ok(RegretCurve::from_traces(
        mode.kind().label().to_string(),
        config.horizon,
        traces,
    ))
}

/// Seqmodel TS with the exact conjugate model of every arm.
pub fn run_thompson_oracle(config: &BanditRunConfig, rng: &RngStream) -> Result<RegretCurve> {
    let models = config
        .arms
        .iter()
        .map(BanditArmSpec::prior_model)
        .collect::<Result<Vec<_>>>()?;
    run_thompson_seqmodel(config, &models, rng)
}

/// Thompson sampling on closed-form posteriors; `config.mode` is ignored.
pub fn run_thompson_exact(config: &BanditRunConfig, rng: &RngStream) -> Result<RegretCurve> {
    let kinds = config.validate()?;
    let priors = config
        .arms
        .iter()
        .map(BanditArmSpec::prior_model)
        .collect::<Result<Vec<_>>>()?;
    let traces = run_reps(config, &kinds, rng, |rngs| ExactAgent {
        posteriors: priors.clone(),
        rngs,
    })?;
    Ok(RegretCurve::from_traces(
        "exact".to_string(),
        config.horizon,
        traces,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{least_squares_slope, normal_cdf};

    fn cfg(
        arms: Vec<BanditArmSpec>,
        horizon: usize,
        mode: InferenceMode,
        n_reps: usize,
    ) -> BanditRunConfig {
        BanditRunConfig {
            arms,
            horizon,
            mode,
            n_reps,
            seed: 0,
        }
    }

    #[test]
    fn arm_spec_validation() {
        assert!(BanditArmSpec::constant("a", 1.0).kind().is_ok());
        let mut bad = BanditArmSpec::gaussian("b", 0.0, 1.0, 1.0);
        bad.constant_reward = Some(0.0);
        assert!(bad.kind().is_err());
        assert!(BanditArmSpec::gaussian("c", 0.0, -1.0, 1.0).kind().is_err());
        let dup = cfg(
            vec![
                BanditArmSpec::constant("a", 0.0),
                BanditArmSpec::constant("a", 1.0),
            ],
            3,
            InferenceMode::one_step(),
            1,
        );
        assert!(dup.validate().is_err());
    }

    #[test]
    fn constant_arms_have_zero_regret() {
        let c = cfg(
            vec![
                BanditArmSpec::constant("a", 0.0),
                BanditArmSpec::constant("b", 0.0),
            ],
            20,
            InferenceMode::one_step(),
            5,
        );
        let curve = run_thompson_oracle(&c, &RngStream::new(1)).unwrap();
        assert!(curve.regret.mean.iter().all(|&r| r == 0.0));
        assert_eq!(curve.wrong_pull_rate(), 0.0);
    }

    #[test]
    fn pinned_priors_pull_better_arm() {
        let c = cfg(
            vec![
                BanditArmSpec::gaussian("lo", -0.5, 0.0, 1.0),
                BanditArmSpec::gaussian("hi", 0.5, 0.0, 1.0),
            ],
            30,
            InferenceMode::one_step(),
            4,
        );
        let curve = run_thompson_exact(&c, &RngStream::new(2)).unwrap();
        for t in &curve.traces {
            assert!(t.arms.iter().all(|&a| a == 1));
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn one_step_wrong_pull_rate_matches_normal_tail() {
        let c = cfg(
            one_armed_instance(-1.0, 1.0),
            500,
            InferenceMode::one_step(),
            40,
        );
        let curve = run_thompson_oracle(&c, &RngStream::new(3)).unwrap();
        let p = normal_cdf(-1.0);
        assert!(
            (curve.wrong_pull_rate() - p).abs() < 0.01,
            "{}",
            curve.wrong_pull_rate()
        );
        let xs: Vec<f64> = (250..500).map(|t| t as f64).collect();
        let slope = least_squares_slope(&xs, &curve.regret.mean[250..]);
        assert!(slope > 0.8 * p);
    }

    #[test]
    fn relabeling_arms_permutes_decisions() {
        let arms = arms_c_d();
        let swapped = vec![arms[1].clone(), arms[0].clone()];
        let a = run_thompson_exact(
            &cfg(arms, 40, InferenceMode::one_step(), 6),
            &RngStream::new(4),
        )
        .unwrap();
        let b = run_thompson_exact(
            &cfg(swapped, 40, InferenceMode::one_step(), 6),
            &RngStream::new(4),
        )
        .unwrap();
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            let mapped: Vec<usize> = tb.arms.iter().map(|&x| 1 - x).collect();
            assert_eq!(ta.arms, mapped);
            assert_eq!(ta.cumulative_regret, tb.cumulative_regret);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let c = cfg(arms_c_d(), 25, InferenceMode::multi_step(10).unwrap(), 8);
        let a = run_thompson_oracle(&c, &RngStream::new(5)).unwrap();
        let b = run_thompson_oracle(&c, &RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows("x").len(), 25 * 8);
    }

    #[test]
    fn arms_c_d_regret_is_sublinear() {
        let c = cfg(arms_c_d(), 100, InferenceMode::one_step(), 200);
        let curve = run_thompson_exact(&c, &RngStream::new(7)).unwrap();
        let m = &curve.regret.mean;
        assert!(
            m[99] / 100.0 < m[19] / 20.0,
            "{} vs {}",
            m[99] / 100.0,
            m[19] / 20.0
        );
    }
}
