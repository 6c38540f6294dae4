use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decisions::{
    arms_c_d, run_thompson_exact, run_thompson_oracle, run_uncertainty_sampling, sample_al_task,
    AlConfig, BanditArmSpec, BanditRunConfig, LossCurve, RegretCurve, ResultRow,
};
use crate::diagnostics::{gap_closed_form_gaussian, gap_monte_carlo};
use crate::error::{Error, Result};
use crate::inference::{marginal_product_logloss, multistep_logloss, InferenceMode};
use crate::models::{
    BetaBernoulli, CidCounterexample, ConjGaussianState, DiscretePredictive, GpState,
    JointPredictive, NoCovariates, SequenceModel,
};
use crate::numerics::{RngStream, RunningStats};
use crate::properties::{
    check_cid, check_joint_exchangeability, check_perm_invariance, discrete_predictive_fn,
    model_predictive_fn, CidCheck, PredictiveDist, PropertyReport,
};
use crate::tinyformer::{
    checkpoint, evaluate_at_context, forward_batch, sample_gp_sequences, train, EpochLog,
    GpDataConfig, MaskKind, MaskScheme, TrainConfig, TransformerConfig, TransformerModel,
    TransformerWeights,
};

pub const DEFAULT_BUDGET_FLOPS: f64 = 1e15;

fn default_budget() -> f64 {
    DEFAULT_BUDGET_FLOPS
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Config-level checks shared by every subcommand.
pub trait Budgeted {
    fn out(&self) -> &Option<String>;
    fn summary_out(&self) -> Option<&str> {
        None
    }
    fn budget_flops(&self) -> f64;
    /// Rough floating-point operation count of the whole run.
    fn estimated_flops(&self) -> f64;
    /// Semantic validation; errors name the offending key.
    fn validate(&self) -> Result<()>;

    fn check_budget(&self) -> Result<()> {
        self.validate()?;
        let estimated = self.estimated_flops();
        if estimated > self.budget_flops() {
            return Err(Error::Budget {
                estimated,
                budget: self.budget_flops(),
            });
        }
        Ok(())
    }
}

fn parse_mode(label: &str, j: usize) -> Result<InferenceMode> {
    match label {
        "one_step" => Ok(InferenceMode::one_step()),
        "multi_step" => InferenceMode::multi_step(j).map_err(|e| cfg_err("j", e.to_string())),
        other => Err(cfg_err(
            "modes",
            format!("unknown mode `{other}` (one_step | multi_step)"),
        )),
    }
}

fn parse_mask(label: &str, key: &str) -> Result<MaskKind> {
    MaskKind::parse(label)
        .ok_or_else(|| cfg_err(key, format!("unknown mask `{label}` (causal | cperm)")))
}

// ---------------------------------------------------------------- gap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapGrid {
    pub sigma: Vec<f64>,
    pub tau: Vec<f64>,
    pub t: Vec<usize>,
    /// Number of future steps T − t.
    pub future: Vec<usize>,
}

impl Default for GapGrid {
    fn default() -> Self {
        Self {
            sigma: vec![0.1, 0.5, 1.0, 2.0],
            tau: vec![1.0],
            t: vec![0, 1, 5],
            future: vec![2, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapConfig {
    pub seed: u64,
    pub n_samples: usize,
    /// Prior mean of the conjugate model (the gap does not depend on it).
    pub mu: f64,
    pub grid: GapGrid,
    pub out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 100_000,
            mu: 0.0,
            grid: GapGrid::default(),
            out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

impl GapConfig {
    /// Grid cells in row order: σ outermost, then τ, t, T − t.
    pub fn cells(&self) -> Vec<(f64, f64, usize, usize)> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &s in &g.sigma {
            for &tau in &g.tau {
                for &t in &g.t {
                    for &f in &g.future {
                        out.push((s, tau, t, t + f));
                    }
                }
            }
        }
        out
    }
}

impl Budgeted for GapConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        self.cells()
            .iter()
            .map(|c| self.n_samples as f64 * c.3 as f64 * 60.0)
            .sum()
    }
    fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.sigma.is_empty() || g.tau.is_empty() || g.t.is_empty() || g.future.is_empty() {
            return Err(cfg_err("grid", "every grid list must be non-empty"));
        }
        if g.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(cfg_err("grid.sigma", "values must be finite and ≥ 0"));
        }
        if g.tau.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(cfg_err("grid.tau", "values must be finite and > 0"));
        }
        if g.future.contains(&0) {
            return Err(cfg_err("grid.future", "values must be ≥ 1"));
        }
        if self.n_samples < 100 {
            return Err(cfg_err("n_samples", "must be at least 100"));
        }
        if !self.mu.is_finite() {
            return Err(cfg_err("mu", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub sigma: f64,
    pub tau: f64,
    pub t: usize,
    #[serde(rename = "T")]
    pub big_t: usize,
    pub closed_form: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
}

/// One row per grid cell; cell i draws from sub-stream i of "gap".
pub fn gap_rows(cfg: &GapConfig) -> Result<Vec<GapRow>> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed).derive("gap");
    cfg.cells()
        .into_iter()
        .enumerate()
        .map(|(i, (sigma, tau, t, big_t))| {
            let model = ConjGaussianState::new(cfg.mu, sigma, tau)?;
            let mut rng = root.derive_index(i as u64);
            let mc = gap_monte_carlo(&model, t, big_t, cfg.n_samples, &NoCovariates, &mut rng)?;
            Ok(GapRow {
                sigma,
                tau,
                t,
                big_t,
                closed_form: gap_closed_form_gaussian(sigma, tau, t, big_t)?,
                mc_mean: mc.mc_estimate,
                mc_se: mc.mc_std_error,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- uq

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqConfig {
    pub seed: u64,
    pub n_reps: usize,
    pub context_lens: Vec<usize>,
    pub target_len: usize,
    /// Kernel and covariate box; `data.horizon` is ignored (each sequence
    /// has context + target_len points).
    pub data: GpDataConfig,
    /// Transformer checkpoint to evaluate; the exact GP when absent.
    pub checkpoint: Option<String>,
    pub mask: String,
    pub out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_reps: 200,
            context_lens: vec![0, 5, 10, 20],
            target_len: 50,
            data: GpDataConfig::default(),
            checkpoint: None,
            mask: "causal".into(),
            out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

impl Budgeted for UqConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        let l = self.target_len as f64;
        let per_rep: f64 = self
            .context_lens
            .iter()
            .map(|&c| {
                let n = c as f64 + l;
                match self.checkpoint {
                    // one forward per target over ≤ n tokens, at the default size
                    Some(_) => 2.0 * l * n * TransformerConfig::default().num_scalars() as f64,
                    None => n * n * n + 2.0 * l * n * n,
                }
            })
            .sum();
        self.n_reps as f64 * per_rep
    }
    fn validate(&self) -> Result<()> {
        if self.n_reps < 2 {
            return Err(cfg_err("n_reps", "must be at least 2"));
        }
        if self.target_len == 0 {
            return Err(cfg_err("target_len", "must be at least 1"));
        }
        if self.context_lens.is_empty() {
            return Err(cfg_err("context_lens", "must be non-empty"));
        }
        self.data
            .prior()
            .map_err(|e| cfg_err("data", e.to_string()))?;
        parse_mask(&self.mask, "mask")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqRow {
    pub context_len: usize,
    pub inference: String,
    pub mean_logloss: f64,
    pub se: f64,
    pub n_reps: usize,
}

fn uq_for_model<M: SequenceModel>(cfg: &UqConfig, model: &M) -> Result<Vec<UqRow>> {
    let gp = GpState::new(cfg.data.prior()?);
    let root = RngStream::new(cfg.seed).derive("uq");
    let l = cfg.target_len;
    let mut rows = Vec::new();
    for (ci, &c) in cfg.context_lens.iter().enumerate() {
        let per_rep = (0..cfg.n_reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = root.derive_index(ci as u64).derive_index(r as u64);
                let xs: Vec<Vec<f64>> = (0..c + l)
                    .map(|_| {
                        (0..cfg.data.dim)
                            .map(|_| rng.uniform_range(cfg.data.x_low, cfg.data.x_high))
                            .collect()
                    })
                    .collect();
                let ys = gp.joint_predictive(&xs)?.sample(&mut rng);
                let ctx = model
                    .condition_all(xs[..c].iter().map(Vec::as_slice).zip(ys.iter().copied()))?;
                let targets: Vec<(Vec<f64>, f64)> = xs[c..]
                    .iter()
                    .cloned()
                    .zip(ys.iter().skip(c).copied())
                    .collect();
                Ok((
                    marginal_product_logloss(&ctx, &targets)? / l as f64,
                    multistep_logloss(&ctx, &targets)? / l as f64,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut one = RunningStats::new();
        let mut multi = RunningStats::new();
        for (a, b) in per_rep {
            one.push(a);
            multi.push(b);
        }
        for (label, s) in [("one_step", one), ("multi_step", multi)] {
            rows.push(UqRow {
                context_len: c,
                inference: label.into(),
                mean_logloss: s.mean(),
                se: s.std_error(),
                n_reps: cfg.n_reps,
            });
        }
    }
    Ok(rows)
}

/// Multi-step log-loss per target of the one-step (marginal product) and
/// multi-step (teacher-forced joint) predictives.
pub fn uq_rows(cfg: &UqConfig) -> Result<Vec<UqRow>> {
    cfg.validate()?;
    match &cfg.checkpoint {
        None => uq_for_model(cfg, &GpState::new(cfg.data.prior()?)),
        Some(p) => {
            let w =
                checkpoint::load(Path::new(p)).map_err(|e| cfg_err("checkpoint", e.to_string()))?;
            if w.config().x_dim != cfg.data.dim {
                return Err(cfg_err("data.dim", "does not match the checkpoint's x_dim"));
            }
            let m = TransformerModel::new(Arc::new(w), parse_mask(&cfg.mask, "mask")?);
            uq_for_model(cfg, &m)
        }
    }
}

// ---------------------------------------------------------------- curves

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment_id: String,
    pub step: usize,
    pub mean: f64,
    pub se: f64,
}

/// Per-replication rows plus the per-step summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

fn summary_rows(id: &str, mean: &[f64], se: &[f64]) -> Vec<SummaryRow> {
    mean.iter()
        .zip(se)
        .enumerate()
        .map(|(s, (&m, &e))| SummaryRow {
            experiment_id: id.to_string(),
            step: s + 1,
            mean: m,
            se: e,
        })
        .collect()
}

// ---------------------------------------------------------------- bandit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditConfig {
    pub seed: u64,
    pub horizon: usize,
    pub n_reps: usize,
    pub modes: Vec<String>,
    pub j: usize,
    /// Also run Thompson sampling on the closed-form posteriors.
    pub include_exact: bool,
    pub arms: Vec<BanditArmSpec>,
    pub out: Option<String>,
    pub summary_out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: 100,
            n_reps: 200,
            modes: vec!["one_step".into(), "multi_step".into()],
            j: 100,
            include_exact: true,
            arms: arms_c_d(),
            out: None,
            summary_out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

impl BanditConfig {
    fn run_config(&self, mode: InferenceMode) -> BanditRunConfig {
        BanditRunConfig {
            arms: self.arms.clone(),
            horizon: self.horizon,
            mode,
            n_reps: self.n_reps,
            seed: self.seed,
        }
    }
}

impl Budgeted for BanditConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn summary_out(&self) -> Option<&str> {
        self.summary_out.as_deref()
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        let per_step = self.arms.len() as f64 * self.j as f64 * 40.0;
        (self.modes.len() + 1) as f64 * self.n_reps as f64 * self.horizon as f64 * per_step
    }
    fn validate(&self) -> Result<()> {
        if self.modes.is_empty() && !self.include_exact {
            return Err(cfg_err("modes", "nothing to run"));
        }
        for m in &self.modes {
            parse_mode(m, self.j)?;
        }
        self.run_config(InferenceMode::one_step())
            .validate()
            .map_err(|e| cfg_err("arms", e.to_string()))?;
        Ok(())
    }
}

/// One regret curve per configured mode (exact conjugate models as the
/// sequence models), then the exact-posterior curve if requested. All
/// curves share the seed, so they see the same latent means.
pub fn bandit_curves(cfg: &BanditConfig) -> Result<Vec<RegretCurve>> {
    cfg.validate()?;
    let rng = RngStream::new(cfg.seed);
    let mut curves = Vec::new();
    for m in &cfg.modes {
        curves.push(run_thompson_oracle(
            &cfg.run_config(parse_mode(m, cfg.j)?),
            &rng,
        )?);
    }
    if cfg.include_exact {
        curves.push(run_thompson_exact(
            &cfg.run_config(InferenceMode::one_step()),
            &rng,
        )?);
    }
    Ok(curves)
}

pub fn bandit_experiment(cfg: &BanditConfig) -> Result<CurveOutput> {
    let curves = bandit_curves(cfg)?;
    let mut out = CurveOutput {
        rows: Vec::new(),
        summary: Vec::new(),
    };
    for c in &curves {
        out.rows.extend(c.rows(&c.label));
        out.summary
            .extend(summary_rows(&c.label, &c.regret.mean, &c.regret.se));
    }
    Ok(out)
}

// ---------------------------------------------------------------- active

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveConfig {
    pub seed: u64,
    pub n_seeds: usize,
    pub horizon: usize,
    pub j: usize,
    pub i_paths: usize,
    pub modes: Vec<String>,
    pub task: AlConfig,
    pub out: Option<String>,
    pub summary_out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 200,
            horizon: 30,
            j: 20,
            i_paths: 20,
            modes: vec!["one_step".into(), "multi_step".into()],
            task: AlConfig::two_cluster(),
            out: None,
            summary_out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

impl Budgeted for ActiveConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn summary_out(&self) -> Option<&str> {
        self.summary_out.as_deref()
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        let n = (self.horizon + self.j) as f64;
        let per_score = self.i_paths as f64 * self.j as f64 * n * n * 2.0;
        let test = self.task.test_size as f64 * n * n;
        self.n_seeds as f64
            * self.modes.len() as f64
            * self.horizon as f64
            * (self.task.pool_size as f64 * per_score + test)
    }
    fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(cfg_err("modes", "nothing to run"));
        }
        for m in &self.modes {
            parse_mode(m, self.j)?;
        }
        if self.n_seeds == 0 {
            return Err(cfg_err("n_seeds", "must be at least 1"));
        }
        if self.i_paths < 2 {
            return Err(cfg_err("i_paths", "must be at least 2"));
        }
        if self.horizon == 0 || self.horizon > self.task.pool_size {
            return Err(cfg_err("horizon", "must lie in 1..=task.pool_size"));
        }
        Ok(())
    }
}

/// One loss curve per mode. Seed s draws its task from
/// "active"/s/"task" and runs mode m on "active"/s/m, so every mode sees
/// the same tasks.
pub fn active_curves(cfg: &ActiveConfig) -> Result<Vec<LossCurve>> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed).derive("active");
    let modes = cfg
        .modes
        .iter()
        .map(|m| parse_mode(m, cfg.j))
        .collect::<Result<Vec<_>>>()?;
    let per_seed = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| {
            let r = root.derive_index(s as u64);
            let task = sample_al_task(&cfg.task, &mut r.derive("task"))?;
            let oracle = task.oracle();
            modes
                .iter()
                .zip(&cfg.modes)
                .map(|(&mode, label)| {
                    run_uncertainty_sampling(
                        &task,
                        &oracle,
                        mode,
                        cfg.i_paths,
                        cfg.horizon,
                        &r.derive(label),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg
        .modes
        .iter()
        .enumerate()
        .map(|(k, label)| {
            LossCurve::from_traces(label, per_seed.iter().map(|t| t[k].clone()).collect())
        })
        .collect())
}

pub fn active_experiment(cfg: &ActiveConfig) -> Result<CurveOutput> {
    let curves = active_curves(cfg)?;
    let mut out = CurveOutput {
        rows: Vec::new(),
        summary: Vec::new(),
    };
    for c in &curves {
        out.rows.extend(c.rows(&c.label));
        out.summary
            .extend(summary_rows(&c.label, &c.nll.mean, &c.nll.se));
    }
    Ok(out)
}

// ---------------------------------------------------------------- propcheck

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropcheckModel {
    CidCounterexample,
    BetaBernoulli,
    Conjugate,
    Gp,
    Tinyformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugateParams {
    pub mu0: f64,
    pub sigma0: f64,
    pub tau: f64,
}

impl Default for ConjugateParams {
    fn default() -> Self {
        Self {
            mu0: 0.0,
            sigma0: 1.0,
            tau: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropcheckConfig {
    pub seed: u64,
    pub model: PropcheckModel,
    /// Observed values; discrete models need symbols 0 or 1.
    pub context_y: Vec<f64>,
    /// Covariates of the context; empty means every context point sits at
    /// `probe_x`.
    pub context_x: Vec<Vec<f64>>,
    pub probe_x: Vec<f64>,
    pub n_perms: usize,
    pub perm_tol: f64,
    pub n_mc: usize,
    pub cid_se_multiplier: f64,
    /// Sequence length for the joint-exchangeability check (discrete only).
    pub joint_len: usize,
    pub conjugate: ConjugateParams,
    /// Kernel of the `gp` model; its `dim` must match `probe_x`.
    pub gp: GpDataConfig,
    pub mask: String,
    /// Random-weight seed when no checkpoint is given.
    pub weights_seed: u64,
    pub checkpoint: Option<String>,
    pub transformer: TransformerConfig,
    pub out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for PropcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: PropcheckModel::CidCounterexample,
            context_y: vec![1.0],
            context_x: Vec::new(),
            probe_x: Vec::new(),
            n_perms: 20,
            perm_tol: 1e-9,
            n_mc: 10_000,
            cid_se_multiplier: 4.0,
            joint_len: 3,
            conjugate: ConjugateParams::default(),
            gp: GpDataConfig::default(),
            mask: "cperm".into(),
            weights_seed: 0,
            checkpoint: None,
            transformer: TransformerConfig::default(),
            out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

impl PropcheckConfig {
    fn context(&self) -> Vec<(Vec<f64>, f64)> {
        self.context_y
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                (
                    self.context_x
                        .get(i)
                        .cloned()
                        .unwrap_or_else(|| self.probe_x.clone()),
                    y,
                )
            })
            .collect()
    }
}

impl Budgeted for PropcheckConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        let n = self.context_y.len() as f64 + 2.0;
        let per_eval = match self.model {
            PropcheckModel::Tinyformer => 2.0 * n * self.transformer.num_scalars() as f64,
            _ => n * n * n + 100.0,
        };
        (self.n_mc + self.n_perms) as f64 * per_eval
    }
    fn validate(&self) -> Result<()> {
        if !self.context_x.is_empty() && self.context_x.len() != self.context_y.len() {
            return Err(cfg_err("context_x", "needs one entry per context_y value"));
        }
        if self.n_mc < 100 {
            return Err(cfg_err("n_mc", "must be at least 100"));
        }
        if self.n_perms == 0 {
            return Err(cfg_err("n_perms", "must be at least 1"));
        }
        let dim = match self.model {
            PropcheckModel::CidCounterexample | PropcheckModel::BetaBernoulli => {
                if self.context_y.iter().any(|&y| y != 0.0 && y != 1.0) {
                    return Err(cfg_err("context_y", "discrete models take symbols 0 and 1"));
                }
                if self.joint_len == 0 || self.joint_len > crate::properties::MAX_SEQUENCE_LEN {
                    return Err(cfg_err("joint_len", "out of range"));
                }
                0
            }
            PropcheckModel::Conjugate => 0,
            PropcheckModel::Gp => self.gp.dim,
            PropcheckModel::Tinyformer => {
                parse_mask(&self.mask, "mask")?;
                self.transformer
                    .validate()
                    .map_err(|e| cfg_err("transformer", e.to_string()))?;
                self.transformer.x_dim
            }
        };
        if self.probe_x.len() != dim {
            return Err(cfg_err("probe_x", format!("model needs {dim} covariates")));
        }
        if self.context_x.iter().any(|x| x.len() != dim) {
            return Err(cfg_err(
                "context_x",
                format!("model needs {dim} covariates"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropcheckReport {
    pub model: PropcheckModel,
    pub perm_invariance: PropertyReport,
    pub cid: PropertyReport,
    /// Joint exchangeability over all sequences (discrete models only).
    pub joint_exchangeability: Option<PropertyReport>,
}

fn check_pair<F>(cfg: &PropcheckConfig, f: F) -> Result<(PropertyReport, PropertyReport)>
where
    F: Fn(&[(Vec<f64>, f64)], &[f64]) -> Result<PredictiveDist>,
{
    let root = RngStream::new(cfg.seed).derive("propcheck");
    let ctx = cfg.context();
    let perm = check_perm_invariance(
        &f,
        &ctx,
        &cfg.probe_x,
        cfg.n_perms,
        cfg.perm_tol,
        &mut root.derive("perm"),
    )?;
    let mut cid_cfg = CidCheck::new(&cfg.probe_x, cfg.n_mc);
    cid_cfg.tol_se_multiplier = cfg.cid_se_multiplier;
    let cid = check_cid(&f, &ctx, &cid_cfg, &mut root.derive("cid"))?;
    Ok((perm, cid))
}

fn discrete_report<D: DiscretePredictive>(
    cfg: &PropcheckConfig,
    model: &D,
) -> Result<PropcheckReport> {
    let (perm, cid) = check_pair(cfg, discrete_predictive_fn(model))?;
    Ok(PropcheckReport {
        model: cfg.model,
        perm_invariance: perm,
        cid,
        joint_exchangeability: Some(check_joint_exchangeability(model, cfg.joint_len, 1e-12)?),
    })
}

fn continuous_report<M: SequenceModel>(
    cfg: &PropcheckConfig,
    model: &M,
) -> Result<PropcheckReport> {
    let (perm, cid) = check_pair(cfg, model_predictive_fn(model))?;
    Ok(PropcheckReport {
        model: cfg.model,
        perm_invariance: perm,
        cid,
        joint_exchangeability: None,
    })
}

pub fn propcheck_report(cfg: &PropcheckConfig) -> Result<PropcheckReport> {
    cfg.validate()?;
    match cfg.model {
        PropcheckModel::CidCounterexample => discrete_report(cfg, &CidCounterexample),
        PropcheckModel::BetaBernoulli => discrete_report(cfg, &BetaBernoulli::new(1.0, 1.0)?),
        PropcheckModel::Conjugate => {
            let c = &cfg.conjugate;
            let m = ConjGaussianState::new(c.mu0, c.sigma0, c.tau)
                .map_err(|e| cfg_err("conjugate", e.to_string()))?;
            continuous_report(cfg, &m)
        }
        PropcheckModel::Gp => continuous_report(
            cfg,
            &GpState::new(cfg.gp.prior().map_err(|e| cfg_err("gp", e.to_string()))?),
        ),
        PropcheckModel::Tinyformer => {
            let w = match &cfg.checkpoint {
                Some(p) => checkpoint::load(Path::new(p))
                    .map_err(|e| cfg_err("checkpoint", e.to_string()))?,
                None => TransformerWeights::init(
                    cfg.transformer.clone(),
                    &mut RngStream::new(cfg.weights_seed),
                )?,
            };
            let m = TransformerModel::new(Arc::new(w), parse_mask(&cfg.mask, "mask")?);
            continuous_report(cfg, &m)
        }
    }
}

// ---------------------------------------------------------------- arch / train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub seed: u64,
    pub masks: Vec<String>,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    /// Evaluated context lengths; values ≥ train.data.horizon are out of
    /// the training horizon.
    pub context_lens: Vec<usize>,
    pub n_eval: usize,
    /// Targets per multi-step evaluation.
    pub target_len: usize,
    pub out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.data.horizon = 15;
        Self {
            seed: 0,
            masks: vec!["causal".into(), "cperm".into()],
            model: TransformerConfig::default(),
            train,
            context_lens: vec![0, 2, 5, 10, 14, 20, 25],
            n_eval: 128,
            target_len: 5,
            out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

fn train_flops(model: &TransformerConfig, train: &TrainConfig) -> f64 {
    6.0 * model.num_scalars() as f64 * (train.epochs * train.n_train * train.data.horizon) as f64
}

impl Budgeted for ArchConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        let p = self.model.num_scalars() as f64;
        let eval: f64 = self
            .context_lens
            .iter()
            .map(|&c| {
                self.n_eval as f64
                    * (self.target_len + 1) as f64
                    * 2.0
                    * p
                    * (c + self.target_len) as f64
            })
            .sum();
        self.masks.len() as f64 * (train_flops(&self.model, &self.train) + eval)
    }
    fn validate(&self) -> Result<()> {
        if self.masks.is_empty() {
            return Err(cfg_err("masks", "nothing to run"));
        }
        for m in &self.masks {
            parse_mask(m, "masks")?;
        }
        self.model
            .validate()
            .map_err(|e| cfg_err("model", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| cfg_err("train", e.to_string()))?;
        if self.train.data.dim != self.model.x_dim {
            return Err(cfg_err("train.data.dim", "must equal model.x_dim"));
        }
        if self.n_eval < 2 || self.target_len == 0 || self.context_lens.is_empty() {
            return Err(cfg_err(
                "n_eval",
                "need n_eval ≥ 2, target_len ≥ 1 and some context_lens",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchRow {
    pub mask: String,
    pub context_len: usize,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub final_val_nll: f64,
}

/// Trains every mask from the same initial weights on the same data
/// stream, then scores one-step log-loss (next point) and multi-step
/// log-loss per target (teacher forced over `target_len` points) at each
/// context length on shared evaluation sequences.
pub fn arch_experiment(
    cfg: &ArchConfig,
    mut on_epoch: impl FnMut(MaskKind, &EpochLog),
) -> Result<Vec<ArchRow>> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed).derive("arch");
    let max_ctx = *cfg.context_lens.iter().max().expect("non-empty");
    let mut eval_data = cfg.train.data.clone();
    eval_data.horizon = max_ctx + cfg.target_len;
    let eval = sample_gp_sequences(&eval_data, cfg.n_eval, &root.derive("eval"))?;
    let mut rows = Vec::new();
    for label in &cfg.masks {
        let kind = parse_mask(label, "masks")?;
        let mut w = TransformerWeights::init(cfg.model.clone(), &mut root.derive("init"))?;
        let log = train(&mut w, kind, &cfg.train, &root.derive("train"), |e| {
            on_epoch(kind, e)
        })?;
        let w = Arc::new(w);
        for &c in &cfg.context_lens {
            let seqs: Vec<_> = eval
                .iter()
                .map(|s| crate::tinyformer::GpSequence {
                    xs: s.xs[..=c].to_vec(),
                    ys: s.ys[..=c].to_vec(),
                })
                .collect();
            let examples = seqs
                .iter()
                .map(|s| s.example(c, MaskScheme::train(kind)).map(|e| e.seq))
                .collect::<Result<Vec<_>>>()?;
            let preds = forward_batch(&w, &examples)?;
            let mut one = RunningStats::new();
            for (p, s) in preds.iter().zip(&seqs) {
                one.push(-p[0].logpdf(s.ys[c])?);
            }
            let model = TransformerModel::new(Arc::clone(&w), kind);
            let multi_vals = eval
                .par_iter()
                .map(|s| {
                    let ctx = model.condition_all(
                        s.xs[..c]
                            .iter()
                            .map(Vec::as_slice)
                            .zip(s.ys.iter().copied()),
                    )?;
                    let targets: Vec<(Vec<f64>, f64)> = s.xs[c..c + cfg.target_len]
                        .iter()
                        .cloned()
                        .zip(s.ys[c..c + cfg.target_len].iter().copied())
                        .collect();
                    Ok(multistep_logloss(&ctx, &targets)? / cfg.target_len as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut multi = RunningStats::new();
            multi_vals.iter().for_each(|&v| multi.push(v));
            for (metric, s) in [("one_step", one), ("multi_step", multi)] {
                rows.push(ArchRow {
                    mask: kind.label().into(),
                    context_len: c,
                    metric: metric.into(),
                    mean: s.mean(),
                    se: s.std_error(),
                    final_val_nll: log.final_val_nll(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmdConfig {
    pub seed: u64,
    pub mask: String,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    /// Where the trained weights are written.
    pub checkpoint: String,
    /// Context lengths at which the final model is scored on fresh data.
    pub eval_context_lens: Vec<usize>,
    pub out: Option<String>,
    #[serde(default = "default_budget")]
    pub budget_flops: f64,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mask: "causal".into(),
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            checkpoint: "model.ckpt".into(),
            eval_context_lens: Vec::new(),
            out: None,
            budget_flops: DEFAULT_BUDGET_FLOPS,
        }
    }
}

impl Budgeted for TrainCmdConfig {
    fn out(&self) -> &Option<String> {
        &self.out
    }
    fn budget_flops(&self) -> f64 {
        self.budget_flops
    }
    fn estimated_flops(&self) -> f64 {
        train_flops(&self.model, &self.train)
    }
    fn validate(&self) -> Result<()> {
        parse_mask(&self.mask, "mask")?;
        self.model
            .validate()
            .map_err(|e| cfg_err("model", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| cfg_err("train", e.to_string()))?;
        if self.train.data.dim != self.model.x_dim {
            return Err(cfg_err("train.data.dim", "must equal model.x_dim"));
        }
        if self
            .eval_context_lens
            .iter()
            .any(|&c| c >= self.train.data.horizon)
        {
            return Err(cfg_err(
                "eval_context_lens",
                "must be below train.data.horizon",
            ));
        }
        Ok(())
    }
}

/// Epoch log row; `context_len` rows (epoch = epochs) hold the final
/// model's held-out NLL at that context length in `val_nll`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub context_len: Option<usize>,
    pub train_nll: Option<f64>,
    pub val_nll: f64,
    pub lr: Option<f64>,
}

/// Trains from `seed`/"init" weights on `seed`/"train" data, writes the
/// checkpoint, and returns the log.
pub fn train_experiment(
    cfg: &TrainCmdConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    let kind = parse_mask(&cfg.mask, "mask")?;
    let root = RngStream::new(cfg.seed);
    let mut w = TransformerWeights::init(cfg.model.clone(), &mut root.derive("init"))?;
    let log = train(&mut w, kind, &cfg.train, &root.derive("train"), on_epoch)?;
    checkpoint::save(&w, Path::new(&cfg.checkpoint))?;
    let mut rows: Vec<TrainLogRow> = log
        .epochs
        .iter()
        .map(|e| TrainLogRow {
            epoch: e.epoch,
            context_len: None,
            train_nll: Some(e.train_nll),
            val_nll: e.val_nll,
            lr: Some(e.lr),
        })
        .collect();
    if !cfg.eval_context_lens.is_empty() {
        let held_out =
            sample_gp_sequences(&cfg.train.data, cfg.train.n_val, &root.derive("held_out"))?;
        for &c in &cfg.eval_context_lens {
            rows.push(TrainLogRow {
                epoch: cfg.train.epochs,
                context_len: Some(c),
                train_nll: None,
                val_nll: evaluate_at_context(&w, &held_out, kind, c)?,
                lr: None,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_analytic_cell_and_sigma_zero() {
        let cfg = GapConfig {
            n_samples: 200,
            grid: GapGrid {
                sigma: vec![1.0, 0.0],
                tau: vec![1.0],
                t: vec![0],
                future: vec![2],
            },
            ..Default::default()
        };
        let rows = gap_rows(&cfg).unwrap();
        assert!((rows[0].closed_form - 0.14384103622589046).abs() < 1e-12);
        assert_eq!(rows[1].closed_form, 0.0);
        assert_eq!(rows[1].big_t, 2);
    }

    #[test]
    fn invalid_grid_names_key() {
        let mut cfg = GapConfig::default();
        cfg.grid.tau = vec![0.0];
        match cfg.check_budget() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "grid.tau"),
            other => panic!("{other:?}"),
        }
        cfg.grid.tau = vec![];
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn budget_refusal() {
        let cfg = ArchConfig {
            budget_flops: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.check_budget(), Err(Error::Budget { .. })));
        assert!(ArchConfig::default().check_budget().is_ok());
    }

    #[test]
    fn uq_is_deterministic_and_orders_inference() {
        let cfg = UqConfig {
            n_reps: 40,
            context_lens: vec![0, 3],
            target_len: 10,
            ..Default::default()
        };
        let a = uq_rows(&cfg).unwrap();
        let b = uq_rows(&cfg).unwrap();
        assert_eq!(a, b);
        // the joint predictive is never worse in expectation
        for pair in a.chunks(2) {
            assert_eq!(pair[0].inference, "one_step");
            assert!(pair[1].mean_logloss < pair[0].mean_logloss);
        }
    }

    #[test]
    fn propcheck_counterexample() {
        let r = propcheck_report(&PropcheckConfig::default()).unwrap();
        assert!(r.perm_invariance.passed);
        assert!(!r.cid.passed);
        let at0 = r.cid.at_grid_point(0.0).unwrap();
        assert!((at0.discrepancy - 0.5).abs() < 0.02, "{at0:?}");
        assert!(!r.joint_exchangeability.unwrap().passed);
    }

    #[test]
    fn propcheck_conjugate_passes() {
        let cfg = PropcheckConfig {
            model: PropcheckModel::Conjugate,
            context_y: vec![0.3, -1.0, 2.0],
            n_mc: 2000,
            ..Default::default()
        };
        let r = propcheck_report(&cfg).unwrap();
        assert!(r.perm_invariance.passed && r.cid.passed, "{r:?}");
    }

    #[test]
    fn propcheck_rejects_bad_probe() {
        let cfg = PropcheckConfig {
            model: PropcheckModel::Tinyformer,
            ..Default::default()
        };
        match propcheck_report(&cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "probe_x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        let cfg = BanditConfig {
            modes: vec!["two_step".into()],
            ..Default::default()
        };
        match bandit_curves(&cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "modes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_bandit_and_active_runs() {
        let cfg = BanditConfig {
            horizon: 10,
            n_reps: 4,
            j: 5,
            ..Default::default()
        };
        let out = bandit_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 3 * 4 * 10);
        assert_eq!(out.summary.len(), 3 * 10);
        let acfg = ActiveConfig {
            n_seeds: 2,
            horizon: 3,
            j: 3,
            i_paths: 3,
            ..Default::default()
        };
        let a = active_experiment(&acfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 3);
        assert_eq!(a, active_experiment(&acfg).unwrap());
    }
}
