use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{argmax_lowest, CurveSummary, ResultRow};
use crate::error::{invalid, Error, Result};
use crate::inference::{posterior_mean_estimate, InferenceMode};
use crate::models::{sq_dist, GpPrior, GpState, SequenceModel};
use crate::numerics::{Gaussian, MultivariateGaussian, RngStream, RunningStats};

/// Clustered regression task for pool-based active learning.
///
/// f* on cluster k is a constant offset with std `cluster_signal_std[k]`
/// plus an RBF-GP wiggle with std `wiggle_std[k]`; the clusters are
/// independent. Observation noise is per cluster. Per-cluster lists are
/// cycled when shorter than `n_clusters`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlConfig {
    pub n_clusters: usize,
    pub dim: usize,
    pub pool_size: usize,
    pub test_size: usize,
    /// Radius of the ball each cluster's inputs are drawn from.
    pub radius: f64,
    /// Lattice spacing between centers; `None` means 5 × radius.
    pub spacing: Option<f64>,
    pub cluster_signal_std: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub wiggle_std: Vec<f64>,
    pub wiggle_lengthscale: f64,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            n_clusters: 100,
            dim: 2,
            pool_size: 1000,
            test_size: 500,
            radius: 0.5,
            spacing: None,
            cluster_signal_std: vec![1.0],
            noise_std: vec![1.0, 0.05],
            wiggle_std: vec![0.1],
            wiggle_lengthscale: 0.5,
        }
    }
}

impl AlConfig {
    /// Cluster 0 is mostly noise (τ = 1, little to learn); cluster 1 is
    /// nearly noiseless with a rough unknown function. The prior predictive
    /// variance is 1.02 at every input of both.
    pub fn two_cluster() -> Self {
        Self {
            n_clusters: 2,
            dim: 1,
            pool_size: 40,
            test_size: 40,
            radius: 1.0,
            spacing: None,
            cluster_signal_std: vec![0.1, 0.3],
            noise_std: vec![1.0, 0.05],
            wiggle_std: vec![0.1, (1.02f64 - 0.09 - 0.0025).sqrt()],
            wiggle_lengthscale: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.dim == 0 {
            return Err(invalid("n_clusters and dim must be positive"));
        }
        if self.cluster_signal_std.is_empty()
            || self.noise_std.is_empty()
            || self.wiggle_std.is_empty()
        {
            return Err(invalid(
                "per-cluster signal and noise lists must be non-empty",
            ));
        }
        if self.noise_std.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(invalid("per-cluster noise must be positive"));
        }
        if self
            .cluster_signal_std
            .iter()
            .any(|&s| !(s >= 0.0 && s.is_finite()))
        {
            return Err(invalid("cluster signal std must be non-negative"));
        }
        if self
            .wiggle_std
            .iter()
            .any(|&s| !(s >= 0.0 && s.is_finite()))
        {
            return Err(invalid("wiggle std must be non-negative"));
        }
        if !(self.radius > 0.0) || !(self.wiggle_lengthscale > 0.0) {
            return Err(invalid("radius and lengthscale must be positive"));
        }
        if self.spacing() <= 4.0 * self.radius {
            return Err(invalid(format!(
                "infeasible packing: spacing {} must exceed 4 × radius {}",
                self.spacing(),
                self.radius
            )));
        }
        Ok(())
    }

    fn spacing(&self) -> f64 {
        self.spacing.unwrap_or(5.0 * self.radius)
    }
}

/// Block-diagonal prior of the clustered process; the cluster of an input
/// is that of its nearest center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteredPrior {
    pub centers: Vec<Vec<f64>>,
    pub signal_std: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub wiggle_std: Vec<f64>,
    pub wiggle_lengthscale: f64,
}

impl ClusteredPrior {
    pub fn cluster_of(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.centers.iter().enumerate() {
            let d = sq_dist(c, x);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    fn within(&self, k: usize, a: &[f64], b: &[f64]) -> f64 {
        let s = self.signal_std[k];
        let w = self.wiggle_std[k];
        let l = self.wiggle_lengthscale;
        s * s + w * w * (-sq_dist(a, b) / (2.0 * l * l)).exp()
    }
}

impl GpPrior for ClusteredPrior {
    fn input_dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let k = self.cluster_of(a);
        if k == self.cluster_of(b) {
            self.within(k, a, b)
        } else {
            0.0
        }
    }

    fn noise_var(&self, x: &[f64]) -> f64 {
        let n = self.noise_std[self.cluster_of(x)];
        n * n
    }
}

/// Exact posterior under [`ClusteredPrior`], kept as one GP per cluster.
#[derive(Clone, Debug)]
pub struct ClusteredGp {
    prior: Arc<ClusteredPrior>,
    clusters: Vec<GpState>,
}

impl ClusteredGp {
    pub fn new(prior: ClusteredPrior) -> Self {
        let prior = Arc::new(prior);
        let dyn_prior: Arc<dyn GpPrior> = prior.clone();
        let clusters = vec![GpState::from_arc(dyn_prior); prior.centers.len()];
        Self { prior, clusters }
    }

    pub fn prior(&self) -> &ClusteredPrior {
        &self.prior
    }

    pub fn cluster_state(&self, k: usize) -> &GpState {
        &self.clusters[k]
    }
}

impl SequenceModel for ClusteredGp {
    fn input_dim(&self) -> usize {
        self.prior.input_dim()
    }

    fn num_observations(&self) -> usize {
        self.clusters.iter().map(GpState::num_observations).sum()
    }

    fn condition(&self, x: &[f64], y: f64) -> Result<Self> {
        let k = self.prior.cluster_of(x);
        let mut next = self.clone();
        next.clusters[k] = self.clusters[k].condition(x, y)?;
        Ok(next)
    }

    fn predictive(&self, x: &[f64]) -> Result<Gaussian> {
        self.clusters[self.prior.cluster_of(x)].predictive(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlPoint {
    pub x: Vec<f64>,
    pub cluster: usize,
    /// Noise-free f*(x).
    pub f: f64,
    /// Pre-drawn noisy label.
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlTask {
    pub prior: ClusteredPrior,
    pub radius: f64,
    pub pool: Vec<AlPoint>,
    pub test: Vec<AlPoint>,
}

impl AlTask {
    pub fn n_clusters(&self) -> usize {
        self.prior.centers.len()
    }

    pub fn per_cluster_noise(&self) -> &[f64] {
        &self.prior.noise_std
    }

    /// The exact Bayesian model of this task's data-generating process.
    pub fn oracle(&self) -> ClusteredGp {
        ClusteredGp::new(self.prior.clone())
    }

    /// Mean test negative log-likelihood of `model`.
    pub fn test_nll<M: SequenceModel>(&self, model: &M) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.test {
            total -= model.logpdf(&p.x, p.y)?;
        }
        Ok(total / self.test.len().max(1) as f64)
    }
}

fn lattice_centers(n: usize, dim: usize, spacing: f64) -> Vec<Vec<f64>> {
    let side = (1..).find(|s: &usize| s.pow(dim as u32) >= n).unwrap_or(n);
    (0..n)
        .map(|mut i| {
            (0..dim)
                .map(|_| {
                    let c = i % side;
                    i /= side;
                    c as f64 * spacing
                })
                .collect()
        })
        .collect()
}

fn point_in_ball(center: &[f64], radius: f64, rng: &mut RngStream) -> Vec<f64> {
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let r = radius * rng.uniform().powf(1.0 / d as f64);
    center
        .iter()
        .zip(&dir)
        .map(|(c, v)| c + r * v / norm)
        .collect()
}

/// Draws a clustered task. Points are assigned to clusters round-robin, so
/// every cluster gets `size / n_clusters` points, ± 1.
pub fn sample_al_task(cfg: &AlConfig, rng: &mut RngStream) -> Result<AlTask> {
    cfg.validate()?;
    let k = cfg.n_clusters;
    let centers = lattice_centers(k, cfg.dim, cfg.spacing());
    let prior = ClusteredPrior {
        centers,
        signal_std: (0..k)
            .map(|i| cfg.cluster_signal_std[i % cfg.cluster_signal_std.len()])
            .collect(),
        noise_std: (0..k)
            .map(|i| cfg.noise_std[i % cfg.noise_std.len()])
            .collect(),
        wiggle_std: (0..k)
            .map(|i| cfg.wiggle_std[i % cfg.wiggle_std.len()])
            .collect(),
        wiggle_lengthscale: cfg.wiggle_lengthscale,
    };

    let mut xr = rng.derive("al/x");
    let mut draw = |n: usize| -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|i| {
                let c = i % k;
                (point_in_ball(&prior.centers[c], cfg.radius, &mut xr), c)
            })
            .collect()
    };
    let pool_x = draw(cfg.pool_size);
    let test_x = draw(cfg.test_size);

    // f* jointly per cluster over pool ∪ test
    let mut f_pool = vec![0.0; pool_x.len()];
    let mut f_test = vec![0.0; test_x.len()];
    let mut fr = rng.derive("al/f");
    for c in 0..k {
        let members: Vec<(bool, usize)> = pool_x
            .iter()
            .enumerate()
            .filter(|(_, p)| p.1 == c)
            .map(|(i, _)| (true, i))
            .chain(
                test_x
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.1 == c)
                    .map(|(i, _)| (false, i)),
            )
            .collect();
        if members.is_empty() {
            continue;
        }
        let xs: Vec<&[f64]> = members
            .iter()
            .map(|&(is_pool, i)| {
                if is_pool {
                    pool_x[i].0.as_slice()
                } else {
                    test_x[i].0.as_slice()
                }
            })
            .collect();
        let m = xs.len();
        let w2 = prior.wiggle_std[c] * prior.wiggle_std[c];
        // small nugget keeps the near-singular RBF Gram matrix factorizable
        let cov = DMatrix::from_fn(m, m, |i, j| {
            let l = cfg.wiggle_lengthscale;
            w2 * (-sq_dist(xs[i], xs[j]) / (2.0 * l * l)).exp()
                + if i == j { 1e-10 * (1.0 + w2) } else { 0.0 }
        });
        let wiggle = MultivariateGaussian::new(DVector::zeros(m), cov)?.sample(&mut fr);
        let offset = fr.normal(0.0, prior.signal_std[c]);
        for (j, &(is_pool, i)) in members.iter().enumerate() {
            let v = offset + wiggle[j];
            if is_pool {
                f_pool[i] = v;
            } else {
                f_test[i] = v;
            }
        }
    }

    let mut yr = rng.derive("al/y");
    let mut label = |xs: Vec<(Vec<f64>, usize)>, fs: Vec<f64>| -> Vec<AlPoint> {
        xs.into_iter()
            .zip(fs)
            .map(|((x, cluster), f)| AlPoint {
                y: yr.normal(f, prior.noise_std[cluster]),
                x,
                cluster,
                f,
            })
            .collect()
    };
    let pool = label(pool_x, f_pool);
    let test = label(test_x, f_test);
    rng.uniform();
    Ok(AlTask {
        prior,
        radius: cfg.radius,
        pool,
        test,
    })
}

/// One active-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlTrace {
    /// Pool index queried at each step.
    pub queries: Vec<usize>,
    pub clusters: Vec<usize>,
    /// Winning uncertainty score at each step.
    pub scores: Vec<f64>,
    /// Mean test NLL after each query.
    pub nll: Vec<f64>,
    /// Mean test NLL before any query.
    pub initial_nll: f64,
}

impl AlTrace {
    /// Number of queries after which the test NLL first drops to `threshold`
    /// or below.
    pub fn queries_to_reach(&self, threshold: f64) -> Option<usize> {
        self.nll.iter().position(|&v| v <= threshold).map(|i| i + 1)
    }
}

/// Unbiased sample variance of the means of `i_paths` independent chains
/// at `x`; path p draws from `rng.derive_index(p)`.
pub fn uncertainty_score<M: SequenceModel>(
    state: &M,
    x: &[f64],
    mode: InferenceMode,
    i_paths: usize,
    rng: &RngStream,
) -> Result<f64> {
    let mut means = RunningStats::new();
    for p in 0..i_paths {
        let mut r = rng.derive_index(p as u64);
        means.push(posterior_mean_estimate(state, x, mode, &mut r)?);
    }
    Ok(means.variance())
}

/// Uncertainty sampling: every remaining pool input is scored by the sample
/// variance of the means of `i_paths` independent autoregressive paths of
/// length J (one-step: single draws), and the highest score is queried.
pub fn run_uncertainty_sampling<M: SequenceModel>(
    task: &AlTask,
    model: &M,
    mode: InferenceMode,
    i_paths: usize,
    horizon: usize,
    rng: &RngStream,
) -> Result<AlTrace> {
    if task.pool.is_empty() {
        return Err(invalid("empty pool"));
    }
    if i_paths < 2 {
        return Err(invalid("uncertainty scores need at least two paths"));
    }
    if horizon > task.pool.len() {
        return Err(invalid(format!(
            "horizon {horizon} exceeds pool size {}",
            task.pool.len()
        )));
    }
    if model.input_dim() != task.prior.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: task.prior.input_dim(),
            got: model.input_dim(),
        });
    }
    let mut state = model.clone();
    let mut available: Vec<usize> = (0..task.pool.len()).collect();
    let mut trace = AlTrace {
        queries: Vec::with_capacity(horizon),
        clusters: Vec::with_capacity(horizon),
        scores: Vec::with_capacity(horizon),
        nll: Vec::with_capacity(horizon),
        initial_nll: task.test_nll(&state)?,
    };
    let root = rng.derive("al/score");
    for step in 0..horizon {
        let step_rng = root.derive_index(step as u64);
        let scores = available
            .iter()
            .map(|&idx| {
                uncertainty_score(
                    &state,
                    &task.pool[idx].x,
                    mode,
                    i_paths,
                    &step_rng.derive_index(idx as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = argmax_lowest(&scores);
        let idx = available.remove(pick);
        let point = &task.pool[idx];
        state = state.condition(&point.x, point.y)?;
        trace.queries.push(idx);
        trace.clusters.push(point.cluster);
        trace.scores.push(scores[pick]);
        trace.nll.push(task.test_nll(&state)?);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub horizon: usize,
    pub traces: Vec<AlTrace>,
    pub nll: CurveSummary,
}

impl LossCurve {
    pub fn from_traces(label: &str, traces: Vec<AlTrace>) -> Self {
        let horizon = traces.first().map_or(0, |t| t.nll.len());
        let nll = CurveSummary::from_rows(traces.iter().map(|t| t.nll.as_slice()), horizon);
        Self {
            label: label.to_string(),
            horizon,
            traces,
            nll,
        }
    }

    /// `reward_or_loss` is the test NLL after the query and
    /// `cumulative_regret_or_nll` the running sum of those NLLs.
    pub fn rows(&self, experiment_id: &str) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for (r, tr) in self.traces.iter().enumerate() {
            let mut cum = 0.0;
            for (s, (&q, &l)) in tr.queries.iter().zip(&tr.nll).enumerate() {
                cum += l;
                rows.push(ResultRow {
                    experiment_id: experiment_id.to_string(),
                    replication: r,
                    step: s + 1,
                    arm_or_x_index: q,
                    reward_or_loss: l,
                    cumulative_regret_or_nll: cum,
                });
            }
        }
        rows
    }
}
