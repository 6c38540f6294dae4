//! Black-box statistical checks of conditional permutation invariance,
//! the c.i.d. (martingale) property, and finite joint exchangeability.
//!
//! A predictive function maps a context of (x, y) pairs and a probe input
//! to a distribution over the next outcome. Discrete models encode symbols
//! as integer-valued `y`.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{CovariateDist, DiscretePredictive, SequenceModel};
use crate::numerics::{normal_cdf, normal_quantile, Gaussian, RngStream, RunningStats};

pub type Context = [(Vec<f64>, f64)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveDist {
    Gaussian(Gaussian),
    Categorical(Vec<f64>),
}

impl PredictiveDist {
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self {
            PredictiveDist::Gaussian(g) => g.sample(rng),
            PredictiveDist::Categorical(p) => rng.categorical(p) as f64,
        }
    }

    /// Density (Gaussian) or mass (categorical) at `y`.
    pub fn density(&self, y: f64) -> Result<f64> {
        match self {
            PredictiveDist::Gaussian(g) => g.pdf(y),
            PredictiveDist::Categorical(p) => Ok(symbol(y, p.len()).map(|s| p[s]).unwrap_or(0.0)),
        }
    }

    /// Max of |Δmean| and |Δstd|, or total variation between categoricals.
    pub fn discrepancy(&self, other: &PredictiveDist) -> Result<f64> {
        match (self, other) {
            (PredictiveDist::Gaussian(a), PredictiveDist::Gaussian(b)) => {
                Ok((a.mean - b.mean).abs().max((a.std - b.std).abs()))
            }
            (PredictiveDist::Categorical(a), PredictiveDist::Categorical(b))
                if a.len() == b.len() =>
            {
                Ok(0.5 * a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>())
            }
            _ => Err(invalid("predictive distributions of different kinds")),
        }
    }

    fn bit_identical(&self, other: &PredictiveDist) -> bool {
        match (self, other) {
            (PredictiveDist::Gaussian(a), PredictiveDist::Gaussian(b)) => {
                a.mean.to_bits() == b.mean.to_bits() && a.std.to_bits() == b.std.to_bits()
            }
            (PredictiveDist::Categorical(a), PredictiveDist::Categorical(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits())
            }
            _ => false,
        }
    }
}

fn symbol(y: f64, k: usize) -> Option<usize> {
    if y >= 0.0 && y.fract() == 0.0 && (y as usize) < k {
        Some(y as usize)
    } else {
        None
    }
}

/// Wraps an exact sequence model: condition on the context, then predict.
pub fn model_predictive_fn<M: SequenceModel>(
    model: &M,
) -> impl Fn(&Context, &[f64]) -> Result<PredictiveDist> + Sync + '_ {
    move |ctx, x| {
        let state = model.condition_all(ctx.iter().map(|(x, y)| (x.as_slice(), *y)))?;
        Ok(PredictiveDist::Gaussian(state.predictive(x)?))
    }
}

/// Wraps a discrete model; context y values must be valid symbols.
pub fn discrete_predictive_fn<D: DiscretePredictive>(
    model: &D,
) -> impl Fn(&Context, &[f64]) -> Result<PredictiveDist> + Sync + '_ {
    move |ctx, _x| {
        let k = model.alphabet_size();
        let history = ctx
            .iter()
            .map(|(_, y)| symbol(*y, k).ok_or_else(|| invalid(format!("{y} is not a symbol"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictiveDist::Categorical(model.probs(&history)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    PermInvariance,
    Cid,
    JointExchangeability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Permutation(Vec<usize>),
    GridPoint(f64),
    SequencePair {
        sequence: Vec<usize>,
        permuted: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub probe: Probe,
    /// Absolute discrepancy in the property's natural units.
    pub discrepancy: f64,
    /// The same discrepancy in Monte-Carlo standard errors, when sampled.
    pub se_units: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: Property,
    pub passed: bool,
    pub max_violation: f64,
    pub tolerance: f64,
    pub evidence: Vec<Evidence>,
}

impl PropertyReport {
    fn new(
        property: Property,
        tolerance: f64,
        evidence: Vec<Evidence>,
        metric: impl Fn(&Evidence) -> f64,
    ) -> Self {
        let max_violation = evidence.iter().map(metric).fold(0.0, f64::max);
        Self {
            property,
            passed: max_violation <= tolerance,
            max_violation,
            tolerance,
            evidence,
        }
    }

    /// Evidence entry with the largest absolute discrepancy.
    pub fn worst(&self) -> Option<&Evidence> {
        self.evidence
            .iter()
            .max_by(|a, b| a.discrepancy.total_cmp(&b.discrepancy))
    }

    pub fn at_grid_point(&self, y: f64) -> Option<&Evidence> {
        self.evidence
            .iter()
            .find(|e| matches!(e.probe, Probe::GridPoint(g) if (g - y).abs() < 1e-12))
    }
}

/// Compares the predictive at `probe_x` under `n_perms` random reorderings
/// of the context against the given order.
pub fn check_perm_invariance<F>(
    predictive_fn: F,
    context: &Context,
    probe_x: &[f64],
    n_perms: usize,
    tol: f64,
    rng: &mut RngStream,
) -> Result<PropertyReport>
where
    F: Fn(&Context, &[f64]) -> Result<PredictiveDist>,
{
    if n_perms == 0 {
        return Err(invalid("n_perms must be at least 1"));
    }
    let reference = predictive_fn(context, probe_x)?;
    let again = predictive_fn(context, probe_x)?;
    if !reference.bit_identical(&again) {
        return Err(Error::Nondeterministic(format!(
            "two calls returned {reference:?} and {again:?}"
        )));
    }
    if context.len() < 2 {
        return Ok(PropertyReport::new(
            Property::PermInvariance,
            tol,
            Vec::new(),
            |e| e.discrepancy,
        ));
    }
    let mut evidence = Vec::with_capacity(n_perms);
    for _ in 0..n_perms {
        let perm = rng.permutation(context.len());
        let permuted: Vec<(Vec<f64>, f64)> = perm.iter().map(|&i| context[i].clone()).collect();
        let d = predictive_fn(&permuted, probe_x)?.discrepancy(&reference)?;
        evidence.push(Evidence {
            probe: Probe::Permutation(perm),
            discrepancy: d,
            se_units: None,
        });
    }
    Ok(PropertyReport::new(
        Property::PermInvariance,
        tol,
        evidence,
        |e| e.discrepancy,
    ))
}

/// Family-wise critical value: the per-point rule "within m standard
/// errors" with a Bonferroni correction over `n_points`.
pub fn bonferroni_threshold(m: f64, n_points: usize) -> f64 {
    let alpha = 2.0 * (1.0 - normal_cdf(m));
    normal_quantile(1.0 - alpha / (2.0 * n_points.max(1) as f64))
}

/// Settings for [`check_cid`].
pub struct CidCheck<'a> {
    /// Where the next-step density is evaluated.
    pub probe_x: &'a [f64],
    /// Covariate law for the intermediate observation; `None` reuses `probe_x`.
    pub covariates: Option<&'a dyn CovariateDist>,
    /// Points y to test; `None` picks 33 points over mean ± 4 std (or the
    /// whole alphabet for discrete predictives).
    pub grid: Option<&'a [f64]>,
    pub n_mc: usize,
    pub tol_se_multiplier: f64,
}

impl<'a> CidCheck<'a> {
    pub fn new(probe_x: &'a [f64], n_mc: usize) -> Self {
        Self {
            probe_x,
            covariates: None,
            grid: None,
            n_mc,
            tol_se_multiplier: 4.0,
        }
    }
}

pub const CID_GRID_POINTS: usize = 33;

/// Monte-Carlo check of E[P̂^{t+1}(y) | history] = P̂^t(y) at each grid y.
pub fn check_cid<F>(
    predictive_fn: F,
    context: &Context,
    cfg: &CidCheck<'_>,
    rng: &mut RngStream,
) -> Result<PropertyReport>
where
    F: Fn(&Context, &[f64]) -> Result<PredictiveDist>,
{
    if cfg.n_mc < 100 {
        return Err(invalid(format!(
            "n_mc must be at least 100, got {}",
            cfg.n_mc
        )));
    }
    let current = predictive_fn(context, cfg.probe_x)?;
    let grid: Vec<f64> = match (cfg.grid, &current) {
        (Some(g), _) => g.to_vec(),
        (None, PredictiveDist::Gaussian(g)) => (0..CID_GRID_POINTS)
            .map(|i| g.mean + g.std * (-4.0 + 8.0 * i as f64 / (CID_GRID_POINTS - 1) as f64))
            .collect(),
        (None, PredictiveDist::Categorical(p)) => (0..p.len()).map(|s| s as f64).collect(),
    };
    if grid.is_empty() {
        return Err(invalid("empty y grid"));
    }
    let target: Vec<f64> = grid
        .iter()
        .map(|&y| current.density(y))
        .collect::<Result<_>>()?;

    let mut acc = vec![RunningStats::new(); grid.len()];
    let mut extended: Vec<(Vec<f64>, f64)> = context.to_vec();
    extended.push((Vec::new(), 0.0));
    for _ in 0..cfg.n_mc {
        let x_new = match cfg.covariates {
            Some(c) => c.sample(rng),
            None => cfg.probe_x.to_vec(),
        };
        let step = if cfg.covariates.is_some() {
            predictive_fn(context, &x_new)?
        } else {
            current.clone()
        };
        let y_new = step.sample(rng);
        *extended.last_mut().expect("non-empty") = (x_new, y_new);
        let next = predictive_fn(&extended, cfg.probe_x)?;
        for (a, &y) in acc.iter_mut().zip(&grid) {
            a.push(next.density(y)?);
        }
    }

    let evidence = grid
        .iter()
        .zip(&target)
        .zip(&acc)
        .map(|((&y, &want), a)| {
            let d = (a.mean() - want).abs();
            let z = if d < 1e-12 {
                0.0
            } else {
                d / a.std_error().max(1e-12)
            };
            Evidence {
                probe: Probe::GridPoint(y),
                discrepancy: d,
                se_units: Some(z),
            }
        })
        .collect::<Vec<_>>();
    let tol = bonferroni_threshold(cfg.tol_se_multiplier, grid.len());
    Ok(PropertyReport::new(Property::Cid, tol, evidence, |e| {
        e.se_units.unwrap_or(0.0)
    }))
}

pub const MAX_ALPHABET: usize = 4;
pub const MAX_SEQUENCE_LEN: usize = 6;

/// Enumerates every length-n sequence and every reordering of it and
/// reports the largest difference in joint probability.
pub fn check_joint_exchangeability<D: DiscretePredictive>(
    model: &D,
    n: usize,
    tol: f64,
) -> Result<PropertyReport> {
    let k = model.alphabet_size();
    if k > MAX_ALPHABET || k == 0 {
        return Err(invalid(format!(
            "alphabet of size {k} is not enumerable (max {MAX_ALPHABET})"
        )));
    }
    if n > MAX_SEQUENCE_LEN {
        return Err(invalid(format!(
            "sequence length {n} exceeds {MAX_SEQUENCE_LEN}"
        )));
    }
    let mut evidence = Vec::new();
    for seq in (0..n).map(|_| 0..k).multi_cartesian_product() {
        let p = model.sequence_prob(&seq)?;
        let mut worst: Option<Evidence> = None;
        for perm in (0..n).permutations(n) {
            let permuted: Vec<usize> = perm.iter().map(|&i| seq[i]).collect();
            if permuted == seq {
                continue;
            }
            let d = (model.sequence_prob(&permuted)? - p).abs();
            if worst.as_ref().is_none_or(|w| d > w.discrepancy) {
                worst = Some(Evidence {
                    probe: Probe::SequencePair {
                        sequence: seq.clone(),
                        permuted,
                    },
                    discrepancy: d,
                    se_units: None,
                });
            }
        }
        evidence.extend(worst);
    }
    Ok(PropertyReport::new(
        Property::JointExchangeability,
        tol,
        evidence,
        |e| e.discrepancy,
    ))
}
