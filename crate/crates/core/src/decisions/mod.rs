//! Decision-making simulators: Gaussian Thompson-sampling bandits and
//! pool-based active learning by uncertainty sampling.

mod active;
mod bandit;

pub use active::{
    run_uncertainty_sampling, sample_al_task, uncertainty_score, AlConfig, AlPoint, AlTask,
    AlTrace, ClusteredGp, ClusteredPrior, LossCurve,
};
pub use bandit::{
    argmax_lowest, arms_c_d, one_armed_instance, run_thompson_exact, run_thompson_oracle,
    run_thompson_seqmodel, ArmKind, BanditArmSpec, BanditRunConfig, BanditTrace, RegretCurve,
};

use serde::{Deserialize, Serialize};

use crate::numerics::RunningStats;

/// Across-replication mean and standard error at every step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl CurveSummary {
    pub fn from_rows<'a, I>(rows: I, len: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut acc = vec![RunningStats::new(); len];
        for row in rows {
            for (a, &v) in acc.iter_mut().zip(row) {
                a.push(v);
            }
        }
        Self {
            mean: acc.iter().map(RunningStats::mean).collect(),
            se: acc.iter().map(RunningStats::std_error).collect(),
        }
    }
}

/// One CSV row of a bandit or active-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub replication: usize,
    pub step: usize,
    pub arm_or_x_index: usize,
    pub reward_or_loss: f64,
    pub cumulative_regret_or_nll: f64,
}

/// √(se_a² + se_b²).
pub fn pooled_se(se_a: f64, se_b: f64) -> f64 {
    (se_a * se_a + se_b * se_b).sqrt()
}
