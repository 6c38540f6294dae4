use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Result};

/// Sequence model over a finite alphabet {0, …, k−1}.
pub trait DiscretePredictive: Send + Sync {
    fn alphabet_size(&self) -> usize;

    /// P(Ŷ_{n+1} = · | history), a probability vector of length
    /// `alphabet_size()`.
    fn probs(&self, history: &[usize]) -> Result<Vec<f64>>;

    /// Joint probability of a whole sequence by the chain rule.
    fn sequence_prob(&self, seq: &[usize]) -> Result<f64> {
        let mut p = 1.0;
        for i in 0..seq.len() {
            p *= self.probs(&seq[..i])?[seq[i]];
        }
        Ok(p)
    }
}

fn check_history(history: &[usize], k: usize) -> Result<()> {
    match history.iter().find(|&&s| s >= k) {
        Some(s) => Err(invalid(format!("symbol {s} outside alphabet of size {k}"))),
        None => Ok(()),
    }
}

/// Binary model that is conditionally permutation invariant but not c.i.d.
///
/// Steps one and two are i.i.d. with P(0) = 1/3. From step three on,
/// P(0) is the average of the observed symbols. With two observations this
/// is (Ŷ₁ + Ŷ₂)/2; longer histories use the mean of the whole history so the
/// rule stays symmetric in its arguments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CidCounterexample;

impl DiscretePredictive for CidCounterexample {
    fn alphabet_size(&self) -> usize {
        2
    }

    fn probs(&self, history: &[usize]) -> Result<Vec<f64>> {
        check_history(history, 2)?;
        if history.len() < 2 {
            return Ok(vec![1.0 / 3.0, 2.0 / 3.0]);
        }
        let ones = history.iter().filter(|&&s| s == 1).count() as f64;
        let p0 = ones / history.len() as f64;
        Ok(vec![p0, 1.0 - p0])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CidCounterexampleState {
    pub history: Vec<usize>,
}

impl CidCounterexampleState {
    pub fn new(history: Vec<usize>) -> Result<Self> {
        check_history(&history, 2)?;
        Ok(Self { history })
    }

    pub fn condition(&self, y: usize) -> Result<Self> {
        let mut history = self.history.clone();
        history.push(y);
        Self::new(history)
    }

    /// (P(0), P(1)) for the next observation.
    pub fn predictive(&self) -> (f64, f64) {
        let p = CidCounterexample
            .probs(&self.history)
            .expect("history validated on construction");
        (p[0], p[1])
    }
}

pub fn cid_ce_predictive(state: &CidCounterexampleState) -> (f64, f64) {
    state.predictive()
}

/// I.i.d. draws from a fixed categorical distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IidCategorical {
    probs: Vec<f64>,
}

impl IidCategorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("empty categorical"));
        }
        for &p in &probs {
            ensure_finite(p, "category probability")?;
            if p < 0.0 {
                return Err(invalid(format!("negative probability {p}")));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }
}

impl DiscretePredictive for IidCategorical {
    fn alphabet_size(&self) -> usize {
        self.probs.len()
    }

    fn probs(&self, history: &[usize]) -> Result<Vec<f64>> {
        check_history(history, self.probs.len())?;
        Ok(self.probs.clone())
    }
}

/// Beta(a, b)-Bernoulli predictive (Pólya urn): P(1 | h) = (a + #1) / (a + b + n).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaBernoulli {
    pub a: f64,
    pub b: f64,
}

impl BetaBernoulli {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        ensure_finite(a, "beta a")?;
        ensure_finite(b, "beta b")?;
        if a <= 0.0 || b <= 0.0 {
            return Err(invalid(format!(
                "beta parameters must be positive ({a}, {b})"
            )));
        }
        Ok(Self { a, b })
    }

    /// Closed-form joint: B(a + k, b + n − k) / B(a, b) for k ones among n.
    pub fn joint_closed_form(&self, seq: &[usize]) -> f64 {
        let k = seq.iter().filter(|&&s| s == 1).count();
        let n = seq.len();
        let mut p = 1.0;
        for i in 0..k {
            p *= (self.a + i as f64) / (self.a + self.b + i as f64);
        }
        for j in 0..(n - k) {
            p *= (self.b + j as f64) / (self.a + self.b + (k + j) as f64);
        }
        p
    }
}

impl DiscretePredictive for BetaBernoulli {
    fn alphabet_size(&self) -> usize {
        2
    }

    fn probs(&self, history: &[usize]) -> Result<Vec<f64>> {
        check_history(history, 2)?;
        let ones = history.iter().filter(|&&s| s == 1).count() as f64;
        let p1 = (self.a + ones) / (self.a + self.b + history.len() as f64);
        Ok(vec![1.0 - p1, p1])
    }
}
