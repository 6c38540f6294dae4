use serde::{Deserialize, Serialize};

use super::mask::{MaskKind, MaskScheme};
use super::model::{forward_batch, forward_tape, ParamVars, SeqInput, TransformerWeights};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::models::{GpState, JointPredictive, RbfPrior};
use crate::numerics::RngStream;

/// A sequence laid out for the model plus the true values at its targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub seq: SeqInput,
    pub target_ys: Vec<f64>,
}

/// Records the mean target NLL of a batch. Dropout is applied when an
/// RNG is given.
pub fn batch_loss(
    weights: &TransformerWeights,
    examples: &[Example],
    dropout: Option<&mut RngStream>,
) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, weights);
    let seqs: Vec<SeqInput> = examples.iter().map(|e| e.seq.clone()).collect();
    let pred = forward_tape(&mut tape, weights, &vars, &seqs, dropout)?;
    let ys: Vec<f64> = examples
        .iter()
        .flat_map(|e| e.target_ys.iter().copied())
        .collect();
    let loss = tape.gaussian_nll(pred, ys)?;
    Ok((tape, loss))
}

/// GP regression sequences with inputs uniform on a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpDataConfig {
    pub dim: usize,
    pub horizon: usize,
    pub x_low: f64,
    pub x_high: f64,
    pub signal_std: f64,
    pub lengthscale: f64,
    pub noise_std: f64,
}

impl Default for GpDataConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            horizon: 32,
            x_low: -2.0,
            x_high: 2.0,
            signal_std: 1.0,
            lengthscale: 1.0,
            noise_std: 0.1,
        }
    }
}

impl GpDataConfig {
    pub fn prior(&self) -> Result<RbfPrior> {
        RbfPrior::new(self.signal_std, self.lengthscale, self.noise_std, self.dim)
    }

    /// Expected NLL of always predicting the prior marginal
    /// N(0, signal² + noise²): ½ ln(2π v) + ½.
    pub fn prior_marginal_nll(&self) -> f64 {
        let v = self.signal_std.powi(2) + self.noise_std.powi(2);
        0.5 * (2.0 * std::f64::consts::PI * v).ln() + 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpSequence {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

impl GpSequence {
    /// The first `context_len` points as context, the rest as targets.
    pub fn example(&self, context_len: usize, scheme: MaskScheme) -> Result<Example> {
        if context_len >= self.ys.len() {
            return Err(Error::InvalidArgument(format!(
                "context {context_len} leaves no targets in a sequence of {}",
                self.ys.len()
            )));
        }
        let ctx: Vec<(Vec<f64>, f64)> = self.xs[..context_len]
            .iter()
            .cloned()
            .zip(self.ys[..context_len].iter().copied())
            .collect();
        Ok(Example {
            seq: SeqInput::new(&ctx, &self.xs[context_len..], scheme)?,
            target_ys: self.ys[context_len..].to_vec(),
        })
    }
}

/// Draws `n` sequences; sequence i uses sub-stream i of `rng`.
pub fn sample_gp_sequences(
    cfg: &GpDataConfig,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<GpSequence>> {
    if cfg.horizon < 2 || !(cfg.x_low < cfg.x_high) {
        return Err(Error::InvalidArgument(
            "horizon ≥ 2 and x_low < x_high required".into(),
        ));
    }
    let state = GpState::new(cfg.prior()?);
    (0..n)
        .map(|i| {
            let mut r = rng.derive_index(i as u64);
            let xs: Vec<Vec<f64>> = (0..cfg.horizon)
                .map(|_| {
                    (0..cfg.dim)
                        .map(|_| r.uniform_range(cfg.x_low, cfg.x_high))
                        .collect()
                })
                .collect();
            let ys = state
                .joint_predictive(&xs)?
                .sample(&mut r)
                .iter()
                .copied()
                .collect();
            Ok(GpSequence { xs, ys })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            min_lr: 3e-5,
            warmup_ratio: 0.03,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
        }
    }
}

/// Linear warmup to the peak over the first ⌈ratio·total⌉ steps, then a
/// half cosine that lands on `min` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, min: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps =
            ((warmup_ratio * total_steps as f64).ceil() as usize).clamp(1, total_steps.max(1));
        Self {
            peak,
            min,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self
            .total_steps
            .saturating_sub(1)
            .saturating_sub(self.warmup_steps);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay on weight matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, weights: &TransformerWeights) -> Self {
        let zeros: Vec<Vec<f64>> = weights
            .params()
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut TransformerWeights, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let decay = if weights.is_matrix(id) {
                c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = &mut weights.params_mut()[id].data;
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + c.eps) + decay * p[i]);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub data: GpDataConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            n_train: 1024,
            n_val: 256,
            data: GpDataConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.optimizer.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.optimizer.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "n_train, n_val and batch_size must be positive".into(),
            ));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.min_lr >= 0.0) {
            return Err(Error::InvalidArgument(
                "learning rates must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub mask: MaskKind,
    pub initial_val_nll: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn final_val_nll(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_val_nll, |e| e.val_nll)
    }
}

/// Mean target NLL of `examples` without dropout, in chunks.
pub fn evaluate(weights: &TransformerWeights, examples: &[Example], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for part in examples.chunks(chunk.max(1)) {
        let seqs: Vec<SeqInput> = part.iter().map(|e| e.seq.clone()).collect();
        let preds = forward_batch(weights, &seqs)?;
        for (p, e) in preds.iter().zip(part) {
            for (g, &y) in p.iter().zip(&e.target_ys) {
                total -= g.logpdf(y)?;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean one-step NLL of every sequence at a fixed context length.
pub fn evaluate_at_context(
    weights: &TransformerWeights,
    seqs: &[GpSequence],
    kind: MaskKind,
    context_len: usize,
) -> Result<f64> {
    let ex = seqs
        .iter()
        .map(|s| s.example(context_len, MaskScheme::train(kind)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(weights, &ex, 64)
}

/// Context lengths uniform on {0, …, horizon − 1}, one per sequence.
fn random_examples(
    seqs: &[GpSequence],
    kind: MaskKind,
    rng: &mut RngStream,
) -> Result<Vec<Example>> {
    seqs.iter()
        .map(|s| s.example(rng.below(s.ys.len()), MaskScheme::train(kind)))
        .collect()
}

pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 3;

/// Trains in place on fixed train/validation sets drawn from `rng`
/// ("data/train", "data/val"). Every epoch reshuffles and redraws one
/// context length per training sequence; validation context lengths are
/// drawn once. `on_epoch` sees each finished epoch.
pub fn train(
    weights: &mut TransformerWeights,
    kind: MaskKind,
    cfg: &TrainConfig,
    rng: &RngStream,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingLog> {
    cfg.validate()?;
    if cfg.data.dim != weights.config().x_dim {
        return Err(Error::DimensionMismatch {
            expected: weights.config().x_dim,
            got: cfg.data.dim,
        });
    }
    let data_rng = rng.derive("data");
    let train_seqs = sample_gp_sequences(&cfg.data, cfg.n_train, &data_rng.derive("train"))?;
    let val_seqs = sample_gp_sequences(&cfg.data, cfg.n_val, &data_rng.derive("val"))?;
    let val = random_examples(&val_seqs, kind, &mut data_rng.derive("val_context"))?;

    let steps = cfg.epochs * cfg.steps_per_epoch();
    let o = &cfg.optimizer;
    let schedule = CosineSchedule::new(o.lr, o.min_lr, o.warmup_ratio, steps);
    let mut opt = AdamW::new(o.clone(), weights);
    let shapes = weights.shapes();

    let initial = evaluate(weights, &val, 64)?;
    let mut log = TrainingLog {
        mask: kind,
        initial_val_nll: initial,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0;
    let mut strikes = 0;
    for epoch in 0..cfg.epochs {
        let mut er = rng.derive("epoch").derive_index(epoch as u64);
        let order = er.permutation(cfg.n_train);
        let shuffled: Vec<GpSequence> = order.iter().map(|&i| train_seqs[i].clone()).collect();
        let examples = random_examples(&shuffled, kind, &mut er)?;
        let mut dropout_rng = er.derive("dropout");
        let mut sum = 0.0;
        let mut lr = 0.0;
        for batch in examples.chunks(o.batch_size) {
            lr = schedule.lr(step);
            let (tape, loss) = match batch_loss(weights, batch, Some(&mut dropout_rng)) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                        initial,
                    })
                }
                Err(e) => return Err(e),
            };
            let l = tape.value(loss).data[0];
            let grads = tape.backward(loss, &shapes)?;
            opt.step(weights, &grads, lr);
            sum += l * batch.len() as f64;
            step += 1;
        }
        let val_nll = evaluate(weights, &val, 64)?;
        let entry = EpochLog {
            epoch,
            train_nll: sum / cfg.n_train as f64,
            val_nll,
            lr,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        if !val_nll.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: val_nll,
                initial,
            });
        }
        strikes = if val_nll > DIVERGENCE_FACTOR * initial.abs() {
            strikes + 1
        } else {
            0
        };
        if strikes >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                epoch,
                loss: val_nll,
                initial,
            });
        }
    }
    Ok(log)
}
