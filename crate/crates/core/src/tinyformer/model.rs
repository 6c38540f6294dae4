use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{softplus, STD_FLOOR};
use super::mask::{build_mask, AttentionMask, MaskScheme};
use super::tape::{Segment, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::numerics::{Gaussian, RngStream};

/// Pre-norm transformer hyperparameters. The activation is always GELU
/// and the head always emits (mean, pre-std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub x_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    /// Widths of the token-embedding MLP; the last must equal `d_model`.
    pub embed_hidden: Vec<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            x_dim: 1,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_layers: 4,
            dropout: 0.1,
            embed_hidden: vec![256, 64],
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.x_dim == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("transformer sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.embed_hidden.last() != Some(&self.d_model) {
            return bad("last embed_hidden width must equal d_model");
        }
        if self.embed_hidden.contains(&0) {
            return bad("embed_hidden widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of a raw token: covariates, observed value, target flag.
    pub fn token_width(&self) -> usize {
        self.x_dim + 2
    }

    /// Scalar parameter count of weights built from this config.
    pub fn num_scalars(&self) -> usize {
        layout(self)
            .1
            .shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter ids in registration order.
#[derive(Clone, Debug)]
struct Layout {
    embed: Vec<Linear>,
    blocks: Vec<Block>,
    final_ln: Norm,
    head: Linear,
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), vec![fan_in, fan_out]),
            b: self.add(format!("{name}.b"), vec![1, fan_out]),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.g"), vec![1, d]),
            b: self.add(format!("{name}.b"), vec![1, d]),
        }
    }
}

fn layout(cfg: &TransformerConfig) -> (Layout, Registry) {
    let mut reg = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let mut embed = Vec::new();
    let mut fan_in = cfg.token_width();
    for (i, &w) in cfg.embed_hidden.iter().enumerate() {
        embed.push(reg.linear(&format!("embed.{i}"), fan_in, w));
        fan_in = w;
    }
    let d = cfg.d_model;
    let blocks = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("layer{l}");
            Block {
                ln1: reg.norm(&format!("{p}.ln1"), d),
                q: reg.linear(&format!("{p}.attn.q"), d, d),
                k: reg.linear(&format!("{p}.attn.k"), d, d),
                v: reg.linear(&format!("{p}.attn.v"), d, d),
                o: reg.linear(&format!("{p}.attn.o"), d, d),
                ln2: reg.norm(&format!("{p}.ln2"), d),
                ff1: reg.linear(&format!("{p}.ffn.1"), d, cfg.d_ff),
                ff2: reg.linear(&format!("{p}.ffn.2"), cfg.d_ff, d),
            }
        })
        .collect();
    let final_ln = reg.norm("final_ln", d);
    let head = reg.linear("head", d, 2);
    (
        Layout {
            embed,
            blocks,
            final_ln,
            head,
        },
        reg,
    )
}

/// All trainable tensors, indexed by parameter id.
#[derive(Clone, Debug)]
pub struct TransformerWeights {
    config: TransformerConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl PartialEq for TransformerWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl TransformerWeights {
    /// Weights and biases uniform in ±1/√fan_in; layer-norm gains 1 and
    /// shifts 0.
    pub fn init(config: TransformerConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = layout(&config);
        let mut params = Vec::with_capacity(reg.shapes.len());
        for (name, shape) in reg.names.iter().zip(&reg.shapes) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".g") {
                vec![1.0; n]
            } else if is_norm_shift(name) {
                vec![0.0; n]
            } else {
                let fan_in = if name.ends_with(".w") {
                    shape[0]
                } else {
                    fan_in_of_bias(&reg, name)
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
            };
            params.push(Tensor {
                shape: shape.clone(),
                data,
            });
        }
        Ok(Self {
            config,
            layout,
            names: reg.names,
            params,
        })
    }

    /// Rebuilds weights from a config and a flat parameter list, checking
    /// every shape.
    pub fn from_params(config: TransformerConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = layout(&config);
        if params.len() != reg.shapes.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, config needs {}",
                params.len(),
                reg.shapes.len()
            )));
        }
        for ((p, s), name) in params.iter().zip(&reg.shapes).zip(&reg.names) {
            if &p.shape != s || p.data.len() != s.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "parameter {name}: {:?} vs {:?}",
                    p.shape, s
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            names: reg.names,
            params,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// True for weight matrices (the tensors weight decay applies to).
    pub fn is_matrix(&self, id: usize) -> bool {
        self.names[id].ends_with(".w")
    }

    /// Sets the output head to zero so every prediction is
    /// N(0, softplus(0) + floor).
    pub fn zero_head(&mut self) {
        let h = self.layout.head;
        self.params[h.w].data.iter_mut().for_each(|v| *v = 0.0);
        self.params[h.b].data.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn is_norm_shift(name: &str) -> bool {
    name.ends_with(".b") && (name.contains(".ln") || name.starts_with("final_ln"))
}

fn fan_in_of_bias(reg: &Registry, bias_name: &str) -> usize {
    let w = format!("{}.w", bias_name.trim_end_matches(".b"));
    let i = reg
        .names
        .iter()
        .position(|n| *n == w)
        .expect("bias without weight");
    reg.shapes[i][0]
}

/// One input token. Targets carry a placeholder value of 0 and a set flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub x: Vec<f64>,
    pub y: f64,
    pub is_target: bool,
}

impl Token {
    pub fn context(x: &[f64], y: f64) -> Self {
        Self {
            x: x.to_vec(),
            y,
            is_target: false,
        }
    }

    pub fn target(x: &[f64]) -> Self {
        Self {
            x: x.to_vec(),
            y: 0.0,
            is_target: true,
        }
    }

    pub(crate) fn write(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.x);
        out.push(if self.is_target { 0.0 } else { self.y });
        out.push(if self.is_target { 1.0 } else { 0.0 });
    }
}

/// One sequence of a batch: context tokens first, then targets, under a
/// mask of matching size.
#[derive(Clone, Debug)]
pub struct SeqInput {
    pub tokens: Vec<Token>,
    pub mask: Arc<AttentionMask>,
}

impl SeqInput {
    pub fn new(
        context: &[(Vec<f64>, f64)],
        targets: &[Vec<f64>],
        scheme: MaskScheme,
    ) -> Result<Self> {
        let mut tokens: Vec<Token> = context.iter().map(|(x, y)| Token::context(x, *y)).collect();
        tokens.extend(targets.iter().map(|x| Token::target(x)));
        Ok(Self {
            tokens,
            mask: Arc::new(build_mask(scheme, context.len(), targets.len())?),
        })
    }
}

/// Parameter handles for one forward pass.
pub(crate) struct ParamVars(Vec<Var>);

impl ParamVars {
    pub(crate) fn record(tape: &mut Tape, weights: &TransformerWeights) -> Self {
        Self(
            weights
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p))
                .collect(),
        )
    }
}

/// Records the batched forward pass and returns the (n_targets × 2) head
/// output of every target row, sequences in order.
pub(crate) fn forward_tape(
    tape: &mut Tape,
    weights: &TransformerWeights,
    vars: &ParamVars,
    batch: &[SeqInput],
    mut dropout: Option<&mut RngStream>,
) -> Result<Var> {
    let cfg = &weights.config;
    let lay = &weights.layout;
    let p = |id: usize| vars.0[id];
    let width = cfg.token_width();

    let mut raw = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    let mut target_rows = Vec::new();
    let mut row = 0;
    for seq in batch {
        if seq.tokens.len() != seq.mask.len() {
            return Err(Error::Shape(format!(
                "{} tokens under a {}-wide mask",
                seq.tokens.len(),
                seq.mask.len()
            )));
        }
        for (i, t) in seq.tokens.iter().enumerate() {
            if t.x.len() != cfg.x_dim {
                return Err(Error::DimensionMismatch {
                    expected: cfg.x_dim,
                    got: t.x.len(),
                });
            }
            if t.is_target != (i >= seq.mask.n_context()) {
                return Err(Error::Shape(
                    "targets must follow the context tokens".into(),
                ));
            }
            t.write(&mut raw);
            if t.is_target {
                target_rows.push(row + i);
            }
        }
        segments.push(Segment {
            start: row,
            mask: Arc::clone(&seq.mask),
        });
        row += seq.tokens.len();
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("token"));
    }
    let mut h = tape.input(Tensor::from_vec(row, width, raw)?);

    for (i, lin) in lay.embed.iter().enumerate() {
        h = tape.linear(h, p(lin.w), p(lin.b))?;
        if i + 1 < lay.embed.len() {
            h = tape.gelu(h);
        }
    }

    let rate = cfg.dropout;
    for blk in &lay.blocks {
        let a = tape.layer_norm(h, p(blk.ln1.g), p(blk.ln1.b))?;
        let q = tape.linear(a, p(blk.q.w), p(blk.q.b))?;
        let k = tape.linear(a, p(blk.k.w), p(blk.k.b))?;
        let v = tape.linear(a, p(blk.v.w), p(blk.v.b))?;
        let att = tape.attention(q, k, v, cfg.n_heads, segments.clone())?;
        let mut o = tape.linear(att, p(blk.o.w), p(blk.o.b))?;
        if let Some(r) = dropout.as_deref_mut() {
            o = tape.dropout(o, rate, r);
        }
        h = tape.add(h, o)?;

        let a = tape.layer_norm(h, p(blk.ln2.g), p(blk.ln2.b))?;
        let f = tape.linear(a, p(blk.ff1.w), p(blk.ff1.b))?;
        let f = tape.gelu(f);
        let mut f = tape.linear(f, p(blk.ff2.w), p(blk.ff2.b))?;
        if let Some(r) = dropout.as_deref_mut() {
            f = tape.dropout(f, rate, r);
        }
        h = tape.add(h, f)?;
    }

    let h = tape.gather_rows(h, target_rows);
    let h = tape.layer_norm(h, p(lay.final_ln.g), p(lay.final_ln.b))?;
    tape.linear(h, p(lay.head.w), p(lay.head.b))
}

/// Head output (mean, pre-std) to a Gaussian.
pub fn head_to_gaussian(mean: f64, pre_std: f64) -> Result<Gaussian> {
    Gaussian::new(mean, softplus(pre_std) + STD_FLOOR)
}

/// Dropout-free forward of one sequence; returns the predictive of every
/// target token in order.
pub fn forward(
    weights: &TransformerWeights,
    tokens: &[Token],
    mask: &AttentionMask,
) -> Result<Vec<Gaussian>> {
    let seq = SeqInput {
        tokens: tokens.to_vec(),
        mask: Arc::new(mask.clone()),
    };
    let out = forward_batch(weights, std::slice::from_ref(&seq))?;
    out.into_iter()
        .next()
        .ok_or_else(|| Error::Shape("empty batch".into()))
}

/// Dropout-free forward of a batch; one vector of predictives per sequence.
pub fn forward_batch(
    weights: &TransformerWeights,
    batch: &[SeqInput],
) -> Result<Vec<Vec<Gaussian>>> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, weights);
    let out = forward_tape(&mut tape, weights, &vars, batch, None)?;
    let vals = tape.value(out);
    let mut r = 0;
    let mut res = Vec::with_capacity(batch.len());
    for seq in batch {
        let n = seq.mask.n_targets();
        let g = (r..r + n)
            .map(|i| head_to_gaussian(vals.at(i, 0), vals.at(i, 1)))
            .collect::<Result<Vec<_>>>()?;
        res.push(g);
        r += n;
    }
    Ok(res)
}

/// Mean NLL of `ys` under `preds`.
pub fn nll_loss(preds: &[Gaussian], ys: &[f64]) -> Result<f64> {
    if preds.len() != ys.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} values",
            preds.len(),
            ys.len()
        )));
    }
    let mut total = 0.0;
    for (g, &y) in preds.iter().zip(ys) {
        if !g.mean.is_finite() || !g.std.is_finite() {
            return Err(Error::NonFinite("prediction"));
        }
        total -= g.logpdf(y)?;
    }
    Ok(total / ys.len() as f64)
}
