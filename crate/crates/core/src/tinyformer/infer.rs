use std::sync::Arc;

use super::kernels::{self, attention_flops, reset_attention_flops};
use super::mask::{build_mask, MaskKind, MaskScheme};
use super::model::{forward, head_to_gaussian, Token, TransformerWeights};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::inference::GenerationResult;
use crate::models::{check_dim, SequenceModel};
use crate::numerics::{Gaussian, RngStream};

/// Keys and values of every context token seen so far, per layer.
/// Sound only under the causal mask, where earlier tokens never see later
/// ones.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(weights: &TransformerWeights) -> Self {
        let n = weights.config().n_layers;
        Self {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends a context token.
    pub fn push(&mut self, weights: &TransformerWeights, token: &Token) -> Result<()> {
        run_token(weights, self, token, true)?;
        self.len += 1;
        Ok(())
    }

    /// Predictive at a target token attending to the cached context and
    /// itself; the cache is unchanged.
    pub fn predict(&mut self, weights: &TransformerWeights, x: &[f64]) -> Result<Gaussian> {
        let h = run_token(weights, self, &Token::target(x), false)?;
        let p = weights.params();
        let names = weights.names();
        let id = |n: &str| names.iter().position(|s| s == n).expect("parameter");
        let d = h.len();
        let mut out = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut is = [0.0];
        kernels::layer_norm(
            &h,
            d,
            &p[id("final_ln.g")].data,
            &p[id("final_ln.b")].data,
            &mut out,
            &mut xhat,
            &mut is,
        );
        let head = linear_row(&out, &p[id("head.w")], &p[id("head.b")]);
        head_to_gaussian(head[0], head[1])
    }
}

fn linear_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = w.cols();
    let mut out = b.data.clone();
    gemm(1, x.len(), n, 1.0, x, false, &w.data, false, 1.0, &mut out);
    out
}

fn gelu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|a| *a = kernels::gelu(*a));
}

/// Pushes one token through every layer against the cache. Context
/// tokens leave their keys and values behind; targets do not.
fn run_token(
    weights: &TransformerWeights,
    cache: &mut KvCache,
    token: &Token,
    append: bool,
) -> Result<Vec<f64>> {
    let cfg = weights.config();
    if token.x.len() != cfg.x_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.x_dim,
            got: token.x.len(),
        });
    }
    let p = weights.params();
    let names = weights.names();
    let id = |n: String| names.iter().position(|s| *s == n).expect("parameter");
    let lin = |x: &[f64], name: &str| {
        linear_row(x, &p[id(format!("{name}.w"))], &p[id(format!("{name}.b"))])
    };

    let mut raw = Vec::with_capacity(cfg.token_width());
    token.write(&mut raw);
    let mut h = raw;
    for i in 0..cfg.embed_hidden.len() {
        h = lin(&h, &format!("embed.{i}"));
        if i + 1 < cfg.embed_hidden.len() {
            gelu_in_place(&mut h);
        }
    }

    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let mut normed = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut is = [0.0];
    for l in 0..cfg.n_layers {
        let pre = format!("layer{l}");
        kernels::layer_norm(
            &h,
            d,
            &p[id(format!("{pre}.ln1.g"))].data,
            &p[id(format!("{pre}.ln1.b"))].data,
            &mut normed,
            &mut xhat,
            &mut is,
        );
        let q = lin(&normed, &format!("{pre}.attn.q"));
        let k = lin(&normed, &format!("{pre}.attn.k"));
        let v = lin(&normed, &format!("{pre}.attn.v"));
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);
        let n_k = cache.len + 1;
        let mut att = vec![0.0; d];
        for hd in 0..cfg.n_heads {
            kernels::attention_head(
                &q,
                &cache.keys[l],
                &cache.values[l],
                d,
                hd * dh,
                dh,
                1,
                n_k,
                &|_, _| true,
                &mut att,
                None,
            );
        }
        if !append {
            let keep = cache.len * d;
            cache.keys[l].truncate(keep);
            cache.values[l].truncate(keep);
        }
        let o = lin(&att, &format!("{pre}.attn.o"));
        h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        kernels::layer_norm(
            &h,
            d,
            &p[id(format!("{pre}.ln2.g"))].data,
            &p[id(format!("{pre}.ln2.b"))].data,
            &mut normed,
            &mut xhat,
            &mut is,
        );
        let mut f = lin(&normed, &format!("{pre}.ffn.1"));
        gelu_in_place(&mut f);
        let f = lin(&f, &format!("{pre}.ffn.2"));
        h.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    Ok(h)
}

/// One-step predictive at `x` after `context`, recomputing everything.
pub fn predictive(
    weights: &TransformerWeights,
    kind: MaskKind,
    context: &[(Vec<f64>, f64)],
    x: &[f64],
) -> Result<Gaussian> {
    let mut tokens: Vec<Token> = context
        .iter()
        .map(|(cx, cy)| Token::context(cx, *cy))
        .collect();
    tokens.push(Token::target(x));
    let mask = build_mask(MaskScheme::inference(kind), context.len(), 1)?;
    Ok(forward(weights, &tokens, &mask)?[0])
}

/// Generated trajectories plus the attention FLOPs spent on every step.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyGeneration {
    pub result: GenerationResult,
    /// `step_flops[j][i]`: attention FLOPs of step i of trajectory j.
    pub step_flops: Vec<Vec<u64>>,
}

/// Draws `j` autoregressive trajectories over `xs_target`, each value
/// joining the context before the next step. Trajectory k uses
/// `rng.derive("generate").derive_index(k)`. With `use_cache` (causal
/// only) each step costs O(t); otherwise every step reruns the whole
/// sequence.
pub fn infer_multistep(
    weights: &TransformerWeights,
    kind: MaskKind,
    context: &[(Vec<f64>, f64)],
    xs_target: &[Vec<f64>],
    j: usize,
    rng: &mut RngStream,
    use_cache: bool,
) -> Result<TinyGeneration> {
    if use_cache && kind != MaskKind::Causal {
        return Err(Error::CacheUnsound);
    }
    if j == 0 {
        return Err(Error::InvalidArgument("j must be at least 1".into()));
    }
    let base = rng.derive("generate");
    let mut result = GenerationResult {
        samples: Vec::with_capacity(j),
        logpdf_terms: Vec::with_capacity(j),
    };
    let mut step_flops = Vec::with_capacity(j);
    for k in 0..j {
        let mut r = base.derive_index(k as u64);
        let mut ys = Vec::with_capacity(xs_target.len());
        let mut lps = Vec::with_capacity(xs_target.len());
        let mut flops = Vec::with_capacity(xs_target.len());
        let mut ctx = context.to_vec();
        let mut cache = if use_cache {
            let mut c = KvCache::new(weights);
            for (x, y) in context {
                c.push(weights, &Token::context(x, *y))?;
            }
            Some(c)
        } else {
            None
        };
        for (i, x) in xs_target.iter().enumerate() {
            let before = attention_flops();
            let pred = match cache.as_mut() {
                Some(c) => c.predict(weights, x)?,
                None => predictive(weights, kind, &ctx, x)?,
            };
            let y = pred.sample(&mut r);
            lps.push(pred.logpdf(y)?);
            ys.push(y);
            if i + 1 < xs_target.len() {
                if let Some(c) = cache.as_mut() {
                    c.push(weights, &Token::context(x, y))?;
                }
                ctx.push((x.clone(), y));
            }
            flops.push(attention_flops() - before);
        }
        result.samples.push(ys);
        result.logpdf_terms.push(lps);
        step_flops.push(flops);
    }
    rng.uniform();
    Ok(TinyGeneration { result, step_flops })
}

/// Attention FLOPs of one generation step at context size `t`, measured by
/// running it. With the cache this is the target query plus appending the
/// newly generated token.
pub fn step_attention_flops(
    weights: &TransformerWeights,
    kind: MaskKind,
    t: usize,
    use_cache: bool,
) -> Result<u64> {
    if use_cache && kind != MaskKind::Causal {
        return Err(Error::CacheUnsound);
    }
    let dim = weights.config().x_dim;
    let ctx: Vec<(Vec<f64>, f64)> = (0..t)
        .map(|i| (vec![i as f64 / t.max(1) as f64; dim], 0.1 * i as f64))
        .collect();
    let x = vec![0.5; dim];
    if use_cache {
        let mut c = KvCache::new(weights);
        for (cx, cy) in &ctx {
            c.push(weights, &Token::context(cx, *cy))?;
        }
        reset_attention_flops();
        c.predict(weights, &x)?;
        c.push(weights, &Token::context(&x, 0.0))?;
    } else {
        reset_attention_flops();
        predictive(weights, kind, &ctx, &x)?;
    }
    Ok(attention_flops())
}

/// A trained or random transformer viewed as a sequence model. Every
/// predictive reruns the full sequence with dropout off.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    weights: Arc<TransformerWeights>,
    kind: MaskKind,
    context: Vec<(Vec<f64>, f64)>,
}

impl TransformerModel {
    pub fn new(weights: Arc<TransformerWeights>, kind: MaskKind) -> Self {
        Self {
            weights,
            kind,
            context: Vec::new(),
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn context(&self) -> &[(Vec<f64>, f64)] {
        &self.context
    }
}

impl SequenceModel for TransformerModel {
    fn input_dim(&self) -> usize {
        self.weights.config().x_dim
    }

    fn num_observations(&self) -> usize {
        self.context.len()
    }

    fn condition(&self, x: &[f64], y: f64) -> Result<Self> {
        check_dim(self.input_dim(), x)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("observation"));
        }
        let mut next = self.clone();
        next.context.push((x.to_vec(), y));
        Ok(next)
    }

    fn predictive(&self, x: &[f64]) -> Result<Gaussian> {
        check_dim(self.input_dim(), x)?;
        predictive(&self.weights, self.kind, &self.context, x)
    }
}
