//! Reverse-mode autodiff over a linear record of ops.

use std::sync::Arc;

use super::kernels;
use super::mask::AttentionMask;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One sequence inside a row-stacked batch: its first row and its mask.
#[derive(Clone, Debug)]
pub struct Segment {
    pub start: usize,
    pub mask: Arc<AttentionMask>,
}

enum Op {
    Input,
    Param(usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<f64>>,
    },
    Dropout {
        x: usize,
        scale: Vec<f64>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    GaussianNll {
        pred: usize,
        ys: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value on tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let out = super::tensor::matmul(av, bv);
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias of {} for {} columns",
                bv.len(),
                xv.cols()
            )));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x.0, b.0)))
    }

    /// Affine map x W + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                av.shape, bv.shape
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.push(out, Op::Gelu(x.0))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Shape("layer norm parameters".into()));
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        kernels::layer_norm(
            &xv.data,
            cols,
            &self.value(gamma).data,
            &self.value(beta).data,
            &mut out.data,
            &mut xhat,
            &mut inv_std,
        );
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head masked attention applied independently to every segment
    /// of the row-stacked q, k, v.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: Vec<Segment>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qv.rows(), qv.cols());
        if kv.shape != qv.shape || vv.shape != qv.shape || d % n_heads != 0 {
            return Err(Error::Shape("attention operands".into()));
        }
        let covered: usize = segments.iter().map(|s| s.mask.len()).sum();
        if covered != rows {
            return Err(Error::Shape(format!(
                "segments cover {covered} of {rows} rows"
            )));
        }
        let mut out = Tensor::zeros(rows, d);
        let mut probs = Vec::with_capacity(segments.len());
        for seg in &segments {
            let n = seg.mask.len();
            let r = seg.start * d..(seg.start + n) * d;
            let mut p = vec![0.0; n_heads * n * n];
            kernels::attention(
                &qv.data[r.clone()],
                &kv.data[r.clone()],
                &vv.data[r.clone()],
                d,
                n_heads,
                &seg.mask,
                &mut out.data[r],
                Some(&mut p),
            );
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                n_heads,
                segments,
                probs,
            },
        ))
    }

    /// Inverted dropout with keep probability 1 − p.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mut out = self.value(x).clone();
        let scale: Vec<f64> = (0..out.len())
            .map(|_| {
                if rng.uniform() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        for (o, s) in out.data.iter_mut().zip(&scale) {
            *o *= s;
        }
        self.push(out, Op::Dropout { x: x.0, scale })
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let out = self.value(x).gather_rows(&rows);
        self.push(out, Op::GatherRows { x: x.0, rows })
    }

    /// Mean Gaussian NLL of `ys` under rows (mean, pre-std) of `pred`.
    pub fn gaussian_nll(&mut self, pred: Var, ys: Vec<f64>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 2 || pv.rows() != ys.len() || ys.is_empty() {
            return Err(Error::Shape(format!(
                "{} predictions for {} targets",
                pv.rows(),
                ys.len()
            )));
        }
        if !pv.all_finite() {
            return Err(Error::NonFinite("prediction"));
        }
        let total: f64 = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| kernels::gaussian_nll(pv.at(i, 0), pv.at(i, 1), y))
            .sum();
        let loss = Tensor::filled(1, 1, total / ys.len() as f64);
        Ok(self.push(loss, Op::GaussianNll { pred: pred.0, ys }))
    }

    /// Gradients of the scalar `loss` for every parameter id below
    /// `n_params`; parameters that never reached the loss get zeros of
    /// the shape given by `shapes`.
    pub fn backward(&self, loss: Var, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut out: Vec<Option<Tensor>> = vec![None; shapes.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match &mut out[*id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = accum(&mut grads, *a, av);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g.data,
                        false,
                        &bv.data,
                        true,
                        1.0,
                        &mut ga.data,
                    );
                    let gb = accum(&mut grads, *b, bv);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &av.data,
                        true,
                        &g.data,
                        false,
                        1.0,
                        &mut gb.data,
                    );
                }
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let gb = accum(&mut grads, *b, &self.nodes[*b].value);
                    for row in g.data.chunks_exact(c) {
                        for (d, v) in gb.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *b, &g).add_assign(&g);
                    add_into(&mut grads, *a, g);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[*x].value;
                    let gx = accum(&mut grads, *x, xv);
                    for ((d, gi), xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        *d += gi * kernels::gelu_grad(*xi);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = g.cols();
                    let gamma_v = self.nodes[*gamma].value.data.clone();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let gx = accum(&mut grads, *x, &self.nodes[*x].value);
                    kernels::layer_norm_backward(
                        &g.data,
                        cols,
                        &gamma_v,
                        xhat,
                        inv_std,
                        &mut gx.data,
                        &mut dgamma,
                        &mut dbeta,
                    );
                    let gg = accum(&mut grads, *gamma, &self.nodes[*gamma].value);
                    gg.data.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                    let gb = accum(&mut grads, *beta, &self.nodes[*beta].value);
                    gb.data.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    segments,
                    probs,
                } => {
                    let (qv, kv, vv) = (
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                    );
                    let d = qv.cols();
                    let dh = d / n_heads;
                    let mut dq = Tensor::zeros(qv.rows(), d);
                    let mut dk = Tensor::zeros(qv.rows(), d);
                    let mut dv = Tensor::zeros(qv.rows(), d);
                    for (seg, p) in segments.iter().zip(probs) {
                        let n = seg.mask.len();
                        let r = seg.start * d..(seg.start + n) * d;
                        for h in 0..*n_heads {
                            kernels::attention_head_backward(
                                &qv.data[r.clone()],
                                &kv.data[r.clone()],
                                &vv.data[r.clone()],
                                &g.data[r.clone()],
                                &p[h * n * n..(h + 1) * n * n],
                                d,
                                h * dh,
                                dh,
                                n,
                                &mut dq.data[r.clone()],
                                &mut dk.data[r.clone()],
                                &mut dv.data[r.clone()],
                            );
                        }
                    }
                    add_into(&mut grads, *q, dq);
                    add_into(&mut grads, *k, dk);
                    add_into(&mut grads, *v, dv);
                }
                Op::Dropout { x, scale } => {
                    let mut g = g;
                    g.data.iter_mut().zip(scale).for_each(|(a, s)| *a *= s);
                    add_into(&mut grads, *x, g);
                }
                Op::GatherRows { x, rows } => {
                    let gx = accum(&mut grads, *x, &self.nodes[*x].value);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                }
                Op::GaussianNll { pred, ys } => {
                    let pv = &self.nodes[*pred].value;
                    let scale = g.data[0] / ys.len() as f64;
                    let gp = accum(&mut grads, *pred, pv);
                    for (i, &y) in ys.iter().enumerate() {
                        let (dm, ds) = kernels::gaussian_nll_grad(pv.at(i, 0), pv.at(i, 1), y);
                        gp.data[2 * i] += scale * dm;
                        gp.data[2 * i + 1] += scale * ds;
                    }
                }
            }
        }

        Ok(out
            .into_iter()
            .zip(shapes)
            .map(|(g, shape)| {
                g.unwrap_or_else(|| Tensor {
                    shape: shape.clone(),
                    data: vec![0.0; shape.iter().product()],
                })
            })
            .collect())
    }
}

fn accum<'a>(grads: &'a mut [Option<Tensor>], idx: usize, like: &Tensor) -> &'a mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor {
        shape: like.shape.clone(),
        data: vec![0.0; like.len()],
    })
}

fn add_into(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradients_are_exact() {
        // loss = mean NLL of y under (x W + b) with a linear map only
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.0]).unwrap());
        let w = Tensor::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let b = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let wv = tape.param(0, &w);
        let bv = tape.param(1, &b);
        let h = tape.linear(x, wv, bv).unwrap();
        let loss = tape.gaussian_nll(h, vec![0.3, -0.2, 1.0]).unwrap();
        let grads = tape
            .backward(loss, &[vec![2, 2], vec![1, 2], vec![4, 4]])
            .unwrap();
        // unused parameter id 2 receives exact zeros
        assert!(grads[2].data.iter().all(|&v| v == 0.0));
        assert_eq!(grads[2].len(), 16);
        // bias gradient equals sum of per-row output gradients
        let xs = [[1.0, 2.0], [-1.0, 0.5], [0.0, 1.0]];
        let ys = [0.3, -0.2, 1.0];
        let mut db = [0.0; 2];
        let mut dw = [0.0; 4];
        for (xr, &y) in xs.iter().zip(&ys) {
            let m = xr[0] * 0.1 + xr[1] * -0.3;
            let s = xr[0] * 0.2 + xr[1] * 0.4;
            let (gm, gs) = kernels::gaussian_nll_grad(m, s, y);
            let (gm, gs) = (gm / 3.0, gs / 3.0);
            db[0] += gm;
            db[1] += gs;
            dw[0] += xr[0] * gm;
            dw[1] += xr[0] * gs;
            dw[2] += xr[1] * gm;
            dw[3] += xr[1] * gs;
        }
        for (a, e) in grads[1].data.iter().zip(&db) {
            assert!((a - e).abs() < 1e-15);
        }
        for (a, e) in grads[0].data.iter().zip(&dw) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        let p = tape.input(Tensor::zeros(2, 2));
        assert!(tape.gaussian_nll(p, vec![0.0]).is_err());
    }
}
