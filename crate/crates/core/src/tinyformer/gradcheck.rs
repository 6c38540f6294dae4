use super::model::TransformerWeights;
use super::train::{batch_loss, Example};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Checks `n_samples` randomly chosen scalar parameters (without
/// replacement) of the dropout-free loss on `examples`. The relative error
/// of one coordinate is |a − n| / max(|a|, |n|, GRAD_FLOOR).
pub fn grad_check(
    weights: &TransformerWeights,
    examples: &[Example],
    eps: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let (tape, loss) = batch_loss(weights, examples, None)?;
    let grads = tape.backward(loss, &weights.shapes())?;
    drop(tape);

    let offsets: Vec<(usize, usize)> = weights
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let picks = rng.permutation(offsets.len());
    let n = n_samples.min(offsets.len());

    let mut probe = weights.clone();
    let eval = |w: &TransformerWeights| -> Result<f64> {
        let (t, l) = batch_loss(w, examples, None)?;
        Ok(t.value(l).data[0])
    };
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for &k in &picks[..n] {
        let (p, i) = offsets[k];
        let orig = probe.params()[p].data[i];
        probe.params_mut()[p].data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.params_mut()[p].data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.params_mut()[p].data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[p].data[i];
        let abs = (analytic - numeric).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        n_checked: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::mask::{MaskKind, MaskScheme};
    use crate::tinyformer::model::{SeqInput, TransformerConfig};

    #[test]
    fn full_default_model_matches_differences() {
        let mut rng = RngStream::new(61);
        let cfg = TransformerConfig {
            dropout: 0.0,
            ..Default::default()
        };
        let w = TransformerWeights::init(cfg, &mut rng.derive("init")).unwrap();
        let examples: Vec<Example> = [
            (3, MaskKind::Causal),
            (0, MaskKind::CPermInvariant),
            (5, MaskKind::CPermInvariant),
        ]
        .iter()
        .map(|&(ctx_len, kind)| {
            let xs: Vec<Vec<f64>> = (0..ctx_len + 2)
                .map(|_| vec![rng.uniform_range(-2.0, 2.0)])
                .collect();
            let ys: Vec<f64> = xs.iter().map(|_| rng.standard_normal()).collect();
            let ctx: Vec<(Vec<f64>, f64)> = xs[..ctx_len]
                .iter()
                .cloned()
                .zip(ys.iter().copied())
                .collect();
            Example {
                seq: SeqInput::new(&ctx, &xs[ctx_len..], MaskScheme::train(kind)).unwrap(),
                target_ys: ys[ctx_len..].to_vec(),
            }
        })
        .collect();
        let r = grad_check(&w, &examples, 1e-5, 150, &mut rng.derive("pick")).unwrap();
        assert_eq!(r.n_checked, 150);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps() {
        let w =
            TransformerWeights::init(TransformerConfig::default(), &mut RngStream::new(0)).unwrap();
        assert!(grad_check(&w, &[], 0.0, 1, &mut RngStream::new(0)).is_err());
    }
}
