use std::sync::Arc;

use proptest::prelude::*;

use exseq::diagnostics::{assemble_conjugate_joint, gap_closed_form_gaussian, kl_diagonalization};
use exseq::inference::{marginal_product_logloss, multistep_logloss};
use exseq::models::{ConjGaussianState, GpState, RbfPrior, SequenceModel};
use exseq::numerics::{mvn_kl, MultivariateGaussian, RngStream};
use exseq::tinyformer::{
    build_mask, checkpoint, MaskKind, MaskScheme, TransformerConfig, TransformerModel,
    TransformerWeights,
};

fn permuted<T: Clone>(v: &[T], seed: u64) -> Vec<T> {
    let p = RngStream::new(seed).permutation(v.len());
    p.iter().map(|&i| v[i].clone()).collect()
}

fn spd(entries: &[f64], n: usize, ridge: f64) -> MultivariateGaussian {
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| entries[i * n..(i + 1) * n].to_vec())
        .collect();
    let cov: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>()
                        + if i == j { ridge } else { 0.0 }
                })
                .collect()
        })
        .collect();
    MultivariateGaussian::from_parts(vec![0.0; n], cov).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conjugate_predictive_ignores_order(ys in prop::collection::vec(-5.0f64..5.0, 1..12), seed in any::<u64>()) {
        let m = ConjGaussianState::new(0.3, 1.2, 0.7).unwrap();
        let a = m.condition_all(ys.iter().map(|&y| (&[][..], y))).unwrap().predictive(&[]).unwrap();
        let pys = permuted(&ys, seed);
        let b = m.condition_all(pys.iter().map(|&y| (&[][..], y))).unwrap().predictive(&[]).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-12);
    }

    #[test]
    fn gp_predictive_ignores_order(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..10),
        probe in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let gp = GpState::new(RbfPrior::new(1.0, 1.0, 0.1, 1).unwrap());
        let run = |pts: &[(f64, f64)]| {
            let xs: Vec<[f64; 1]> = pts.iter().map(|p| [p.0]).collect();
            gp.condition_all(xs.iter().map(|x| &x[..]).zip(pts.iter().map(|p| p.1)))
                .unwrap()
                .predictive(&[probe])
                .unwrap()
        };
        let (a, b) = (run(&pts), run(&permuted(&pts, seed)));
        prop_assert!((a.mean - b.mean).abs() < 1e-7, "{} vs {}", a.mean, b.mean);
        prop_assert!((a.std - b.std).abs() < 1e-7);
    }

    #[test]
    fn gap_is_nonnegative_and_grows_with_horizon(sigma in 0.0f64..3.0, tau in 0.05f64..3.0, t in 0usize..20, k in 1usize..15) {
        let g1 = gap_closed_form_gaussian(sigma, tau, t, t + k).unwrap();
        let g2 = gap_closed_form_gaussian(sigma, tau, t, t + k + 1).unwrap();
        prop_assert!(g1 >= 0.0);
        prop_assert!(g2 >= g1 - 1e-12);
        if k == 1 || sigma == 0.0 {
            prop_assert!(g1.abs() < 1e-12);
        }
    }

    #[test]
    fn gap_equals_diagonalization_kl(sigma in 0.01f64..3.0, tau in 0.1f64..3.0, t in 0usize..10, k in 1usize..10) {
        let cf = gap_closed_form_gaussian(sigma, tau, t, t + k).unwrap();
        let kl = kl_diagonalization(&assemble_conjugate_joint(sigma, tau, t, t + k).unwrap()).unwrap();
        prop_assert!((cf - kl).abs() < 1e-9, "{cf} vs {kl}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        a in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let p = spd(&a, 3, 0.1);
        let q = spd(&b, 3, 0.2);
        prop_assert!(mvn_kl(&p, &q).unwrap() >= -1e-10);
        prop_assert!(mvn_kl(&p, &p).unwrap().abs() < 1e-9);
        prop_assert!(kl_diagonalization(&p).unwrap() >= -1e-12);
    }

    #[test]
    fn losses_agree_on_a_single_target(y in -4.0f64..4.0, x in -2.0f64..2.0) {
        let gp = GpState::new(RbfPrior::new(1.0, 1.0, 0.1, 1).unwrap());
        let targets = vec![(vec![x], y)];
        let a = multistep_logloss(&gp, &targets).unwrap();
        let b = marginal_product_logloss(&gp, &targets).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn target_rows_see_context_and_self(n_ctx in 0usize..8, n_tgt in 1usize..6, causal in any::<bool>()) {
        let kind = if causal { MaskKind::Causal } else { MaskKind::CPermInvariant };
        let m = build_mask(MaskScheme::train(kind), n_ctx, n_tgt).unwrap();
        prop_assert_eq!(m.len(), n_ctx + n_tgt);
        for i in 0..m.len() {
            for j in 0..m.len() {
                let expected = if i >= n_ctx {
                    j < n_ctx || i == j
                } else if causal {
                    j <= i
                } else {
                    j < n_ctx
                };
                prop_assert_eq!(m.allows(i, j), expected, "row {} col {}", i, j);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cperm_transformer_ignores_context_order(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..6),
        probe in -2.0f64..2.0,
        wseed in 0u64..1000,
        pseed in any::<u64>(),
    ) {
        let cfg = TransformerConfig { d_model: 16, d_ff: 32, n_heads: 2, n_layers: 2, embed_hidden: vec![16], ..Default::default() };
        let w = Arc::new(TransformerWeights::init(cfg, &mut RngStream::new(wseed)).unwrap());
        let m = TransformerModel::new(w, MaskKind::CPermInvariant);
        let run = |pts: &[(f64, f64)]| {
            let xs: Vec<[f64; 1]> = pts.iter().map(|p| [p.0]).collect();
            m.condition_all(xs.iter().map(|x| &x[..]).zip(pts.iter().map(|p| p.1)))
                .unwrap()
                .predictive(&[probe])
                .unwrap()
        };
        let (a, b) = (run(&pts), run(&permuted(&pts, pseed)));
        prop_assert!((a.mean - b.mean).abs() < 1e-9 && (a.std - b.std).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        heads in 1usize..3,
        per_head in 1usize..5,
        layers in 0usize..3,
        x_dim in 1usize..3,
        seed in any::<u64>(),
    ) {
        let d = heads * per_head;
        let cfg = TransformerConfig { x_dim, d_model: d, d_ff: 2 * d, n_heads: heads, n_layers: layers, embed_hidden: vec![d], ..Default::default() };
        let w = TransformerWeights::init(cfg, &mut RngStream::new(seed)).unwrap();
        let mut buf = Vec::new();
        checkpoint::write_checkpoint(&w, &mut buf).unwrap();
        let back = checkpoint::read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(back.config(), w.config());
        for (a, b) in back.params().iter().zip(w.params()) {
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
