use proptest::prelude::*;
use revprop_core::engine::replay_peak;
use revprop_core::layers::{AttentionParams, MlpParams};
use revprop_core::rev::{rev_forward, rev_inverse, Coupled, RevBlock};
use revprop_core::tensor::{layer_norm, row_softmax, LN_EPS};
use revprop_core::{
    build_model, sgd_update, step, Batch, EngineKind, MemoryLedger, ModelConfig, Rng, Tensor,
};

fn block(d: usize, heads: usize, seed: u64, std: f64) -> RevBlock<AttentionParams<f64>, MlpParams<f64>> {
    let mut rng = Rng::new(seed, 0);
    RevBlock::new(
        AttentionParams::init(d, heads, None, std, &mut rng).unwrap(),
        MlpParams::init(d, 2, std, &mut rng).unwrap(),
        0,
    )
}

fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 1);
    Tensor::from_fn(dims, |_| rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_undoes_forward(half_d in 1usize..=4, n in 1usize..=8, b in 1usize..=2, seed: u64, std in 0.01f64..0.5) {
        let d = 2 * half_d;
        let blk = block(d, 2, seed, std);
        let inp = Coupled::new(random(&[b, n, d], seed ^ 1), random(&[b, n, d], seed ^ 2)).unwrap();
        let back = rev_inverse(&blk, &rev_forward(&blk, &inp).unwrap()).unwrap();
        prop_assert!(back.rel_err(&inp).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed: u64, scale in 0.1f64..50.0) {
        let x = random(&[rows, cols], seed).scale(scale);
        let y = row_softmax(&x);
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, d in 2usize..12, seed: u64, shift in -100.0f64..100.0) {
        let x = random(&[rows, d], seed).map(|v| v + shift);
        let (y, _) = layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), LN_EPS).unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-9);
        }
    }

    #[test]
    fn ledger_peak_is_prefix_max(sizes in proptest::collection::vec(1u64..1000, 1..40), order_seed: u64) {
        // Allocate everything, then free in a shuffled order interleaved with allocs.
        let mut ledger = MemoryLedger::new();
        let mut live: Vec<u64> = Vec::new();
        let mut rng = Rng::new(order_seed, 0);
        for &s in &sizes {
            ledger.alloc("a", s).unwrap();
            live.push(s);
            if rng.below(3) == 0 {
                let i = rng.below(live.len());
                ledger.free("f", live.swap_remove(i)).unwrap();
            }
        }
        for s in live {
            ledger.free("f", s).unwrap();
        }
        prop_assert_eq!(ledger.live_bytes(), 0);
        let deltas: Vec<i64> = ledger.events().iter().map(|e| e.delta).collect();
        let mut prefix = 0i64;
        let mut best = 0i64;
        for d in &deltas {
            prefix += d;
            best = best.max(prefix);
        }
        prop_assert_eq!(ledger.peak_bytes(), best as u64);
        prop_assert_eq!(replay_peak(deltas, 5), 5 * best as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_matches_reprop_bit_for_bit(depth in 1usize..5, batch in 1usize..3, seed: u64, hierarchical: bool) {
        let cfg = if hierarchical {
            ModelConfig { seed, ..ModelConfig::hierarchical(&[depth, 1], 4, 2, 4) }
        } else {
            ModelConfig { seed, ..ModelConfig::isotropic(depth, 4, 2, 4) }
        };
        let model = build_model::<f64>(&cfg).unwrap();
        let data = Batch::synthetic(&cfg, batch, &mut Rng::new(seed, 5));
        let mut ledger = MemoryLedger::new();
        let (gr, sr) = step(EngineKind::Reprop, &model, &data, &mut ledger, 1).unwrap();
        let (gp, sp) = step(EngineKind::Pareprop, &model, &data, &mut ledger, 2).unwrap();
        let (gv, _) = step(EngineKind::Vanilla, &model, &data, &mut ledger, 1).unwrap();
        prop_assert!(gp.bit_eq(&gr));
        prop_assert_eq!(sp.loss.to_bits(), sr.loss.to_bits());
        prop_assert!(gr.max_rel_err(&gv).unwrap() <= 1e-12);
        prop_assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op(seed: u64) {
        let cfg = ModelConfig { seed, ..ModelConfig::isotropic(2, 4, 2, 4) };
        let mut model = build_model::<f64>(&cfg).unwrap();
        let data = Batch::synthetic(&cfg, 2, &mut Rng::new(seed, 6));
        let (g, _) = step(EngineKind::Reprop, &model, &data, &mut MemoryLedger::new(), 1).unwrap();
        let before = model.clone();
        sgd_update(&mut model, &g, 0.0).unwrap();
        prop_assert_eq!(model, before);
    }
}
