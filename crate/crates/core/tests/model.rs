use optbench::compose::route;
use optbench::compose::RoutingRule;
use optbench::model::{
    build_transformer, forward_loss, sample_batch, BlockRole, ModelConfig, ParamStore, Stage, SyntheticData,
    SyntheticDataConfig,
};
use optbench::ndcore::Rng;
use optbench::optim::{HyperParams, OptimizerKind, OptimizerSpec};
use proptest::prelude::*;

fn model_strategy() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 0usize..3, 1usize..4, 2usize..20, 2usize..9, any::<bool>()).prop_map(
        |(heads, depth, half_hd, vocab, seq_len, qk_norm)| ModelConfig {
            width: heads * 2 * half_hd,
            depth,
            heads,
            head_dim: 2 * half_hd,
            vocab,
            seq_len,
            qk_norm,
            ..ModelConfig::nano()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn roles_partition_every_model(cfg in model_strategy(), seed in 0u64..100) {
        let store: ParamStore<f32> = build_transformer(&cfg, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(store.total_params(), cfg.param_count());
        let per_role: usize = BlockRole::ALL
            .iter()
            .map(|r| store.blocks().iter().filter(|b| b.role == *r).map(|b| b.numel()).sum::<usize>())
            .sum();
        prop_assert_eq!(per_role, store.total_params());
        for b in store.blocks() {
            prop_assert_eq!(b.role.is_matrix(), b.shape().len() == 2);
        }
        let adam = OptimizerSpec::new(OptimizerKind::Adamw, HyperParams::default());
        let groups = route(&store, &[RoutingRule::everything(adam)]).unwrap();
        prop_assert_eq!(groups[0].len(), store.len());
    }

    #[test]
    fn checkpoints_round_trip_bitwise(cfg in model_strategy(), seed in 0u64..100, frozen in any::<bool>()) {
        let mut store: ParamStore<f64> = build_transformer(&cfg, &mut Rng::new(seed)).unwrap();
        if frozen {
            store.set_trainable(&BlockRole::NORM_GAINS, false);
        }
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::<f64>::read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert!(ParamStore::<f32>::read_checkpoint(buf.as_slice()).is_err());
        buf.push(0);
        prop_assert!(ParamStore::<f64>::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn batches_are_seed_determined_and_in_range(
        vocab in 2usize..300,
        s in 0.0f64..2.0,
        copy in 0.0f64..=1.0,
        seed in any::<u64>(),
        rows in 1usize..5,
        cols in 1usize..30,
    ) {
        let cfg = SyntheticDataConfig { vocab, zipf_exponent: s, copy_prob: copy, permutation_seed: seed ^ 7 };
        let a = sample_batch(&cfg, &mut Rng::new(seed), rows, cols).unwrap();
        let b = sample_batch(&cfg, &mut Rng::new(seed), rows, cols).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.tokens.len(), rows * cols);
        prop_assert!(a.tokens.iter().all(|&t| t < vocab));
        let mut perm = SyntheticData::new(cfg).unwrap().permutation().to_vec();
        perm.sort_unstable();
        prop_assert_eq!(perm, (0..vocab).collect::<Vec<_>>());
    }

    #[test]
    fn losses_are_finite_and_zloss_nonnegative(cfg in model_strategy(), seed in 0u64..50) {
        let store: ParamStore<f32> = build_transformer(&cfg, &mut Rng::new(seed)).unwrap();
        let data = SyntheticDataConfig { vocab: cfg.vocab, ..Default::default() };
        let batch = sample_batch(&data, &mut Rng::new(seed + 1), 2, cfg.seq_len).unwrap();
        let pass = forward_loss(&store, &batch, &cfg).unwrap();
        prop_assert!(pass.loss_value().is_finite());
        prop_assert!(pass.zloss_value() >= 0.0);
        // Small init: predictions are close to uniform.
        prop_assert!((pass.ce_value() as f64 - (cfg.vocab as f64).ln()).abs() < 0.5);
        let grads = pass.param_grads().unwrap();
        prop_assert_eq!(grads.len(), store.len());
        for (g, b) in grads.iter().zip(store.blocks()) {
            prop_assert_eq!(g.shape(), b.shape());
            prop_assert!(g.all_finite());
        }
    }
}

#[test]
fn later_tokens_do_not_leak_backwards() {
    let cfg = ModelConfig {
        seq_len: 6,
        ..ModelConfig::desk()
    };
    let store: ParamStore<f64> = build_transformer(&cfg, &mut Rng::new(3)).unwrap();
    let data = SyntheticDataConfig {
        vocab: cfg.vocab,
        ..Default::default()
    };
    let mut batch = sample_batch(&data, &mut Rng::new(4), 1, 6).unwrap();
    let head_input = |b: &optbench::model::TokenBatch| {
        let pass = forward_loss(&store, b, &cfg).unwrap();
        pass.stage_input(Stage::Head).unwrap().data().to_vec()
    };
    let before = head_input(&batch);
    // Inputs are positions 0..5; token 5 is only a target.
    batch.tokens[4] = (batch.tokens[4] + 1) % cfg.vocab;
    let after = head_input(&batch);
    let w = cfg.width;
    assert_eq!(before.len(), 5 * w);
    assert_eq!(before[..4 * w], after[..4 * w]);
    assert_ne!(before[4 * w..], after[4 * w..]);
}
