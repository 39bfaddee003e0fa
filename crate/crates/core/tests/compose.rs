use optbench::compose::{route, set_trainable, warmstart_freeze, FreezePolicy, LrSource, Router, RoutingRule};
use optbench::harness::{run, RunConfig};
use optbench::model::{
    build_transformer, forward_loss, BlockRole, ModelConfig, ParamStore, SyntheticData, SyntheticDataConfig,
};
use optbench::ndcore::{Rng, Tensor};
use optbench::optim::{HyperParams, Optimizer, OptimizerKind, OptimizerSpec};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        width: 16,
        depth: 1,
        heads: 2,
        head_dim: 8,
        vocab: 16,
        seq_len: 6,
        ..ModelConfig::nano()
    }
}

struct Bench {
    cfg: ModelConfig,
    data: SyntheticData,
    rng: Rng,
}

impl Bench {
    fn new() -> Self {
        let cfg = tiny();
        let data = SyntheticData::new(SyntheticDataConfig {
            vocab: cfg.vocab,
            ..Default::default()
        })
        .unwrap();
        Self {
            cfg,
            data,
            rng: Rng::new(3),
        }
    }

    fn store(&self) -> ParamStore<f64> {
        build_transformer(&self.cfg, &mut Rng::new(1)).unwrap()
    }

    fn grads(&mut self, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
        let batch = self.data.sample_batch(&mut self.rng, 2, self.cfg.seq_len);
        forward_loss(store, &batch, &self.cfg).unwrap().param_grads().unwrap()
    }
}

fn spec(kind: OptimizerKind, lr: f64) -> OptimizerSpec {
    OptimizerSpec::new(kind, HyperParams::for_kind(kind, lr))
}

fn bits(store: &ParamStore<f64>) -> Vec<u64> {
    store
        .blocks()
        .iter()
        .flat_map(|b| b.tensor().data().iter().map(|x| x.to_bits()))
        .collect()
}

const NORM_AND_LAST: [BlockRole; 3] = [BlockRole::Unembedding, BlockRole::LayernormGain, BlockRole::QkNormGain];

fn rest_of(roles: &[BlockRole]) -> Vec<BlockRole> {
    BlockRole::ALL.into_iter().filter(|r| !roles.contains(r)).collect()
}

#[test]
fn identity_routing_matches_unrouted_adamw() {
    let (mut a, mut b) = (Bench::new(), Bench::new());
    let mut routed = a.store();
    let mut plain = routed.clone();
    let mut router = Router::new(&routed, &[RoutingRule::everything(spec(OptimizerKind::Adamw, 1e-2))]).unwrap();
    let all: Vec<usize> = (0..plain.len()).collect();
    let mut opt = Optimizer::new(spec(OptimizerKind::Adamw, 1e-2), &plain, &all).unwrap();
    for _ in 0..15 {
        let g = a.grads(&routed);
        router.step(&mut routed, &g, &[1e-2]).unwrap();
        let g = b.grads(&plain);
        opt.step(&mut plain, &g, 1e-2).unwrap();
    }
    assert_eq!(bits(&routed), bits(&plain));
}

#[test]
fn hybrid_rule_sets_partition_the_model() {
    let store = Bench::new().store();
    // last layer and norms adaptive at a fixed lr, the rest SGD
    let fig6 = [
        RoutingRule::new(&rest_of(&NORM_AND_LAST), spec(OptimizerKind::Sgd, 0.1), LrSource::Swept),
        RoutingRule::new(
            &NORM_AND_LAST,
            spec(OptimizerKind::AdalayerStar, 3.16e-3),
            LrSource::Fixed(3.16e-3),
        ),
    ];
    // the mirror image: adaptive matrices, SGD on the last layer and norms
    let fig10 = [
        RoutingRule::new(
            &BlockRole::HIDDEN_MATRICES,
            spec(OptimizerKind::AdalayerStar, 1e-3),
            LrSource::Fixed(1e-3),
        ),
        RoutingRule::new(&NORM_AND_LAST, spec(OptimizerKind::Sgd, 0.1), LrSource::Swept),
    ];
    for rules in [&fig6[..], &fig10[..]] {
        let assigned = route(&store, rules).unwrap();
        let total: usize = assigned.iter().flatten().map(|&b| store.block(b).numel()).sum();
        assert_eq!(total, store.trainable_params());
        let router = Router::new(&store, rules).unwrap();
        for b in 0..store.len() {
            assert!(router.optimizer_for(b).is_some());
        }
    }
    let ln = store.index_of("l0.ln_attn").unwrap();
    let router = Router::new(&store, &fig6).unwrap();
    assert_eq!(router.optimizer_for(ln).unwrap().kind(), OptimizerKind::AdalayerStar);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn routing_conserves_parameters(assign in proptest::collection::vec(0usize..3, 8), off in proptest::collection::vec(any::<bool>(), 8)) {
        let mut store = Bench::new().store();
        let frozen: Vec<BlockRole> = BlockRole::ALL.iter().zip(&off).filter(|(_, &o)| o).map(|(r, _)| *r).collect();
        set_trainable(&mut store, &frozen, false);
        let rules: Vec<RoutingRule> = (0..3)
            .map(|k| {
                let sel: Vec<BlockRole> = BlockRole::ALL.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(r, _)| *r).collect();
                RoutingRule::new(&sel, spec(OptimizerKind::Adamw, 1e-3), LrSource::Swept)
            })
            .collect();
        let assigned = route(&store, &rules).unwrap();
        let total: usize = assigned.iter().flatten().map(|&b| store.block(b).numel()).sum();
        prop_assert_eq!(total, store.trainable_params());
        let mut seen: Vec<usize> = assigned.into_iter().flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, store.trainable_indices());
    }
}

#[test]
fn instances_do_not_share_state() {
    let mut bench = Bench::new();
    let mut both = bench.store();
    let rules = [
        RoutingRule::new(
            &rest_of(&[BlockRole::Unembedding]),
            spec(OptimizerKind::Adamw, 1e-2),
            LrSource::Swept,
        ),
        RoutingRule::new(
            &[BlockRole::Unembedding],
            spec(OptimizerKind::Lion, 1e-3),
            LrSource::Swept,
        ),
    ];
    let mut router = Router::new(&both, &rules).unwrap();
    let mut alone = both.clone();
    set_trainable(&mut alone, &[BlockRole::Unembedding], false);
    let mut solo = Router::new(&alone, &rules[..1]).unwrap();
    // Both see the gradients of the two-rule model so only state could differ.
    for _ in 0..10 {
        let g = bench.grads(&both);
        router.step(&mut both, &g, &[1e-2, 1e-3]).unwrap();
        solo.step(&mut alone, &g, &[1e-2]).unwrap();
    }
    let u = both.index_of("unembed").unwrap();
    for b in (0..both.len()).filter(|&b| b != u) {
        assert_eq!(both.block(b).tensor().data(), alone.block(b).tensor().data());
    }
}

#[test]
fn warm_start_primes_v_without_moving_weights() {
    let mut bench = Bench::new();
    let mut store = bench.store();
    let init = bits(&store);
    let mut router = Router::new(
        &store,
        &[RoutingRule::everything(spec(OptimizerKind::AdalayerStar, 1e-2))],
    )
    .unwrap();
    let policy = FreezePolicy {
        warmstart_batches: 8,
        ..Default::default()
    };
    warmstart_freeze(&store, &mut router, &policy, |s| Ok(bench.grads(s))).unwrap();
    assert_eq!(bits(&store), init);

    let opt = &router.optimizers()[0];
    let snapshot: Vec<Vec<f64>> = (0..store.len()).map(|b| opt.second_moment(b).unwrap()).collect();
    for (b, v) in snapshot.iter().enumerate() {
        assert!(v.iter().all(|&x| x > 0.0), "block {b}");
        assert!(opt.first_moment(b).unwrap().iter().all(|&m| m == 0.0));
    }

    for _ in 0..10 {
        let g = bench.grads(&store);
        router.step(&mut store, &g, &[1e-2]).unwrap();
    }
    let opt = &router.optimizers()[0];
    for b in 0..store.len() {
        let v = opt.second_moment(b).unwrap();
        if policy.frozen_roles.contains(&store.block(b).role) {
            let same = v.iter().zip(&snapshot[b]).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "frozen v moved in {}", store.block(b).name);
        } else {
            assert_ne!(v, snapshot[b], "exempt v stuck in {}", store.block(b).name);
        }
    }
    assert_ne!(bits(&store), init);
}

#[test]
fn warm_start_with_nothing_frozen_keeps_everything_live() {
    let mut bench = Bench::new();
    let store = bench.store();
    let mut router = Router::new(&store, &[RoutingRule::everything(spec(OptimizerKind::Adamw, 1e-2))]).unwrap();
    let policy = FreezePolicy {
        warmstart_batches: 4,
        frozen_roles: vec![],
        exempt_roles: BlockRole::ALL.to_vec(),
    };
    warmstart_freeze(&store, &mut router, &policy, |s| Ok(bench.grads(s))).unwrap();
    assert!(router.optimizers()[0].state().frozen_v.iter().all(|&f| !f));
    // An AdamW coordinate can see exactly zero gradient (unused embedding
    // rows), so positivity is checked per block.
    for b in 0..store.len() {
        assert!(router.optimizers()[0]
            .second_moment(b)
            .unwrap()
            .iter()
            .any(|&x| x > 0.0));
    }
}

#[test]
fn warm_start_rejections() {
    let mut bench = Bench::new();
    let store = bench.store();
    let zero = FreezePolicy {
        warmstart_batches: 0,
        ..Default::default()
    };
    let mut router = Router::new(
        &store,
        &[RoutingRule::everything(spec(OptimizerKind::AdalayerStar, 1e-2))],
    )
    .unwrap();
    assert!(warmstart_freeze(&store, &mut router, &zero, |s| Ok(bench.grads(s))).is_err());

    let mut sgd = Router::new(&store, &[RoutingRule::everything(spec(OptimizerKind::Sgd, 1e-2))]).unwrap();
    let err = warmstart_freeze(&store, &mut sgd, &FreezePolicy::default(), |s| Ok(bench.grads(s)))
        .unwrap_err()
        .to_string();
    assert!(err.contains("sgd"), "{err}");

    let overlap = FreezePolicy {
        exempt_roles: vec![BlockRole::MlpIn],
        ..Default::default()
    };
    assert!(overlap.validate().is_err());
}

fn desk(kind: OptimizerKind, lr: f64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::with_kind(kind, lr);
    cfg.model = ModelConfig::desk();
    cfg.data.vocab = cfg.model.vocab;
    cfg.batch = 8;
    cfg.steps = steps;
    cfg
}

#[test]
fn untrainable_gains_stay_at_init() {
    let mut cfg = desk(OptimizerKind::Adamw, 1e-2, 30);
    cfg.untrainable_roles = vec![BlockRole::LayernormGain];
    let (log, store) = optbench::harness::run_with_store(&cfg).unwrap();
    assert!(log.status().unwrap().is_completed());
    for b in store.blocks() {
        let all_one = b.tensor().data().iter().all(|&x| x == 1.0);
        assert_eq!(all_one, b.role == BlockRole::LayernormGain, "{}", b.name);
    }
}

#[test]
fn nothing_trainable_means_constant_eval_loss() {
    let mut cfg = desk(OptimizerKind::Adamw, 1e-2, 20);
    cfg.untrainable_roles = BlockRole::ALL.to_vec();
    cfg.eval_every = 5;
    let log = run(&cfg).unwrap();
    let losses: Vec<u64> = log.evals().map(|e| e.val_loss.to_bits()).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|&l| l == losses[0]));
}

#[test]
fn frozen_norms_survive_large_sgd_rates_with_adaptive_last_layer() {
    let mut sgd = HyperParams::for_kind(OptimizerKind::Sgd, 0.1);
    sgd.beta1 = 0.9;
    for lr in [0.1, 0.316, 1.0] {
        let mut cfg = desk(OptimizerKind::Sgd, lr, 2000);
        cfg.untrainable_roles = BlockRole::NORM_GAINS.to_vec();
        cfg.routing = Some(vec![
            RoutingRule::new(
                &rest_of(&NORM_AND_LAST),
                OptimizerSpec::new(OptimizerKind::Sgd, HyperParams { lr, ..sgd }),
                LrSource::Swept,
            ),
            RoutingRule::new(
                &[BlockRole::Unembedding],
                spec(OptimizerKind::AdalayerStar, 3.16e-3),
                LrSource::Fixed(3.16e-3),
            ),
        ]);
        let log = run(&cfg).unwrap();
        assert!(log.status().unwrap().is_completed(), "diverged at lr {lr}");
    }
}
