//! SGD on the bulk of the network, Adalayer* on the last layer and the norm
//! gains, compared with Adalayer* everywhere.

use optbench::compose::{route, LrSource, RoutingRule};
use optbench::harness::{run, RunConfig};
use optbench::model::{build_transformer, BlockRole, ModelConfig};
use optbench::ndcore::Rng;
use optbench::optim::{HyperParams, OptimizerKind, OptimizerSpec};

fn main() -> optbench::Result<()> {
    let adaptive = [BlockRole::Unembedding, BlockRole::LayernormGain, BlockRole::QkNormGain];
    let rest: Vec<BlockRole> = BlockRole::ALL.into_iter().filter(|r| !adaptive.contains(r)).collect();
    let mut sgd = HyperParams::for_kind(OptimizerKind::Sgd, 0.1);
    sgd.beta1 = 0.9;
    let star = OptimizerSpec::new(
        OptimizerKind::AdalayerStar,
        HyperParams::for_kind(OptimizerKind::AdalayerStar, 3.16e-3),
    );
    let rules = vec![
        RoutingRule::new(&rest, OptimizerSpec::new(OptimizerKind::Sgd, sgd), LrSource::Swept),
        RoutingRule::new(&adaptive, star, LrSource::Fixed(3.16e-3)),
    ];

    let mut cfg = RunConfig::with_kind(OptimizerKind::AdalayerStar, 1e-2);
    cfg.model = ModelConfig::desk();
    cfg.data.vocab = cfg.model.vocab;
    cfg.steps = 2000;
    cfg.batch = 8;

    let store = build_transformer::<f32>(&cfg.model, &mut Rng::new(cfg.seed))?;
    for (rule, blocks) in rules.iter().zip(route(&store, &rules)?) {
        let names: Vec<&str> = blocks.iter().map(|&i| store.block(i).name.as_str()).collect();
        println!("{}: {}", rule.label(), names.join(" "));
    }

    let full = run(&cfg)?;
    println!(
        "\nAdalayer* everywhere, lr 1e-2: val {:.4}",
        full.final_val_loss().unwrap_or(f64::NAN)
    );
    for lr in [0.01, 0.1, 1.0] {
        let mut hybrid = cfg.clone();
        let mut r = rules.clone();
        r[0].optimizer.hp.lr = lr;
        hybrid.routing = Some(r);
        let log = run(&hybrid)?;
        match log.final_val_loss() {
            Some(v) => println!("hybrid, SGD lr {lr:<5}: val {v:.4}"),
            None => println!("hybrid, SGD lr {lr:<5}: {:?}", log.status()),
        }
    }
    Ok(())
}
