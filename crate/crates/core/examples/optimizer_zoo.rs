//! Every optimizer on the desk transformer at its default learning rate.

use optbench::harness::{defaults_for, run, RunConfig, ScaleTag};
use optbench::model::ModelConfig;
use optbench::optim::{OptimizerKind, OptimizerSpec};

fn main() -> optbench::Result<()> {
    let steps = 400;
    println!("{:<14} {:>9} {:>10} {:>10}", "optimizer", "lr", "train", "val");
    for kind in OptimizerKind::ALL {
        let mut cfg = RunConfig::new(OptimizerSpec::new(kind, defaults_for(kind, ScaleTag::M150)));
        cfg.model = ModelConfig::desk();
        cfg.data.vocab = cfg.model.vocab;
        cfg.steps = steps;
        cfg.batch = 8;
        let log = run(&cfg)?;
        let train: Vec<f64> = log.steps().map(|s| s.loss).collect();
        let tail = &train[train.len().saturating_sub(20)..];
        let val = log
            .final_val_loss()
            .map_or("diverged".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<14} {:>9.2e} {:>10.4} {:>10}",
            kind.id(),
            cfg.optimizer.hp.lr,
            tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            val
        );
    }
    Ok(())
}
