//! Warm-start Adalayer* second moments on 1000 batches without moving the
//! weights, then freeze them for the hidden matrices and train.

use optbench::compose::FreezePolicy;
use optbench::harness::{run, RunConfig, Trainer};
use optbench::model::{BlockRole, ModelConfig};
use optbench::optim::OptimizerKind;

fn frozen_v(tr: &Trainer) -> Vec<(String, f32)> {
    let store = tr.store();
    (0..store.len())
        .filter(|&i| BlockRole::HIDDEN_MATRICES.contains(&store.block(i).role))
        .map(|i| {
            let v = tr.router().optimizer_for(i).unwrap().second_moment(i).unwrap();
            (store.block(i).name.clone(), v[0])
        })
        .collect()
}

fn main() -> optbench::Result<()> {
    let mut cfg = RunConfig::with_kind(OptimizerKind::AdalayerStar, 1e-2);
    cfg.model = ModelConfig::desk();
    cfg.data.vocab = cfg.model.vocab;
    cfg.steps = 2000;
    cfg.batch = 8;
    let plain = run(&cfg)?;

    cfg.freeze = Some(FreezePolicy::default());
    let mut tr = Trainer::new(&cfg)?;
    let before = frozen_v(&tr);
    println!("second moments after the warm start:");
    for (name, v) in &before {
        println!("  {name:<12} {v:.4e}");
    }
    while !tr.is_done() {
        tr.step()?;
    }
    println!("unchanged after {} steps: {}", tr.step_count(), frozen_v(&tr) == before);
    println!(
        "val loss: frozen {:.4}, unfrozen {:.4}",
        tr.log().final_val_loss().unwrap_or(f64::NAN),
        plain.final_val_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}
