//! Train briefly, save the parameters, reload them and confirm the round trip.

use optbench::harness::{run_with_store, RunConfig};
use optbench::model::{forward_loss, ModelConfig, ParamStore, SyntheticData};
use optbench::ndcore::Rng;
use optbench::optim::OptimizerKind;

fn main() -> optbench::Result<()> {
    let mut cfg = RunConfig::with_kind(OptimizerKind::Adamw, 3.16e-3);
    cfg.model = ModelConfig::desk();
    cfg.data.vocab = cfg.model.vocab;
    cfg.steps = 200;
    cfg.batch = 8;
    let (log, store) = run_with_store(&cfg)?;
    println!(
        "trained {} steps, val loss {:.4}",
        cfg.steps,
        log.final_val_loss().unwrap_or(f64::NAN)
    );

    let dir = std::env::temp_dir().join("optbench-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|source| optbench::Error::Io {
        path: dir.clone(),
        source,
    })?;
    let path = dir.join("desk.ckpt");
    store.save(&path)?;
    let back = ParamStore::<f32>::load(&path)?;
    println!(
        "{} -> {} bytes, {} blocks, identical: {}",
        path.display(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        back.len(),
        back == store
    );

    let batch = SyntheticData::new(cfg.data.clone())?.sample_batch(&mut Rng::new(99), 4, cfg.model.seq_len);
    let a = forward_loss(&store, &batch, &cfg.model)?.loss_value();
    let b = forward_loss(&back, &batch, &cfg.model)?.loss_value();
    println!("loss on a fresh batch: {a:.6} vs {b:.6}");
    Ok(())
}
