//! Central-difference check of the transformer gradient on a small f64 model.
//!
//! Each parameter is nudged by ±h and the loss is recomputed from the stage
//! that reads it, reusing the recorded residual stream for everything upstream.

use optbench::model::{
    build_transformer, forward_loss_with, resume_loss, ForwardOptions, ModelConfig, Stage, SyntheticData,
    SyntheticDataConfig,
};
use optbench::ndcore::{Rng, Tensor};

fn main() -> optbench::Result<()> {
    let cfg = ModelConfig {
        width: 16,
        depth: 2,
        heads: 2,
        head_dim: 8,
        vocab: 32,
        seq_len: 8,
        ..ModelConfig::nano()
    };
    let data = SyntheticData::new(SyntheticDataConfig {
        vocab: cfg.vocab,
        ..Default::default()
    })?;
    let batch = data.sample_batch(&mut Rng::new(1), 2, cfg.seq_len);
    let mut store = build_transformer::<f64>(&cfg, &mut Rng::new(0))?;
    let opts = ForwardOptions::default();
    let pass = forward_loss_with(&store, &batch, &cfg, opts)?;
    let grads = pass.param_grads()?;
    println!("loss {:.6} over {} parameters", pass.loss_value(), store.total_params());

    let h = 1e-5;
    let dummy = Tensor::scalar(0.0);
    for bi in 0..store.len() {
        let stage = Stage::of_block(&store.block(bi).name)?;
        let x = pass.stage_input(stage).cloned().unwrap_or_else(|| dummy.clone());
        let mut worst = 0f64;
        for j in 0..store.block(bi).numel() {
            let orig = store.block(bi).tensor().data()[j];
            store.block_mut(bi).values_mut()[j] = orig + h;
            let up = resume_loss(&store, &batch, &cfg, opts, stage, &x)?;
            store.block_mut(bi).values_mut()[j] = orig - h;
            let down = resume_loss(&store, &batch, &cfg, opts, stage, &x)?;
            store.block_mut(bi).values_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grads[bi].data()[j];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-5));
        }
        println!(
            "{:<14} {:>6} params  max rel err {worst:.2e}",
            store.block(bi).name,
            store.block(bi).numel()
        );
    }
    Ok(())
}
