//! Adalayer* on the Zipf stream, with effective learning rates `lr/√v`
//! logged per block group. Unembedding rows are their own groups, so the
//! per-logit spread follows the token frequencies.

use optbench::analysis::efflr_quantiles;
use optbench::harness::{run, RunConfig};
use optbench::model::{BlockRole, ModelConfig};
use optbench::optim::{OptimizerKind, SecondMomentNorm};

fn main() -> optbench::Result<()> {
    for norm in [SecondMomentNorm::Alg1, SecondMomentNorm::Mean] {
        let mut cfg = RunConfig::with_kind(OptimizerKind::AdalayerStar, 1e-2);
        cfg.optimizer.second_moment_norm = norm;
        cfg.model = ModelConfig::desk();
        cfg.data.vocab = cfg.model.vocab;
        cfg.steps = 2000;
        cfg.batch = 8;
        cfg.efflr_every = 500;
        let log = run(&cfg)?;
        println!("{norm:?}: val loss {:.4}", log.final_val_loss().unwrap_or(f64::NAN));
        let groups: [(&str, &[BlockRole]); 4] = [
            ("logits", &[BlockRole::Unembedding]),
            ("layernorm", &[BlockRole::LayernormGain]),
            ("qk norm", &[BlockRole::QkNormGain]),
            ("matrices", &BlockRole::HIDDEN_MATRICES),
        ];
        for (name, roles) in groups {
            for snap in efflr_quantiles(&log, roles)? {
                let q = snap.quantiles;
                println!(
                    "  {name:<10} step {:>4} n={:<3} p1 {:.2e} p50 {:.2e} p99 {:.2e} p99/p1 {:.2}",
                    snap.step,
                    snap.count,
                    q.p1,
                    q.p50,
                    q.p99,
                    q.spread()
                );
            }
        }
    }
    Ok(())
}
