//! A learning-rate sweep over two optimizers: summary table, aligned curves
//! and stability widths. Output goes to `target/lr_sweep` unless a directory
//! is given.

use optbench::analysis::{align_and_plot, stability_width, SweepCurve, DEFAULT_STABILITY_TOL};
use optbench::harness::{sqrt10_grid, sweep, ArmSpec, RunConfig, SweepAxis, SweepSpec};
use optbench::model::ModelConfig;
use optbench::optim::OptimizerKind;

fn main() -> optbench::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/lr_sweep".into());
    let mut base = RunConfig::with_kind(OptimizerKind::Adamw, 1e-3);
    base.model = ModelConfig::desk();
    base.data.vocab = base.model.vocab;
    base.steps = 600;
    base.batch = 8;
    let mut spec = SweepSpec::new(
        base,
        SweepAxis::Lr,
        sqrt10_grid(1e-4, 7),
        vec![ArmSpec::Id("adamw".into()), ArmSpec::Id("sgd".into())],
    );
    spec.grid_overrides.insert("sgd".into(), sqrt10_grid(1e-3, 9));
    let res = sweep(&spec)?;
    res.write_dir(&out)?;
    for row in res.summary() {
        println!(
            "{:<6} lr {:>8.2e}  {}",
            row.optimizer,
            row.value,
            row.final_val_loss.map_or(
                format!("{} at step {}", row.status, row.divergence_step.unwrap_or(0)),
                |v| format!("{v:.4}")
            )
        );
    }

    let curves = SweepCurve::from_result(&res)?;
    for c in &curves {
        println!(
            "{}: best {:.4} at lr {:.2e}, stability width {}",
            c.optimizer,
            c.best_loss().unwrap_or(f64::NAN),
            c.optimum_value().unwrap_or(f64::NAN),
            stability_width(c, DEFAULT_STABILITY_TOL)
        );
    }
    let plot = align_and_plot(&curves, true, std::path::Path::new(&out).join("aligned.svg"))?;
    println!("wrote {} and {}", plot.svg.display(), plot.csv.display());
    Ok(())
}
