use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use optbench::analysis::{align_and_plot, stability_width, SweepCurve, DEFAULT_STABILITY_TOL};
use optbench::harness::{defaults_for_id, read_summary, run, sweep, RunConfig, SweepAxis, SweepSpec};
use optbench::Error;

#[derive(Parser)]
#[command(name = "optbench", version, about = "Optimizer sweeps on a nano transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run config; the run log goes to --out or stdout as JSON lines.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a sweep spec, writing summary.csv and logs/ under --out.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the spec's axis.
        #[arg(long)]
        axis: Option<SweepAxis>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot and tabulate a finished sweep directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// SVG path; the aligned CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Keep raw axis values instead of aligning optima at 1.
        #[arg(long)]
        no_shift: bool,
        #[arg(long, default_value_t = DEFAULT_STABILITY_TOL)]
        tol: f64,
    },
    /// Print the starting hyperparameters for an optimizer as JSON.
    Defaults {
        optimizer: String,
        #[arg(long, default_value = "150m")]
        scale: String,
    },
}

enum Outcome {
    Ok,
    AllDiverged,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::AllDiverged) => {
            eprintln!("every run diverged");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) | Error::Io { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> optbench::Result<Outcome> {
    match cmd {
        Cmd::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let log = run(&cfg)?;
            match out {
                Some(path) => log.save(&path)?,
                None => print!("{}", log.to_jsonl()),
            }
            let status = log.status().expect("finished run has a status");
            match log.final_val_loss() {
                Some(l) => eprintln!("{}: final val loss {l:.4}", status.as_str()),
                None => eprintln!("{} at step {}", status.as_str(), status.divergence_step().unwrap_or(0)),
            }
            Ok(if status.is_completed() {
                Outcome::Ok
            } else {
                Outcome::AllDiverged
            })
        }
        Cmd::Sweep { config, axis, out } => {
            let mut spec = SweepSpec::load(&config)?;
            if let Some(a) = axis {
                spec.axis = a;
            }
            let n = spec.plan()?.len();
            eprintln!("running {n} runs over {}", spec.axis);
            let res = sweep(&spec)?;
            res.write_dir(&out)?;
            for r in res.summary() {
                let loss = r.final_val_loss.map_or("-".into(), |l| format!("{l:.4}"));
                eprintln!(
                    "{:>16} {}={:<10} {:>8} {}",
                    r.optimizer, r.axis, r.value, loss, r.status
                );
            }
            Ok(if res.all_diverged() {
                Outcome::AllDiverged
            } else {
                Outcome::Ok
            })
        }
        Cmd::Report {
            input,
            out,
            no_shift,
            tol,
        } => {
            let rows = read_summary(input.join("summary.csv"))?;
            let curves = SweepCurve::from_summary(&rows)?;
            let plot = align_and_plot(&curves, !no_shift, &out)?;
            for w in &plot.warnings {
                eprintln!("warning: {w}");
            }
            for c in &curves {
                let best = c.best_loss().map_or("-".into(), |l| format!("{l:.4}"));
                let at = c.optimum_value().map_or("-".into(), |v| v.to_string());
                println!(
                    "{:>16} best {best} at {at}, stability width {} (tol {tol})",
                    c.optimizer,
                    stability_width(c, tol)
                );
            }
            eprintln!("wrote {} and {}", plot.svg.display(), plot.csv.display());
            Ok(Outcome::Ok)
        }
        Cmd::Defaults { optimizer, scale } => {
            let hp = defaults_for_id(&optimizer, &scale)?;
            println!("{}", serde_json::to_string_pretty(&hp)?);
            Ok(Outcome::Ok)
        }
    }
}
