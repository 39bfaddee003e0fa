//! With β₁ = β₂ and ε = 0, each Adam step is the Signum step scaled by
//! `|m̂| / √v̂`. This prints the residual of that identity and a few of the
//! per-coordinate scale factors.

use optbench::analysis::{check_lemma1, Lemma1Config};
use optbench::ndcore::Rng;

fn main() -> optbench::Result<()> {
    let mut rng = Rng::new(3);
    // Coordinates with a drift and different noise levels.
    let grads: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            (0..4)
                .map(|i| 0.5 * i as f64 + (1.0 + i as f64) * rng.normal())
                .collect()
        })
        .collect();
    for beta in [0.8, 0.9, 0.99] {
        let r = check_lemma1(&grads, Lemma1Config::tied(beta))?;
        println!(
            "beta {beta}: {} comparisons, max residual {:.2e}, sign agreement {}",
            r.compared, r.max_residual, r.sign_agreement
        );
    }
    let r = check_lemma1(&grads, Lemma1Config::tied(0.9))?;
    println!("\nstep 200, beta 0.9:");
    for s in r.samples.iter().filter(|s| s.step == 200) {
        println!(
            "  coord {}: adam {:+.4}  signum {:+.4}  ratio {:.4}",
            s.param,
            s.delta_adam,
            s.delta_signum,
            s.delta_adam / s.delta_signum
        );
    }
    Ok(())
}
