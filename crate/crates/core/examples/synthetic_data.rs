//! The Zipf/Markov token stream: unigram skew and how often the copy rule fires.

use optbench::model::{SyntheticData, SyntheticDataConfig};
use optbench::ndcore::Rng;

fn main() -> optbench::Result<()> {
    let cfg = SyntheticDataConfig {
        vocab: 64,
        ..Default::default()
    };
    let data = SyntheticData::new(cfg.clone())?;
    let batch = data.sample_batch(&mut Rng::new(0), 2000, 17);
    println!("first row: {:?}", batch.row(0));

    let mut counts = vec![0usize; cfg.vocab];
    let mut copies = 0;
    for r in 0..batch.rows {
        let row = batch.row(r);
        row.iter().for_each(|&t| counts[t] += 1);
        copies += row.windows(2).filter(|w| w[1] == data.permutation()[w[0]]).count();
    }
    let total = batch.tokens.len() as f64;
    let mut ranked: Vec<(usize, usize)> = counts.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    println!("\nrank token  freq");
    for (rank, (tok, c)) in ranked.iter().take(8).enumerate() {
        println!("{rank:>4} {tok:>5}  {:.4}", *c as f64 / total);
    }
    let rarest = ranked.last().unwrap();
    println!("rarest token {} at {:.5}", rarest.0, rarest.1 as f64 / total);
    // A fresh draw can land on the permutation image too, so this sits a bit
    // above copy_prob.
    let transitions = (batch.rows * (batch.cols - 1)) as f64;
    println!(
        "successor = π(previous) in {:.3} of transitions (copy_prob {})",
        copies as f64 / transitions,
        cfg.copy_prob
    );
    Ok(())
}
