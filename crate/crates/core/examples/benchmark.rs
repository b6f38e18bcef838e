//! Runs the synthetic method comparison and prints the result table.
//!
//! ```text
//! cargo run --release -p refed-core --example benchmark -- [epochs] [repeats]
//! ```

use std::time::Instant;

use refed_core::experiment::{run_experiment, ExperimentConfig, RunOutcome};

fn main() -> refed_core::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("numeric argument"));
    let mut cfg = ExperimentConfig::benchmark();
    if let Some(epochs) = args.next() {
        cfg.train.epochs = epochs;
    }
    if let Some(repeats) = args.next() {
        cfg.n_repeats = repeats;
    }
    let (source, target) = cfg.datasets()?;
    println!("source {} samples, target {} samples", source.len(), target.len());
    let start = Instant::now();
    let mut last = Instant::now();
    let mut progress = |o: &RunOutcome| {
        println!(
            "{:<14} repeat {}: test weighted F1 {:6.2}, best epoch {:3} ({:.1} s)",
            o.method.name(),
            o.repeat,
            o.result.test.weighted_f1,
            o.result.best_epoch,
            last.elapsed().as_secs_f64()
        );
        last = Instant::now();
    };
    let report = run_experiment(&source, &target, &cfg, Some(&mut progress))?;
    print!("{}", report.render_table());
    println!("total {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
