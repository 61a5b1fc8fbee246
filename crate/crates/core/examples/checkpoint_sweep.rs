//! Score the same adapters at several training checkpoints and temperatures
//! without retraining.

use temporal_adapters::experiments::{run_sweep, MixExperimentConfig, RunOptions, SweepConfig};

fn main() -> temporal_adapters::Result<()> {
    let mut config = MixExperimentConfig::ci();
    config.train.max_steps = 150;
    config.train.checkpoint_every = 50;
    let sweep = SweepConfig {
        checkpoints: vec![50, 100, 150],
        temperatures: vec![0.25, 1.0, 4.0],
        ..SweepConfig::single(&config)
    };
    let outcome = run_sweep(&sweep, &config, &RunOptions::default())?;
    println!(
        "{} cells from {} trained adapters",
        outcome.summaries.len(),
        outcome.adapters_trained
    );
    for s in &outcome.summaries {
        let r: Vec<String> = s.correlations.iter().map(|c| format!("{} {:+.2}", c.option, c.r)).collect();
        println!("{:<48} {}", s.cell, r.join("  "));
    }
    Ok(())
}
