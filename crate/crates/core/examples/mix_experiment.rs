//! Train adapters on happy/sad mixes and check that answer probabilities
//! follow the mixing fraction.
//!
//! cargo run --release --example mix_experiment -- [ci|desk|full] [out_dir]

use std::time::Instant;

use temporal_adapters::experiments::{run_mix_experiment, MixExperimentConfig, RunOptions};

fn main() -> temporal_adapters::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "ci".into());
    let config = MixExperimentConfig::preset(&preset)
        .ok_or_else(|| temporal_adapters::Error::Config(format!("unknown preset {preset:?}")))?;
    let options = RunOptions {
        out_dir: args.next().map(Into::into),
        ..RunOptions::default()
    };

    let started = Instant::now();
    let (summary, outcome) = run_mix_experiment(&config, &options)?;
    let pre = &outcome.pretrain_report;
    println!(
        "base pretraining loss {:.3} -> {:.3}",
        pre.head_mean(20),
        pre.tail_mean(20)
    );
    println!("{} adapters trained in {:.1}s", outcome.adapters_trained, started.elapsed().as_secs_f64());
    println!("fraction  option  mean        sd");
    for s in &summary.splits {
        println!("{:>8.1}  {:<6}  {:.4e}  {:.2e}", s.fraction, s.option, s.mean, s.sd);
    }
    for c in &summary.correlations {
        println!("r(fraction, {}) = {:+.3}  p = {:.5}", c.option, c.r, c.p);
    }
    Ok(())
}
