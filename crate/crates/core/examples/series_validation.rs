//! Turn per-seed weekly scores into smoothed, normalized series with seed
//! bands, then correlate them with a reference survey using a permutation test.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporal_adapters::series::{band_svg, seed_aggregate, AffectSeries, PipelineOrder, SeriesPoint};
use temporal_adapters::stats::{format_validation_csv, validate, ReferenceSeries, ValidateConfig};

fn main() -> temporal_adapters::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dates: Vec<NaiveDate> = (0..35)
        .map(|w| NaiveDate::from_ymd_opt(2023, 3, 6).unwrap() + Duration::weeks(w))
        .collect();
    // A seasonal reference signal and three noisy "adapter seeds" following it.
    let truth: Vec<f64> = (0..35).map(|w| 0.5 + 0.3 * (w as f64 / 6.0).sin()).collect();

    let mut points = Vec::new();
    for seed in 0..3u64 {
        for (i, (&d, &t)) in dates.iter().zip(&truth).enumerate() {
            points.push(SeriesPoint {
                slice_id: i as u32,
                end_date: d,
                seed,
                value: 0.01 * (t + rng.gen_range(-0.15..0.15)),
            });
        }
    }
    let series = AffectSeries::new("mood_weekly", "happy", points)?;
    let band = seed_aggregate(&series, 3, PipelineOrder::SmoothThenNormalize)?;
    let widest = band.points.iter().map(|p| p.max - p.min).fold(0.0, f64::max);
    println!("{} weekly points, widest seed band {:.3}", band.points.len(), widest);

    // The reference is only available for every other week.
    let reference = ReferenceSeries::new(
        "survey",
        "happy",
        dates.iter().zip(&truth).step_by(2).map(|(&d, &t)| (d, 100.0 * t)).collect(),
    )?;
    let table = validate(
        &[series],
        &BTreeMap::from([("happy".to_string(), reference)]),
        &ValidateConfig::default(),
    )?;
    print!("{}", format_validation_csv(&table));

    let svg_path = std::env::temp_dir().join("happy_band.svg");
    std::fs::write(&svg_path, band_svg(&band)).map_err(|e| temporal_adapters::Error::Io {
        path: svg_path.clone(),
        source: e,
    })?;
    println!("chart written to {}", svg_path.display());
    Ok(())
}
