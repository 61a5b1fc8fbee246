//! Longitudinal affect series: trailing smoothing, min-max scaling and
//! per-slice bands across training seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survey::{csv_header_comment, ScoreRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub slice_id: u32,
    pub end_date: NaiveDate,
    pub seed: u64,
    pub value: f64,
}

/// All seeds' values for one instrument option over time.
#[derive(Clone, Debug, PartialEq)]
pub struct AffectSeries {
    pub instrument: String,
    pub option: String,
    points: Vec<SeriesPoint>,
}

impl AffectSeries {
    pub fn new(instrument: impl Into<String>, option: impl Into<String>, mut points: Vec<SeriesPoint>) -> Result<Self> {
        points.sort_by(|a, b| (a.end_date, a.slice_id, a.seed).cmp(&(b.end_date, b.slice_id, b.seed)));
        let mut seen = BTreeSet::new();
        for p in &points {
            if !seen.insert((p.slice_id, p.seed)) {
                return Err(Error::data(format!("duplicate point for slice {} seed {}", p.slice_id, p.seed)));
            }
            if !p.value.is_finite() {
                return Err(Error::data(format!("non-finite value at slice {}", p.slice_id)));
            }
        }
        Ok(AffectSeries {
            instrument: instrument.into(),
            option: option.into(),
            points,
        })
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    /// Groups score rows by (instrument, option); `dates` maps slice ids to end dates.
    pub fn from_score_rows(rows: &[ScoreRow], dates: &BTreeMap<u32, NaiveDate>) -> Result<Vec<AffectSeries>> {
        let mut groups: BTreeMap<(String, String), Vec<SeriesPoint>> = BTreeMap::new();
        for r in rows {
            let end_date = *dates
                .get(&r.slice_id)
                .ok_or_else(|| Error::data(format!("no end date for slice {}", r.slice_id)))?;
            groups
                .entry((r.instrument.clone(), r.option.clone()))
                .or_default()
                .push(SeriesPoint {
                    slice_id: r.slice_id,
                    end_date,
                    seed: r.seed,
                    value: r.value,
                });
        }
        groups
            .into_iter()
            .map(|((i, o), pts)| AffectSeries::new(i, o, pts))
            .collect()
    }

    /// Slices in date order and one value track per seed, rejecting ragged coverage.
    pub fn tracks(&self) -> Result<(Vec<(u32, NaiveDate)>, BTreeMap<u64, Vec<f64>>)> {
        let slices: Vec<(u32, NaiveDate)> = {
            let set: BTreeSet<(NaiveDate, u32)> = self.points.iter().map(|p| (p.end_date, p.slice_id)).collect();
            set.into_iter().map(|(d, s)| (s, d)).collect()
        };
        let mut by_seed: BTreeMap<u64, BTreeMap<u32, f64>> = BTreeMap::new();
        for p in &self.points {
            by_seed.entry(p.seed).or_default().insert(p.slice_id, p.value);
        }
        let mut tracks = BTreeMap::new();
        for (seed, vals) in by_seed {
            let track = slices
                .iter()
                .map(|(s, _)| {
                    vals.get(s)
                        .copied()
                        .ok_or_else(|| Error::data(format!("seed {seed} has no value for slice {s}")))
                })
                .collect::<Result<Vec<_>>>()?;
            tracks.insert(seed, track);
        }
        Ok((slices, tracks))
    }
}

/// Trailing mean over up to `window` values ending at each position.
pub fn rolling_mean(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::config("rolling window must be at least 1"));
    }
    if values.is_empty() {
        return Err(Error::data("cannot smooth an empty series"));
    }
    Ok((0..values.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let w = &values[lo..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect())
}

pub fn min_max_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::data("min-max normalization needs at least 2 points"));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::data("constant series cannot be min-max normalized"));
    }
    let range = max - min;
    Ok(values.iter().map(|v| (v - min) / range).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineOrder {
    #[default]
    SmoothThenNormalize,
    NormalizeThenSmooth,
}

impl PipelineOrder {
    pub fn apply(self, values: &[f64], window: usize) -> Result<Vec<f64>> {
        match self {
            PipelineOrder::SmoothThenNormalize => min_max_normalize(&rolling_mean(values, window)?),
            PipelineOrder::NormalizeThenSmooth => rolling_mean(&min_max_normalize(values)?, window),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub slice_id: u32,
    pub end_date: NaiveDate,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedBand {
    pub instrument: String,
    pub option: String,
    pub points: Vec<BandPoint>,
}

impl SeedBand {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }
}

/// Per-position (mean, min, max) across equal-length tracks.
pub fn band_stats(tracks: &[Vec<f64>]) -> Result<Vec<(f64, f64, f64)>> {
    let Some(first) = tracks.first() else {
        return Err(Error::data("no seed tracks to aggregate"));
    };
    if tracks.iter().any(|t| t.len() != first.len()) {
        return Err(Error::data("seed tracks cover different slices"));
    }
    Ok((0..first.len())
        .map(|i| {
            let col = tracks.iter().map(|t| t[i]);
            let mean = col.clone().sum::<f64>() / tracks.len() as f64;
            let min = col.clone().fold(f64::INFINITY, f64::min);
            let max = col.fold(f64::NEG_INFINITY, f64::max);
            // Guard the ordering against last-bit rounding in the mean.
            (mean.clamp(min, max), min, max)
        })
        .collect())
}

/// Runs each seed through the smoothing and scaling pipeline, then bands across seeds.
pub fn seed_aggregate(series: &AffectSeries, window: usize, order: PipelineOrder) -> Result<SeedBand> {
    let (slices, tracks) = series.tracks()?;
    let processed = tracks
        .values()
        .map(|t| order.apply(t, window))
        .collect::<Result<Vec<_>>>()?;
    let stats = band_stats(&processed)?;
    Ok(SeedBand {
        instrument: series.instrument.clone(),
        option: series.option.clone(),
        points: slices
            .iter()
            .zip(stats)
            .map(|(&(slice_id, end_date), (mean, min, max))| BandPoint {
                slice_id,
                end_date,
                mean,
                min,
                max,
                n_seeds: processed.len(),
            })
            .collect(),
    })
}

pub const SERIES_COLUMNS: &str = "instrument,option,slice_id,end_date,mean,min,max,n_seeds";

pub fn format_series_csv(bands: &[SeedBand]) -> String {
    let mut out = csv_header_comment();
    out.push_str(SERIES_COLUMNS);
    out.push('\n');
    for b in bands {
        for p in &b.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.instrument, b.option, p.slice_id, p.end_date, p.mean, p.min, p.max, p.n_seeds
            );
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct SeriesRecord {
    instrument: String,
    option: String,
    slice_id: u32,
    end_date: NaiveDate,
    mean: f64,
    min: f64,
    max: f64,
    n_seeds: usize,
}

pub fn read_series_csv(path: &Path) -> Result<Vec<SeedBand>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut groups: BTreeMap<(String, String), Vec<BandPoint>> = BTreeMap::new();
    for rec in reader.deserialize() {
        let r: SeriesRecord = rec?;
        groups.entry((r.instrument, r.option)).or_default().push(BandPoint {
            slice_id: r.slice_id,
            end_date: r.end_date,
            mean: r.mean,
            min: r.min,
            max: r.max,
            n_seeds: r.n_seeds,
        });
    }
    Ok(groups
        .into_iter()
        .map(|((instrument, option), points)| SeedBand {
            instrument,
            option,
            points,
        })
        .collect())
}

/// Static SVG line chart of the band mean with the min-max range shaded.
pub fn band_svg(band: &SeedBand) -> String {
    const W: f64 = 640.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let n = band.points.len();
    let lo = band.points.iter().map(|p| p.min).fold(f64::INFINITY, f64::min);
    let hi = band.points.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let x = |i: usize| PAD + if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 } * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut area = String::new();
    for (i, p) in band.points.iter().enumerate() {
        let _ = write!(area, "{:.2},{:.2} ", x(i), y(p.max));
    }
    for (i, p) in band.points.iter().enumerate().rev() {
        let _ = write!(area, "{:.2},{:.2} ", x(i), y(p.min));
    }
    let line: String = band
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{:.2},{:.2}", x(i), y(p.mean)))
        .collect::<Vec<_>>()
        .join(" ");

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="20" font-family="sans-serif" font-size="14">{} / {}</text>"#,
        xml_escape(&band.instrument),
        xml_escape(&band.option)
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="#444"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="#444"/>"##,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(svg, r##"<polygon points="{}" fill="#4477aa" fill-opacity="0.25" stroke="none"/>"##, area.trim_end());
    let _ = writeln!(svg, r##"<polyline points="{line}" fill="none" stroke="#4477aa" stroke-width="2"/>"##);
    if let (Some(first), Some(last)) = (band.points.first(), band.points.last()) {
        let _ = writeln!(
            svg,
            r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">{}</text><text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            H - PAD + 16.0,
            first.end_date,
            W - PAD,
            H - PAD + 16.0,
            last.end_date
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2023, 1, d).unwrap()
    }

    #[test]
    fn rolling_examples() {
        let v = [0.0, 3.0, 6.0, 9.0];
        assert_eq!(rolling_mean(&v, 1).unwrap(), v.to_vec());
        assert_eq!(rolling_mean(&v, 3).unwrap(), vec![0.0, 1.5, 3.0, 6.0]);
        assert_eq!(rolling_mean(&[2.5; 5], 3).unwrap(), vec![2.5; 5]);
        assert!(rolling_mean(&[], 3).is_err());
        assert!(rolling_mean(&v, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[0.0, 0.25, 1.0]).unwrap(), vec![0.0, 0.25, 1.0]);
        assert!(min_max_normalize(&[3.0, 3.0]).is_err());
        assert!(min_max_normalize(&[3.0]).is_err());
    }

    #[test]
    fn band_examples() {
        let single = band_stats(&[vec![0.1, 0.7]]).unwrap();
        assert!(single.iter().all(|&(m, lo, hi)| m == lo && lo == hi));
        let three = band_stats(&[vec![0.2], vec![0.4], vec![0.6]]).unwrap();
        assert!((three[0].0 - 0.4).abs() < 1e-15);
        assert_eq!((three[0].1, three[0].2), (0.2, 0.6));
        assert!(band_stats(&[vec![0.0, 1.0], vec![0.0]]).is_err());
    }

    fn series(seeds: &[(u64, Vec<f64>)]) -> AffectSeries {
        let pts = seeds
            .iter()
            .flat_map(|(seed, vals)| {
                vals.iter().enumerate().map(move |(i, &v)| SeriesPoint {
                    slice_id: i as u32,
                    end_date: date(1 + 7 * i as u32),
                    seed: *seed,
                    value: v,
                })
            })
            .collect();
        AffectSeries::new("mood_weekly", "happy", pts).unwrap()
    }

    #[test]
    fn pipeline_bands_are_ordered() {
        let s = series(&[(1, vec![0.1, 0.5, 0.2, 0.9]), (2, vec![0.3, 0.1, 0.4, 0.8]), (3, vec![0.5, 0.6, 0.1, 0.2])]);
        let band = seed_aggregate(&s, 3, PipelineOrder::default()).unwrap();
        assert_eq!(band.points.len(), 4);
        for p in &band.points {
            assert!(p.min <= p.mean && p.mean <= p.max);
            assert_eq!(p.n_seeds, 3);
        }
        assert_eq!(band, seed_aggregate(&s, 3, PipelineOrder::default()).unwrap());
        let alt = seed_aggregate(&s, 3, PipelineOrder::NormalizeThenSmooth).unwrap();
        assert_ne!(alt, band);
    }

    #[test]
    fn ragged_and_duplicate_points_rejected() {
        let mut pts = series(&[(1, vec![0.1, 0.5, 0.2]), (2, vec![0.3, 0.1, 0.4])]).points;
        pts.pop();
        let ragged = AffectSeries::new("i", "o", pts.clone()).unwrap();
        assert!(seed_aggregate(&ragged, 3, PipelineOrder::default()).is_err());
        pts.push(pts[0].clone());
        assert!(AffectSeries::new("i", "o", pts).is_err());
    }

    #[test]
    fn csv_roundtrip_and_svg() {
        let s = series(&[(1, vec![0.1, 0.5, 0.2]), (2, vec![0.3, 0.1, 0.4])]);
        let band = seed_aggregate(&s, 3, PipelineOrder::default()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), format_series_csv(std::slice::from_ref(&band))).unwrap();
        assert_eq!(read_series_csv(f.path()).unwrap(), vec![band.clone()]);
        let svg = band_svg(&band);
        assert!(svg.starts_with("<svg") && svg.contains("<polygon") && svg.contains("<polyline"));
    }

    proptest! {
        #[test]
        fn rolling_stays_within_bounds(v in prop::collection::vec(-1e6f64..1e6, 1..40), w in 1usize..8) {
            let out = rolling_mean(&v, w).unwrap();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.len(), v.len());
            for x in out {
                prop_assert!(x >= lo - 1e-9 * lo.abs().max(1.0) && x <= hi + 1e-9 * hi.abs().max(1.0));
            }
        }
    }
}
