//! Agreement between extracted series and reference survey series:
//! date alignment, Pearson correlation and permutation significance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{AffectSeries, PipelineOrder};
use crate::survey::csv_header_comment;

/// Permuted statistics within this distance of the observed one count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSeries {
    pub source: String,
    pub option: String,
    pub points: Vec<(NaiveDate, f64)>,
}

impl ReferenceSeries {
    pub fn new(source: impl Into<String>, option: impl Into<String>, mut points: Vec<(NaiveDate, f64)>) -> Result<Self> {
        points.sort_by_key(|p| p.0);
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::data("reference series has repeated wave dates"));
        }
        if points.iter().any(|p| !p.1.is_finite()) {
            return Err(Error::data("reference series has non-finite values"));
        }
        Ok(ReferenceSeries {
            source: source.into(),
            option: option.into(),
            points,
        })
    }
}

#[derive(Debug, Deserialize)]
struct ReferenceRecord {
    wave_date: NaiveDate,
    option: String,
    value: f64,
}

/// Reads `wave_date,option,value` rows into one series per option.
pub fn read_reference_csv(path: &Path) -> Result<BTreeMap<String, ReferenceSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut groups: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for rec in reader.deserialize() {
        let r: ReferenceRecord = rec?;
        groups.entry(r.option).or_default().push((r.wave_date, r.value));
    }
    let source = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    groups
        .into_iter()
        .map(|(opt, pts)| Ok((opt.clone(), ReferenceSeries::new(source.clone(), opt, pts)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub dates: Vec<NaiveDate>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dropped_series: usize,
    pub dropped_reference: usize,
}

/// Pairs values on exactly matching dates.
pub fn align(series: &[(NaiveDate, f64)], reference: &ReferenceSeries) -> Result<Aligned> {
    let lookup: BTreeMap<NaiveDate, f64> = reference.points.iter().copied().collect();
    let mut out = Aligned {
        dates: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        dropped_series: 0,
        dropped_reference: 0,
    };
    for &(d, v) in series {
        match lookup.get(&d) {
            Some(&r) => {
                out.dates.push(d);
                out.x.push(v);
                out.y.push(r);
            }
            None => out.dropped_series += 1,
        }
    }
    out.dropped_reference = reference.points.len() - out.dates.len();
    if out.dates.len() < 2 {
        return Err(Error::data(format!(
            "only {} dates shared with reference {:?}; need at least 2",
            out.dates.len(),
            reference.option
        )));
    }
    Ok(out)
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss = c.iter().map(|x| x * x).sum::<f64>();
    (c, ss)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::data("correlation needs at least 2 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::data("correlation inputs must be finite"));
    }
    Ok(())
}

/// Product-moment correlation, computed with centered two-pass sums.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (xc, sxx) = centered(x);
    let (yc, syy) = centered(y);
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::data("correlation undefined for a zero-variance series"));
    }
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permutations {
    /// Random shuffles of `x`; p is add-one smoothed.
    Sampled(usize),
    /// Every ordering of `x`, identity included; p is the exact tail share.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p: f64,
    pub n: usize,
    pub permutations: usize,
    pub seed: u64,
}

/// Largest `n` accepted for exhaustive enumeration.
pub const EXHAUSTIVE_MAX_N: usize = 10;

/// Two-sided permutation test of `pearson(x, y)` that shuffles `x` and keeps
/// `y` fixed. Sampled permutation `i` draws from ChaCha stream `i` of `seed`,
/// so the result does not depend on how the work is scheduled.
pub fn permutation_test(x: &[f64], y: &[f64], mode: Permutations, seed: u64) -> Result<CorrelationResult> {
    let r = pearson(x, y)?;
    let (xc, sxx) = centered(x);
    let (yc, syy) = centered(y);
    let denom = (sxx * syy).sqrt();
    let threshold = r.abs() - TIE_TOLERANCE;
    let extreme = |perm: &[f64]| -> bool {
        let s: f64 = perm.iter().zip(&yc).map(|(a, b)| a * b).sum();
        (s / denom).abs() >= threshold
    };
    let n = x.len();
    let (count, total, p) = match mode {
        Permutations::Sampled(n_perm) => {
            if n_perm == 0 {
                return Err(Error::config("permutation count must be at least 1"));
            }
            let count = (0..n_perm as u64)
                .into_par_iter()
                .filter(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i);
                    let mut perm = xc.clone();
                    perm.shuffle(&mut rng);
                    extreme(&perm)
                })
                .count();
            (count, n_perm, (1 + count) as f64 / (1 + n_perm) as f64)
        }
        Permutations::Exhaustive => {
            if n > EXHAUSTIVE_MAX_N {
                return Err(Error::config(format!(
                    "exhaustive permutation needs n <= {EXHAUSTIVE_MAX_N}, got {n}"
                )));
            }
            let mut count = 0usize;
            let mut total = 0usize;
            heap_permutations(&mut xc.clone(), |perm| {
                total += 1;
                if extreme(perm) {
                    count += 1;
                }
            });
            (count, total, count as f64 / total as f64)
        }
    };
    debug_assert!(count <= total);
    Ok(CorrelationResult {
        r,
        p,
        n,
        permutations: total,
        seed,
    })
}

/// Visits every ordering of `v` (Heap's algorithm, iterative form).
fn heap_permutations<T>(v: &mut [T], mut visit: impl FnMut(&[T])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    visit(v);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            visit(v);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateConfig {
    pub window: usize,
    pub order: PipelineOrder,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            window: 3,
            order: PipelineOrder::default(),
            permutations: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub option: String,
    pub seed: u64,
    pub result: CorrelationResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSummary {
    pub option: String,
    pub r_min: f64,
    pub r_max: f64,
    pub worst_p: f64,
    pub n: usize,
    pub seeds: usize,
}

impl OptionSummary {
    pub fn stars(&self) -> &'static str {
        stars(self.worst_p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationTable {
    pub per_seed: Vec<SeedResult>,
    pub summaries: Vec<OptionSummary>,
}

pub fn summarize(option: &str, results: &[CorrelationResult]) -> Result<OptionSummary> {
    let first = results
        .first()
        .ok_or_else(|| Error::data(format!("no results to summarize for {option:?}")))?;
    Ok(OptionSummary {
        option: option.to_string(),
        r_min: results.iter().map(|c| c.r).fold(f64::INFINITY, f64::min),
        r_max: results.iter().map(|c| c.r).fold(f64::NEG_INFINITY, f64::max),
        worst_p: results.iter().map(|c| c.p).fold(0.0, f64::max),
        n: first.n,
        seeds: results.len(),
    })
}

/// Correlates each seed's processed track with the reference for its option.
/// Options without a reference series are skipped.
pub fn validate(
    series: &[AffectSeries],
    references: &BTreeMap<String, ReferenceSeries>,
    config: &ValidateConfig,
) -> Result<ValidationTable> {
    let mut table = ValidationTable::default();
    for s in series {
        let Some(reference) = references.get(&s.option) else {
            continue;
        };
        let (slices, tracks) = s.tracks()?;
        let mut results = Vec::new();
        for (&seed, track) in &tracks {
            let processed = config.order.apply(track, config.window)?;
            let dated: Vec<(NaiveDate, f64)> = slices.iter().map(|s| s.1).zip(processed).collect();
            let aligned = align(&dated, reference)?;
            let res = permutation_test(&aligned.x, &aligned.y, Permutations::Sampled(config.permutations), config.seed)?;
            table.per_seed.push(SeedResult {
                option: s.option.clone(),
                seed,
                result: res.clone(),
            });
            results.push(res);
        }
        table.summaries.push(summarize(&s.option, &results)?);
    }
    if table.summaries.is_empty() {
        return Err(Error::data("no series option has a matching reference series"));
    }
    Ok(table)
}

pub const VALIDATION_COLUMNS: &str = "option,seed,r,p,n,r_min,r_max,stars";

/// Per-seed rows followed by one `summary` row per option, whose `p` is the worst seed's.
pub fn format_validation_csv(table: &ValidationTable) -> String {
    let mut out = csv_header_comment();
    out.push_str(VALIDATION_COLUMNS);
    out.push('\n');
    for s in &table.per_seed {
        let c = &s.result;
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", s.option, s.seed, c.r, c.p, c.n, c.r, c.r, stars(c.p));
    }
    for s in &table.summaries {
        let _ = writeln!(
            out,
            "{},summary,,{},{},{},{},{}",
            s.option,
            s.worst_p,
            s.n,
            s.r_min,
            s.r_max,
            s.stars()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg).unwrap(), -1.0);
        assert!((pearson(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(pearson(&x, &[1.0; 4]).is_err());
        assert!(pearson(&x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn heap_visits_every_ordering_once() {
        let mut v = [0u8, 1, 2, 3];
        let mut seen = std::collections::BTreeSet::new();
        heap_permutations(&mut v, |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn exhaustive_n3() {
        // r = 1 for the identity; only the identity and the full reversal tie in |r|.
        let res = permutation_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Permutations::Exhaustive, 0).unwrap();
        assert_eq!(res.permutations, 6);
        assert!((res.p - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn sampled_strong_correlation_hits_floor() {
        let x: Vec<f64> = (0..35).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let res = permutation_test(&x, &y, Permutations::Sampled(10_000), 7).unwrap();
        assert_eq!(res.p, 1.0 / 10_001.0);
        assert_eq!(res, permutation_test(&x, &y, Permutations::Sampled(10_000), 7).unwrap());
    }

    #[test]
    fn sign_flip_keeps_p() {
        let x = [0.3, 0.1, 0.9, 0.4, 0.7, 0.2];
        let y = [1.0, 0.0, 2.0, 1.5, 1.0, 0.5];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = permutation_test(&x, &y, Permutations::Sampled(500), 3).unwrap();
        let b = permutation_test(&neg, &y, Permutations::Sampled(500), 3).unwrap();
        assert!((a.r + b.r).abs() < 1e-15);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn star_rule_uses_worst_p() {
        let mk = |p| CorrelationResult {
            r: 0.5,
            p,
            n: 10,
            permutations: 10_000,
            seed: 0,
        };
        let s = summarize("happy", &[mk(0.001), mk(0.02), mk(0.04)]).unwrap();
        assert_eq!(s.stars(), "*");
        assert_eq!(stars(0.0009), "***");
        assert_eq!(stars(0.009), "**");
        assert_eq!(stars(0.05), "");
    }

    #[test]
    fn alignment() {
        let d = |m, day| NaiveDate::from_ymd_opt(2023, m, day).unwrap();
        let reference = ReferenceSeries::new("r", "happy", vec![(d(1, 1), 1.0), (d(2, 1), 2.0), (d(3, 1), 3.0)]).unwrap();
        let series = vec![(d(1, 1), 0.1), (d(1, 8), 0.2), (d(2, 1), 0.3)];
        let a = align(&series, &reference).unwrap();
        assert_eq!(a.x, vec![0.1, 0.3]);
        assert_eq!((a.dropped_series, a.dropped_reference), (1, 1));
        assert!(align(&[(d(5, 5), 1.0)], &reference).is_err());
    }
}
