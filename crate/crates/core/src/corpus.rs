//! Time-stamped documents, weekly slicing, and labeled synthetic corpora.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, TimeZone, Utc};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    /// Records rejected while loading.
    pub skipped: usize,
}

impl Corpus {
    pub fn new(mut documents: Vec<Document>) -> Self {
        documents.sort_by_key(|d| d.timestamp);
        Corpus {
            documents,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.text.as_str()).collect()
    }
}

/// Which JSON fields hold the text, timestamp and label of a record.
#[derive(Clone, Debug)]
pub struct CorpusSchema {
    pub text_field: String,
    pub timestamp_field: String,
    pub label_field: Option<String>,
    /// Inclusive lower / exclusive upper bound on accepted timestamps.
    pub bounds: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

impl Default for CorpusSchema {
    fn default() -> Self {
        CorpusSchema {
            text_field: "text".into(),
            timestamp_field: "timestamp".into(),
            label_field: Some("label".into()),
            bounds: None,
        }
    }
}

/// Accepts RFC 3339, a naive `YYYY-MM-DD[T ]HH:MM:SS` (taken as UTC), or a bare date.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap()))
}

fn parse_record(line: &str, schema: &CorpusSchema) -> Option<Document> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let text = value.get(&schema.text_field)?.as_str()?;
    if text.trim().is_empty() {
        return None;
    }
    let timestamp = parse_timestamp(value.get(&schema.timestamp_field)?.as_str()?)?;
    if let Some((lo, hi)) = schema.bounds {
        if timestamp < lo || timestamp >= hi {
            return None;
        }
    }
    let label = schema
        .label_field
        .as_ref()
        .and_then(|f| value.get(f))
        .and_then(|v| v.as_str())
        .map(str::to_string);
    Some(Document {
        text: text.to_string(),
        timestamp,
        label,
    })
}

/// Load newline-delimited JSON records. Malformed records are skipped and
/// counted; more than half malformed is treated as a schema mismatch.
pub fn load_corpus(path: &Path, schema: &CorpusSchema) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut documents = Vec::new();
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, schema) {
            Some(doc) => documents.push(doc),
            None => skipped += 1,
        }
    }
    if skipped * 2 > documents.len() + skipped {
        return Err(Error::data(format!(
            "{}: {skipped} of {} records malformed; check the field mapping",
            path.display(),
            documents.len() + skipped
        )));
    }
    let mut corpus = Corpus::new(documents);
    corpus.skipped = skipped;
    Ok(corpus)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One ISO-8601 date per line; blank lines and `#` comments ignored.
pub fn read_wave_dates(path: &Path) -> Result<Vec<NaiveDate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            NaiveDate::parse_from_str(l, "%Y-%m-%d")
                .map_err(|e| Error::data(format!("bad wave date {l:?}: {e}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSlice {
    pub id: u32,
    pub end_date: NaiveDate,
    pub window_days: u32,
    pub documents: Vec<Document>,
}

impl TimeSlice {
    pub fn start(&self) -> DateTime<Utc> {
        self.end() - Duration::days(self.window_days as i64)
    }

    pub fn end(&self) -> DateTime<Utc> {
        day_start(self.end_date)
    }

    /// Empty slices are kept so wave indices stay aligned, but must not be trained on.
    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.text.as_str()).collect()
    }
}

fn day_start(d: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap())
}

/// One slice per wave date holding the documents in `[wave - window_days, wave)`.
pub fn slice_weekly(corpus: &Corpus, wave_dates: &[NaiveDate], window_days: u32) -> Result<Vec<TimeSlice>> {
    if wave_dates.is_empty() {
        return Err(Error::config("no wave dates given"));
    }
    if window_days == 0 {
        return Err(Error::config("window_days must be >= 1"));
    }
    if wave_dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("wave dates must be strictly increasing"));
    }
    let mut sorted = corpus.documents.clone();
    sorted.sort_by_key(|d| d.timestamp);
    Ok(wave_dates
        .iter()
        .enumerate()
        .map(|(i, &end_date)| {
            let end = day_start(end_date);
            let start = end - Duration::days(window_days as i64);
            let lo = sorted.partition_point(|d| d.timestamp < start);
            let hi = sorted.partition_point(|d| d.timestamp < end);
            TimeSlice {
                id: i as u32,
                end_date,
                window_days,
                documents: sorted[lo..hi].to_vec(),
            }
        })
        .collect())
}

/// Subsample every non-empty slice (seeded shuffle) down to the smallest
/// non-empty slice size so each adapter sees the same amount of data.
pub fn cap_to_smallest(slices: &[TimeSlice], seed: u64) -> Vec<TimeSlice> {
    let Some(min) = slices.iter().filter(|s| !s.is_empty()).map(|s| s.documents.len()).min() else {
        return slices.to_vec();
    };
    slices
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if s.documents.len() > min {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut keep = index::sample(&mut rng, s.documents.len(), min).into_vec();
                keep.sort_unstable();
                s.documents = keep.into_iter().map(|i| s.documents[i].clone()).collect();
            }
            s
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SliceEntry {
    id: u32,
    end_date: NaiveDate,
    window_days: u32,
    documents: usize,
    file: String,
}

/// Writes `slices.json` plus one `slice_NNN.jsonl` per slice.
pub fn write_slices(dir: &Path, slices: &[TimeSlice]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(slices.len());
    for s in slices {
        let file = format!("slice_{:03}.jsonl", s.id);
        write_corpus(&dir.join(&file), &s.documents)?;
        manifest.push(SliceEntry {
            id: s.id,
            end_date: s.end_date,
            window_days: s.window_days,
            documents: s.documents.len(),
            file,
        });
    }
    let path = dir.join("slices.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_slices(dir: &Path) -> Result<Vec<TimeSlice>> {
    let path = dir.join("slices.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<SliceEntry> = serde_json::from_str(&text)?;
    manifest
        .into_iter()
        .map(|e| {
            let corpus = load_corpus(&dir.join(&e.file), &CorpusSchema::default())?;
            Ok(TimeSlice {
                id: e.id,
                end_date: e.end_date,
                window_days: e.window_days,
                documents: corpus.documents,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub happy_fraction: f64,
    pub total_count: usize,
    pub seed: u64,
}

impl MixSpec {
    /// `(first-pool count, second-pool count)`: the first count is rounded to
    /// the nearest integer and the remainder goes to the second pool.
    pub fn counts(&self) -> (usize, usize) {
        let a = (self.happy_fraction * self.total_count as f64).round() as usize;
        let a = a.min(self.total_count);
        (a, self.total_count - a)
    }
}

/// The 11 fractions 0.0, 0.1, ..., 1.0.
pub fn decile_fractions() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

fn single_label<'a>(pool: &'a [Document], name: &str) -> Result<Option<&'a str>> {
    let mut label = None;
    for d in pool {
        let l = d
            .label
            .as_deref()
            .ok_or_else(|| Error::data(format!("{name} contains an unlabeled document")))?;
        match label {
            None => label = Some(l),
            Some(prev) if prev != l => {
                return Err(Error::data(format!("{name} mixes labels {prev:?} and {l:?}")))
            }
            _ => {}
        }
    }
    Ok(label)
}

/// Draw `spec.counts()` documents from each pool and shuffle them together.
pub fn synth_mix(pool_a: &[Document], pool_b: &[Document], spec: &MixSpec) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&spec.happy_fraction) {
        return Err(Error::config(format!("mix fraction {} outside [0, 1]", spec.happy_fraction)));
    }
    let la = single_label(pool_a, "first pool")?;
    let lb = single_label(pool_b, "second pool")?;
    if la.is_some() && la == lb {
        return Err(Error::data("mix pools share a label"));
    }
    let (na, nb) = spec.counts();
    if na > pool_a.len() || nb > pool_b.len() {
        return Err(Error::data(format!(
            "mix needs {na} + {nb} documents but pools hold {} + {}",
            pool_a.len(),
            pool_b.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs: Vec<Document> = index::sample(&mut rng, pool_a.len(), na)
        .into_iter()
        .map(|i| pool_a[i].clone())
        .collect();
    docs.extend(index::sample(&mut rng, pool_b.len(), nb).into_iter().map(|i| pool_b[i].clone()));
    docs.shuffle(&mut rng);
    Ok(Corpus {
        documents: docs,
        skipped: 0,
    })
}

/// Sentence templates for one label. `{name}` markers are filled from `slots[name]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTemplates {
    pub templates: Vec<String>,
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub labels: BTreeMap<String, LabelTemplates>,
}

impl TemplateSet {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Tweet-like happy/sad sentences.
    pub fn builtin_emotions() -> Self {
        let events = [
            "seeing my mum",
            "the football",
            "the weather",
            "work",
            "the news",
            "my exam results",
            "the weekend",
            "the train home",
            "a long walk",
            "dinner with friends",
            "the match",
            "this lockdown",
            "my new job",
            "the school run",
            "a phone call",
            "my garden",
        ];
        let events: Vec<String> = events.iter().map(|s| s.to_string()).collect();
        let templates = [
            "I felt {mood} all week, {event} made it",
            "so {mood} right now after {event}",
            "honestly feeling {mood} today because of {event}",
            "{event} and I felt {mood}",
            "what a week. I felt {mood} after {event}",
            "cannot stop feeling {mood} about {event}",
            "today I felt {mood}. {event} again",
            "still {mood} about {event} tbh",
            "I feel {mood} every time I think about {event}",
            "feeling {mood} tonight, {event} did that",
        ];
        let templates: Vec<String> = templates.iter().map(|s| s.to_string()).collect();
        let label = |words: &[&str]| LabelTemplates {
            templates: templates.clone(),
            slots: BTreeMap::from([
                ("mood".to_string(), words.iter().map(|s| s.to_string()).collect()),
                ("event".to_string(), events.clone()),
            ]),
        };
        TemplateSet {
            labels: BTreeMap::from([
                (
                    "happy".to_string(),
                    label(&["happy", "so happy", "really happy", "joyful", "glad", "cheerful", "delighted", "happy and grateful"]),
                ),
                (
                    "sad".to_string(),
                    label(&["sad", "so sad", "really sad", "miserable", "down", "gloomy", "heartbroken", "sad and lonely"]),
                ),
            ]),
        }
    }
}

fn slot_names(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        let name = &rest[open + 1..open + close];
        if !names.iter().any(|n| n == name) {
            names.push(name.to_string());
        }
        rest = &rest[open + close + 1..];
    }
    names
}

struct Expansion<'a> {
    template: &'a str,
    names: Vec<String>,
    lists: Vec<&'a [String]>,
    capacity: usize,
}

impl Expansion<'_> {
    fn render(&self, mut index: usize) -> String {
        let mut out = self.template.to_string();
        for (name, list) in self.names.iter().zip(&self.lists) {
            let fill = &list[index % list.len()];
            index /= list.len();
            out = out.replace(&format!("{{{name}}}"), fill);
        }
        out
    }
}

fn synthetic_timestamp(i: usize) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap() + Duration::seconds(i as i64)
}

/// `n_per_label` filled sentences per label, without repeating a
/// (template, fill) pair until every pair has been used.
pub fn generate_synthetic_emotion_corpus(templates: &TemplateSet, n_per_label: usize, seed: u64) -> Result<Corpus> {
    if templates.labels.is_empty() {
        return Err(Error::config("template set has no labels"));
    }
    let mut docs = Vec::new();
    for (li, (label, lt)) in templates.labels.iter().enumerate() {
        if lt.templates.is_empty() {
            return Err(Error::config(format!("label {label:?} has zero templates")));
        }
        let expansions = lt
            .templates
            .iter()
            .map(|t| {
                let names = slot_names(t);
                let lists = names
                    .iter()
                    .map(|n| match lt.slots.get(n) {
                        Some(l) if !l.is_empty() => Ok(l.as_slice()),
                        _ => Err(Error::config(format!("label {label:?}: no fills for slot {{{n}}}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let capacity = lists.iter().map(|l| l.len()).product::<usize>();
                Ok(Expansion {
                    template: t,
                    names,
                    lists,
                    capacity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let capacity: usize = expansions.iter().map(|e| e.capacity).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(li as u64));
        let mut picked = Vec::with_capacity(n_per_label);
        while picked.len() < n_per_label {
            let take = (n_per_label - picked.len()).min(capacity);
            picked.extend(index::sample(&mut rng, capacity, take));
        }
        for flat in picked {
            let mut k = flat;
            let exp = expansions
                .iter()
                .find(|e| {
                    if k < e.capacity {
                        true
                    } else {
                        k -= e.capacity;
                        false
                    }
                })
                .expect("index within total capacity");
            docs.push(Document {
                text: exp.render(k),
                timestamp: synthetic_timestamp(docs.len()),
                label: Some(label.clone()),
            });
        }
    }
    Ok(Corpus {
        documents: docs,
        skipped: 0,
    })
}

/// Fraction of labeled documents carrying each label.
pub fn label_shares(docs: &[Document]) -> Result<BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in docs.iter().filter_map(|d| d.label.as_ref()) {
        *counts.entry(l.clone()).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::data("no labeled documents"));
    }
    Ok(counts
        .into_iter()
        .map(|(l, c)| (l, c as f64 / total as f64))
        .collect())
}

/// Split a labeled corpus into one pool per label.
pub fn pools_by_label(docs: &[Document]) -> BTreeMap<String, Vec<Document>> {
    let mut pools: BTreeMap<String, Vec<Document>> = BTreeMap::new();
    for d in docs {
        if let Some(l) = &d.label {
            pools.entry(l.clone()).or_default().push(d.clone());
        }
    }
    pools
}

#[cfg(test)]
mod tests {
    use super::*;


    fn doc(text: &str, ts: &str, label: Option<&str>) -> Document {
        Document {
            text: text.into(),
            timestamp: parse_timestamp(ts).unwrap(),
            label: label.map(str::to_string),
        }
    }

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let c = load_corpus(f.path(), &CorpusSchema::default()).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.skipped, 0);
    }

    #[test]
    fn missing_timestamp_is_skipped() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"a","timestamp":"2020-01-03T10:00:00Z"}}"#).unwrap();
        writeln!(f, r#"{{"text":"b","timestamp":"2020-01-01T10:00:00Z"}}"#).unwrap();
        writeln!(f, r#"{{"text":"c"}}"#).unwrap();
        writeln!(f, r#"{{"text":"d","timestamp":"2020-01-02"}}"#).unwrap();
        let c = load_corpus(f.path(), &CorpusSchema::default()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.skipped, 1);
        assert_eq!(c.texts(), vec!["b", "d", "a"]);
    }

    #[test]
    fn mostly_malformed_is_an_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"body":"a","time":"2020-01-03"}}"#).unwrap();
        writeln!(f, r#"{{"body":"b","time":"2020-01-03"}}"#).unwrap();
        writeln!(f, r#"{{"text":"c","timestamp":"2020-01-03"}}"#).unwrap();
        let err = load_corpus(f.path(), &CorpusSchema::default()).unwrap_err();
        assert_eq!(err.category(), "data");
    }

    #[test]
    fn bounds_and_blank_text_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"  ","timestamp":"2020-01-03"}}"#).unwrap();
        writeln!(f, r#"{{"text":"x","timestamp":"2019-01-03"}}"#).unwrap();
        for i in 0..4 {
            writeln!(f, r#"{{"text":"ok {i}","timestamp":"2020-01-0{}"}}"#, i + 1).unwrap();
        }
        let schema = CorpusSchema {
            bounds: Some((parse_timestamp("2020-01-01").unwrap(), parse_timestamp("2021-01-01").unwrap())),
            ..CorpusSchema::default()
        };
        let c = load_corpus(f.path(), &schema).unwrap();
        assert_eq!((c.len(), c.skipped), (4, 2));
    }

    #[test]
    fn window_is_half_open() {
        let corpus = Corpus::new(vec![
            doc("inside", "2020-03-09T12:00:00Z", None),
            doc("on wave", "2020-03-10T00:00:00Z", None),
            doc("window start", "2020-03-03T00:00:00Z", None),
        ]);
        let slices = slice_weekly(&corpus, &[date("2020-03-10")], 7).unwrap();
        assert_eq!(slices[0].texts(), vec!["window start", "inside"]);
    }

    #[test]
    fn empty_slice_is_kept() {
        let corpus = Corpus::new(vec![doc("a", "2020-03-09", None)]);
        let slices = slice_weekly(&corpus, &[date("2020-03-10"), date("2020-06-10")], 7).unwrap();
        assert_eq!(slices.len(), 2);
        assert!(!slices[0].is_empty());
        assert!(slices[1].is_empty());
    }

    #[test]
    fn slice_errors() {
        let c = Corpus::default();
        assert!(slice_weekly(&c, &[], 7).is_err());
        assert!(slice_weekly(&c, &[date("2020-01-01")], 0).is_err());
        assert!(slice_weekly(&c, &[date("2020-01-02"), date("2020-01-01")], 7).is_err());
    }

    #[test]
    fn exhaustive_partition_on_small_grid() {
        // Every hour over four weeks, waves exactly seven days apart.
        let start = parse_timestamp("2020-01-01").unwrap();
        let docs: Vec<Document> = (0..24 * 28)
            .map(|h| Document {
                text: format!("h{h}"),
                timestamp: start + Duration::hours(h),
                label: None,
            })
            .collect();
        let corpus = Corpus::new(docs);
        let waves: Vec<NaiveDate> = (1..=4).map(|w| date("2020-01-01") + Duration::days(7 * w)).collect();
        let slices = slice_weekly(&corpus, &waves, 7).unwrap();
        let mut seen = std::collections::HashMap::new();
        for s in &slices {
            for d in &s.documents {
                *seen.entry(d.text.clone()).or_insert(0) += 1;
                assert!(d.timestamp >= s.start() && d.timestamp < s.end());
            }
        }
        assert_eq!(seen.len(), corpus.len());
        assert!(seen.values().all(|&n| n == 1));
    }

    #[test]
    fn capping_equalizes_sizes() {
        let corpus = Corpus::new(
            (0..30)
                .map(|i| doc(&format!("d{i}"), &format!("2020-01-{:02}", 1 + i % 14), None))
                .collect(),
        );
        let slices = slice_weekly(&corpus, &[date("2020-01-08"), date("2020-01-15")], 7).unwrap();
        let capped = cap_to_smallest(&slices, 5);
        let min = slices.iter().map(|s| s.documents.len()).min().unwrap();
        assert!(capped.iter().all(|s| s.documents.len() == min));
        assert_eq!(capped, cap_to_smallest(&slices, 5));
    }

    #[test]
    fn slices_roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::new(vec![doc("a", "2020-03-09", Some("happy")), doc("b", "2020-03-12", None)]);
        let slices = slice_weekly(&corpus, &[date("2020-03-10"), date("2020-03-17")], 7).unwrap();
        write_slices(dir.path(), &slices).unwrap();
        assert_eq!(read_slices(dir.path()).unwrap(), slices);
    }

    fn pool(label: &str, n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document {
                text: format!("{label} {i}"),
                timestamp: synthetic_timestamp(i),
                label: Some(label.into()),
            })
            .collect()
    }

    #[test]
    fn mix_counts() {
        let (h, s) = (pool("happy", 1326), pool("sad", 1326));
        let all_happy = synth_mix(&h, &s, &MixSpec { happy_fraction: 1.0, total_count: 1163, seed: 1 }).unwrap();
        assert_eq!(label_shares(&all_happy.documents).unwrap(), BTreeMap::from([("happy".into(), 1.0)]));
        assert_eq!(all_happy.len(), 1163);

        let m = MixSpec { happy_fraction: 0.3, total_count: 1163, seed: 1 };
        assert_eq!(m.counts(), (349, 814));

        let spec = MixSpec { happy_fraction: 0.5, total_count: 10, seed: 9 };
        let a = synth_mix(&h, &s, &spec).unwrap();
        assert_eq!(a, synth_mix(&h, &s, &spec).unwrap());
        let happy = a.documents.iter().filter(|d| d.label.as_deref() == Some("happy")).count();
        assert_eq!(happy, 5);
    }

    #[test]
    fn mix_errors() {
        let (h, s) = (pool("happy", 5), pool("sad", 5));
        let spec = MixSpec { happy_fraction: 0.5, total_count: 20, seed: 0 };
        assert!(synth_mix(&h, &s, &spec).is_err());
        let spec = MixSpec { happy_fraction: 0.5, total_count: 4, seed: 0 };
        assert!(synth_mix(&h, &h, &spec).is_err());
    }

    #[test]
    fn single_template_single_fill() {
        let set = TemplateSet {
            labels: BTreeMap::from([(
                "happy".into(),
                LabelTemplates {
                    templates: vec!["I am {w}".into()],
                    slots: BTreeMap::from([("w".into(), vec!["glad".into()])]),
                },
            )]),
        };
        let c = generate_synthetic_emotion_corpus(&set, 1, 0).unwrap();
        assert_eq!(c.texts(), vec!["I am glad"]);
    }

    #[test]
    fn distinct_until_exhausted() {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let lt = LabelTemplates {
            templates: (0..10).map(|t| format!("t{t} {{x}}")).collect(),
            slots: BTreeMap::from([("x".into(), words)]),
        };
        let set = TemplateSet {
            labels: BTreeMap::from([("happy".into(), lt.clone()), ("sad".into(), lt)]),
        };
        let c = generate_synthetic_emotion_corpus(&set, 100, 3).unwrap();
        for label in ["happy", "sad"] {
            let texts: std::collections::HashSet<&str> = c
                .documents
                .iter()
                .filter(|d| d.label.as_deref() == Some(label))
                .map(|d| d.text.as_str())
                .collect();
            assert_eq!(texts.len(), 100);
        }
        let other = generate_synthetic_emotion_corpus(&set, 100, 4).unwrap();
        assert_ne!(c.texts(), other.texts());
        assert_eq!(label_shares(&c.documents).unwrap(), label_shares(&other.documents).unwrap());
    }

    #[test]
    fn zero_templates_rejected() {
        let set = TemplateSet {
            labels: BTreeMap::from([("happy".into(), LabelTemplates::default())]),
        };
        assert!(generate_synthetic_emotion_corpus(&set, 3, 0).is_err());
    }

    #[test]
    fn shares_by_counting() {
        let mut docs = pool("happy", 3);
        docs.extend(pool("sad", 1));
        docs.push(doc("unlabeled", "2020-01-01", None));
        let shares = label_shares(&docs).unwrap();
        assert_eq!(shares["happy"], 0.75);
        assert_eq!(shares["sad"], 0.25);
        assert!(label_shares(&[doc("x", "2020-01-01", None)]).is_err());
    }

    #[test]
    fn builtin_templates_cover_both_labels() {
        let c = generate_synthetic_emotion_corpus(&TemplateSet::builtin_emotions(), 50, 1).unwrap();
        let pools = pools_by_label(&c.documents);
        assert_eq!(pools["happy"].len(), 50);
        assert_eq!(pools["sad"].len(), 50);
        assert!(c.documents.iter().all(|d| !d.text.contains('{')));
    }
}
