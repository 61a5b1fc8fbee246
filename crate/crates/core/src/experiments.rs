//! Synthetic-mix validity experiment and the hyperparameter sweep built on it.
//!
//! A base model is pretrained once on a balanced happy/sad corpus plus
//! completed questionnaires with uniformly drawn answers, so the survey
//! prompt is familiar but no answer is favoured. For every
//! happy fraction and training seed a mix is drawn, an adapter is trained on
//! it, and the survey instrument is scored. A working pipeline makes the
//! mean P("happy") rise with the happy fraction and P("sad") fall.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, LoraAdapter, LoraConfig, Session};
use crate::corpus::{decile_fractions, generate_synthetic_emotion_corpus, pools_by_label, synth_mix, MixSpec, TemplateSet};
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelWeights};
use crate::series::min_max_normalize;
use crate::stats::{pearson, permutation_test, Permutations};
use crate::survey::{csv_header_comment, format_score_csv, score_instrument, Casing, Instrument, ScoreRow, Scoring};
use crate::tokenizer::{pack_chunks, Chunk, FinalChunk};
use crate::trainer::{pretrain_base, train_adapter, TrainConfig, TrainReport};

/// Mixes one 64-bit value into another (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixExperimentConfig {
    pub name: String,
    pub fractions: Vec<f64>,
    pub docs_per_split: usize,
    pub seeds: usize,
    pub seed: u64,
    pub instrument: String,
    /// Pool labels; the first one is the label whose fraction is varied.
    pub labels: [String; 2],
    /// Options whose scores are summarized, in the order of `labels`.
    pub options: [String; 2],
    pub temperature: f64,
    pub permutations: usize,
    pub chunk_len: usize,
    /// Distinct sentences generated per label for the mix pools.
    pub pool_per_label: usize,
    /// Sentences per label in the balanced base-pretraining corpus.
    pub pretrain_per_label: usize,
    /// Completed questionnaire responses added to base pretraining, with
    /// options drawn uniformly so the base favours no answer.
    pub survey_docs: usize,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
}

impl MixExperimentConfig {
    /// The setting the validity check runs at: 11 splits, 5 seeds, 200 steps.
    pub fn desk() -> Self {
        MixExperimentConfig {
            name: "synthetic_mix".into(),
            fractions: decile_fractions(),
            docs_per_split: 400,
            seeds: 5,
            seed: 0,
            instrument: "mood_weekly".into(),
            labels: ["happy".into(), "sad".into()],
            options: ["happy".into(), "sad".into()],
            temperature: 1.0,
            permutations: 10_000,
            chunk_len: 128,
            pool_per_label: 1000,
            pretrain_per_label: 1000,
            survey_docs: 500,
            model: ModelConfig::mix_experiment(),
            lora: LoraConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 4,
                grad_accum_steps: 1,
                max_steps: 200,
                checkpoint_every: 50,
                ..TrainConfig::default()
            },
            pretrain: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                grad_accum_steps: 1,
                max_steps: 800,
                checkpoint_every: 800,
                ..TrainConfig::default()
            },
        }
    }

    /// Smallest meaningful run: 3 splits, 2 seeds, a tiny model.
    pub fn ci() -> Self {
        let mut c = Self::desk();
        c.name = "synthetic_mix_ci".into();
        c.fractions = vec![0.0, 0.5, 1.0];
        c.seeds = 2;
        c.docs_per_split = 120;
        c.pool_per_label = 200;
        c.pretrain_per_label = 200;
        c.survey_docs = 100;
        c.permutations = 1000;
        c.chunk_len = 128;
        c.model = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            max_seq_len: 160,
            ..ModelConfig::mix_experiment()
        };
        c.train.max_steps = 60;
        c.train.checkpoint_every = 20;
        c.pretrain.max_steps = 150;
        c.pretrain.checkpoint_every = 150;
        c
    }

    /// 11 splits by 10 seeds, as in the original study.
    pub fn full() -> Self {
        MixExperimentConfig {
            name: "synthetic_mix_full".into(),
            seeds: 10,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ci" => Some(Self::ci()),
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() || self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("fractions must be non-empty and within [0, 1]"));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("fractions must be strictly increasing"));
        }
        if self.seeds == 0 {
            return Err(Error::config("at least one training seed is required"));
        }
        if self.docs_per_split > self.pool_per_label {
            return Err(Error::config(format!(
                "docs_per_split {} exceeds pool_per_label {}",
                self.docs_per_split, self.pool_per_label
            )));
        }
        if self.chunk_len < 2 || self.chunk_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "chunk_len {} must be within [2, max_seq_len {}]",
                self.chunk_len, self.model.max_seq_len
            )));
        }
        if !(self.temperature > 0.0) || self.permutations == 0 {
            return Err(Error::config("temperature and permutations must be positive"));
        }
        self.model.validate()?;
        self.lora.validate(&self.model)?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.instrument()?;
        Ok(())
    }

    pub fn instrument(&self) -> Result<Instrument> {
        let inst = Instrument::resolve(&self.instrument)?;
        for o in &self.options {
            if !inst.options.contains(o) {
                return Err(Error::config(format!("instrument {} has no option {o:?}", inst.id)));
            }
        }
        Ok(inst)
    }

    pub fn runs(&self) -> usize {
        self.fractions.len() * self.seeds
    }
}

/// What the experiment trains from: the pretrained base and the two label pools.
pub struct MixFixture {
    pub base: ModelWeights,
    pub pretrain_report: TrainReport,
    pub pools: [Vec<crate::corpus::Document>; 2],
}

fn pack<S: AsRef<str>>(texts: &[S], config: &MixExperimentConfig, seed: u64, slice_id: u32) -> Result<Vec<Chunk>> {
    let packed = pack_chunks(texts, config.chunk_len, seed, FinalChunk::Drop, slice_id)?;
    if packed.chunks.is_empty() {
        return Err(Error::data("corpus too small to fill a single chunk"));
    }
    Ok(packed.chunks)
}

/// `n` completed responses with uniformly drawn options (and adjectives).
pub fn survey_responses(instrument: &Instrument, n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adjectives: Vec<String> = match &instrument.scoring {
        Scoring::Direct => Vec::new(),
        Scoring::LikertScale { scales, .. } => scales.values().flatten().cloned().collect(),
    };
    (0..n)
        .map(|_| {
            let adjective = adjectives.choose(&mut rng).map(String::as_str);
            let option = instrument.options.choose(&mut rng).expect("validated instruments have options");
            instrument.response_text(adjective, option)
        })
        .collect()
}

/// Generates the pools and pretrains the base on a balanced, disjointly seeded corpus.
pub fn prepare_fixture(config: &MixExperimentConfig) -> Result<MixFixture> {
    config.validate()?;
    let templates = TemplateSet::builtin_emotions();
    let pool_corpus = generate_synthetic_emotion_corpus(&templates, config.pool_per_label, derive_seed(config.seed, 1))?;
    let mut by_label = pools_by_label(&pool_corpus.documents);
    let mut take = |label: &str| {
        by_label
            .remove(label)
            .ok_or_else(|| Error::config(format!("template set has no label {label:?}")))
    };
    let pools = [take(&config.labels[0])?, take(&config.labels[1])?];

    let pre = generate_synthetic_emotion_corpus(&templates, config.pretrain_per_label, derive_seed(config.seed, 2))?;
    let mut texts: Vec<String> = pre
        .documents
        .iter()
        .filter(|d| d.label.as_ref().is_some_and(|l| config.labels.contains(l)))
        .map(|d| d.text.clone())
        .collect();
    texts.extend(survey_responses(&config.instrument()?, config.survey_docs, derive_seed(config.seed, 6)));
    let chunks = pack(&texts, config, derive_seed(config.seed, 3), 0)?;
    let mut base = init_model(&ModelConfig {
        init_seed: derive_seed(config.seed, 4),
        ..config.model
    })?;
    let pretrain = TrainConfig {
        seed: derive_seed(config.seed, 5),
        ..config.pretrain.clone()
    };
    let pretrain_report = pretrain_base(&mut base, &chunks, &pretrain)?;
    Ok(MixFixture {
        base,
        pretrain_report,
        pools,
    })
}

/// How an instrument is prompted and read out for one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringSetup {
    pub temperature: f64,
    pub prefix: bool,
    pub casing: Casing,
    /// Optimizer step whose checkpoint is scored; `None` scores the final adapter.
    pub checkpoint: Option<usize>,
}

impl ScoringSetup {
    fn instrument(&self, base: &Instrument) -> Instrument {
        let inst = base.clone().with_casing(self.casing);
        if self.prefix {
            inst
        } else {
            inst.with_prefix(None)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRun {
    pub split: usize,
    pub fraction: f64,
    pub seed: u64,
    pub steps: u64,
    /// Summarized options, keyed by their lower-cased name.
    pub scores: BTreeMap<String, f64>,
    pub rows: Vec<ScoreRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStat {
    pub fraction: f64,
    pub option: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionCorrelation {
    pub option: String,
    pub r: f64,
    pub p: f64,
    pub permutations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSummary {
    pub cell: String,
    pub learning_rate: f64,
    pub setup: ScoringSetup,
    pub splits: Vec<SplitStat>,
    pub correlations: Vec<OptionCorrelation>,
    pub runs: Vec<MixRun>,
}

impl MixSummary {
    pub fn correlation(&self, option: &str) -> Option<&OptionCorrelation> {
        self.correlations.iter().find(|c| c.option == option)
    }

    pub fn score_rows(&self) -> usize {
        self.runs.iter().map(|r| r.rows.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub summaries: Vec<MixSummary>,
    /// Adapters trained in this invocation.
    pub adapters_trained: usize,
    /// Adapters read back from an earlier invocation's output directory.
    pub adapters_reused: usize,
    pub pretrain_report: TrainReport,
}

/// A trained (split, seed) job with every checkpoint the scorer may need.
struct TrainedRun {
    split: usize,
    seed: u64,
    checkpoints: Vec<LoraAdapter>,
    final_adapter: LoraAdapter,
    reused: bool,
}

impl TrainedRun {
    fn at(&self, checkpoint: Option<usize>) -> Result<&LoraAdapter> {
        match checkpoint {
            None => Ok(&self.final_adapter),
            Some(step) => self
                .checkpoints
                .iter()
                .find(|c| c.meta.steps == step as u64)
                .ok_or_else(|| Error::config(format!("no checkpoint at step {step}"))),
        }
    }
}

fn run_dir(root: &Path, cell: &str, split: usize, seed: u64) -> PathBuf {
    root.join(cell).join(format!("{split:02}_{seed}"))
}

fn adapter_file(step: u64) -> String {
    format!("adapter_step{step:05}.tala")
}

fn train_run(
    config: &MixExperimentConfig,
    fixture: &MixFixture,
    train: &TrainConfig,
    split: usize,
    seed: u64,
    dir: Option<&Path>,
    force: bool,
) -> Result<TrainedRun> {
    let fraction = config.fractions[split];
    if let (Some(dir), false) = (dir, force) {
        if let Some(run) = load_run(dir, train, split, seed)? {
            return Ok(run);
        }
    }
    let job_seed = derive_seed(derive_seed(config.seed, 100 + split as u64), seed);
    let mix = synth_mix(
        &fixture.pools[0],
        &fixture.pools[1],
        &MixSpec {
            happy_fraction: fraction,
            total_count: config.docs_per_split,
            seed: derive_seed(job_seed, 1),
        },
    )?;
    let chunks = pack(&mix.texts(), config, derive_seed(job_seed, 2), split as u32)?;
    let mut adapter = init_adapter(&fixture.base.config, &config.lora, seed)?;
    adapter.meta.slice_id = split as u32;
    let outcome = train_adapter(
        &fixture.base,
        adapter,
        &chunks,
        &TrainConfig {
            seed: derive_seed(job_seed, 3),
            ..train.clone()
        },
    )?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in &outcome.checkpoints {
            c.save(&dir.join(adapter_file(c.meta.steps)))?;
        }
        outcome.adapter.save(&dir.join(adapter_file(outcome.adapter.meta.steps)))?;
        outcome.report.write_csv(&dir.join("loss.csv"))?;
    }
    Ok(TrainedRun {
        split,
        seed,
        checkpoints: outcome.checkpoints,
        final_adapter: outcome.adapter,
        reused: false,
    })
}

/// Reads back a completed run, or `None` when any expected file is missing.
fn load_run(dir: &Path, train: &TrainConfig, split: usize, seed: u64) -> Result<Option<TrainedRun>> {
    let total = train.max_steps as u64;
    let final_path = dir.join(adapter_file(total));
    if !final_path.exists() {
        return Ok(None);
    }
    let mut checkpoints = Vec::new();
    let every = train.checkpoint_every as u64;
    for step in (every..=total).step_by(every as usize) {
        let p = dir.join(adapter_file(step));
        if !p.exists() {
            return Ok(None);
        }
        checkpoints.push(LoraAdapter::load(&p)?);
    }
    Ok(Some(TrainedRun {
        split,
        seed,
        checkpoints,
        final_adapter: LoraAdapter::load(&final_path)?,
        reused: true,
    }))
}

fn score_run(
    config: &MixExperimentConfig,
    base: &ModelWeights,
    instrument: &Instrument,
    setup: &ScoringSetup,
    run: &TrainedRun,
) -> Result<MixRun> {
    let adapter = run.at(setup.checkpoint)?;
    let mut session = Session::new(base);
    session.swap(Some(std::sync::Arc::new(adapter.clone())))?;
    let inst = setup.instrument(instrument);
    let scores = score_instrument(&session, &inst, setup.temperature)?;
    let picked = config
        .options
        .iter()
        .map(|o| {
            let name = setup.casing.apply(o);
            scores
                .value(&name)
                .map(|v| (o.clone(), v))
                .ok_or_else(|| Error::config(format!("option {name:?} not scored")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MixRun {
        split: run.split,
        fraction: config.fractions[run.split],
        seed: run.seed,
        steps: adapter.meta.steps,
        scores: picked,
        rows: scores.rows(run.split as u32, run.seed),
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-split mean and sample standard deviation, and the correlation of the
/// fractions with the min-max-normalized split means.
pub fn summarize_runs(config: &MixExperimentConfig, runs: &[MixRun]) -> Result<(Vec<SplitStat>, Vec<OptionCorrelation>)> {
    let mut splits = Vec::new();
    let mut correlations = Vec::new();
    for option in &config.options {
        let mut means = Vec::new();
        for (i, &fraction) in config.fractions.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().filter(|r| r.split == i).map(|r| r.scores[option]).collect();
            if vals.is_empty() {
                return Err(Error::data(format!("split {i} has no runs")));
            }
            let (mean, sd) = mean_sd(&vals);
            means.push(mean);
            splits.push(SplitStat {
                fraction,
                option: option.clone(),
                mean,
                sd,
                n: vals.len(),
            });
        }
        if config.fractions.len() >= 2 {
            let normalized = min_max_normalize(&means)?;
            let res = permutation_test(&normalized, &config.fractions, Permutations::Sampled(config.permutations), config.seed)?;
            debug_assert!((res.r - pearson(&normalized, &config.fractions)?).abs() < 1e-15);
            correlations.push(OptionCorrelation {
                option: option.clone(),
                r: res.r,
                p: res.p,
                permutations: res.permutations,
            });
        }
    }
    Ok((splits, correlations))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Checkpoint steps to score; empty scores only the final adapters.
    pub checkpoints: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub temperatures: Vec<f64>,
    pub prefixes: Vec<bool>,
    pub casings: Vec<Casing>,
}

impl SweepConfig {
    /// The single cell matching a plain mix experiment.
    pub fn single(config: &MixExperimentConfig) -> Self {
        SweepConfig {
            checkpoints: Vec::new(),
            learning_rates: vec![config.train.learning_rate],
            temperatures: vec![config.temperature],
            prefixes: vec![true],
            casings: vec![Casing::AsIs],
        }
    }

    pub fn validate(&self, mix: &MixExperimentConfig) -> Result<()> {
        if self.learning_rates.is_empty() || self.temperatures.is_empty() || self.prefixes.is_empty() || self.casings.is_empty() {
            return Err(Error::config("sweep grid has an empty axis"));
        }
        if self.learning_rates.iter().chain(&self.temperatures).any(|v| !(*v > 0.0)) {
            return Err(Error::config("learning rates and temperatures must be positive"));
        }
        for &c in &self.checkpoints {
            if c == 0 || c % mix.train.checkpoint_every != 0 || c > mix.train.max_steps {
                return Err(Error::config(format!(
                    "checkpoint {c} is not a multiple of checkpoint_every {} within max_steps {}",
                    mix.train.checkpoint_every, mix.train.max_steps
                )));
            }
        }
        Ok(())
    }

    fn setups(&self) -> Vec<ScoringSetup> {
        let checkpoints: Vec<Option<usize>> = if self.checkpoints.is_empty() {
            vec![None]
        } else {
            self.checkpoints.iter().map(|&c| Some(c)).collect()
        };
        let mut out = Vec::new();
        for &checkpoint in &checkpoints {
            for &temperature in &self.temperatures {
                for &prefix in &self.prefixes {
                    for &casing in &self.casings {
                        out.push(ScoringSetup {
                            temperature,
                            prefix,
                            casing,
                            checkpoint,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn cells(&self) -> usize {
        self.learning_rates.len() * self.setups().len()
    }
}

fn cell_name(lr: f64, s: &ScoringSetup) -> String {
    let step = s.checkpoint.map(|c| format!("step{c}")).unwrap_or_else(|| "final".into());
    let casing = match s.casing {
        Casing::AsIs => "asis",
        Casing::Lower => "lower",
        Casing::Capitalized => "capitalized",
    };
    format!(
        "lr{lr:e}_{step}_t{}_prefix-{}_{casing}",
        s.temperature,
        if s.prefix { "on" } else { "off" }
    )
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Results root; `runs/<experiment>` below it. Nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for (split, seed) jobs; 0 uses the default pool size.
    pub jobs: usize,
    /// Retrain and rescore even when outputs exist.
    pub force: bool,
}

impl RunOptions {
    fn root(&self, config: &MixExperimentConfig) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("runs").join(&config.name))
    }
}

/// Trains `splits x seeds` adapters per learning rate once and scores every
/// setup of the grid from those adapters and their checkpoints.
pub fn run_sweep(sweep: &SweepConfig, config: &MixExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    config.validate()?;
    sweep.validate(config)?;
    let instrument = config.instrument()?;
    let fixture = prepare_fixture(config)?;
    let root = options.root(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;

    let jobs: Vec<(usize, u64)> = (0..config.fractions.len())
        .flat_map(|s| (0..config.seeds as u64).map(move |seed| (s, seed)))
        .collect();
    let setups = sweep.setups();
    let mut summaries = Vec::new();
    let (mut trained, mut reused) = (0, 0);
    for &lr in &sweep.learning_rates {
        let train = TrainConfig {
            learning_rate: lr,
            ..config.train.clone()
        };
        let lr_dir = root.as_ref().map(|r| r.join(format!("lr{lr:e}")));
        let runs: Vec<TrainedRun> = pool.install(|| {
            jobs.par_iter()
                .map(|&(split, seed)| {
                    let dir = lr_dir.as_ref().map(|d| run_dir(d, "adapters", split, seed));
                    train_run(config, &fixture, &train, split, seed, dir.as_deref(), options.force)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        reused += runs.iter().filter(|r| r.reused).count();
        trained += runs.iter().filter(|r| !r.reused).count();

        for setup in &setups {
            let cell = cell_name(lr, setup);
            let scored: Vec<MixRun> = pool.install(|| {
                runs.par_iter()
                    .map(|r| score_run(config, &fixture.base, &instrument, setup, r))
                    .collect::<Result<Vec<_>>>()
            })?;
            if let Some(root) = &root {
                for run in &scored {
                    let dir = run_dir(root, &cell, run.split, run.seed);
                    write_atomic(&dir.join("scores.csv"), &format_score_csv(&run.rows))?;
                }
            }
            let (splits, correlations) = summarize_runs(config, &scored)?;
            summaries.push(MixSummary {
                cell,
                learning_rate: lr,
                setup: setup.clone(),
                splits,
                correlations,
                runs: scored,
            });
        }
    }
    let outcome = ExperimentOutcome {
        summaries,
        adapters_trained: trained,
        adapters_reused: reused,
        pretrain_report: fixture.pretrain_report,
    };
    if let Some(root) = &root {
        write_atomic(&root.join("summary.csv"), &format_summary_csv(&outcome.summaries))?;
        write_atomic(&root.join("splits.csv"), &format_splits_csv(&outcome.summaries))?;
        write_atomic(&root.join("config.toml"), &config.to_toml())?;
    }
    Ok(outcome)
}

/// One cell: train every (split, seed) adapter and score the final adapters.
pub fn run_mix_experiment(config: &MixExperimentConfig, options: &RunOptions) -> Result<(MixSummary, ExperimentOutcome)> {
    let outcome = run_sweep(&SweepConfig::single(config), config, options)?;
    let summary = outcome.summaries[0].clone();
    Ok((summary, outcome))
}

pub(crate) fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const SUMMARY_COLUMNS: &str = "cell,learning_rate,checkpoint,temperature,prefix,casing,option,r,p,permutations";

pub fn format_summary_csv(summaries: &[MixSummary]) -> String {
    let mut out = csv_header_comment();
    out.push_str(SUMMARY_COLUMNS);
    out.push('\n');
    for s in summaries {
        for c in &s.correlations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:?},{},{},{},{}",
                s.cell,
                s.learning_rate,
                s.setup.checkpoint.map(|c| c.to_string()).unwrap_or_else(|| "final".into()),
                s.setup.temperature,
                s.setup.prefix,
                s.setup.casing,
                c.option,
                c.r,
                c.p,
                c.permutations
            );
        }
    }
    out
}

pub const SPLIT_COLUMNS: &str = "cell,fraction,option,mean,sd,n";

pub fn format_splits_csv(summaries: &[MixSummary]) -> String {
    let mut out = csv_header_comment();
    out.push_str(SPLIT_COLUMNS);
    out.push('\n');
    for s in summaries {
        for p in &s.splits {
            let _ = writeln!(out, "{},{},{},{},{},{}", s.cell, p.fraction, p.option, p.mean, p.sd, p.n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> MixExperimentConfig {
        let mut c = MixExperimentConfig::ci();
        c.fractions = vec![0.0, 1.0];
        c.docs_per_split = 60;
        c.pool_per_label = 60;
        c.pretrain_per_label = 60;
        c.survey_docs = 10;
        c.permutations = 50;
        c.model = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 130,
            ..c.model
        };
        c.chunk_len = 128;
        c.lora.rank = 2;
        c.train.batch_size = 1;
        c.train.max_steps = 4;
        c.train.checkpoint_every = 2;
        c.pretrain.batch_size = 1;
        c.pretrain.max_steps = 2;
        c.pretrain.checkpoint_every = 2;
        c
    }

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in ["ci", "desk", "full"] {
            let c = MixExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(MixExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert_eq!(MixExperimentConfig::full().runs(), 110);
        assert_eq!(MixExperimentConfig::ci().runs(), 6);
    }

    #[test]
    fn two_splits_two_seeds_counts() {
        let c = micro();
        let (summary, outcome) = run_mix_experiment(&c, &RunOptions::default()).unwrap();
        assert_eq!(outcome.adapters_trained, 4);
        assert_eq!(summary.runs.len(), 4);
        for o in &c.options {
            assert_eq!(summary.runs.iter().filter(|r| r.scores.contains_key(o)).count(), 4);
        }
        assert_eq!(summary.splits.len(), 4);
        assert_eq!(summary.correlations.len(), 2);
    }

    #[test]
    fn sweep_reuses_training_and_resumes() {
        let c = micro();
        let sweep = SweepConfig {
            checkpoints: vec![2, 4],
            temperatures: vec![0.5, 2.0],
            ..SweepConfig::single(&c)
        };
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            jobs: 1,
            force: false,
        };
        let first = run_sweep(&sweep, &c, &opts).unwrap();
        assert_eq!(first.summaries.len(), 4);
        assert_eq!((first.adapters_trained, first.adapters_reused), (4, 0));
        let summary = std::fs::read_to_string(dir.path().join("runs").join(&c.name).join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 2 + 4 * 2);

        let second = run_sweep(&sweep, &c, &opts).unwrap();
        assert_eq!((second.adapters_trained, second.adapters_reused), (0, 4));
        assert_eq!(second.summaries, first.summaries);
    }

    #[test]
    fn bad_checkpoint_rejected() {
        let c = micro();
        let sweep = SweepConfig {
            checkpoints: vec![3],
            ..SweepConfig::single(&c)
        };
        assert!(sweep.validate(&c).is_err());
    }
}
