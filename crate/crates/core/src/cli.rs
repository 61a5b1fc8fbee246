//! The `tadapt` command line: batch entry points over the library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, LoraAdapter, LoraConfig, Session, Target};
use crate::corpus::{
    cap_to_smallest, generate_synthetic_emotion_corpus, load_corpus, parse_timestamp, pools_by_label, read_slices,
    read_wave_dates, slice_weekly, synth_mix, write_corpus, write_slices, CorpusSchema, MixSpec, TemplateSet,
};
use crate::error::{Error, Result};
use crate::experiments::{derive_seed, format_splits_csv, run_sweep, write_atomic, MixExperimentConfig, RunOptions, SweepConfig};
use crate::model::{init_model, ModelConfig, ModelWeights};
use crate::series::{band_svg, format_series_csv, read_series_csv, seed_aggregate, AffectSeries, PipelineOrder};
use crate::stats::{format_validation_csv, read_reference_csv, validate, ValidateConfig};
use crate::survey::{format_score_csv, read_score_csv, score_instrument, Casing, Instrument};
use crate::tokenizer::{pack_chunks, FinalChunk};
use crate::trainer::{pretrain_base, train_adapter, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "tadapt", about = "Time-sliced LoRA adapters and survey-answer extraction", disable_version_flag = true)]
pub struct Cli {
    /// Print the build identifier and exit.
    #[arg(short = 'V', long)]
    pub version: bool,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for independent jobs (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Print the resolved plan and exit without side effects.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Redo work whose outputs already exist.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a JSON-lines corpus, skipping malformed records.
    Ingest(IngestArgs),
    /// Cut a corpus into windows ending at each wave date.
    Slice(SliceArgs),
    /// Generate labeled template sentences.
    SynthGen(SynthGenArgs),
    /// Draw a two-label mix at a given fraction.
    SynthMix(SynthMixArgs),
    /// Train adapters for every slice and seed.
    Train(TrainArgs),
    /// Score an instrument with every trained adapter.
    Score(ScoreArgs),
    /// Smooth, normalize and band score series across seeds.
    Series(SeriesArgs),
    /// Correlate series with reference survey data.
    Validate(ValidateArgs),
    /// Run the synthetic-mix validity experiment.
    MixExperiment(MixArgs),
    /// Run a hyperparameter grid over the synthetic-mix experiment.
    Sweep(SweepArgs),
    /// Draw one SVG per series option.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "text")]
    pub text_field: String,
    #[arg(long, default_value = "timestamp")]
    pub timestamp_field: String,
    #[arg(long, default_value = "label")]
    pub label_field: String,
    /// Earliest accepted timestamp (inclusive).
    #[arg(long)]
    pub from: Option<String>,
    /// Latest accepted timestamp (exclusive).
    #[arg(long)]
    pub to: Option<String>,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One ISO date per line.
    #[arg(long)]
    pub waves: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub window_days: u32,
    /// Subsample every slice to the smallest non-empty one.
    #[arg(long)]
    pub cap: bool,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub per_label: usize,
    /// Template set TOML; the built-in happy/sad set otherwise.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthMixArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of documents drawn from the first label.
    #[arg(long)]
    pub fraction: f64,
    #[arg(long)]
    pub count: usize,
    #[arg(long, num_args = 2, value_delimiter = ',', default_values = ["happy", "sad"])]
    pub labels: Vec<String>,
}

/// Model, adapter and optimizer settings for `train`, readable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSetup {
    pub chunk_len: usize,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    /// Used only when no base model is supplied.
    pub pretrain: TrainConfig,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup {
            chunk_len: 512,
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                grad_accum_steps: 1,
                max_steps: 500,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub slices: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Adapters per slice.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Pretrained base; one is initialized and pretrained on all slices otherwise.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// TOML with `chunk_len`, `model`, `lora`, `train` and `pretrain` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<Target>>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Output directory of `train`.
    #[arg(long)]
    pub adapters: PathBuf,
    /// Built-in instrument id or a TOML file.
    #[arg(long, default_value = "mood_weekly")]
    pub instrument: String,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Base model; `<adapters>/base.tamw` otherwise.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub no_prefix: bool,
    #[arg(long, value_enum, default_value = "as-is")]
    pub casing: Casing,
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Slice directory, for end dates.
    #[arg(long)]
    pub slices: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "smooth-then-normalize")]
    pub pipeline_order: PipelineOrder,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub slices: PathBuf,
    /// CSV with `wave_date,option,value`.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub permutations: usize,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "smooth-then-normalize")]
    pub pipeline_order: PipelineOrder,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// `ci`, `desk` or `full`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Experiment TOML; overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub mix: MixArgs,
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub learning_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    /// `on`, `off` or both.
    #[arg(long, value_delimiter = ',', default_values = ["on"])]
    pub prefix: Vec<String>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["as-is"])]
    pub casing: Vec<Casing>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments and runs, printing `error[category]: message` on failure.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.version {
        println!("{}", crate::BUILD_ID);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::config("no command given; see --help"));
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Ingest(a) => ingest(cli, a),
        Command::Slice(a) => slice(cli, a),
        Command::SynthGen(a) => synth_gen(cli, a),
        Command::SynthMix(a) => synth_mix_cmd(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Score(a) => score(cli, a),
        Command::Series(a) => series(cli, a),
        Command::Validate(a) => validate_cmd(cli, a),
        Command::MixExperiment(a) => mix_experiment(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Plot(a) => plot(cli, a),
    })
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
        })
    }
}

/// True when `out` exists and should be left alone.
fn done(cli: &Cli, out: &Path) -> bool {
    let skip = out.exists() && !cli.force;
    if skip {
        println!("{} exists; skipping (use --force to redo)", out.display());
    }
    skip
}

fn plan(cli: &Cli, what: &str, fields: &[(&str, String)]) -> bool {
    if cli.dry_run {
        println!("plan: {what}");
        for (k, v) in fields {
            println!("  {k}: {v}");
        }
    }
    cli.dry_run
}

fn parse_bound(s: &Option<String>, default: DateTime<Utc>) -> Result<DateTime<Utc>> {
    match s {
        None => Ok(default),
        Some(s) => parse_timestamp(s).ok_or_else(|| Error::config(format!("cannot parse timestamp {s:?}"))),
    }
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    require(&a.input)?;
    let bounds = if a.from.is_some() || a.to.is_some() {
        Some((
            parse_bound(&a.from, DateTime::<Utc>::MIN_UTC)?,
            parse_bound(&a.to, DateTime::<Utc>::MAX_UTC)?,
        ))
    } else {
        None
    };
    let schema = CorpusSchema {
        text_field: a.text_field.clone(),
        timestamp_field: a.timestamp_field.clone(),
        label_field: Some(a.label_field.clone()),
        bounds,
    };
    if plan(cli, "ingest", &[("input", a.input.display().to_string()), ("out", a.out.display().to_string())])
        || done(cli, &a.out)
    {
        return Ok(());
    }
    let corpus = load_corpus(&a.input, &schema)?;
    write_corpus(&a.out, &corpus.documents)?;
    println!("{} documents kept, {} skipped", corpus.len(), corpus.skipped);
    Ok(())
}

fn slice(cli: &Cli, a: &SliceArgs) -> Result<()> {
    require(&a.corpus)?;
    require(&a.waves)?;
    let waves = read_wave_dates(&a.waves)?;
    if plan(
        cli,
        "slice",
        &[
            ("waves", waves.len().to_string()),
            ("window_days", a.window_days.to_string()),
            ("cap", a.cap.to_string()),
        ],
    ) || done(cli, &a.out.join("slices.json"))
    {
        return Ok(());
    }
    let corpus = load_corpus(&a.corpus, &CorpusSchema::default())?;
    let mut slices = slice_weekly(&corpus, &waves, a.window_days)?;
    if a.cap {
        slices = cap_to_smallest(&slices, cli.seed);
    }
    write_slices(&a.out, &slices)?;
    for s in &slices {
        println!("slice {:03} ending {}: {} documents", s.id, s.end_date, s.documents.len());
    }
    Ok(())
}

fn synth_gen(cli: &Cli, a: &SynthGenArgs) -> Result<()> {
    let templates = match &a.templates {
        Some(p) => TemplateSet::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TemplateSet::builtin_emotions(),
    };
    let labels: Vec<&String> = templates.labels.keys().collect();
    if plan(cli, "synth-gen", &[("labels", format!("{labels:?}")), ("per_label", a.per_label.to_string())])
        || done(cli, &a.out)
    {
        return Ok(());
    }
    let corpus = generate_synthetic_emotion_corpus(&templates, a.per_label, cli.seed)?;
    write_corpus(&a.out, &corpus.documents)?;
    println!("{} documents written", corpus.len());
    Ok(())
}

fn synth_mix_cmd(cli: &Cli, a: &SynthMixArgs) -> Result<()> {
    require(&a.corpus)?;
    let spec = MixSpec {
        happy_fraction: a.fraction,
        total_count: a.count,
        seed: cli.seed,
    };
    let (na, nb) = spec.counts();
    if plan(cli, "synth-mix", &[(a.labels[0].as_str(), na.to_string()), (a.labels[1].as_str(), nb.to_string())])
        || done(cli, &a.out)
    {
        return Ok(());
    }
    let corpus = load_corpus(&a.corpus, &CorpusSchema::default())?;
    let pools = pools_by_label(&corpus.documents);
    let pool = |l: &String| pools.get(l).ok_or_else(|| Error::data(format!("corpus has no label {l:?}")));
    let mix = synth_mix(pool(&a.labels[0])?, pool(&a.labels[1])?, &spec)?;
    write_corpus(&a.out, &mix.documents)?;
    println!("{na} {} + {nb} {} documents written", a.labels[0], a.labels[1]);
    Ok(())
}

fn train_setup(a: &TrainArgs) -> Result<TrainSetup> {
    let mut s = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainSetup::default(),
    };
    if let Some(v) = a.steps {
        s.train.max_steps = v;
        s.train.checkpoint_every = s.train.checkpoint_every.min(v.max(1));
    }
    if let Some(v) = a.learning_rate {
        s.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = a.grad_accum {
        s.train.grad_accum_steps = v;
    }
    if let Some(v) = a.rank {
        s.lora.rank = v;
    }
    if let Some(v) = a.alpha {
        s.lora.alpha = v;
    }
    if let Some(v) = &a.targets {
        s.lora.targets = v.clone();
    }
    if let Some(v) = a.chunk_len {
        s.chunk_len = v;
    }
    if let Some(v) = a.pretrain_steps {
        s.pretrain.max_steps = v;
        s.pretrain.checkpoint_every = v.max(1);
    }
    Ok(s)
}

fn adapter_path(out: &Path, slice_id: u32, seed: u64) -> PathBuf {
    out.join(format!("slice_{slice_id:03}")).join(format!("seed_{seed}")).join("adapter.tala")
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    require(&a.slices)?;
    let setup = train_setup(a)?;
    let slices = read_slices(&a.slices)?;
    let base_path = a.base.clone().unwrap_or_else(|| a.out.join("base.tamw"));
    let model = match &a.base {
        Some(p) => ModelWeights::load(p)?.config,
        None => setup.model,
    };
    setup.train.validate()?;
    setup.lora.validate(&model)?;
    if setup.chunk_len > model.max_seq_len {
        return Err(Error::config(format!(
            "chunk_len {} exceeds the model's max_seq_len {}",
            setup.chunk_len, model.max_seq_len
        )));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| cli.seed + k).collect();
    let jobs: Vec<(u32, u64)> = slices
        .iter()
        .filter(|s| !s.is_empty())
        .flat_map(|s| seeds.iter().map(move |&k| (s.id, k)))
        .collect();
    if plan(
        cli,
        "train",
        &[
            ("slices", slices.len().to_string()),
            ("adapters", jobs.len().to_string()),
            ("steps", setup.train.max_steps.to_string()),
            ("base", base_path.display().to_string()),
            ("setup", toml::to_string(&setup).unwrap_or_default().replace('\n', "; ")),
        ],
    ) {
        return Ok(());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let chunked: BTreeMap<u32, Vec<crate::tokenizer::Chunk>> = slices
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let packed = pack_chunks(&s.texts(), setup.chunk_len, derive_seed(cli.seed, s.id as u64), FinalChunk::Pad, s.id)?;
            Ok((s.id, packed.chunks))
        })
        .collect::<Result<_>>()?;

    let base = if base_path.exists() && (a.base.is_some() || !cli.force) {
        ModelWeights::load(&base_path)?
    } else {
        let mut w = init_model(&ModelConfig {
            init_seed: cli.seed,
            ..setup.model
        })?;
        let all: Vec<_> = chunked.values().flatten().cloned().collect();
        let report = pretrain_base(&mut w, &all, &setup.pretrain)?;
        println!(
            "pretrained base for {} steps, loss {:.3} -> {:.3}",
            report.steps,
            report.head_mean(20),
            report.tail_mean(20)
        );
        w.save(&base_path)?;
        w
    };
    let results: Vec<Result<bool>> = jobs
        .par_iter()
        .map(|&(slice_id, seed)| {
            let path = adapter_path(&a.out, slice_id, seed);
            if path.exists() && !cli.force {
                return Ok(false);
            }
            let mut adapter = init_adapter(&base.config, &setup.lora, seed)?;
            adapter.meta.slice_id = slice_id;
            let config = TrainConfig {
                seed: derive_seed(seed, slice_id as u64),
                ..setup.train.clone()
            };
            let outcome = train_adapter(&base, adapter, &chunked[&slice_id], &config)?;
            let dir = path.parent().expect("adapter path has a parent");
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            outcome.adapter.save(&path)?;
            outcome.report.write_csv(&dir.join("loss.csv"))?;
            Ok(true)
        })
        .collect();
    let mut trained = 0;
    for r in results {
        trained += r? as usize;
    }
    println!("{trained} adapters trained, {} already present", jobs.len() - trained);
    Ok(())
}

/// `(slice, seed, path)` for every adapter below a `train` output directory.
fn find_adapters(dir: &Path) -> Result<Vec<(u32, u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(slice_id) = name.strip_prefix("slice_").and_then(|s| s.parse::<u32>().ok()) else {
            continue;
        };
        let sub = e.path();
        for s in std::fs::read_dir(&sub).map_err(|err| Error::io(&sub, err))? {
            let s = s.map_err(|err| Error::io(&sub, err))?;
            let sname = s.file_name().to_string_lossy().into_owned();
            let Some(seed) = sname.strip_prefix("seed_").and_then(|v| v.parse::<u64>().ok()) else {
                continue;
            };
            let p = s.path().join("adapter.tala");
            if p.exists() {
                out.push((slice_id, seed, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    require(&a.adapters)?;
    let base_path = a.base.clone().unwrap_or_else(|| a.adapters.join("base.tamw"));
    require(&base_path)?;
    let mut instrument = Instrument::resolve(&a.instrument)?.with_casing(a.casing);
    if a.no_prefix {
        instrument.prefix = None;
    }
    let adapters = find_adapters(&a.adapters)?;
    if adapters.is_empty() {
        return Err(Error::data(format!("no adapters below {}", a.adapters.display())));
    }
    if plan(
        cli,
        "score",
        &[
            ("instrument", instrument.id.clone()),
            ("adapters", adapters.len().to_string()),
            ("temperature", a.temperature.to_string()),
        ],
    ) || done(cli, &a.out)
    {
        return Ok(());
    }
    let base = ModelWeights::load(&base_path)?;
    let rows: Vec<_> = adapters
        .par_iter()
        .map(|(slice_id, seed, path)| {
            let adapter = LoraAdapter::load(path)?;
            let session = Session::with_adapter(&base, Some(Arc::new(adapter)))?;
            Ok(score_instrument(&session, &instrument, a.temperature)?.rows(*slice_id, *seed))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_atomic(&a.out, &format_score_csv(&rows))?;
    println!("{} rows from {} adapters", rows.len(), adapters.len());
    Ok(())
}

fn slice_dates(dir: &Path) -> Result<BTreeMap<u32, NaiveDate>> {
    Ok(read_slices(dir)?.into_iter().map(|s| (s.id, s.end_date)).collect())
}

fn load_series(scores: &Path, slices: &Path) -> Result<Vec<AffectSeries>> {
    require(scores)?;
    require(slices)?;
    AffectSeries::from_score_rows(&read_score_csv(scores)?, &slice_dates(slices)?)
}

fn series(cli: &Cli, a: &SeriesArgs) -> Result<()> {
    let all = load_series(&a.scores, &a.slices)?;
    if plan(
        cli,
        "series",
        &[
            ("series", all.len().to_string()),
            ("window", a.window.to_string()),
            ("order", format!("{:?}", a.pipeline_order)),
        ],
    ) || done(cli, &a.out)
    {
        return Ok(());
    }
    let bands = all
        .iter()
        .map(|s| seed_aggregate(s, a.window, a.pipeline_order))
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&a.out, &format_series_csv(&bands))?;
    println!("{} series written", bands.len());
    Ok(())
}

fn validate_cmd(cli: &Cli, a: &ValidateArgs) -> Result<()> {
    let all = load_series(&a.scores, &a.slices)?;
    require(&a.reference)?;
    let references = read_reference_csv(&a.reference)?;
    let config = ValidateConfig {
        window: a.window,
        order: a.pipeline_order,
        permutations: a.permutations,
        seed: cli.seed,
    };
    if plan(
        cli,
        "validate",
        &[
            ("options with reference", references.len().to_string()),
            ("permutations", a.permutations.to_string()),
        ],
    ) || done(cli, &a.out)
    {
        return Ok(());
    }
    let table = validate(&all, &references, &config)?;
    write_atomic(&a.out, &format_validation_csv(&table))?;
    println!("{:<14} {:>8} {:>8} {:>10}", "option", "r_min", "r_max", "worst_p");
    for s in &table.summaries {
        println!("{:<14} {:>8.3} {:>8.3} {:>10.5} {}", s.option, s.r_min, s.r_max, s.worst_p, s.stars());
    }
    Ok(())
}

fn mix_config(cli: &Cli, a: &MixArgs) -> Result<MixExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => MixExperimentConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => MixExperimentConfig::preset(&a.preset)
            .ok_or_else(|| Error::config(format!("unknown preset {:?}; use ci, desk or full", a.preset)))?,
    };
    c.seed = cli.seed;
    if let Some(s) = a.seeds {
        c.seeds = s;
    }
    if let Some(s) = a.steps {
        c.train.max_steps = s;
        c.train.checkpoint_every = c.train.checkpoint_every.min(s.max(1));
    }
    c.validate()?;
    Ok(c)
}

fn report_sweep(cli: &Cli, sweep: &SweepConfig, config: &MixExperimentConfig, out: &Path) -> Result<()> {
    let summary = out.join("runs").join(&config.name).join("summary.csv");
    if plan(
        cli,
        "mix experiment",
        &[
            ("name", config.name.clone()),
            ("splits", config.fractions.len().to_string()),
            ("seeds", config.seeds.to_string()),
            ("adapters", (config.runs() * sweep.learning_rates.len()).to_string()),
            ("cells", sweep.cells().to_string()),
            ("summary", summary.display().to_string()),
        ],
    ) || done(cli, &summary)
    {
        return Ok(());
    }
    let outcome = run_sweep(
        sweep,
        config,
        &RunOptions {
            out_dir: Some(out.to_path_buf()),
            jobs: cli.jobs,
            force: cli.force,
        },
    )?;
    print!("{}", format_splits_csv(&outcome.summaries).lines().skip(1).collect::<Vec<_>>().join("\n"));
    println!();
    for s in &outcome.summaries {
        for c in &s.correlations {
            println!("{}  {}: r = {:+.3}, p = {:.5}", s.cell, c.option, c.r, c.p);
        }
    }
    println!(
        "{} adapters trained, {} reused",
        outcome.adapters_trained, outcome.adapters_reused
    );
    Ok(())
}

fn mix_experiment(cli: &Cli, a: &MixArgs) -> Result<()> {
    let config = mix_config(cli, a)?;
    report_sweep(cli, &SweepConfig::single(&config), &config, &a.out)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let config = mix_config(cli, &a.mix)?;
    let single = SweepConfig::single(&config);
    let prefixes = a
        .prefix
        .iter()
        .map(|p| match p.as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(Error::config(format!("prefix must be on or off, got {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let sweep = SweepConfig {
        checkpoints: a.checkpoints.clone(),
        learning_rates: if a.learning_rates.is_empty() { single.learning_rates } else { a.learning_rates.clone() },
        temperatures: if a.temperatures.is_empty() { single.temperatures } else { a.temperatures.clone() },
        prefixes,
        casings: a.casing.clone(),
    };
    sweep.validate(&config)?;
    report_sweep(cli, &sweep, &config, &a.mix.out)
}

fn plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    require(&a.series)?;
    let bands = read_series_csv(&a.series)?;
    if plan(cli, "plot", &[("charts", bands.len().to_string()), ("out", a.out.display().to_string())]) {
        return Ok(());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for b in &bands {
        let name: String = format!("{}_{}", b.instrument, b.option)
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
            .collect();
        let path = a.out.join(format!("{name}.svg"));
        if done(cli, &path) {
            continue;
        }
        write_atomic(&path, &band_svg(b))?;
    }
    println!("{} charts in {}", bands.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["tadapt", "ingest", "--input", "a", "--out", "b"],
            vec!["tadapt", "slice", "--corpus", "a", "--waves", "w", "--out", "o"],
            vec!["tadapt", "synth-gen", "--out", "o"],
            vec!["tadapt", "synth-mix", "--corpus", "c", "--out", "o", "--fraction", "0.3", "--count", "10"],
            vec!["tadapt", "train", "--slices", "s", "--out", "o", "--seeds", "3", "--steps", "350"],
            vec!["tadapt", "score", "--adapters", "a", "--out", "o", "--instrument", "mood_weekly"],
            vec!["tadapt", "series", "--scores", "s", "--slices", "d", "--out", "o"],
            vec!["tadapt", "validate", "--scores", "s", "--slices", "d", "--reference", "r", "--out", "o"],
            vec!["tadapt", "mix-experiment", "--out", "o", "--preset", "ci"],
            vec!["tadapt", "sweep", "--out", "o", "--checkpoints", "50,100,150", "--prefix", "on,off"],
            vec!["tadapt", "plot", "--series", "s", "--out", "o"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["tadapt", "train", "--bogus"]).is_err());
    }

    #[test]
    fn flag_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("setup.toml");
        let mut setup = TrainSetup::default();
        setup.train.learning_rate = 0.01;
        setup.lora.rank = 4;
        std::fs::write(&p, toml::to_string(&setup).unwrap()).unwrap();
        let cli = Cli::try_parse_from([
            "tadapt", "train", "--slices", "s", "--out", "o", "--config", p.to_str().unwrap(), "--rank", "2",
        ])
        .unwrap();
        let Some(Command::Train(a)) = &cli.command else { panic!() };
        let s = train_setup(a).unwrap();
        assert_eq!((s.lora.rank, s.train.learning_rate), (2, 0.01));
    }
}
