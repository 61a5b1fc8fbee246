use std::path::Path;
use std::process::{Command, Output};

use temporal_adapters::cli::TrainSetup;
use temporal_adapters::{LoraConfig, ModelConfig, TrainConfig};

fn tadapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tadapt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tadapt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_inputs(dir: &Path) {
    let mut lines = String::new();
    for day in 0..42 {
        let date = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(day);
        for k in 0..6 {
            let mood = if (day + k) % 3 == 0 { "sad" } else { "happy" };
            lines.push_str(&format!(
                "{{\"text\":\"day {day} post {k}: today I feel {mood}.\",\"timestamp\":\"{date}T12:00:00Z\",\"label\":\"{mood}\"}}\n"
            ));
        }
    }
    lines.push_str("not json\n{\"text\":\"\",\"timestamp\":\"2020-01-02\"}\n");
    std::fs::write(dir.join("raw.jsonl"), lines).unwrap();
    std::fs::write(dir.join("waves.txt"), "2020-01-14\n2020-01-21\n2020-01-28\n2020-02-04\n").unwrap();
    let mut reference = String::from("wave_date,option,value\n");
    for (date, v) in [("2020-01-14", 0.2), ("2020-01-21", 0.5), ("2020-01-28", 0.4), ("2020-02-04", 0.9)] {
        reference.push_str(&format!("{date},get better,{v}\n{date},get worse,{}\n", 1.0 - v));
    }
    std::fs::write(dir.join("reference.csv"), reference).unwrap();
    let setup = TrainSetup {
        chunk_len: 64,
        model: ModelConfig {
            max_seq_len: 160,
            ..ModelConfig::tiny()
        },
        lora: LoraConfig {
            rank: 2,
            alpha: 4.0,
            ..LoraConfig::default()
        },
        train: TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            grad_accum_steps: 1,
            max_steps: 4,
            checkpoint_every: 4,
            ..TrainConfig::default()
        },
        pretrain: TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            grad_accum_steps: 1,
            max_steps: 4,
            checkpoint_every: 4,
            ..TrainConfig::default()
        },
    };
    std::fs::write(dir.join("train.toml"), toml::to_string(&setup).unwrap()).unwrap();
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);

    let stdout = ok(dir, &["ingest", "--input", "raw.jsonl", "--out", "corpus.jsonl"]);
    assert!(stdout.contains("252 documents kept, 2 skipped"), "{stdout}");
    ok(dir, &["slice", "--corpus", "corpus.jsonl", "--waves", "waves.txt", "--out", "slices"]);
    ok(dir, &["train", "--slices", "slices", "--out", "runs", "--seeds", "2", "--config", "train.toml"]);
    for slice in 0..4 {
        for seed in 0..2 {
            assert!(dir.join(format!("runs/slice_{slice:03}/seed_{seed}/adapter.tala")).exists());
        }
    }
    ok(dir, &["score", "--adapters", "runs", "--instrument", "nhs_expectation", "--out", "scores.csv"]);
    let scores = std::fs::read_to_string(dir.join("scores.csv")).unwrap();
    // Header comment, column row, then slices x seeds x options.
    assert_eq!(scores.lines().count(), 2 + 4 * 2 * 2);

    ok(dir, &["series", "--scores", "scores.csv", "--slices", "slices", "--out", "series.csv"]);
    ok(
        dir,
        &[
            "validate", "--scores", "scores.csv", "--slices", "slices", "--reference", "reference.csv", "--out",
            "validation.csv", "--permutations", "200",
        ],
    );
    let validation = std::fs::read_to_string(dir.join("validation.csv")).unwrap();
    assert!(validation.contains("get better,summary"), "{validation}");
    ok(dir, &["plot", "--series", "series.csv", "--out", "charts"]);
    assert_eq!(std::fs::read_dir(dir.join("charts")).unwrap().count(), 2);

    // A second run leaves existing outputs alone.
    let again = ok(dir, &["series", "--scores", "scores.csv", "--slices", "slices", "--out", "series.csv"]);
    assert!(again.contains("skipping"), "{again}");
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_inputs(dir);
    let stdout = ok(dir, &["--dry-run", "ingest", "--input", "raw.jsonl", "--out", "corpus.jsonl"]);
    assert!(stdout.starts_with("plan: ingest"), "{stdout}");
    assert!(!dir.join("corpus.jsonl").exists());
}

#[test]
fn errors_carry_a_category() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tadapt(tmp.path(), &["ingest", "--input", "nope.jsonl", "--out", "c.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[io]:"));

    let usage = tadapt(tmp.path(), &["score", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).starts_with("error[usage]:"));

    let preset = tadapt(tmp.path(), &["mix-experiment", "--preset", "huge", "--out", "o"]);
    assert!(String::from_utf8_lossy(&preset.stderr).starts_with("error[config]:"));
}

#[test]
fn version_names_the_build() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["-V"]);
    assert!(out.starts_with("temporal-adapters "), "{out}");
}

#[test]
fn reference_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let setup: TrainSetup = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!((setup.lora.rank, setup.chunk_len), (128, 512));
    assert_eq!(setup.train.batch_size * setup.train.grad_accum_steps, 24);
}
