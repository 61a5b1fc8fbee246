//! Pretrain a small base model, train one adapter on a week of text with the
//! base frozen, save it, and hot-swap it into an inference session.

use std::sync::Arc;

use temporal_adapters::corpus::{generate_synthetic_emotion_corpus, TemplateSet};
use temporal_adapters::tokenizer::{pack_chunks, FinalChunk};
use temporal_adapters::trainer::pretrain_base;
use temporal_adapters::{init_adapter, init_model, train_adapter, LoraAdapter, LoraConfig, ModelConfig, Session, TrainConfig};

fn main() -> temporal_adapters::Result<()> {
    let corpus = generate_synthetic_emotion_corpus(&TemplateSet::builtin_emotions(), 300, 3)?;
    let packed = pack_chunks(&corpus.texts(), 128, 0, FinalChunk::Drop, 0)?;
    println!("{} chunks of 128 tokens ({} tokens dropped)", packed.chunks.len(), packed.dropped_tokens);

    let config = ModelConfig::mix_experiment();
    let mut base = init_model(&config)?;
    let pre = pretrain_base(
        &mut base,
        &packed.chunks,
        &TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            grad_accum_steps: 1,
            max_steps: 200,
            checkpoint_every: 200,
            ..TrainConfig::default()
        },
    )?;
    println!("base loss {:.3} -> {:.3}", pre.head_mean(10), pre.tail_mean(10));

    let before = base.checksum();
    let adapter = init_adapter(&config, &LoraConfig::default(), 11)?;
    println!("adapter parameters: {} (base: {})", adapter.parameter_count(), base.parameter_count());
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        grad_accum_steps: 1,
        max_steps: 100,
        checkpoint_every: 50,
        ..TrainConfig::default()
    };
    let outcome = train_adapter(&base, adapter, &packed.chunks, &train)?;
    println!(
        "adapter loss {:.3} -> {:.3} over {} steps, {} checkpoints",
        outcome.report.head_mean(10),
        outcome.report.tail_mean(10),
        outcome.report.steps,
        outcome.checkpoints.len()
    );
    assert_eq!(before, base.checksum(), "base weights must stay frozen");

    let dir = std::env::temp_dir().join("temporal-adapters-example");
    std::fs::create_dir_all(&dir).map_err(|e| temporal_adapters::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("week.tala");
    outcome.adapter.save(&path)?;
    let loaded = LoraAdapter::load(&path)?;

    let mut session = Session::new(&base);
    let prompt = temporal_adapters::tokenizer::frame("I felt");
    let plain = session.forward(&prompt)?;
    session.swap(Some(Arc::new(loaded)))?;
    let adapted = session.forward(&prompt)?;
    println!("max logit change with the adapter swapped in: {:.4}", plain.max_abs_diff(&adapted));
    Ok(())
}
