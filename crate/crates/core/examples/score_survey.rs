//! Score the built-in instruments: per-option probabilities for direct
//! questions and combined per-emotion ratings for the adjective scale.

use temporal_adapters::survey::{build_prompts, format_score_csv, Instrument};
use temporal_adapters::{init_model, score_instrument, ModelConfig, Session};

fn main() -> temporal_adapters::Result<()> {
    let base = init_model(&ModelConfig::mix_experiment())?;
    let session = Session::new(&base);

    let mood = Instrument::mood_weekly();
    let p = &build_prompts(&mood)?[0];
    println!("prompt has {} tokens; option tokens at {:?}", p.tokens.len(), p.span);

    for id in Instrument::builtin_ids() {
        let inst = Instrument::builtin(id).expect("built-in");
        let scores = score_instrument(&session, &inst, 1.0)?;
        println!("\n{id}");
        if scores.emotions.is_empty() {
            for o in &scores.options {
                println!("  {:<12} p = {:.3e}  log p = {:.3}", o.option, o.probability, o.log_prob);
            }
        } else {
            for (emotion, v) in &scores.emotions {
                println!("  {emotion:<12} rating = {v:.3}");
            }
        }
        if id == "nhs_expectation" {
            print!("\n{}", format_score_csv(&scores.rows(0, 0)));
        }
    }

    // Instruments are plain TOML, so new questions need no code.
    let custom = Instrument::from_toml(
        r#"
id = "weekend"
question = "How was your weekend?"
prefix = "It was"
options = ["great", "fine", "awful"]
[scoring]
kind = "direct"
"#,
    )?;
    let s = score_instrument(&session, &custom, 0.25)?;
    println!("\nweekend at temperature 0.25: {:?}", s.options.iter().map(|o| o.probability).collect::<Vec<_>>());
    Ok(())
}
