//! Generate labeled happy/sad sentences and draw mixes at every decile.

use temporal_adapters::corpus::{
    decile_fractions, generate_synthetic_emotion_corpus, label_shares, pools_by_label, synth_mix, MixSpec, TemplateSet,
};

fn main() -> temporal_adapters::Result<()> {
    let corpus = generate_synthetic_emotion_corpus(&TemplateSet::builtin_emotions(), 500, 7)?;
    for d in corpus.documents.iter().take(4) {
        println!("[{}] {}", d.label.as_deref().unwrap_or("-"), d.text);
    }
    let pools = pools_by_label(&corpus.documents);
    println!("fraction  happy  sad    share(happy)");
    for f in decile_fractions() {
        let spec = MixSpec {
            happy_fraction: f,
            total_count: 200,
            seed: 1,
        };
        let mix = synth_mix(&pools["happy"], &pools["sad"], &spec)?;
        let shares = label_shares(&mix.documents)?;
        let (h, s) = spec.counts();
        println!("{f:>8.1}  {h:>5}  {s:>4}   {:.3}", shares.get("happy").copied().unwrap_or(0.0));
    }
    Ok(())
}
