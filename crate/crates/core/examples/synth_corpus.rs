//! Generate a small synthetic corpus, learn BPE on its targets and show a
//! few utterances.
//!
//!     cargo run --example synth_corpus

use semst::data::{synth_corpus, BpeModel, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec { train_size: 200, dev_size: 20, test_size: 20, ..SynthSpec::default() };
    let out = synth_corpus(&spec)?;
    let bpe = BpeModel::train(&out.train.target_text(), 60)?;
    println!(
        "{} train utterances, {} embedding rows of width {}, {} BPE merges{}",
        out.train.len(),
        out.embeddings.len(),
        out.embeddings.dim(),
        bpe.merges().len(),
        if bpe.exhausted { " (exhausted)" } else { "" }
    );
    for u in out.dev.utterances.iter().take(3) {
        println!("\n{} frames: {}", u.frames.rows(), u.source.join(" "));
        for (i, r) in u.targets.iter().enumerate() {
            println!("  ref {i}: {}   [{}]", r.join(" "), bpe.apply(&r.join(" ")).join(" "));
        }
    }
    Ok(())
}
