//! Corpus BLEU with several references, and word error rate.
//!
//!     cargo run --example score

use semst::metrics::{bleu, score_report, wer, ScoredCorpus};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hyps = vec![words("the cat sat on the mat"), words("a dog barked")];
    let refs = vec![
        vec![words("the cat sat on the mat"), words("a cat was sitting on the mat")],
        vec![words("the dog barked loudly"), words("a dog was barking")],
    ];
    let scored = ScoredCorpus::new(hyps, refs)?;
    println!("BLEU-4 {:.2}, BLEU-2 {:.2}", bleu(&scored, 4)?, bleu(&scored, 2)?);
    println!("{:?}", score_report(&scored)?);
    println!("WER(\"x y z\" vs \"a\") = {:.1}%", wer(&words("x y z"), &words("a"))?);
    Ok(())
}
