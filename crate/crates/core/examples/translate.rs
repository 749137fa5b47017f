//! Train a cosine-softmax model briefly, then recognize and translate a few
//! test utterances with beam search.
//!
//!     cargo run --release --example translate [steps]

use semst::data::{synth_corpus, BpeModel, SynthSpec};
use semst::model::{Model, ModelConfig, Objective};
use semst::training::{detokenize, examples, train, DevSet, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map_or(Ok(3000), |s| s.parse())?;
    let spec = SynthSpec { train_size: 500, dev_size: 20, test_size: 5, ..SynthSpec::default() };
    let out = synth_corpus(&spec)?;
    let bpe = BpeModel::train(&out.train.target_text(), 200)?;
    let cfg = ModelConfig { objective: Objective::Cs, ..ModelConfig::default() };
    let mut model = Model::new(cfg, out.embeddings.clone(), bpe.vocab()?, 1)?;
    let ex = examples(&out.train, &model, &bpe);
    let tc = TrainConfig { steps, ckpt_every: steps, log_every: 0, ..TrainConfig::default() };
    let run = train(&mut model, &ex, &DevSet::from_corpus(&out.dev), &tc)?;
    println!("dev BLEU after {steps} steps: {:.2}", run.checkpoints.last().and_then(|c| c.dev_bleu).unwrap_or(0.0));

    for u in &out.test.utterances {
        let enc = model.encode(&u.frames)?;
        let src = model.decode_source(&enc, None)?;
        let heard = model.source_vocab().decode(&model.recognize(&src)?);
        let hyp = model.translate(&u.frames, 4, model.config.max_tgt_len)?;
        println!("\nsource     {}", u.source.join(" "));
        println!("recognized {}", heard.join(" "));
        println!("reference  {}", u.targets[0].join(" "));
        println!("translated {}  (score {:.3})", detokenize(&model, &hyp.tokens).join(" "), hyp.score);
    }
    Ok(())
}
