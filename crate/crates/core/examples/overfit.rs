//! Train each variant on 16 noise-free sentences and report the
//! teacher-forced loss.
//!
//!     cargo run --release --example overfit [steps]

use semst::data::{synth_corpus, BpeModel, SynthSpec};
use semst::model::{Model, ModelConfig, Objective};
use semst::training::{evaluate, examples, train, DevSet, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map_or(Ok(2000), |s| s.parse())?;
    let spec = SynthSpec { train_size: 16, dev_size: 1, test_size: 1, noise_std: 0.0, ..SynthSpec::default() };
    let out = synth_corpus(&spec)?;
    let bpe = BpeModel::train(&out.train.target_text(), 200)?;
    for obj in Objective::ALL {
        let cfg = ModelConfig { objective: obj, ..ModelConfig::default() };
        let mut model = Model::new(cfg, out.embeddings.clone(), bpe.vocab()?, 1)?;
        let ex = examples(&out.train, &model, &bpe);
        let tc = TrainConfig { steps, ckpt_every: 0, log_every: 0, ..TrainConfig::default() };
        let run = train(&mut model, &ex, &DevSet::default(), &tc)?;
        let ev = evaluate(&model, &ex, 16)?;
        print!("{obj}: first loss {:.3}, per-token NLL {:.4}", run.losses[0], ev.target_nll_per_token);
        match ev.source_cos {
            Some(c) => println!(", mean cosine {c:.4}"),
            None => println!(),
        }
    }
    Ok(())
}
