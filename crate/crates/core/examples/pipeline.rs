//! The full synth → BPE → train → translate → score → analyze chain for all
//! four variants on a reduced corpus, writing artifacts to a directory.
//!
//!     cargo run --release --example pipeline [out_dir] [steps]

use semst::data::SynthSpec;
use semst::pipeline::{run_pipeline, RunConfig};
use semst::training::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ST_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "pipeline_out".into());
    let steps = args.next().map_or(Ok(1500), |s| s.parse())?;
    let mut cfg = RunConfig::default();
    cfg.data = SynthSpec { train_size: 400, dev_size: 40, test_size: 100, ..cfg.data };
    cfg.train = TrainConfig { steps, ckpt_every: 500, ..cfg.train };
    let report = run_pipeline(&cfg, Some(out.as_ref()))?;
    print!("{}", report.table());
    println!("artifacts written to {out}/");
    Ok(())
}
