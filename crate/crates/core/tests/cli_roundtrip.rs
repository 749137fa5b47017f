use std::path::Path;

use semst::cli::run;
use semst::data::SynthSpec;
use semst::pipeline::RunConfig;
use semst::training::TrainConfig;

fn write_config(path: &Path, seed: u64) {
    let mut cfg = RunConfig::default();
    cfg.data = SynthSpec { train_size: 40, dev_size: 4, test_size: 30, ..cfg.data };
    cfg.train = TrainConfig { steps: 20, ckpt_every: 10, log_every: 0, ..cfg.train };
    cfg.reseed(seed);
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["semst", "--quiet"];
    argv.extend_from_slice(args);
    run(argv)
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    write_config(&tmp.path().join("cfg.json"), 3);
    write_config(&tmp.path().join("other.json"), 4);

    assert_eq!(cli(&["synth", "--config", &p("cfg.json"), "--out", &p("data")]), 0);
    for f in ["manifest.json", "embeddings.vec", "train/frames.bin", "test/tgt.3.txt"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f} missing");
    }
    assert_eq!(cli(&["bpe", "--config", &p("cfg.json"), "--data", &p("data")]), 0);
    // A corpus made under another config is refused unless forced.
    assert_eq!(cli(&["bpe", "--config", &p("other.json"), "--data", &p("data"), "--out", &p("b.json")]), 1);
    assert_eq!(cli(&["bpe", "--config", &p("other.json"), "--data", &p("data"), "--out", &p("b.json"), "--force"]), 0);

    let train = ["train", "--config", &p("cfg.json"), "--data", &p("data"), "--variant", "cs", "--out", &p("cs")];
    assert_eq!(cli(&train), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("cs/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["steps_done"], 20);

    assert_eq!(cli(&["translate", "--ckpt", &p("cs"), "--data", &p("data"), "--beam", "2"]), 0);
    let hyp = std::fs::read_to_string(tmp.path().join("cs/hyp.test.txt")).unwrap();
    assert!(hyp.starts_with("# config_hash="));
    assert_eq!(hyp.lines().count(), 31);

    let refs: Vec<String> = (0..4).map(|r| p(&format!("data/test/tgt.{r}.txt"))).collect();
    let hyp_path = p("cs/hyp.test.txt");
    let mut score = vec!["score", "--hyp", &hyp_path, "--refs"];
    score.extend(refs.iter().map(String::as_str));
    assert_eq!(cli(&score), 0);

    let analyze =
        ["analyze", "--ckpt", &p("cs"), "--data", &p("data"), "--embeddings", &p("data/embeddings.vec"), "--csv", &p("r.csv")];
    assert_eq!(cli(&analyze), 0);
    let csv = std::fs::read_to_string(tmp.path().join("r.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn score_without_hashes_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let hyp = tmp.path().join("h.txt");
    let r = tmp.path().join("r.txt");
    std::fs::write(&hyp, "a b c\n").unwrap();
    std::fs::write(&r, "a b c\n").unwrap();
    let (h, r) = (hyp.display().to_string(), r.display().to_string());
    assert_eq!(cli(&["score", "--hyp", &h, "--refs", &r]), 2);
    assert_eq!(cli(&["score", "--hyp", &h, "--refs", &r, "--force"]), 0);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    write_config(&tmp.path().join("cfg.json"), 1);
    assert_eq!(cli(&["synth", "--config", &p("cfg.json"), "--out", &p("data")]), 0);
    assert_eq!(cli(&["translate", "--ckpt", &p("nowhere"), "--data", &p("data")]), 1);
}
