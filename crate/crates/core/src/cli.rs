//! Command-line front end. Exit codes: 0 success, 1 runtime failure (JSON
//! error on stderr), 2 usage or config error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::analysis::{self, AnalysisOptions};
use crate::data;
use crate::embeddings::EmbeddingTable;
use crate::metrics::{self, ScoredCorpus};
use crate::model::{Model, Objective, ParamStore};
use crate::pipeline::{self as pl, BpeFile, CorpusDir, PipelineError, RunConfig};
use crate::training::{self, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "semst", version, about = "Speech translation through word-embedding targets")]
struct Cli {
    /// Override every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for decoding.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic corpus directory.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn subword merges on the training targets.
    Bpe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to DATA/bpe.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one variant and write its checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Objective,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to DATA/bpe.json, learned on the fly when missing.
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Beam-decode a split with a checkpoint.
    Translate {
        /// A checkpoint file or a training output directory (best checkpoint).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to hyp.<split>.txt next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// BLEU and WER of a hypothesis file against reference files.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Embedding-space analysis of a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-word retrieval results.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run every stage for every variant and print the comparison table.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Objective, String> {
    Objective::parse(s).ok_or_else(|| format!("unknown variant {s:?} (se, me, cd or cs)"))
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("ST_LOG", level))
        .target(env_logger::Target::Stderr)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let (code, kind) = match &e {
                PipelineError::Config(_) => (2, "config"),
                PipelineError::HashMismatch { .. } => (1, "hash_mismatch"),
                _ => (1, "runtime"),
            };
            eprintln!("{}", json!({ "error": e.to_string(), "kind": kind }));
            code
        }
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        PipelineError::Io { path, source } => PipelineError::Config(format!("{path}: {source}")),
        e => e,
    })?;
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(PipelineError::Config("--threads must be at least 1".into()));
        }
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), PipelineError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// The run directory of a checkpoint, its manifest and the chosen params file.
fn resolve_ckpt(ckpt: &Path) -> Result<(PathBuf, RunManifest, PathBuf), PipelineError> {
    let (dir, file) = if ckpt.is_dir() {
        let m = training::load_manifest(ckpt)?;
        let f = m
            .best_file()
            .ok_or_else(|| PipelineError::Config(format!("{} holds no saved checkpoint", ckpt.display())))?;
        (ckpt.to_path_buf(), ckpt.join(f))
    } else {
        let dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
        (dir, ckpt.to_path_buf())
    };
    let manifest = training::load_manifest(&dir)?;
    Ok((dir, manifest, file))
}

fn load_model(ckpt: &Path, embeddings: EmbeddingTable) -> Result<(Model, RunManifest, PathBuf), PipelineError> {
    let (dir, manifest, file) = resolve_ckpt(ckpt)?;
    let bpe = BpeFile::load(&dir.join("bpe.json"))?;
    let params = ParamStore::load(&file)?;
    let model = Model::with_params(manifest.model.clone(), embeddings, bpe.bpe.vocab()?, params)?;
    Ok((model, manifest, dir))
}

/// Config hash recorded in the corpus manifest next to a reference file.
fn refs_hash(refs: &[PathBuf]) -> Option<String> {
    let first = refs.first()?;
    first.ancestors().skip(1).take(3).find_map(|d| {
        let text = std::fs::read_to_string(d.join("manifest.json")).ok()?;
        let m: data::CorpusManifest = serde_json::from_str(&text).ok()?;
        Some(m.config_hash)
    })
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.cmd {
        Cmd::Synth { config, out } => {
            let cfg = load_config(cli, config)?;
            let synth = data::synth_corpus(&cfg.data)?;
            let m = data::write_corpus_dir(out, &synth, &cfg.data, &cfg.hash())?;
            print_json(&m)
        }
        Cmd::Bpe { config, data: dir, out, force } => {
            let cfg = load_config(cli, config)?;
            let corpus = CorpusDir::read(dir)?;
            pl::check_hash("corpus", &corpus.config_hash, &cfg.hash(), *force)?;
            let bpe = pl::train_bpe(&cfg, &corpus.train)?;
            let path = out.clone().unwrap_or_else(|| dir.join("bpe.json"));
            BpeFile { config_hash: cfg.hash(), bpe: bpe.clone() }.save(&path)?;
            print_json(&json!({
                "bpe": path, "merges": bpe.merges().len(), "exhausted": bpe.exhausted, "pieces": bpe.vocab()?.len()
            }))
        }
        Cmd::Train { config, data: dir, variant, out, bpe, force } => {
            let cfg = load_config(cli, config)?;
            let hash = cfg.hash();
            let corpus = CorpusDir::read(dir)?;
            pl::check_hash("corpus", &corpus.config_hash, &hash, *force)?;
            let bpe_path = bpe.clone().unwrap_or_else(|| dir.join("bpe.json"));
            let bpe = if bpe_path.exists() {
                let f = BpeFile::load(&bpe_path)?;
                pl::check_hash("bpe", &f.config_hash, &hash, *force)?;
                f.bpe
            } else {
                pl::train_bpe(&cfg, &corpus.train)?
            };
            let (_, run) = pl::train_variant(&cfg, *variant, &corpus, &bpe)?;
            let manifest = training::save_run(out, &run, &hash)?;
            BpeFile { config_hash: hash, bpe }.save(&out.join("bpe.json"))?;
            if let Some(f) = &run.failure {
                return Err(PipelineError::Train(training::TrainError::Invalid(f.clone())));
            }
            print_json(&manifest)
        }
        Cmd::Translate { ckpt, data: dir, beam, split, out, force } => {
            let corpus = CorpusDir::read(dir)?;
            let (model, manifest, run_dir) = load_model(ckpt, corpus.embeddings.clone())?;
            pl::check_hash("checkpoint", &manifest.config_hash, &corpus.config_hash, *force)?;
            let utts = corpus.split(split)?;
            let frames: Vec<_> = utts.utterances.iter().map(|u| u.frames.clone()).collect();
            let threads = cli.threads.unwrap_or(manifest.train.threads).max(1);
            let hyps = training::translate_all(&model, &frames, *beam, threads)?;
            let path = out.clone().unwrap_or_else(|| run_dir.join(format!("hyp.{split}.txt")));
            pl::write_hypotheses(&path, &manifest.config_hash, &hyps)?;
            print_json(&json!({ "hypotheses": path, "utterances": hyps.len(), "beam": beam }))
        }
        Cmd::Score { hyp, refs, force } => {
            let (hash, hyps) = pl::read_hypotheses(hyp)?;
            if let (Some(h), Some(r)) = (&hash, refs_hash(refs)) {
                pl::check_hash("hypotheses", h, &r, *force)?;
            } else if !force {
                return Err(PipelineError::Config("cannot verify config hashes (use --force)".into()));
            }
            let reference_sets = pl::read_references(refs)?;
            let report = metrics::score_report(&ScoredCorpus::new(hyps, reference_sets)?)?;
            print_json(&json!({
                "bleu": report.bleu, "wer": report.wer_mean, "utterances": report.utterances, "config_hash": hash
            }))
        }
        Cmd::Analyze { ckpt, data: dir, embeddings, split, csv, force } => {
            let corpus = CorpusDir::read(dir)?;
            let table = EmbeddingTable::load_vec(embeddings, usize::MAX, false)?;
            let (model, manifest, _) = load_model(ckpt, table)?;
            pl::check_hash("checkpoint", &manifest.config_hash, &corpus.config_hash, *force)?;
            let opts = AnalysisOptions::default();
            let a = analysis::analyze(&model, &corpus.train, corpus.split(split)?, &opts, &manifest.config_hash)?;
            if let Some(p) = csv {
                std::fs::write(p, a.retrieval_csv())
                    .map_err(|source| PipelineError::Io { path: p.display().to_string(), source })?;
            }
            print_json(&a.report)
        }
        Cmd::Pipeline { config, out } => {
            let cfg = load_config(cli, config)?;
            let out = out.clone().or_else(|| cfg.out_dir.clone());
            let report = pl::run_pipeline(&cfg, out.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
    }
}
