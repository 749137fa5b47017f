//! Run configuration, on-disk artifacts and the four-variant comparison run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisOptions, AnalysisReport};
use crate::data::{self, sha256_hex, BpeModel, ParallelCorpus, SynthOutput, SynthSpec};
use crate::embeddings::EmbeddingTable;
use crate::metrics::{self, ScoredCorpus};
use crate::model::{Model, ModelConfig, Objective};
use crate::training::{self, DevSet, TrainConfig, TrainRun};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config hash mismatch: {what} has {found}, expected {expected} (use --force to override)")]
    HashMismatch { what: String, found: String, expected: String },
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Embedding(#[from] crate::embeddings::EmbeddingError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Everything one experiment needs, read from a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Parameter initialization seed.
    pub seed: u64,
    pub data: SynthSpec,
    pub bpe_merges: i64,
    /// `objective` is replaced by each variant in turn.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisOptions,
    pub eval_beam: usize,
    pub variants: Vec<Objective>,
    /// Output directory for `pipeline`; not part of the config hash.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SynthSpec::default();
        let model = ModelConfig { input_dim: data.embed_dim, embed_dim: data.embed_dim, ..ModelConfig::default() };
        RunConfig {
            seed: 1,
            data,
            bpe_merges: 200,
            model,
            train: TrainConfig::default(),
            analysis: AnalysisOptions::default(),
            eval_beam: 4,
            variants: Objective::ALL.to_vec(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&read(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.data.validate().map_err(|e| cfg(e.to_string()))?;
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        if self.model.input_dim != self.data.embed_dim || self.model.embed_dim != self.data.embed_dim {
            return Err(cfg(format!(
                "model.input_dim and model.embed_dim must equal data.embed_dim ({})",
                self.data.embed_dim
            )));
        }
        if self.bpe_merges < 0 || self.eval_beam == 0 || self.variants.is_empty() {
            return Err(cfg("bpe_merges >= 0, eval_beam >= 1 and a non-empty variant list are required".into()));
        }
        Ok(())
    }

    /// Applies the global `--seed` override to every seeded stage.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    /// SHA-256 of the canonical JSON form, with `out_dir` left out.
    pub fn hash(&self) -> String {
        let canon = RunConfig { out_dir: None, ..self.clone() };
        sha256_hex(serde_json::to_string(&canon).expect("plain data serializes").as_bytes())
    }

    pub fn model_config(&self, variant: Objective) -> ModelConfig {
        ModelConfig { objective: variant, ..self.model.clone() }
    }
}

pub fn check_hash(what: &str, found: &str, expected: &str, force: bool) -> Result<(), PipelineError> {
    if found == expected {
        return Ok(());
    }
    if force {
        log::warn!("{what}: config hash {found} differs from {expected}; continuing (--force)");
        return Ok(());
    }
    Err(PipelineError::HashMismatch { what: what.into(), found: found.into(), expected: expected.into() })
}

/// A corpus directory as written by `synth`.
pub struct CorpusDir {
    pub config_hash: String,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    pub embeddings: EmbeddingTable,
}

impl CorpusDir {
    pub fn write(dir: &Path, out: &SynthOutput, cfg: &RunConfig) -> Result<String, PipelineError> {
        let m = data::write_corpus_dir(dir, out, &cfg.data, &cfg.hash())?;
        Ok(m.config_hash)
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let (manifest, [train, dev, test]) = data::read_corpus_dir(dir)?;
        let embeddings = EmbeddingTable::load_vec(&dir.join("embeddings.vec"), usize::MAX, false)?;
        Ok(CorpusDir { config_hash: manifest.config_hash, train, dev, test, embeddings })
    }

    pub fn split(&self, name: &str) -> Result<&ParallelCorpus, PipelineError> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(PipelineError::Config(format!("unknown split {name:?} (train, dev or test)"))),
        }
    }
}

/// `bpe.json`: the subword model stamped with the config hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeFile {
    pub config_hash: String,
    pub bpe: BpeModel,
}

impl BpeFile {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let f: BpeFile = serde_json::from_str(&read(path)?)?;
        f.bpe.validate()?;
        Ok(f)
    }
}

pub fn train_bpe(cfg: &RunConfig, train: &ParallelCorpus) -> Result<BpeModel, PipelineError> {
    let bpe = BpeModel::train(&train.target_text(), cfg.bpe_merges)?;
    if bpe.exhausted {
        log::info!("BPE stopped after {} merges: no pairs left", bpe.merges().len());
    }
    Ok(bpe)
}

/// Hypothesis file: a `# config_hash=<hash>` line, then one sentence per line.
pub fn write_hypotheses(path: &Path, config_hash: &str, hyps: &[Vec<String>]) -> Result<(), PipelineError> {
    let mut s = format!("# config_hash={config_hash}\n");
    for h in hyps {
        s.push_str(&h.join(" "));
        s.push('\n');
    }
    write(path, &s)
}

pub fn read_hypotheses(path: &Path) -> Result<(Option<String>, Vec<Vec<String>>), PipelineError> {
    let text = read(path)?;
    let mut lines = text.lines().peekable();
    let hash = match lines.peek().and_then(|l| l.strip_prefix("# config_hash=")) {
        Some(h) => {
            let h = h.trim().to_string();
            lines.next();
            Some(h)
        }
        None => None,
    };
    Ok((hash, lines.map(|l| l.split_whitespace().map(String::from).collect()).collect()))
}

/// Reference files `tgt.<n>.txt` regrouped per utterance.
pub fn read_references(paths: &[PathBuf]) -> Result<Vec<Vec<Vec<String>>>, PipelineError> {
    let mut files = Vec::new();
    for p in paths {
        let lines: Vec<Vec<String>> =
            read(p)?.lines().map(|l| l.split_whitespace().map(String::from).collect()).collect();
        files.push(lines);
    }
    let n = files.first().map_or(0, Vec::len);
    if let Some(i) = files.iter().position(|f| f.len() != n) {
        return Err(PipelineError::Config(format!(
            "{} has {} lines, {} has {n}",
            paths[i].display(),
            files[i].len(),
            paths[0].display()
        )));
    }
    Ok((0..n).map(|u| files.iter().map(|f| f[u].clone()).collect()).collect())
}

pub fn build_model(
    cfg: &RunConfig,
    variant: Objective,
    embeddings: &EmbeddingTable,
    bpe: &BpeModel,
) -> Result<Model, PipelineError> {
    Ok(Model::new(cfg.model_config(variant), embeddings.clone(), bpe.vocab()?, cfg.seed)?)
}

/// Trains one variant; the returned model carries the best checkpoint.
pub fn train_variant(
    cfg: &RunConfig,
    variant: Objective,
    corpus: &CorpusDir,
    bpe: &BpeModel,
) -> Result<(Model, TrainRun), PipelineError> {
    let mut model = build_model(cfg, variant, &corpus.embeddings, bpe)?;
    let examples = training::examples(&corpus.train, &model, bpe);
    let run = training::train(&mut model, &examples, &DevSet::from_corpus(&corpus.dev), &cfg.train)?;
    if let Ok(best) = training::select_best(&run) {
        model.params = best.params.clone();
    }
    Ok((model, run))
}

/// Mean per-utterance WER (%) of free-running recognition against the
/// source transcripts; `None` for the single-task model.
pub fn recognition_wer(model: &Model, corpus: &ParallelCorpus) -> Result<Option<f64>, PipelineError> {
    if model.config.objective == Objective::Se || corpus.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for u in &corpus.utterances {
        let enc = model.encode(&u.frames)?;
        let src = model.decode_source(&enc, None)?;
        let words = model.source_vocab().decode(&model.recognize(&src)?);
        total += metrics::wer(&words, &u.source)?;
    }
    Ok(Some(total / corpus.len() as f64))
}

/// Scores of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Objective,
    pub best_step: Option<usize>,
    pub dev_bleu: Option<f64>,
    pub test_bleu: f64,
    /// Translation WER against the first reference.
    pub test_translation_wer: f64,
    pub test_recognition_wer: Option<f64>,
    pub analysis: Option<AnalysisReport>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub variants: Vec<VariantReport>,
}

impl PipelineReport {
    pub fn variant(&self, v: Objective) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }

    /// Fixed-width comparison table, one row per variant.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.2}", x * scale));
        let mut s = format!(
            "{:<8} {:>8} {:>8} {:>10} {:>8} {:>8}\n",
            "variant", "BLEU", "WER", "eig-sim", "P@1", "P@5"
        );
        for r in &self.variants {
            let a = r.analysis.as_ref();
            let _ = writeln!(
                s,
                "{:<8} {:>8.2} {:>8} {:>10} {:>8} {:>8}",
                r.variant.name().to_uppercase(),
                r.test_bleu,
                opt(r.test_recognition_wer, 1.0),
                opt(a.map(|a| a.eigenvector_similarity), 1.0),
                opt(a.map(|a| a.p_at_1), 100.0),
                opt(a.map(|a| a.p_at_5), 100.0),
            );
        }
        s
    }
}

/// Test-set scores and, for models with a source decoder, the analysis.
pub fn evaluate_variant(
    cfg: &RunConfig,
    model: &Model,
    run: &TrainRun,
    corpus: &CorpusDir,
    config_hash: &str,
) -> Result<(VariantReport, Vec<Vec<String>>, Option<analysis::Analysis>), PipelineError> {
    let frames: Vec<_> = corpus.test.utterances.iter().map(|u| u.frames.clone()).collect();
    let hyps = training::translate_all(model, &frames, cfg.eval_beam, cfg.train.threads)?;
    let refs = corpus.test.utterances.iter().map(|u| u.targets.clone()).collect();
    let score = metrics::score_report(&ScoredCorpus::new(hyps.clone(), refs)?)?;
    let analysis = if model.config.objective == Objective::Se {
        None
    } else {
        Some(analysis::analyze(model, &corpus.train, &corpus.test, &cfg.analysis, config_hash)?)
    };
    let best = training::select_best(run).ok();
    let report = VariantReport {
        variant: model.config.objective,
        best_step: best.map(|c| c.step),
        dev_bleu: best.and_then(|c| c.dev_bleu),
        test_bleu: score.bleu,
        test_translation_wer: score.wer_mean,
        test_recognition_wer: recognition_wer(model, &corpus.test)?,
        analysis: analysis.as_ref().map(|a| a.report.clone()),
        failure: run.failure.clone(),
    };
    Ok((report, hyps, analysis))
}

/// Synthesizes the corpus, learns BPE, then trains and evaluates every
/// variant in turn. With `out`, every intermediate artifact is written under it.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> Result<PipelineReport, PipelineError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let synth = data::synth_corpus(&cfg.data)?;
    let corpus = match out {
        Some(dir) => {
            CorpusDir::write(&dir.join("data"), &synth, cfg)?;
            CorpusDir::read(&dir.join("data"))?
        }
        None => CorpusDir {
            config_hash: hash.clone(),
            train: synth.train,
            dev: synth.dev,
            test: synth.test,
            embeddings: synth.embeddings,
        },
    };
    let bpe = train_bpe(cfg, &corpus.train)?;
    if let Some(dir) = out {
        BpeFile { config_hash: hash.clone(), bpe: bpe.clone() }.save(&dir.join("data").join("bpe.json"))?;
    }
    let mut variants = Vec::new();
    for &v in &cfg.variants {
        log::info!("training {v}");
        let (model, run) = train_variant(cfg, v, &corpus, &bpe)?;
        let (report, hyps, analysis) = evaluate_variant(cfg, &model, &run, &corpus, &hash)?;
        if let Some(dir) = out {
            let vdir = dir.join(v.name());
            training::save_run(&vdir, &run, &hash)?;
            BpeFile { config_hash: hash.clone(), bpe: bpe.clone() }.save(&vdir.join("bpe.json"))?;
            write_hypotheses(&vdir.join("hyp.test.txt"), &hash, &hyps)?;
            if let Some(a) = &analysis {
                write(&vdir.join("analysis.json"), &(serde_json::to_string_pretty(&a.report)? + "\n"))?;
                write(&vdir.join("retrieval.csv"), &a.retrieval_csv())?;
            }
        }
        variants.push(report);
    }
    let report = PipelineReport { config_hash: hash, variants };
    if let Some(dir) = out {
        write(&dir.join("report.json"), &report.to_json())?;
        write(&dir.join("table.txt"), &report.table())?;
    }
    Ok(report)
}
