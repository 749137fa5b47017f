//! Adadelta training with scheduled sampling, periodic dev-BLEU checkpoints
//! and best-checkpoint selection.

mod adadelta;

pub use adadelta::{adadelta_step, clip_global_norm, Accumulator, Adadelta, OptimizerState};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, BpeModel, ParallelCorpus};
use crate::diffcore::Tensor;
use crate::metrics::{self, ScoredCorpus};
use crate::model::{Example, Model, ModelConfig, ModelError, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("no checkpoint has a dev score")]
    NoScoredCheckpoint,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Checkpoint and dev-decode interval; 0 keeps only the first and last.
    pub ckpt_every: usize,
    pub dev_beam: usize,
    /// Dev utterances decoded per checkpoint (all when absent).
    pub dev_limit: Option<usize>,
    pub clip_norm: f64,
    pub optimizer: Adadelta,
    pub seed: u64,
    /// Worker threads for dev decoding.
    pub threads: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            ckpt_every: 1_000,
            dev_beam: 4,
            dev_limit: None,
            clip_norm: 5.0,
            optimizer: Adadelta::default(),
            seed: 1,
            threads: 1,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.dev_beam == 0 || self.threads == 0 {
            return Err(TrainError::Invalid("batch_size, dev_beam and threads must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Invalid("clip_norm must be positive".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.rho) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(TrainError::Invalid("optimizer needs rho in [0, 1), eps > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Turns utterances into model examples, segmenting the first target reference
/// with `bpe`. Words outside the vocabularies become UNK.
pub fn examples(corpus: &ParallelCorpus, model: &Model, bpe: &BpeModel) -> Vec<Example> {
    corpus
        .utterances
        .iter()
        .map(|u| Example {
            frames: u.frames.clone(),
            source: model.source_vocab().encode(&u.source),
            target: model.target_vocab().encode(&bpe.apply(&u.targets[0].join(" "))),
        })
        .collect()
}

/// Dev utterances with their word-level references.
#[derive(Clone, Debug, Default)]
pub struct DevSet {
    pub frames: Vec<Tensor>,
    pub references: Vec<Vec<Vec<String>>>,
}

impl DevSet {
    pub fn from_corpus(corpus: &ParallelCorpus) -> Self {
        DevSet {
            frames: corpus.utterances.iter().map(|u| u.frames.clone()).collect(),
            references: corpus.utterances.iter().map(|u| u.targets.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ParamStore,
    pub dev_bleu: Option<f64>,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub seed: u64,
    pub steps_done: usize,
    pub checkpoints: Vec<Checkpoint>,
    /// Batch loss after every step.
    pub losses: Vec<f64>,
    /// Reason training stopped early, if it did.
    pub failure: Option<String>,
}

impl TrainRun {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Highest dev BLEU; the earliest step wins ties.
pub fn select_best(run: &TrainRun) -> Result<&Checkpoint, TrainError> {
    let mut best: Option<&Checkpoint> = None;
    for c in &run.checkpoints {
        if let Some(b) = c.dev_bleu {
            if best.is_none_or(|x| b > x.dev_bleu.unwrap()) {
                best = Some(c);
            }
        }
    }
    best.ok_or(TrainError::NoScoredCheckpoint)
}

/// Word-level rendering of target subword ids.
pub fn detokenize(model: &Model, ids: &[usize]) -> Vec<String> {
    let pieces = model.target_vocab().decode(ids);
    BpeModel::decode(&pieces).split_whitespace().map(str::to_string).collect()
}

/// Beam-decodes `frames` in parallel chunks; output order follows input order.
pub fn translate_all(
    model: &Model,
    frames: &[Tensor],
    beam: usize,
    threads: usize,
) -> Result<Vec<Vec<String>>, TrainError> {
    let max_len = model.config.max_tgt_len;
    let one = |f: &Tensor| -> Result<Vec<String>, TrainError> {
        Ok(detokenize(model, &model.translate(f, beam, max_len)?.tokens))
    };
    if threads <= 1 || frames.len() < 2 {
        return frames.iter().map(one).collect();
    }
    let chunk = frames.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = frames
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(frames.len());
        for h in handles {
            out.extend(h.join().expect("decoder thread panicked")?);
        }
        Ok(out)
    })
}

/// Corpus BLEU of the model on (a prefix of) `dev`.
pub fn dev_bleu(model: &Model, dev: &DevSet, beam: usize, limit: Option<usize>, threads: usize) -> Result<f64, TrainError> {
    let n = limit.unwrap_or(dev.frames.len()).min(dev.frames.len());
    let hyps = translate_all(model, &dev.frames[..n], beam, threads)?;
    let scored = ScoredCorpus::new(hyps, dev.references[..n].to_vec())?;
    Ok(metrics::bleu(&scored, 4)?)
}

/// Teacher-forced summaries over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Target negative log-likelihood per real token (EOS included).
    pub target_nll_per_token: f64,
    /// Mean `cos(f_θ(ŝ_m), ê_ŷm)` over source steps (CD only).
    pub source_cos: Option<f64>,
}

pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<Evaluation, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Invalid("nothing to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut nll, mut tokens, mut cos, mut steps) = (0.0, 0usize, 0.0, 0usize);
    let mut has_cos = false;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let s = model.loss_graph(&refs, 1.0, &mut rng)?.stats;
        nll += s.target_nll;
        tokens += s.target_tokens;
        if let Some(c) = s.source_cos {
            has_cos = true;
            cos += c;
            steps += s.source_tokens;
        }
    }
    Ok(Evaluation {
        target_nll_per_token: nll / tokens as f64,
        source_cos: has_cos.then(|| cos / steps as f64),
    })
}

/// Trains `model` in place and returns the run record. Divergence ends the
/// run early with [`TrainRun::failure`] set rather than an error.
pub fn train(model: &mut Model, examples: &[Example], dev: &DevSet, cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Invalid("empty training corpus".into()));
    }
    if dev.frames.len() != dev.references.len() {
        return Err(TrainError::Invalid("dev frames and references differ in count".into()));
    }
    if let Some(i) = dev.references.iter().position(Vec::is_empty) {
        return Err(TrainError::Invalid(format!("dev utterance {i} has no reference")));
    }
    let mut run = TrainRun {
        model_config: model.config.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
        steps_done: 0,
        checkpoints: Vec::new(),
        losses: Vec::with_capacity(cfg.steps),
        failure: None,
    };
    let score = |m: &Model| -> Result<Option<f64>, TrainError> {
        if dev.frames.is_empty() {
            return Ok(None);
        }
        Ok(Some(dev_bleu(m, dev, cfg.dev_beam, cfg.dev_limit, cfg.threads)?))
    };
    run.checkpoints.push(Checkpoint {
        step: 0,
        params: model.params.clone(),
        dev_bleu: score(model)?,
        train_loss: None,
    });
    let mut opt = OptimizerState::new(&model.params, cfg.optimizer);
    let lengths = examples.iter().map(|e| e.frames.rows()).collect();
    let mut batches = BatchStream::new(lengths, cfg.batch_size, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let p = model.config.scheduled_sampling_p;
    let mut since = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let idx = batches.next().expect("endless stream");
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (stats, mut grads) = model.loss_and_grads(&batch, p, &mut rng)?;
        if !stats.total.is_finite() {
            run.failure = Some(format!("loss became {} at step {step}", stats.total));
            break;
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        if let Err(e) = opt.step(&mut model.params, &grads) {
            run.failure = Some(format!("{e} at step {step}"));
            break;
        }
        run.losses.push(stats.total);
        run.steps_done = step;
        since = (since.0 + stats.total, since.1 + 1);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "{} step {step}: loss {:.4} (epoch {})",
                model.config.objective,
                since.0 / since.1 as f64,
                batches.epoch
            );
        }
        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0) || step == cfg.steps {
            let bleu = score(model)?;
            if let Some(b) = bleu {
                log::info!("{} step {step}: dev BLEU {b:.2}", model.config.objective);
            }
            run.checkpoints.push(Checkpoint {
                step,
                params: model.params.clone(),
                dev_bleu: bleu,
                train_loss: Some(since.0 / since.1 as f64),
            });
            since = (0.0, 0);
        }
    }
    if let Some(f) = &run.failure {
        log::warn!("{} training stopped: {f}", model.config.objective);
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    pub dev_bleu: Option<f64>,
    pub train_loss: Option<f64>,
    /// Present for the checkpoints written to disk.
    pub file: Option<String>,
}

/// Contents of `run.json` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steps_done: usize,
    pub checkpoints: Vec<CheckpointEntry>,
    pub best_step: Option<usize>,
    pub failure: Option<String>,
}

pub fn checkpoint_file(step: usize) -> String {
    format!("ckpt_{step}.params")
}

/// Writes `run.json` listing every checkpoint, and `ckpt_<step>.params` for
/// the best-scoring and the last one.
pub fn save_run(dir: &Path, run: &TrainRun, config_hash: &str) -> Result<RunManifest, TrainError> {
    std::fs::create_dir_all(dir)?;
    let best = select_best(run).ok().map(|c| c.step);
    let last = run.checkpoints.last().map(|c| c.step);
    let mut entries = Vec::new();
    for c in &run.checkpoints {
        let file = if Some(c.step) == best || Some(c.step) == last {
            let f = checkpoint_file(c.step);
            c.params.save(&dir.join(&f))?;
            Some(f)
        } else {
            None
        };
        entries.push(CheckpointEntry { step: c.step, dev_bleu: c.dev_bleu, train_loss: c.train_loss, file });
    }
    let manifest = RunManifest {
        config_hash: config_hash.to_string(),
        seed: run.seed,
        model: run.model_config.clone(),
        train: run.config.clone(),
        steps_done: run.steps_done,
        checkpoints: entries,
        best_step: best,
        failure: run.failure.clone(),
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest, TrainError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?)
}

impl RunManifest {
    /// File of the best checkpoint, or of the last one when none was scored.
    pub fn best_file(&self) -> Option<&str> {
        let step = self.best_step.or(self.checkpoints.last().map(|c| c.step))?;
        self.checkpoints.iter().find(|c| c.step == step)?.file.as_deref()
    }
}
