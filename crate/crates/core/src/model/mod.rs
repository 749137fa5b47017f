//! Attention encoder-decoder for multitask speech translation.
//!
//! A pyramidal bidirectional LSTM encoder feeds a source (recognition)
//! decoder and a target (translation) decoder. The target decoder attends
//! both the encoder states and the source decoder states. The source side is
//! trained with one of four objectives, see [`Objective`].

mod loss;
mod net;
mod params;
mod search;

pub use loss::{cd_loss, clamp_warnings, cs_loss, cs_prob, multitask_loss, se_loss, PROB_FLOOR};
pub use params::ParamStore;
pub use search::Hypothesis;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, Tensor};
use crate::embeddings::{EmbeddingError, EmbeddingTable, Vocab, BOS, EOS};
use net::{DecState, Memory, Weights};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} is not available for this objective")]
    Unsupported(&'static str),
    #[error("frame width {got} does not match configured input width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Supervision of the source decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Single task: no source decoder at all.
    Se,
    /// Free softmax over source words.
    Me,
    /// Cosine distance between the projected state and the word's embedding.
    Cd,
    /// Softmax over temperature-scaled cosines to every embedding.
    Cs,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Se, Objective::Me, Objective::Cd, Objective::Cs];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Se => "se",
            Objective::Me => "me",
            Objective::Cd => "cd",
            Objective::Cs => "cs",
        }
    }

    pub fn parse(s: &str) -> Option<Objective> {
        Objective::ALL.into_iter().find(|o| o.name() == s.to_ascii_lowercase())
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub objective: Objective,
    /// Acoustic feature width `F`.
    pub input_dim: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    /// Only 2 (adjacent pair concatenation) is supported.
    pub downsample_per_layer: usize,
    pub src_dec_layers: usize,
    pub tgt_dec_layers: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    /// Width of the learned decoder input token embeddings.
    pub token_dim: usize,
    /// Pre-trained embedding width `D`.
    pub embed_dim: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Probability of keeping the teacher token in the target decoder.
    pub scheduled_sampling_p: f64,
    /// Let the target decoder attend raw `ŝ` instead of `f_θ(ŝ)`.
    pub attend_raw_states: bool,
    pub init_scale: f64,
    pub forget_bias: f64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            objective: Objective::Cs,
            input_dim: 16,
            enc_layers: 3,
            enc_hidden: 32,
            downsample_per_layer: 2,
            src_dec_layers: 1,
            tgt_dec_layers: 2,
            dec_hidden: 64,
            attn_dim: 32,
            token_dim: 16,
            embed_dim: 16,
            temperature: 0.1,
            alpha: 1.0,
            beta: 1.0,
            scheduled_sampling_p: 0.8,
            attend_raw_states: false,
            init_scale: 0.08,
            forget_bias: 1.0,
            max_src_len: 20,
            max_tgt_len: 40,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("src_dec_layers", self.src_dec_layers),
            ("tgt_dec_layers", self.tgt_dec_layers),
            ("dec_hidden", self.dec_hidden),
            ("attn_dim", self.attn_dim),
            ("token_dim", self.token_dim),
            ("embed_dim", self.embed_dim),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.downsample_per_layer != 2 {
            return Err(ModelError::Config(format!(
                "downsample_per_layer must be 2, got {}",
                self.downsample_per_layer
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(ModelError::Config("alpha and beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.scheduled_sampling_p) {
            return Err(ModelError::Config(format!(
                "scheduled_sampling_p must lie in [0, 1], got {}",
                self.scheduled_sampling_p
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Frames per encoder state.
    pub fn reduction(&self) -> usize {
        1 << self.enc_layers
    }

    /// Width of the source memory seen by the target decoder.
    pub fn source_memory_dim(&self) -> usize {
        match self.objective {
            Objective::Cd | Objective::Cs if !self.attend_raw_states => self.embed_dim,
            _ => self.dec_hidden,
        }
    }
}

/// One training pair in vocabulary ids, without BOS/EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[T, F]`.
    pub frames: Tensor,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[T', 2 * enc_hidden]`.
    pub states: Tensor,
    pub valid_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceDecoderOutput {
    /// Token fed back or predicted at each step (source vocabulary ids).
    pub tokens: Vec<usize>,
    /// `[M, dec_hidden]`.
    pub states: Tensor,
    /// `[M, D]` for CD/CS.
    pub projected: Option<Tensor>,
    /// `[M, C]` over [`Model::candidates`].
    pub distributions: Tensor,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDecoderOutput {
    pub tokens: Vec<usize>,
    /// `[Q, dec_hidden]`.
    pub states: Tensor,
    /// `[Q, V_target]`.
    pub distributions: Tensor,
    pub truncated: bool,
}

/// Scalar summaries of one batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub source: Option<f64>,
    pub target: f64,
    /// Unweighted target negative log-likelihood summed over real tokens.
    pub target_nll: f64,
    pub target_tokens: usize,
    /// Sum of `cos(f_θ(ŝ_m), ê_ŷm)` over real source steps (CD only).
    pub source_cos: Option<f64>,
    pub source_tokens: usize,
}

/// A differentiable batch loss with its parameter leaves, aligned with
/// [`Model::params`].
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub params: Vec<NodeId>,
    pub stats: BatchLoss,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    embeddings: EmbeddingTable,
    target_vocab: Vocab,
    candidates: Vec<usize>,
    candidate_pos: Vec<Option<usize>>,
}

fn shape_params<R: Rng>(cfg: &ModelConfig, vs: usize, vc: usize, vt: usize, rng: &mut R) -> ParamStore {
    let s = cfg.init_scale;
    let mut p = ParamStore::new();
    let lstm = |p: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R| {
        p.uniform(&format!("{prefix}.wx"), &[input, 4 * hidden], s, rng);
        p.uniform(&format!("{prefix}.wh"), &[hidden, 4 * hidden], s, rng);
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = cfg.forget_bias);
        p.insert(&format!("{prefix}.b"), Tensor::row(&b)).expect("fresh name");
    };
    let attn = |p: &mut ParamStore, prefix: &str, query: usize, key: usize, rng: &mut R| {
        p.uniform(&format!("{prefix}.wq"), &[query, cfg.attn_dim], s, rng);
        p.uniform(&format!("{prefix}.wk"), &[key, cfg.attn_dim], s, rng);
        p.uniform(&format!("{prefix}.v"), &[1, cfg.attn_dim], s, rng);
    };
    let (he, hd, e) = (cfg.enc_hidden, cfg.dec_hidden, cfg.token_dim);
    for l in 0..cfg.enc_layers {
        let input = if l == 0 { 2 * cfg.input_dim } else { 4 * he };
        lstm(&mut p, &format!("enc.{l}.fwd"), input, he, rng);
        lstm(&mut p, &format!("enc.{l}.bwd"), input, he, rng);
    }
    let multitask = cfg.objective != Objective::Se;
    if multitask {
        p.uniform("src.embed", &[vs, e], s, rng);
        attn(&mut p, "src.att", hd, 2 * he, rng);
        for l in 0..cfg.src_dec_layers {
            lstm(&mut p, &format!("src.{l}"), if l == 0 { e + 2 * he } else { hd }, hd, rng);
        }
        if cfg.objective == Objective::Me {
            p.uniform("src.out.w", &[hd, vc], s, rng);
            p.insert("src.out.b", Tensor::zeros(&[1, vc])).expect("fresh name");
        } else {
            p.uniform("src.proj.w", &[hd, cfg.embed_dim], s, rng);
            p.insert("src.proj.b", Tensor::zeros(&[1, cfg.embed_dim])).expect("fresh name");
        }
    }
    let ms = if multitask { cfg.source_memory_dim() } else { 0 };
    p.uniform("tgt.embed", &[vt, e], s, rng);
    attn(&mut p, "tgt.att_h", hd, 2 * he, rng);
    if multitask {
        attn(&mut p, "tgt.att_s", hd, ms, rng);
    }
    for l in 0..cfg.tgt_dec_layers {
        lstm(&mut p, &format!("tgt.{l}"), if l == 0 { e + 2 * he + ms } else { hd }, hd, rng);
    }
    p.uniform("tgt.out.w", &[hd + 2 * he + ms, vt], s, rng);
    p.insert("tgt.out.b", Tensor::zeros(&[1, vt])).expect("fresh name");
    p
}

impl Model {
    /// Fresh model with seeded uniform initialization. `embeddings` supplies
    /// the source vocabulary and, for CD/CS, the supervision vectors.
    pub fn new(
        config: ModelConfig,
        embeddings: EmbeddingTable,
        target_vocab: Vocab,
        seed: u64,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        if matches!(config.objective, Objective::Cd | Objective::Cs) && embeddings.dim() != config.embed_dim {
            return Err(ModelError::Config(format!(
                "embedding width {} differs from embed_dim {}",
                embeddings.dim(),
                config.embed_dim
            )));
        }
        let vs = embeddings.len();
        // EOS and the real words; the remaining reserved ids are never emitted.
        let candidates: Vec<usize> = std::iter::once(EOS).chain(crate::embeddings::RESERVED.len()..vs).collect();
        let mut candidate_pos = vec![None; vs];
        for (i, &id) in candidates.iter().enumerate() {
            candidate_pos[id] = Some(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shape_params(&config, vs, candidates.len(), target_vocab.len(), &mut rng);
        Ok(Model { config, params, embeddings, target_vocab, candidates, candidate_pos })
    }

    /// Model around previously trained parameters.
    pub fn with_params(
        config: ModelConfig,
        embeddings: EmbeddingTable,
        target_vocab: Vocab,
        params: ParamStore,
    ) -> Result<Model, ModelError> {
        let mut m = Model::new(config, embeddings, target_vocab, 0)?;
        m.params.check_layout(&params)?;
        m.params = params;
        Ok(m)
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn source_vocab(&self) -> &Vocab {
        self.embeddings.vocab()
    }

    pub fn target_vocab(&self) -> &Vocab {
        &self.target_vocab
    }

    /// Source ids the recognition branch can emit, ascending.
    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn candidate_index(&self, id: usize) -> Option<usize> {
        self.candidate_pos.get(id).copied().flatten()
    }

    pub(crate) fn candidate_matrix(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.candidates.iter().map(|&id| self.embeddings.row(id)).collect();
        net::normalized_rows(&rows)
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(), ModelError> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(ModelError::InvalidArgument(format!(
                "expected non-empty [T, F] frames, got {:?}",
                frames.shape()
            )));
        }
        if frames.cols() != self.config.input_dim {
            return Err(ModelError::InputWidth { expected: self.config.input_dim, got: frames.cols() });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[usize], vocab_len: usize, side: &str) -> Result<(), ModelError> {
        match ids.iter().find(|&&i| i >= vocab_len || i == BOS || i == crate::embeddings::PAD) {
            Some(i) => Err(ModelError::InvalidArgument(format!("{side} id {i} cannot be a decoder output"))),
            None => Ok(()),
        }
    }

    /// Differentiable variant loss of a batch, averaged over utterances.
    /// `sampling_p` is the teacher-token keep probability of the target decoder.
    pub fn loss_graph<R: Rng>(
        &self,
        batch: &[&Example],
        sampling_p: f64,
        rng: &mut R,
    ) -> Result<LossGraph, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::InvalidArgument("empty batch".into()));
        }
        for ex in batch {
            self.check_frames(&ex.frames)?;
            self.check_ids(&ex.target, self.target_vocab.len(), "target")?;
            if self.config.objective != Objective::Se {
                self.check_ids(&ex.source, self.embeddings.len(), "source")?;
                if let Some(&bad) = ex.source.iter().find(|&&i| self.candidate_index(i).is_none()) {
                    return Err(ModelError::InvalidArgument(format!("source id {bad} is not an output word")));
                }
            }
        }
        let frames: Vec<&Tensor> = batch.iter().map(|e| &e.frames).collect();
        let padded = crate::data::Batch::from_frames(&frames, self.config.reduction());
        let tokens = net::BatchTokens {
            source: batch.iter().map(|e| e.source.as_slice()).collect(),
            target: batch.iter().map(|e| e.target.as_slice()).collect(),
        };
        let mut g = Graph::new();
        let w = Weights::bind(&mut g, self, true);
        let nodes = net::batch_loss(
            &mut g,
            self,
            &w,
            &padded.frames,
            &padded.frame_lens,
            &tokens,
            sampling_p,
            rng,
        )?;
        let mut target_nll = 0.0;
        let mut target_tokens = 0;
        for (logp, gold, valid) in &nodes.tgt_steps {
            let lp = g.val(*logp);
            for (bi, (&y, &ok)) in gold.iter().zip(valid).enumerate() {
                if ok {
                    target_nll -= lp.get(bi, y);
                    target_tokens += 1;
                }
            }
        }
        let source_cos = nodes.src_cos.map(|c| {
            g.val(c)
                .data()
                .iter()
                .zip(&nodes.src_valid)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| v)
                .sum()
        });
        let stats = BatchLoss {
            total: g.val(nodes.total).item(),
            source: nodes.src.map(|s| g.val(s).item()),
            target: g.val(nodes.tgt).item(),
            target_nll,
            target_tokens,
            source_cos,
            source_tokens: nodes.src_valid.iter().filter(|&&v| v).count(),
        };
        Ok(LossGraph { graph: g, loss: nodes.total, params: w.ids, stats })
    }

    /// Loss value and parameter gradients of one batch.
    pub fn loss_and_grads<R: Rng>(
        &self,
        batch: &[&Example],
        sampling_p: f64,
        rng: &mut R,
    ) -> Result<(BatchLoss, Vec<Tensor>), ModelError> {
        let lg = self.loss_graph(batch, sampling_p, rng)?;
        let mut grads = lg.graph.backward(lg.loss)?;
        let out = lg
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((lg.stats, out))
    }

    pub fn encode(&self, frames: &Tensor) -> Result<EncoderOutput, ModelError> {
        let mut s = Session::new(self);
        let (node, len) = s.encode(frames)?;
        let v = s.g.val(node);
        let states = Tensor::new(vec![v.shape()[0], v.shape()[2]], v.data().to_vec())?;
        Ok(EncoderOutput { states, valid_len: len })
    }

    /// Runs the recognition branch. With a teacher of length `M` exactly `M`
    /// steps are taken; otherwise decoding stops at EOS or `max_src_len`.
    pub fn decode_source(
        &self,
        enc: &EncoderOutput,
        teacher: Option<&[usize]>,
    ) -> Result<SourceDecoderOutput, ModelError> {
        let mut s = Session::new(self);
        let enc_node = s.encoder_constant(enc)?;
        let run = s.source(enc_node, enc.valid_len, teacher)?;
        Ok(run.output)
    }

    /// Runs the translation branch. A teacher of length `Q` gives `Q` steps
    /// with scheduled sampling at keep probability `sampling_p`.
    pub fn decode_target<R: Rng>(
        &self,
        enc: &EncoderOutput,
        src: Option<&SourceDecoderOutput>,
        teacher: Option<&[usize]>,
        sampling_p: f64,
        rng: &mut R,
    ) -> Result<TargetDecoderOutput, ModelError> {
        if !(0.0..=1.0).contains(&sampling_p) {
            return Err(ModelError::InvalidArgument(format!("sampling_p {sampling_p} outside [0, 1]")));
        }
        let mut s = Session::new(self);
        let enc_node = s.encoder_constant(enc)?;
        let src_values = self.source_memory_values(src)?;
        let src_node = match src_values {
            Some(t) => Some(s.g.constant(t)),
            None => None,
        };
        let (mem_h, mem_s) = s.memories(enc_node, enc.valid_len, src_node)?;
        s.target(&mem_h, mem_s.as_ref(), teacher, sampling_p, rng)
    }

    fn source_memory_values(&self, src: Option<&SourceDecoderOutput>) -> Result<Option<Tensor>, ModelError> {
        if self.config.objective == Objective::Se {
            return Ok(None);
        }
        let src = src.ok_or(ModelError::InvalidArgument("source decoder output required".into()))?;
        if src.states.rows() == 0 {
            return Err(ModelError::InvalidArgument("empty source decoder states".into()));
        }
        let t = match (&src.projected, self.config.attend_raw_states) {
            (Some(p), false) => p,
            _ => &src.states,
        };
        Ok(Some(Tensor::new(vec![t.rows(), 1, t.cols()], t.data().to_vec())?))
    }

    /// Per-step argmax of the recognition distributions, up to EOS.
    pub fn recognize(&self, src: &SourceDecoderOutput) -> Result<Vec<usize>, ModelError> {
        if self.config.objective == Objective::Se {
            return Err(ModelError::Unsupported("recognition"));
        }
        let d = &src.distributions;
        let mut out = Vec::new();
        for m in 0..d.rows() {
            let id = self.candidates[crate::vecmath::argmax(d.row_slice(m))];
            if id == EOS {
                break;
            }
            out.push(id);
        }
        Ok(out)
    }

    /// Cosine-softmax distribution over [`Model::candidates`] for a raw
    /// decoder state `ŝ`, at the configured temperature.
    pub fn cs_distribution(&self, state: &[f64], tau: f64) -> Result<Vec<f64>, ModelError> {
        let (w, b) = match (self.params.get("src.proj.w"), self.params.get("src.proj.b")) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(ModelError::Unsupported("cosine softmax")),
        };
        if state.len() != w.rows() {
            return Err(ModelError::InvalidArgument(format!(
                "state width {} for projection of {} rows",
                state.len(),
                w.rows()
            )));
        }
        let proj: Vec<f64> = (0..w.cols())
            .map(|j| b.data()[j] + (0..w.rows()).map(|i| state[i] * w.get(i, j)).sum::<f64>())
            .collect();
        let rows: Vec<&[f64]> = self.candidates.iter().map(|&id| self.embeddings.row(id)).collect();
        cs_prob(&proj, &rows, tau)
    }

    /// Beam search over the target decoder with the source decoder run free.
    pub fn translate(&self, frames: &Tensor, beam: usize, max_len: usize) -> Result<Hypothesis, ModelError> {
        if beam == 0 {
            return Err(ModelError::InvalidArgument("beam width must be >= 1".into()));
        }
        if max_len == 0 {
            return Err(ModelError::InvalidArgument("max_len must be >= 1".into()));
        }
        let mut s = Session::new(self);
        let (enc, len) = s.encode(frames)?;
        let src_values = match self.config.objective {
            Objective::Se => None,
            _ => {
                let run = s.source(enc, len, None)?;
                Some(run.memory_values)
            }
        };
        search::beam_search(&mut s, enc, len, src_values, beam, max_len)
    }
}

/// Inference graph with the parameters bound as constants.
pub(crate) struct Session<'m> {
    model: &'m Model,
    g: Graph,
    w: Weights,
}

pub(crate) struct SourceRun {
    output: SourceDecoderOutput,
    /// `[M, 1, Ms]` constant node for the target decoder's source memory.
    memory_values: NodeId,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model) -> Self {
        let mut g = Graph::new();
        let w = Weights::bind(&mut g, model, false);
        Session { model, g, w }
    }

    fn encode(&mut self, frames: &Tensor) -> Result<(NodeId, usize), ModelError> {
        self.model.check_frames(frames)?;
        let padded = crate::data::Batch::from_frames(&[frames], self.model.config.reduction());
        let (node, lens) = net::encode(&mut self.g, &self.model.config, &self.w, &padded.frames, &padded.frame_lens)?;
        Ok((node, lens[0]))
    }

    fn encoder_constant(&mut self, enc: &EncoderOutput) -> Result<NodeId, ModelError> {
        let cfg = &self.model.config;
        let (n, width) = (enc.states.rows(), enc.states.cols());
        if enc.states.shape().len() != 2 || n == 0 || width != 2 * cfg.enc_hidden {
            return Err(ModelError::InvalidArgument(format!("encoder states {:?}", enc.states.shape())));
        }
        if enc.valid_len == 0 || enc.valid_len > n {
            return Err(ModelError::InvalidArgument(format!("valid length {} of {n}", enc.valid_len)));
        }
        let t = Tensor::new(vec![n, 1, width], enc.states.data().to_vec())?;
        Ok(self.g.constant(t))
    }

    /// Memories for the target decoder with batch size 1.
    fn memories(
        &mut self,
        enc: NodeId,
        enc_len: usize,
        src: Option<NodeId>,
    ) -> Result<(Memory, Option<Memory>), ModelError> {
        let mem_h = net::memory(&mut self.g, self.w.tgt_att_h(), enc, &[enc_len])?;
        let mem_s = match (src, self.w.tgt_att_s()) {
            (Some(v), Some(att)) => {
                let m = self.g.shape(v)[0];
                Some(net::memory(&mut self.g, att, v, &[m])?)
            }
            (None, None) => None,
            _ => return Err(ModelError::InvalidArgument("source memory does not match objective".into())),
        };
        Ok((mem_h, mem_s))
    }

    fn source(&mut self, enc: NodeId, enc_len: usize, teacher: Option<&[usize]>) -> Result<SourceRun, ModelError> {
        let model = self.model;
        let cfg = &model.config;
        let sw = self.w.src.as_ref().ok_or(ModelError::Unsupported("source decoding"))?;
        if let Some(t) = teacher {
            if t.is_empty() {
                return Err(ModelError::InvalidArgument("empty source teacher".into()));
            }
            model.check_ids(t, model.embeddings.len(), "source")?;
        }
        let g = &mut self.g;
        let mem = net::memory(g, net::src_att(sw), enc, &[enc_len])?;
        let mut state = net::fresh_state(cfg.src_dec_layers);
        let steps = teacher.map_or(cfg.max_src_len, <[usize]>::len);
        let mut prev = BOS;
        let (mut states, mut projs, mut dists, mut tokens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut truncated = teacher.is_none();
        for m in 0..steps {
            let s = net::source_step(g, sw, &mem, &mut state, vec![prev])?;
            let proj = net::project(g, sw, s)?;
            let logp = net::source_logp(g, sw, s, proj, cfg.temperature)?;
            let lp = g.val(logp).data();
            let next = match teacher {
                Some(t) => t[m],
                None => model.candidates[crate::vecmath::argmax(lp)],
            };
            dists.push(lp.iter().map(|v| v.exp()).collect::<Vec<f64>>());
            states.push(s);
            projs.push(proj);
            tokens.push(next);
            prev = next;
            if teacher.is_none() && next == EOS {
                truncated = false;
                break;
            }
        }
        let rows = |g: &Graph, ids: &[NodeId]| -> Vec<Vec<f64>> { ids.iter().map(|&i| g.val(i).data().to_vec()).collect() };
        let state_rows = rows(g, &states);
        let projected = if projs.iter().all(Option::is_some) && !projs.is_empty() {
            let p: Vec<NodeId> = projs.iter().map(|p| p.unwrap()).collect();
            Some(Tensor::from_rows(&rows(g, &p)))
        } else {
            None
        };
        let mem_rows = match (&projected, cfg.attend_raw_states) {
            (Some(p), false) => p.clone(),
            _ => Tensor::from_rows(&state_rows),
        };
        let memory_values = g.constant(Tensor::new(
            vec![mem_rows.rows(), 1, mem_rows.cols()],
            mem_rows.into_data(),
        )?);
        let output = SourceDecoderOutput {
            tokens,
            states: Tensor::from_rows(&state_rows),
            projected,
            distributions: Tensor::from_rows(&dists),
            truncated,
        };
        Ok(SourceRun { output, memory_values })
    }

    fn target<R: Rng>(
        &mut self,
        mem_h: &Memory,
        mem_s: Option<&Memory>,
        teacher: Option<&[usize]>,
        sampling_p: f64,
        rng: &mut R,
    ) -> Result<TargetDecoderOutput, ModelError> {
        let model = self.model;
        if let Some(t) = teacher {
            if t.is_empty() {
                return Err(ModelError::InvalidArgument("empty target teacher".into()));
            }
            model.check_ids(t, model.target_vocab.len(), "target")?;
        }
        let steps = teacher.map_or(model.config.max_tgt_len, <[usize]>::len);
        let mut state: DecState = net::fresh_state(model.config.tgt_dec_layers);
        let mut prev = BOS;
        let (mut states, mut dists, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
        let mut truncated = teacher.is_none();
        for q in 0..steps {
            let (h, logp) = net::target_step(&mut self.g, &self.w, mem_h, mem_s, &mut state, vec![prev])?;
            let lp = self.g.val(logp).data();
            let predicted = net::best_token(lp);
            dists.push(lp.iter().map(|v| v.exp()).collect::<Vec<f64>>());
            states.push(self.g.val(h).data().to_vec());
            match teacher {
                Some(t) => {
                    tokens.push(t[q]);
                    let sample = q + 1 < steps && sampling_p < 1.0 && rng.random::<f64>() >= sampling_p;
                    prev = if sample { predicted } else { t[q] };
                }
                None => {
                    tokens.push(predicted);
                    prev = predicted;
                    if predicted == EOS {
                        truncated = false;
                        break;
                    }
                }
            }
        }
        Ok(TargetDecoderOutput {
            tokens,
            states: Tensor::from_rows(&states),
            distributions: Tensor::from_rows(&dists),
            truncated,
        })
    }
}

#[cfg(test)]
mod tests;
