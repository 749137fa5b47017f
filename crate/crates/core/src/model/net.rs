//! Graph builders for the encoder, the attentions and both decoders.

use rand::Rng;

use super::{Model, ModelConfig, ModelError, Objective};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::embeddings::BOS;
use crate::vecmath;

pub(crate) struct LstmW {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    hidden: usize,
}

pub(crate) struct AttnW {
    wq: NodeId,
    wk: NodeId,
    v: NodeId,
    dim: usize,
}

pub(crate) enum SrcHead {
    Softmax { w: NodeId, b: NodeId },
    Project { w: NodeId, b: NodeId, candidates: NodeId },
}

pub(crate) struct SrcW {
    embed: NodeId,
    att: AttnW,
    layers: Vec<LstmW>,
    head: SrcHead,
}

pub(crate) struct TgtW {
    embed: NodeId,
    att_h: AttnW,
    att_s: Option<AttnW>,
    layers: Vec<LstmW>,
    out_w: NodeId,
    out_b: NodeId,
}

/// Every parameter of a model bound into one graph.
pub(crate) struct Weights {
    enc: Vec<(LstmW, LstmW)>,
    pub(crate) src: Option<SrcW>,
    tgt: TgtW,
    pub(crate) ids: Vec<NodeId>,
}

impl Weights {
    /// Binds the parameters as gradient leaves when `trainable`, constants otherwise.
    pub(crate) fn bind(g: &mut Graph, model: &Model, trainable: bool) -> Weights {
        let store = &model.params;
        let ids: Vec<NodeId> = store
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let get = |name: &str| ids[store.position(name).unwrap_or_else(|| panic!("missing parameter {name}"))];
        let cfg = &model.config;
        let lstm = |prefix: &str, hidden: usize| LstmW {
            wx: get(&format!("{prefix}.wx")),
            wh: get(&format!("{prefix}.wh")),
            b: get(&format!("{prefix}.b")),
            hidden,
        };
        let attn = |prefix: &str| AttnW {
            wq: get(&format!("{prefix}.wq")),
            wk: get(&format!("{prefix}.wk")),
            v: get(&format!("{prefix}.v")),
            dim: cfg.attn_dim,
        };
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                (
                    lstm(&format!("enc.{l}.fwd"), cfg.enc_hidden),
                    lstm(&format!("enc.{l}.bwd"), cfg.enc_hidden),
                )
            })
            .collect();
        let src = (cfg.objective != Objective::Se).then(|| SrcW {
            embed: get("src.embed"),
            att: attn("src.att"),
            layers: (0..cfg.src_dec_layers)
                .map(|l| lstm(&format!("src.{l}"), cfg.dec_hidden))
                .collect(),
            head: match cfg.objective {
                Objective::Me => SrcHead::Softmax { w: get("src.out.w"), b: get("src.out.b") },
                _ => SrcHead::Project {
                    w: get("src.proj.w"),
                    b: get("src.proj.b"),
                    candidates: g.constant(model.candidate_matrix()),
                },
            },
        });
        let tgt = TgtW {
            embed: get("tgt.embed"),
            att_h: attn("tgt.att_h"),
            att_s: (cfg.objective != Objective::Se).then(|| attn("tgt.att_s")),
            layers: (0..cfg.tgt_dec_layers)
                .map(|l| lstm(&format!("tgt.{l}"), cfg.dec_hidden))
                .collect(),
            out_w: get("tgt.out.w"),
            out_b: get("tgt.out.b"),
        };
        Weights { enc, src, tgt, ids }
    }
}

impl Weights {
    pub(crate) fn tgt_att_h(&self) -> &AttnW {
        &self.tgt.att_h
    }

    pub(crate) fn tgt_att_s(&self) -> Option<&AttnW> {
        self.tgt.att_s.as_ref()
    }

    pub(crate) fn tgt_layers(&self) -> usize {
        self.tgt.layers.len()
    }
}

pub(crate) fn src_att(w: &SrcW) -> &AttnW {
    &w.att
}

fn zeros(g: &mut Graph, rows: usize, cols: usize) -> NodeId {
    g.constant(Tensor::zeros(&[rows, cols]))
}

fn mask_column(g: &mut Graph, valid: &[bool]) -> Option<NodeId> {
    if valid.iter().all(|&v| v) {
        return None;
    }
    let col = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    Some(g.constant(Tensor::new(vec![valid.len(), 1], col).expect("mask column")))
}

/// One LSTM step from precomputed input gates `xz` (bias included).
fn lstm_from_gates(
    g: &mut Graph,
    w: &LstmW,
    xz: NodeId,
    state: &mut (Option<NodeId>, Option<NodeId>),
    batch: usize,
) -> Result<NodeId, ModelError> {
    let z = match state.0 {
        Some(h) => {
            let hz = g.matmul(h, w.wh)?;
            g.add(xz, hz)?
        }
        None => xz,
    };
    let c = match state.1 {
        Some(c) => c,
        None => zeros(g, batch, w.hidden),
    };
    let hc = g.lstm_cell(z, c)?;
    let h = g.slice(hc, 0, w.hidden)?;
    let c = g.slice(hc, w.hidden, w.hidden)?;
    *state = (Some(h), Some(c));
    Ok(h)
}

fn lstm_step(
    g: &mut Graph,
    w: &LstmW,
    x: NodeId,
    state: &mut (Option<NodeId>, Option<NodeId>),
    batch: usize,
) -> Result<NodeId, ModelError> {
    let xz = g.linear(x, w.wx, w.b)?;
    lstm_from_gates(g, w, xz, state, batch)
}

/// One direction of a masked recurrent pass over `x` of shape `[S, B, in]`.
/// Padded steps produce zero outputs and reset the carried state.
fn lstm_pass(
    g: &mut Graph,
    w: &LstmW,
    x: NodeId,
    masks: &[Option<NodeId>],
    batch: usize,
    reverse: bool,
) -> Result<Vec<NodeId>, ModelError> {
    let steps = masks.len();
    let xz = g.linear(x, w.wx, w.b)?;
    let mut out = vec![None; steps];
    let mut state = (None, None);
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let zt = g.select(xz, t)?;
        let mut h = lstm_from_gates(g, w, zt, &mut state, batch)?;
        if let Some(m) = masks[t] {
            h = g.mul(h, m)?;
            let c = g.mul(state.1.unwrap(), m)?;
            state = (Some(h), Some(c));
        }
        out[t] = Some(h);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Encoder states `[T', B, 2H]` and the valid length of each utterance.
pub(crate) fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    w: &Weights,
    frames: &Tensor,
    lens: &[usize],
) -> Result<(NodeId, Vec<usize>), ModelError> {
    let (t, b, f) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    let pairs = t / 2;
    let mut data = Vec::with_capacity(t * b * f);
    for p in 0..pairs {
        for bi in 0..b {
            for k in 0..2 {
                let src = ((2 * p + k) * b + bi) * f;
                data.extend_from_slice(&frames.data()[src..src + f]);
            }
        }
    }
    let mut x = g.constant(Tensor::new(vec![pairs, b, 2 * f], data)?);
    let mut steps = pairs;
    let mut lens: Vec<usize> = lens.iter().map(|l| l.div_ceil(2)).collect();
    let mut outputs = Vec::new();
    for (layer, (fw, bw)) in w.enc.iter().enumerate() {
        if layer > 0 {
            steps /= 2;
            let parts = (0..steps)
                .map(|p| g.concat(&[outputs[2 * p], outputs[2 * p + 1]]))
                .collect::<Result<Vec<_>, _>>()?;
            x = g.stack(&parts)?;
            lens = lens.iter().map(|l| l.div_ceil(2)).collect();
        }
        let masks: Vec<Option<NodeId>> = (0..steps)
            .map(|p| {
                let valid: Vec<bool> = lens.iter().map(|&l| p < l).collect();
                mask_column(g, &valid)
            })
            .collect();
        let fwd = lstm_pass(g, fw, x, &masks, b, false)?;
        let bwd = lstm_pass(g, bw, x, &masks, b, true)?;
        outputs = fwd
            .into_iter()
            .zip(bwd)
            .map(|(a, c)| g.concat(&[a, c]))
            .collect::<Result<Vec<_>, _>>()?;
    }
    debug_assert_eq!(cfg.enc_layers, w.enc.len());
    Ok((g.stack(&outputs)?, lens))
}

/// Attention memory: values `[N, B, E]`, their key projections, and a
/// batch-major validity mask of length `B * N`.
pub(crate) struct Memory {
    pub(crate) values: NodeId,
    keys: NodeId,
    pub(crate) mask: Vec<bool>,
    batch: usize,
}

pub(crate) fn memory(
    g: &mut Graph,
    att: &AttnW,
    values: NodeId,
    lens: &[usize],
) -> Result<Memory, ModelError> {
    let n = g.shape(values)[0];
    let keys = g.matmul(values, att.wk)?;
    let mask = lens.iter().flat_map(|&l| (0..n).map(move |i| i < l)).collect();
    Ok(Memory { values, keys, mask, batch: lens.len() })
}

/// Additive attention; returns the context `[B, E]` and weights `[B, N]`.
pub(crate) fn attend(
    g: &mut Graph,
    att: &AttnW,
    mem: &Memory,
    query: Option<NodeId>,
) -> Result<(NodeId, NodeId), ModelError> {
    let qp = match query {
        Some(q) => g.matmul(q, att.wq)?,
        None => zeros(g, mem.batch, att.dim),
    };
    let scores = g.attn_scores(qp, mem.keys, att.v)?;
    let weights = g.masked_softmax(scores, mem.mask.clone())?;
    let ctx = g.attn_context(weights, mem.values)?;
    Ok((ctx, weights))
}

pub(crate) type DecState = Vec<(Option<NodeId>, Option<NodeId>)>;

pub(crate) fn fresh_state(layers: usize) -> DecState {
    vec![(None, None); layers]
}

fn top(state: &DecState) -> Option<NodeId> {
    state.last().and_then(|s| s.0)
}

/// Reorders the rows of every carried state (beam search bookkeeping).
pub(crate) fn reorder(g: &mut Graph, state: &mut DecState, rows: &[usize]) -> Result<(), ModelError> {
    for (h, c) in state.iter_mut() {
        if let Some(x) = h {
            *x = g.gather(*x, rows.to_vec())?;
        }
        if let Some(x) = c {
            *x = g.gather(*x, rows.to_vec())?;
        }
    }
    Ok(())
}

/// One source-decoder step fed `tokens`; returns ŝ `[B, H]`.
pub(crate) fn source_step(
    g: &mut Graph,
    w: &SrcW,
    mem: &Memory,
    state: &mut DecState,
    tokens: Vec<usize>,
) -> Result<NodeId, ModelError> {
    let b = tokens.len();
    let e = g.gather(w.embed, tokens)?;
    let (ctx, _) = attend(g, &w.att, mem, top(state))?;
    let mut x = g.concat(&[e, ctx])?;
    for (lw, st) in w.layers.iter().zip(state.iter_mut()) {
        x = lstm_step(g, lw, x, st, b)?;
    }
    Ok(x)
}

/// `f_θ(ŝ)` for the embedding-supervised heads.
pub(crate) fn project(g: &mut Graph, w: &SrcW, s: NodeId) -> Result<Option<NodeId>, ModelError> {
    match w.head {
        SrcHead::Project { w: pw, b, .. } => Ok(Some(g.linear(s, pw, b)?)),
        SrcHead::Softmax { .. } => Ok(None),
    }
}

/// Log-distribution over the source output candidates.
pub(crate) fn source_logp(
    g: &mut Graph,
    w: &SrcW,
    s: NodeId,
    proj: Option<NodeId>,
    tau: f64,
) -> Result<NodeId, ModelError> {
    match (&w.head, proj) {
        (SrcHead::Softmax { w: ow, b }, _) => {
            let logits = g.linear(s, *ow, *b)?;
            Ok(g.log_softmax(logits, 1.0)?)
        }
        (SrcHead::Project { candidates, .. }, Some(p)) => {
            let n = g.normalize(p)?;
            let cos = g.matmul_t(n, *candidates)?;
            Ok(g.log_softmax(cos, tau)?)
        }
        (SrcHead::Project { .. }, None) => unreachable!("projection computed by caller"),
    }
}

/// One target-decoder step; returns the top hidden state and the
/// log-distribution over the target vocabulary.
pub(crate) fn target_step(
    g: &mut Graph,
    w: &Weights,
    mem_h: &Memory,
    mem_s: Option<&Memory>,
    state: &mut DecState,
    tokens: Vec<usize>,
) -> Result<(NodeId, NodeId), ModelError> {
    let t = &w.tgt;
    let b = tokens.len();
    let query = top(state);
    let e = g.gather(t.embed, tokens)?;
    let (ch, _) = attend(g, &t.att_h, mem_h, query)?;
    let mut ctx = vec![ch];
    if let (Some(att), Some(mem)) = (&t.att_s, mem_s) {
        ctx.push(attend(g, att, mem, query)?.0);
    }
    let mut parts = vec![e];
    parts.extend(&ctx);
    let mut x = g.concat(&parts)?;
    for (lw, st) in t.layers.iter().zip(state.iter_mut()) {
        x = lstm_step(g, lw, x, st, b)?;
    }
    let mut feats = vec![x];
    feats.extend(&ctx);
    let f = g.concat(&feats)?;
    let logits = g.linear(f, t.out_w, t.out_b)?;
    Ok((x, g.log_softmax(logits, 1.0)?))
}

/// Argmax of a log-probability row, never proposing PAD or BOS.
pub(crate) fn best_token(row: &[f64]) -> usize {
    let mut best = BOS + 1;
    for (i, &v) in row.iter().enumerate().skip(BOS + 1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Token sequences of one training batch, without the closing EOS.
pub(crate) struct BatchTokens<'a> {
    pub(crate) source: Vec<&'a [usize]>,
    pub(crate) target: Vec<&'a [usize]>,
}

/// Nodes of a batched training loss.
pub(crate) struct LossNodes {
    pub(crate) total: NodeId,
    pub(crate) src: Option<NodeId>,
    pub(crate) tgt: NodeId,
    /// Per target step: log-probs, gold ids and validity.
    pub(crate) tgt_steps: Vec<(NodeId, Vec<usize>, Vec<bool>)>,
    /// Per source step: projection (CD/CS) and the gold embeddings used.
    pub(crate) src_cos: Option<NodeId>,
    pub(crate) src_valid: Vec<bool>,
}

fn with_eos(seq: &[usize]) -> Vec<usize> {
    let mut v = seq.to_vec();
    v.push(crate::embeddings::EOS);
    v
}

/// Decoder inputs (BOS-shifted) and outputs, time-major, plus validity.
fn shifted(seqs: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Vec<bool>>, Vec<usize>) {
    let outs: Vec<Vec<usize>> = seqs.iter().map(|s| with_eos(s)).collect();
    let ins: Vec<Vec<usize>> = outs
        .iter()
        .map(|o| std::iter::once(BOS).chain(o[..o.len() - 1].iter().copied()).collect())
        .collect();
    let lens = outs.iter().map(Vec::len).collect();
    let (y_in, _) = crate::data::pad_tokens(&ins);
    let (y_out, mask) = crate::data::pad_tokens(&outs);
    (y_in, y_out, mask, lens)
}

/// Builds the variant loss of one batch, averaged over utterances.
pub(crate) fn batch_loss<R: Rng>(
    g: &mut Graph,
    model: &Model,
    w: &Weights,
    frames: &Tensor,
    frame_lens: &[usize],
    tokens: &BatchTokens,
    sampling_p: f64,
    rng: &mut R,
) -> Result<LossNodes, ModelError> {
    let cfg = &model.config;
    let b = frame_lens.len();
    let (enc, enc_lens) = encode(g, cfg, w, frames, frame_lens)?;
    let mem_h = memory(g, &w.tgt.att_h, enc, &enc_lens)?;

    let mut src_loss = None;
    let mut src_cos = None;
    let mut src_valid = Vec::new();
    let mut mem_s = None;
    if let Some(sw) = &w.src {
        let (y_in, y_out, mask, lens) = shifted(&tokens.source);
        let mem = memory(g, &sw.att, enc, &enc_lens)?;
        let mut state = fresh_state(sw.layers.len());
        let states = y_in
            .iter()
            .map(|ids| source_step(g, sw, &mem, &mut state, ids.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let s = g.stack(&states)?;
        let proj = project(g, sw, s)?;
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (m, (row, valid)) in y_out.iter().zip(&mask).enumerate() {
            for bi in 0..b {
                targets.push(model.candidate_index(row[bi]).unwrap_or(0));
                weights.push(if valid[bi] { cfg.alpha / (lens[bi] * b) as f64 } else { 0.0 });
                src_valid.push(valid[bi]);
            }
            debug_assert_eq!(targets.len(), (m + 1) * b);
        }
        let loss = if cfg.objective == Objective::Cd {
            let p = proj.expect("projection head");
            let mut refs = Vec::with_capacity(targets.len() * cfg.embed_dim);
            for row in &y_out {
                for &id in row {
                    refs.extend_from_slice(model.embeddings.row(id));
                }
            }
            let refs = g.constant(Tensor::new(vec![targets.len(), cfg.embed_dim], refs)?);
            let cos = g.cosine(p, refs)?;
            src_cos = Some(cos);
            let wsum: f64 = weights.iter().sum();
            let wt = g.constant(Tensor::new(vec![weights.len(), 1], weights)?);
            let wc = g.mul(cos, wt)?;
            let s = g.sum(wc)?;
            let neg = g.neg(s)?;
            g.add_scalar(neg, wsum)?
        } else {
            let logp = source_logp(g, sw, s, proj, cfg.temperature)?;
            g.nll(logp, targets, weights)?
        };
        src_loss = Some(loss);
        let values = match proj {
            Some(p) if !cfg.attend_raw_states => p,
            _ => s,
        };
        let att_s = w.tgt.att_s.as_ref().expect("source attention");
        mem_s = Some(memory(g, att_s, values, &lens)?);
    }

    let (y_in, y_out, mask, lens) = shifted(&tokens.target);
    let scale = if cfg.objective == Objective::Se { 1.0 } else { cfg.beta };
    let mut state = fresh_state(w.tgt.layers.len());
    let mut tgt_steps: Vec<(NodeId, Vec<usize>, Vec<bool>)> = Vec::new();
    let mut tgt_loss: Option<NodeId> = None;
    for (q, teacher) in y_in.iter().enumerate() {
        let mut input = teacher.clone();
        if q > 0 && sampling_p < 1.0 {
            let prev = g.val(tgt_steps[q - 1].0).clone();
            for (bi, tok) in input.iter_mut().enumerate() {
                if rng.random::<f64>() >= sampling_p {
                    *tok = best_token(prev.row_slice(bi));
                }
            }
        }
        let (_, logp) = target_step(g, w, &mem_h, mem_s.as_ref(), &mut state, input)?;
        let weights = (0..b)
            .map(|bi| if mask[q][bi] { scale / (lens[bi] * b) as f64 } else { 0.0 })
            .collect();
        let nll = g.nll(logp, y_out[q].clone(), weights)?;
        tgt_loss = Some(match tgt_loss {
            Some(acc) => g.add(acc, nll)?,
            None => nll,
        });
        tgt_steps.push((logp, y_out[q].clone(), mask[q].clone()));
    }
    let tgt = tgt_loss.expect("at least the EOS step");
    let total = match src_loss {
        Some(s) => g.add(s, tgt)?,
        None => tgt,
    };
    Ok(LossNodes { total, src: src_loss, tgt, tgt_steps, src_cos, src_valid })
}

/// Rows of the normalized candidate table, `[V, D]`.
pub(crate) fn normalized_rows(rows: &[&[f64]]) -> Tensor {
    let refs: Vec<Vec<f64>> = rows.iter().map(|r| vecmath::normalized(r)).collect();
    Tensor::from_rows(&refs)
}
