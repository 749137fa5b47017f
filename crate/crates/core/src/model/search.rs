use std::collections::HashMap;

use super::net::{self, Memory};
use super::{ModelError, Session};
use crate::diffcore::{NodeId, Tensor};
use crate::embeddings::{BOS, EOS};

/// A decoded target sequence (without EOS) and its length-normalized
/// log-probability, where the length counts the closing EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    /// False when `max_len` was reached before EOS.
    pub finished: bool,
}

fn tile(s: &mut Session, node: NodeId, k: usize) -> Result<NodeId, ModelError> {
    let v = s.g.val(node);
    let (n, e) = (v.shape()[0], v.shape()[2]);
    let mut data = Vec::with_capacity(n * k * e);
    for row in v.data().chunks(e) {
        for _ in 0..k {
            data.extend_from_slice(row);
        }
    }
    Ok(s.g.constant(Tensor::new(vec![n, k, e], data)?))
}

fn memories(
    s: &mut Session,
    enc: NodeId,
    enc_len: usize,
    src: Option<NodeId>,
    k: usize,
) -> Result<(Memory, Option<Memory>), ModelError> {
    let enc_k = tile(s, enc, k)?;
    let mem_h = net::memory(&mut s.g, s.w.tgt_att_h(), enc_k, &vec![enc_len; k])?;
    let mem_s = match (src, s.w.tgt_att_s()) {
        (Some(v), Some(_)) => {
            let m = s.g.shape(v)[0];
            let vk = tile(s, v, k)?;
            let att = s.w.tgt_att_s().expect("checked above");
            Some(net::memory(&mut s.g, att, vk, &vec![m; k])?)
        }
        (None, None) => None,
        _ => return Err(ModelError::InvalidArgument("source memory does not match objective".into())),
    };
    Ok((mem_h, mem_s))
}

pub(crate) fn beam_search(
    s: &mut Session,
    enc: NodeId,
    enc_len: usize,
    src: Option<NodeId>,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let mut cache: HashMap<usize, (Memory, Option<Memory>)> = HashMap::new();
    let mut state = net::fresh_state(s.w.tgt_layers());
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let k = live.len();
        if !cache.contains_key(&k) {
            let m = memories(s, enc, enc_len, src, k)?;
            cache.insert(k, m);
        }
        let (mem_h, mem_s) = &cache[&k];
        let inputs = live.iter().map(|(t, _)| *t.last().unwrap_or(&BOS)).collect();
        let (_, logp) = net::target_step(&mut s.g, &s.w, mem_h, mem_s.as_ref(), &mut state, inputs)?;
        let lp = s.g.val(logp);
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(k * lp.cols());
        for (i, (_, score)) in live.iter().enumerate() {
            for (v, &l) in lp.row_slice(i).iter().enumerate().skip(EOS) {
                cands.push((score + l, i, v));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        let mut parents = Vec::with_capacity(beam);
        for (rank, &(score, i, v)) in cands.iter().enumerate() {
            if next.len() == beam {
                break;
            }
            if v == EOS {
                if rank < beam {
                    let tokens = live[i].0.clone();
                    let len = (tokens.len() + 1) as f64;
                    finished.push(Hypothesis { tokens, score: score / len, finished: true });
                }
            } else {
                let mut t = live[i].0.clone();
                t.push(v);
                next.push((t, score));
                parents.push(i);
            }
        }
        if finished.len() >= beam || next.is_empty() {
            live.clear();
            break;
        }
        net::reorder(&mut s.g, &mut state, &parents)?;
        live = next;
    }
    let pick = |hyps: Vec<Hypothesis>| {
        hyps.into_iter().fold(None::<Hypothesis>, |best, h| match best {
            Some(b) if b.score >= h.score => Some(b),
            _ => Some(h),
        })
    };
    if let Some(best) = pick(finished) {
        return Ok(best);
    }
    let open = live
        .into_iter()
        .map(|(tokens, score)| {
            let len = tokens.len().max(1) as f64;
            Hypothesis { tokens, score: score / len, finished: false }
        })
        .collect();
    pick(open).ok_or_else(|| ModelError::InvalidArgument("beam search produced no hypothesis".into()))
}
