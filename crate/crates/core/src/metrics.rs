//! Corpus BLEU with multiple references, and word error rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("no hypotheses to score")]
    EmptyCorpus,
    #[error("utterance {0} has no references")]
    NoReferences(usize),
    #[error("{hyps} hypotheses but {refs} reference sets")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("reference is empty")]
    EmptyReference,
}

/// Hypotheses paired with 1..n references each.
#[derive(Clone, Debug, Default)]
pub struct ScoredCorpus {
    pub hypotheses: Vec<Vec<String>>,
    pub reference_sets: Vec<Vec<Vec<String>>>,
}

impl ScoredCorpus {
    pub fn new(hypotheses: Vec<Vec<String>>, reference_sets: Vec<Vec<Vec<String>>>) -> Result<Self, MetricError> {
        if hypotheses.len() != reference_sets.len() {
            return Err(MetricError::CountMismatch {
                hyps: hypotheses.len(),
                refs: reference_sets.len(),
            });
        }
        if let Some(i) = reference_sets.iter().position(Vec::is_empty) {
            return Err(MetricError::NoReferences(i));
        }
        Ok(ScoredCorpus {
            hypotheses,
            reference_sets,
        })
    }
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus-level BLEU in percent, without smoothing.
///
/// Clipping uses the maximum count over each utterance's references; the
/// effective reference length is the one closest to the hypothesis (shorter
/// on ties). Orders for which the whole corpus has no hypothesis n-grams are
/// left out of the geometric mean; any other zero precision gives 0.
pub fn bleu(scored: &ScoredCorpus, max_n: usize) -> Result<f64, MetricError> {
    if scored.hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (i, (hyp, refs)) in scored.hypotheses.iter().zip(&scored.reference_sets).enumerate() {
        if refs.is_empty() {
            return Err(MetricError::NoReferences(i));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        for n in 1..=max_n {
            let hc = ngram_counts(hyp, n);
            let rcs: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (g, &c) in &hc {
                let cap = rcs.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += c.min(cap);
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Unit-cost Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate in percent; exceeds 100 when the hypothesis inserts enough.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(100.0 * edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// `{bleu, wer_mean, utterances}` as written by the scoring tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu: f64,
    pub wer_mean: f64,
    pub utterances: usize,
}

/// BLEU over all references and mean WER against the first reference.
pub fn score_report(scored: &ScoredCorpus) -> Result<ScoreReport, MetricError> {
    let b = bleu(scored, 4)?;
    let mut w = 0.0;
    for (h, refs) in scored.hypotheses.iter().zip(&scored.reference_sets) {
        w += wer(h, &refs[0])?;
    }
    Ok(ScoreReport {
        bleu: b,
        wer_mean: w / scored.hypotheses.len() as f64,
        utterances: scored.hypotheses.len(),
    })
}
