//! Embedding-space diagnostics: predicted-embedding extraction, Laplacian
//! eigenvalue similarity, Procrustes + CSLS retrieval and hubness.

mod align;
mod spectral;

pub use align::{
    align, apply_map, csls_rank, hubness_skewness, least_squares_map, precision_at_k, procrustes_fit,
    AlignmentResult, Csls, Procrustes, Retrieval,
};
pub use spectral::{eigenvector_similarity, laplacian_spectrum, leading_count};

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ParallelCorpus;
use crate::embeddings::UNK;
use crate::model::{Model, ModelError, Objective};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-word mean of the source-decoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedEmbeddingSet {
    pub words: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PredictedEmbeddingSet {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// The `limit` most frequent source words of `train` that have an embedding.
pub fn analysis_words(model: &Model, train: &ParallelCorpus, limit: usize) -> Vec<String> {
    train
        .source_frequencies()
        .into_iter()
        .map(|(w, _)| w)
        .filter(|w| model.source_vocab().id(w).is_some_and(|id| id > UNK))
        .take(limit)
        .collect()
}

/// Teacher-forced source decoding over the utterances made only of `words`;
/// each word's vector is the mean of the states (`f_θ(ŝ)` for CD/CS, raw
/// `ŝ` for ME) at the steps predicting it. Unseen words are left out and the
/// output follows the order of `words`.
pub fn extract_predicted(
    model: &Model,
    corpus: &ParallelCorpus,
    words: &[String],
) -> Result<PredictedEmbeddingSet, AnalysisError> {
    if model.config.objective == Objective::Se {
        return Err(ModelError::Unsupported("embedding extraction without a source decoder").into());
    }
    let allowed: HashSet<&str> = words.iter().map(String::as_str).collect();
    let mut sums: HashMap<usize, (Vec<f64>, usize)> = HashMap::new();
    let mut used = 0;
    for u in &corpus.utterances {
        if u.source.is_empty() || !u.source.iter().all(|w| allowed.contains(w.as_str())) {
            continue;
        }
        used += 1;
        let ids = model.source_vocab().encode(&u.source);
        let enc = model.encode(&u.frames)?;
        let out = model.decode_source(&enc, Some(&ids))?;
        let states = out.projected.as_ref().unwrap_or(&out.states);
        for (m, &id) in ids.iter().enumerate() {
            let row = states.row_slice(m);
            let e = sums.entry(id).or_insert_with(|| (vec![0.0; row.len()], 0));
            e.0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    if used == 0 {
        log::warn!("no utterance consists only of analysis words");
    }
    let mut set = PredictedEmbeddingSet { words: vec![], vectors: vec![], counts: vec![] };
    for w in words {
        let Some(id) = model.source_vocab().id(w) else { continue };
        if let Some((sum, n)) = sums.remove(&id) {
            set.vectors.push(sum.iter().map(|x| x / n as f64).collect());
            set.words.push(w.clone());
            set.counts.push(n);
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub max_words: usize,
    /// Neighbourhood size for CSLS.
    pub k_nn: usize,
    /// Neighbourhood size for hubness.
    pub hub_k: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { max_words: 500, k_nn: 10, hub_k: 10 }
    }
}

/// Number of most frequent words used to fit the map: a tenth of the words,
/// but at least the embedding width so the map is determined.
pub fn train_dictionary_size(words: usize, dim: usize) -> usize {
    words.div_ceil(10).max(dim).min(words.saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub eigenvector_similarity: f64,
    pub p_at_1: f64,
    pub p_at_5: f64,
    pub hubness_skewness: f64,
    pub word_count: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub report: AnalysisReport,
    pub predicted: PredictedEmbeddingSet,
    pub alignment: AlignmentResult,
}

impl Analysis {
    /// `word,rank,top` for every held-out word.
    pub fn retrieval_csv(&self) -> String {
        let w = &self.predicted.words;
        let mut s = String::from("word,rank,top\n");
        for r in &self.alignment.retrievals {
            s.push_str(&format!("{},{},{}\n", w[r.query], r.rank, w[r.top]));
        }
        s
    }
}

/// Compares the model's predicted embeddings for the frequent words of
/// `train`, extracted on `eval`, against the pre-trained table.
pub fn analyze(
    model: &Model,
    train: &ParallelCorpus,
    eval: &ParallelCorpus,
    opts: &AnalysisOptions,
    config_hash: &str,
) -> Result<Analysis, AnalysisError> {
    let words = analysis_words(model, train, opts.max_words);
    let predicted = extract_predicted(model, eval, &words)?;
    let n = predicted.len();
    if n < 3 {
        return Err(AnalysisError::Invalid(format!("only {n} analysis words occur in the evaluation utterances")));
    }
    let table = model.embeddings();
    let pretrained: Vec<Vec<f64>> = predicted
        .words
        .iter()
        .map(|w| table.vector_of(w).expect("analysis words have embeddings").to_vec())
        .collect();
    let eig = eigenvector_similarity(&predicted.vectors, &pretrained)?;

    let ntrain = train_dictionary_size(n, table.dim());
    let train_dict: Vec<(usize, usize)> = (0..ntrain).map(|i| (i, i)).collect();
    let eval_dict: Vec<(usize, usize)> = (ntrain..n).map(|i| (i, i)).collect();
    let queries = if predicted.vectors[0].len() == table.dim() {
        predicted.vectors.clone()
    } else {
        let map = least_squares_map(&predicted.vectors[..ntrain], &pretrained[..ntrain])?;
        apply_map(&predicted.vectors, &map)?
    };
    let k_nn = opts.k_nn.min(n - 1).max(1);
    let alignment = align(&queries, &pretrained, &train_dict, &eval_dict, k_nn)?;
    let hub = hubness_skewness(&predicted.vectors, opts.hub_k.min(n - 1).max(1))?;
    let report = AnalysisReport {
        eigenvector_similarity: eig,
        p_at_1: precision_at_k(&alignment, 1)?,
        p_at_5: precision_at_k(&alignment, 5)?,
        hubness_skewness: hub,
        word_count: n,
        config_hash: config_hash.to_string(),
    };
    Ok(Analysis { report, predicted, alignment })
}

/// Haar-random orthogonal `d × d` matrix (QR of a gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
