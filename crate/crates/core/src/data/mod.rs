//! Synthetic parallel speech corpora, BPE subwords, batching and corpus files.

mod batch;
mod bpe;
mod io;
mod synth;

pub use batch::{pad_tokens, Batch, BatchStream};
pub use bpe::{BpeModel, CONTINUATION, UNK_PIECE};
pub use io::{read_corpus_dir, read_split, sha256_hex, write_corpus_dir, write_split, CorpusManifest, SplitManifest};
pub use synth::{synth_corpus, Lexicon, Reorder, SynthOutput, SynthSpec, ZipfSampler};

use crate::diffcore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("invalid BPE request: {0}")]
    InvalidBpe(String),
    #[error("corrupt BPE model: {0}")]
    CorruptModel(String),
    #[error("corrupt corpus file {file}: {msg}")]
    CorruptCorpus { file: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Embedding(#[from] crate::embeddings::EmbeddingError),
}

/// One spoken utterance with its transcript and translation references.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `[T, F]` acoustic frames.
    pub frames: Tensor,
    pub source: Vec<String>,
    /// One or more reference translations, as words.
    pub targets: Vec<Vec<String>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub utterances: Vec<Utterance>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Source-word counts, most frequent first (ties alphabetical).
    pub fn source_frequencies(&self) -> Vec<(String, usize)> {
        let mut counts = std::collections::BTreeMap::<&str, usize>::new();
        for u in &self.utterances {
            for w in &u.source {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut v: Vec<(String, usize)> = counts.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    /// First-reference target sentences joined by spaces, one per line.
    pub fn target_text(&self) -> String {
        let mut s = String::new();
        for u in &self.utterances {
            s.push_str(&u.targets[0].join(" "));
            s.push('\n');
        }
        s
    }
}
