//! Vocabularies and pre-trained word-embedding tables in the `.vec` text format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::vecmath;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("token {0:?} collides with a reserved symbol")]
    ReservedToken(String),
    #[error("query vector is zero")]
    ZeroQuery,
    #[error("k = {k} exceeds vocabulary size {size}")]
    InvalidK { k: usize, size: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token inventory with the four reserved ids in front of the real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.into();
            if RESERVED.contains(&w.as_str()) {
                return Err(EmbeddingError::ReservedToken(w));
            }
            if index.contains_key(&w) {
                return Err(EmbeddingError::DuplicateToken(w));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens after the reserved block.
    pub fn real_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id_or_unk(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// One `dim`-wide row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocab,
    dim: usize,
    vectors: Vec<f64>,
    unit_normalized: bool,
}

impl EmbeddingTable {
    /// Builds a table from real-word rows; reserved rows are filled in
    /// (PAD zero, BOS/EOS/UNK the mean of all real rows).
    pub fn from_rows(words: Vec<String>, rows: Vec<Vec<f64>>, unit_normalized: bool) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(EmbeddingError::Parse {
                line: 1,
                msg: "no embedding rows".into(),
            });
        }
        let vocab = Vocab::new(words)?;
        let mut rows = rows;
        if unit_normalized {
            for r in &mut rows {
                *r = vecmath::normalized(r);
            }
        }
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        if unit_normalized {
            mean = vecmath::normalized(&mean);
        }
        let mut vectors = vec![0.0; dim];
        for _ in 1..RESERVED.len() {
            vectors.extend_from_slice(&mean);
        }
        for r in &rows {
            vectors.extend_from_slice(r);
        }
        Ok(EmbeddingTable {
            vocab,
            dim,
            vectors,
            unit_normalized,
        })
    }

    /// Parses `.vec` text: a `"<count> <dim>"` header, then one
    /// `"<token> v1 … v_dim"` line per word. At most `limit` words are kept.
    pub fn parse_vec(text: &str, limit: usize, unit_normalized: bool) -> Result<Self, EmbeddingError> {
        let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
        let header = lines.next().unwrap_or("");
        let parse_err = |line: usize, msg: String| EmbeddingError::Parse { line, msg };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(1, format!("expected \"<count> <dim>\", got {header:?}")));
        }
        let count: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(1, format!("bad word count {:?}", fields[0])))?;
        let dim: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(1, format!("bad dimension {:?}", fields[1])))?;
        if dim == 0 {
            return Err(parse_err(1, "dimension must be positive".into()));
        }
        let take = count.min(limit);
        let mut words = Vec::with_capacity(take);
        let mut rows = Vec::with_capacity(take);
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines.enumerate() {
            if words.len() == take {
                break;
            }
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ').filter(|s| !s.is_empty());
            let token = parts.next().unwrap().to_string();
            let row: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| parse_err(lineno, format!("bad value {p:?}")))
                })
                .collect::<Result<_, _>>()?;
            if row.len() != dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {dim} values, found {}", row.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(lineno, "non-finite value".into()));
            }
            if !seen.insert(token.clone()) {
                return Err(EmbeddingError::DuplicateToken(token));
            }
            words.push(token);
            rows.push(row);
        }
        if words.len() < take {
            return Err(parse_err(
                words.len() + 2,
                format!("header promises {count} words, found {}", words.len()),
            ));
        }
        Self::from_rows(words, rows, unit_normalized)
    }

    pub fn load_vec(path: &Path, limit: usize, unit_normalized: bool) -> Result<Self, EmbeddingError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_vec(&text, limit, unit_normalized)
    }

    /// Serializes the real-word rows with 17 significant digits.
    pub fn to_vec_text(&self) -> String {
        let words = self.vocab.real_tokens();
        let mut s = format!("{} {}\n", words.len(), self.dim);
        for (k, w) in words.iter().enumerate() {
            s.push_str(w);
            for v in self.row(k + RESERVED.len()) {
                write!(s, " {v:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save_vec(&self, path: &Path) -> Result<(), EmbeddingError> {
        std::fs::write(path, self.to_vec_text())?;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn unit_normalized(&self) -> bool {
        self.unit_normalized
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector_of(&self, token: &str) -> Option<&[f64]> {
        self.vocab.id(token).map(|i| self.row(i))
    }

    /// Exact top-`k` real-word rows by cosine to `query`, descending, ties
    /// by lower id. Reserved rows never appear.
    pub fn nearest_neighbors(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>, EmbeddingError> {
        let size = self.len() - RESERVED.len();
        if k > size {
            return Err(EmbeddingError::InvalidK { k, size });
        }
        if query.iter().all(|&v| v == 0.0) {
            return Err(EmbeddingError::ZeroQuery);
        }
        let mut scored: Vec<(usize, f64)> = (RESERVED.len()..self.len())
            .map(|i| (i, vecmath::cosine(query, self.row(i))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}
