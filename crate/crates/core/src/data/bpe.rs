use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::embeddings::Vocab;

/// Suffix marking a piece that continues into the next piece of the same word.
pub const CONTINUATION: &str = "@@";
/// Piece emitted for characters outside the trained alphabet.
pub const UNK_PIECE: &str = "<unk>";

/// Ordered merge list learned by greedy pair merging inside words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpeModel {
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    /// Set when the corpus ran out of pairs before the requested merge count.
    pub exhausted: bool,
}

impl BpeModel {
    /// Learns up to `num_merges` merges from whitespace-separated text.
    /// The most frequent pair wins; ties go to the lexicographically smallest pair.
    pub fn train(text: &str, num_merges: i64) -> Result<Self, DataError> {
        if num_merges < 0 {
            return Err(DataError::InvalidBpe(format!(
                "merge count must be non-negative, got {num_merges}"
            )));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for w in text.split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
        if freq.is_empty() {
            return Err(DataError::InvalidBpe("training text is empty".into()));
        }
        let alphabet: BTreeSet<String> = freq
            .keys()
            .flat_map(|w| w.chars().map(String::from))
            .collect();
        let mut words: Vec<(Vec<String>, usize)> = freq
            .iter()
            .map(|(w, &c)| (w.chars().map(String::from).collect(), c))
            .collect();
        let mut merges = Vec::new();
        let mut exhausted = false;
        while (merges.len() as i64) < num_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for p in syms.windows(2) {
                    *pairs.entry((&p[0], &p[1])).or_default() += c;
                }
            }
            let mut best: Option<((&str, &str), usize)> = None;
            for (p, &c) in &pairs {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((*p, c));
                }
            }
            let Some(((l, r), _)) = best else {
                exhausted = true;
                break;
            };
            let pair = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                merge_in_place(syms, &pair);
            }
            merges.push(pair);
        }
        Ok(BpeModel {
            alphabet: alphabet.into_iter().collect(),
            merges,
            exhausted,
        })
    }

    /// Rebuilds a model from parts, checking that every merge refers to a
    /// symbol the alphabet or an earlier merge produces.
    pub fn from_parts(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Result<Self, DataError> {
        let m = BpeModel {
            alphabet,
            merges,
            exhausted: false,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut known: BTreeSet<String> = self.alphabet.iter().cloned().collect();
        for (i, (l, r)) in self.merges.iter().enumerate() {
            for s in [l, r] {
                if !known.contains(s) {
                    return Err(DataError::CorruptModel(format!(
                        "merge {i} references unknown symbol {s:?}"
                    )));
                }
            }
            known.insert(format!("{l}{r}"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let m: BpeModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    /// Every piece `apply` can emit, in a fixed order.
    pub fn pieces(&self) -> Vec<String> {
        let mut out = vec![UNK_PIECE.to_string(), format!("{UNK_PIECE}{CONTINUATION}")];
        let syms = self
            .alphabet
            .iter()
            .cloned()
            .chain(self.merges.iter().map(|(l, r)| format!("{l}{r}")));
        let mut seen = BTreeSet::new();
        for s in syms {
            if seen.insert(s.clone()) {
                out.push(format!("{s}{CONTINUATION}"));
                out.push(s);
            }
        }
        out
    }

    /// Target vocabulary over [`Self::pieces`]; the plain unknown piece maps
    /// to the reserved unknown id.
    pub fn vocab(&self) -> Result<Vocab, DataError> {
        Ok(Vocab::new(self.pieces().into_iter().filter(|p| p != UNK_PIECE))?)
    }

    fn encode_word(&self, word: &str, cache: &mut HashMap<String, Vec<String>>) -> Vec<String> {
        if let Some(p) = cache.get(word) {
            return p.clone();
        }
        let mut syms: Vec<String> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                if self.alphabet.binary_search(&s).is_ok() {
                    s
                } else {
                    UNK_PIECE.to_string()
                }
            })
            .collect();
        for m in &self.merges {
            merge_in_place(&mut syms, m);
        }
        let n = syms.len();
        for s in syms.iter_mut().take(n.saturating_sub(1)) {
            s.push_str(CONTINUATION);
        }
        cache.insert(word.to_string(), syms.clone());
        syms
    }

    /// Splits a sentence into subword pieces; non-final pieces of a word carry
    /// the continuation marker.
    pub fn apply(&self, sentence: &str) -> Vec<String> {
        let mut cache = HashMap::new();
        sentence
            .split_whitespace()
            .flat_map(|w| self.encode_word(w, &mut cache))
            .collect()
    }

    /// Joins pieces back into space-separated words.
    pub fn decode<S: AsRef<str>>(pieces: &[S]) -> String {
        let mut out = String::new();
        for p in pieces {
            let p = p.as_ref();
            match p.strip_suffix(CONTINUATION) {
                Some(stem) => out.push_str(stem),
                None => {
                    out.push_str(p);
                    out.push(' ');
                }
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        out
    }
}

fn merge_in_place(syms: &mut Vec<String>, (l, r): &(String, String)) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && &syms[i] == l && &syms[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_covers_every_applied_piece() {
        let m = BpeModel::train("low lower lowest newer wider", 6).unwrap();
        let v = m.vocab().unwrap();
        for p in m.apply("lowest wider newest") {
            assert!(v.id(&p).is_some(), "{p}");
        }
        assert_eq!(v.id_or_unk(UNK_PIECE), crate::embeddings::UNK);
        assert_eq!(m.apply("lo#"), vec!["lo@@".to_string(), UNK_PIECE.to_string()]);
    }

    #[test]
    fn one_merge_on_repeated_word() {
        let m = BpeModel::train("ab ab", 1).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "b".to_string())]);
        assert_eq!(m.apply("ab"), vec!["ab".to_string()]);
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = BpeModel::train("abc ca", 0).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.apply("cab"), vec!["c@@", "a@@", "b"]);
    }

    #[test]
    fn ties_go_to_the_smallest_pair() {
        let m = BpeModel::train("abc", 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn negative_merge_count_is_rejected() {
        assert!(matches!(BpeModel::train("ab", -1), Err(DataError::InvalidBpe(_))));
    }

    #[test]
    fn exhaustion_is_flagged() {
        let m = BpeModel::train("ab ab", 5).unwrap();
        assert_eq!(m.merges().len(), 1);
        assert!(m.exhausted);
        let m = BpeModel::train("abcd abce", 2).unwrap();
        assert_eq!(m.merges().len(), 2);
        assert!(!m.exhausted);
    }

    #[test]
    fn empty_sentence_is_empty() {
        let m = BpeModel::train("ab ab", 1).unwrap();
        assert!(m.apply("").is_empty());
    }

    #[test]
    fn unknown_characters_become_unk_pieces() {
        let m = BpeModel::train("ab", 0).unwrap();
        assert_eq!(m.apply("az"), vec!["a@@".to_string(), UNK_PIECE.to_string()]);
    }

    #[test]
    fn corrupt_merge_references_are_detected() {
        let err = BpeModel::from_parts(
            vec!["a".into(), "b".into()],
            vec![("a".into(), "b".into()), ("ab".into(), "zz".into())],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::CorruptModel(_)));
        let m = BpeModel::train("abab ba", 3).unwrap();
        assert_eq!(BpeModel::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn every_piece_is_listed() {
        let m = BpeModel::train("thee thoo shee sha", 6).unwrap();
        let pieces = m.pieces();
        for s in ["shee thoo", "the", "sho", "a"] {
            for p in m.apply(s) {
                assert!(pieces.contains(&p), "{p}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_apply(words in prop::collection::vec("[a-h]{1,7}", 0..8)) {
            let m = BpeModel::train("abc bca cab ddeeff gh hg abcabc", 12).unwrap();
            let s = words.join(" ");
            prop_assert_eq!(BpeModel::decode(&m.apply(&s)), s);
        }
    }
}
