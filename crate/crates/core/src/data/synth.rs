use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, ParallelCorpus, Utterance};
use crate::diffcore::Tensor;
use crate::embeddings::EmbeddingTable;
use crate::vecmath;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reorder {
    Identity,
    Reverse,
}

/// Parameters of the synthetic speech-translation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Inclusive range of frames emitted per source token.
    pub frames_per_token: [usize; 2],
    pub noise_std: f64,
    /// Inclusive range of source sentence lengths.
    pub sentence_length: [usize; 2],
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
    pub reorder: Reorder,
    /// Largest synonym set per source word (sets have 1..=max_synonyms words).
    pub max_synonyms: usize,
    /// References written for dev and test utterances.
    pub references: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 50,
            embed_dim: 16,
            frames_per_token: [4, 8],
            noise_std: 0.1,
            sentence_length: [3, 6],
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            zipf_exponent: 1.0,
            seed: 1,
            reorder: Reorder::Reverse,
            max_synonyms: 4,
            references: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.vocab_size < 10 {
            return bad("vocab_size must be at least 10");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.frames_per_token[0] < 1 || self.frames_per_token[0] > self.frames_per_token[1] {
            return bad("frames_per_token must satisfy 1 <= min <= max");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a finite non-negative number");
        }
        if self.sentence_length[0] < 1 || self.sentence_length[0] > self.sentence_length[1] {
            return bad("sentence_length must satisfy 1 <= min <= max");
        }
        if self.train_size == 0 {
            return bad("train_size must be positive");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be finite and non-negative");
        }
        if self.max_synonyms == 0 || self.references == 0 {
            return bad("max_synonyms and references must be positive");
        }
        Ok(())
    }
}

/// Inverse-CDF sampler over ranks `0..n` with `P(r) ∝ (r + 1)^-s`.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, exponent: f64) -> Self {
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 1..=n {
            acc += (r as f64).powf(-exponent);
            cdf.push(acc);
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        ZipfSampler { cdf }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Source word → ordered synonym set of target words (index 0 is canonical).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: Vec<(String, Vec<String>)>,
}

impl Lexicon {
    pub fn synonyms(&self, source: &str) -> Option<&[String]> {
        self.entries
            .iter()
            .find(|(s, _)| s == source)
            .map(|(_, t)| t.as_slice())
    }
}

pub struct SynthOutput {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
    /// The fabricated "pre-trained" embedding table.
    pub embeddings: EmbeddingTable,
    pub lexicon: Lexicon,
    /// Frame emitted at both utterance boundaries.
    pub boundary_signature: Vec<f64>,
}

const SRC_ONSETS: &[&str] = &["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "ch", "ll"];
const SRC_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const TGT_ONSETS: &[&str] = &["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "th", "sh"];
const TGT_NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ee", "oo", "ay"];

fn fresh_word<R: Rng>(rng: &mut R, onsets: &[&str], nuclei: &[&str], syllables: [usize; 2], seen: &mut HashSet<String>) -> String {
    loop {
        let n = rng.random_range(syllables[0]..=syllables[1]);
        let mut w = String::new();
        for _ in 0..n {
            w.push_str(onsets.choose(rng).unwrap());
            w.push_str(nuclei.choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            return w;
        }
    }
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if vecmath::dot(&v, &v) > 1e-6 {
            return vecmath::normalized(&v);
        }
    }
}

/// Generates train/dev/test splits together with the embedding table they
/// were drawn from. Identical specs give bit-identical output.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthOutput, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.embed_dim;

    let mut seen = HashSet::new();
    let words: Vec<String> = (0..spec.vocab_size)
        .map(|_| fresh_word(&mut rng, SRC_ONSETS, SRC_VOWELS, [2, 3], &mut seen))
        .collect();
    let rows: Vec<Vec<f64>> = (0..spec.vocab_size).map(|_| unit_gaussian(&mut rng, d)).collect();
    let signature = unit_gaussian(&mut rng, d);
    let embeddings = EmbeddingTable::from_rows(words.clone(), rows.clone(), false)?;

    let mut tgt_seen = HashSet::new();
    let lexicon = Lexicon {
        entries: words
            .iter()
            .map(|w| {
                let k = rng.random_range(1..=spec.max_synonyms);
                let syn = (0..k)
                    .map(|_| fresh_word(&mut rng, TGT_ONSETS, TGT_NUCLEI, [1, 3], &mut tgt_seen))
                    .collect();
                (w.clone(), syn)
            })
            .collect(),
    };

    let zipf = ZipfSampler::new(spec.vocab_size, spec.zipf_exponent);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let make_split = |n: usize, refs: usize, rng: &mut ChaCha8Rng| -> ParallelCorpus {
        let mut utterances = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.random_range(spec.sentence_length[0]..=spec.sentence_length[1]);
            let ids: Vec<usize> = (0..len).map(|_| zipf.sample(rng)).collect();
            let mut frames = signature.clone();
            for &v in &ids {
                let f = rng.random_range(spec.frames_per_token[0]..=spec.frames_per_token[1]);
                for _ in 0..f {
                    for &x in &rows[v] {
                        let e = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                        frames.push(x + e);
                    }
                }
            }
            frames.extend_from_slice(&signature);
            let t = frames.len() / d;
            let mut order: Vec<usize> = ids.clone();
            if spec.reorder == Reorder::Reverse {
                order.reverse();
            }
            let mut targets = Vec::with_capacity(refs);
            targets.push(order.iter().map(|&v| lexicon.entries[v].1[0].clone()).collect());
            for _ in 1..refs {
                targets.push(
                    order
                        .iter()
                        .map(|&v| {
                            let syn = &lexicon.entries[v].1;
                            syn[rng.random_range(0..syn.len())].clone()
                        })
                        .collect(),
                );
            }
            utterances.push(Utterance {
                frames: Tensor::new(vec![t, d], frames).expect("frame buffer matches its shape"),
                source: ids.iter().map(|&v| words[v].clone()).collect(),
                targets,
            });
        }
        ParallelCorpus { utterances }
    };
    let train = make_split(spec.train_size, 1, &mut rng);
    let dev = make_split(spec.dev_size, spec.references, &mut rng);
    let test = make_split(spec.test_size, spec.references, &mut rng);
    Ok(SynthOutput {
        train,
        dev,
        test,
        embeddings,
        lexicon,
        boundary_signature: signature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_size: 40,
            dev_size: 5,
            test_size: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_identity_frames_copy_embeddings() {
        let spec = SynthSpec {
            noise_std: 0.0,
            frames_per_token: [2, 2],
            reorder: Reorder::Identity,
            ..small()
        };
        let out = synth_corpus(&spec).unwrap();
        let u = &out.train.utterances[0];
        let d = spec.embed_dim;
        for (k, w) in u.source.iter().enumerate() {
            let e = out.embeddings.vector_of(w).unwrap();
            for f in 0..2 {
                let r = 1 + 2 * k + f;
                assert_eq!(&u.frames.data()[r * d..(r + 1) * d], e);
            }
        }
        let renamed: Vec<String> = u
            .source
            .iter()
            .map(|w| out.lexicon.synonyms(w).unwrap()[0].clone())
            .collect();
        assert_eq!(renamed, u.targets[0]);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = synth_corpus(&small()).unwrap();
        let b = synth_corpus(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn reverse_rule_reverses_the_lexicon_mapping() {
        let out = synth_corpus(&small()).unwrap();
        for u in &out.dev.utterances {
            let expected: Vec<String> = u
                .source
                .iter()
                .rev()
                .map(|w| out.lexicon.synonyms(w).unwrap()[0].clone())
                .collect();
            assert_eq!(u.targets[0], expected);
            assert_eq!(u.targets.len(), 4);
            for r in &u.targets {
                for (t, s) in r.iter().zip(u.source.iter().rev()) {
                    assert!(out.lexicon.synonyms(s).unwrap().contains(t));
                }
            }
        }
    }

    #[test]
    fn tiny_vocabularies_are_rejected() {
        let spec = SynthSpec {
            vocab_size: 9,
            ..small()
        };
        assert!(matches!(synth_corpus(&spec), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn zipf_rank_frequency_slope_matches_exponent() {
        for &s in &[0.8, 1.0, 1.2] {
            let z = ZipfSampler::new(50, s);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut counts = [0usize; 50];
            for _ in 0..100_000 {
                counts[z.sample(&mut rng)] += 1;
            }
            let pts: Vec<(f64, f64)> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(r, &c)| (((r + 1) as f64).ln(), (c as f64).ln()))
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let slope = sxy / sxx;
            assert!((slope + s).abs() < 0.15, "exponent {s}: slope {slope}");
        }
    }

    #[test]
    fn nearest_neighbor_recognizer_is_exact_without_noise() {
        let spec = SynthSpec {
            noise_std: 0.0,
            frames_per_token: [1, 1],
            ..small()
        };
        let out = synth_corpus(&spec).unwrap();
        let d = spec.embed_dim;
        let words = out.embeddings.vocab().real_tokens().to_vec();
        for u in &out.test.utterances {
            let mut hyp = Vec::new();
            for t in 0..u.num_frames() {
                let f = &u.frames.data()[t * d..(t + 1) * d];
                let sig = vecmath::cosine(f, &out.boundary_signature);
                let (best, cos) = words
                    .iter()
                    .map(|w| (w, vecmath::cosine(f, out.embeddings.vector_of(w).unwrap())))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                if cos > sig {
                    hyp.push(best.clone());
                }
            }
            assert_eq!(crate::metrics::wer(&hyp, &u.source).unwrap(), 0.0);
        }
    }
}
