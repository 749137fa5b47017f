use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, ParallelCorpus, SynthOutput, SynthSpec, Utterance};
use crate::diffcore::Tensor;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub utterances: usize,
    pub references: usize,
}

/// `manifest.json` at the root of a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub spec: SynthSpec,
    pub splits: BTreeMap<String, SplitManifest>,
    /// Relative path → SHA-256 of the file bytes.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_frames(corpus: &ParallelCorpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for u in &corpus.utterances {
        out.extend_from_slice(&(u.frames.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(u.frames.cols() as u64).to_le_bytes());
        for v in u.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_frames(bytes: &[u8]) -> Result<Vec<Tensor>, DataError> {
    let corrupt = |msg: String| DataError::CorruptCorpus {
        file: "frames.bin".into(),
        msg,
    };
    let mut pos = 0usize;
    let take_u64 = |pos: &mut usize| -> Result<u64, DataError> {
        let b = bytes
            .get(*pos..*pos + 8)
            .ok_or_else(|| corrupt(format!("truncated at byte {pos}")))?;
        *pos += 8;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    };
    let n = take_u64(&mut pos)? as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = take_u64(&mut pos)? as usize;
        let f = take_u64(&mut pos)? as usize;
        let len = t
            .checked_mul(f)
            .ok_or_else(|| corrupt(format!("utterance {i} has absurd size")))?;
        let end = pos + len * 8;
        let chunk = bytes
            .get(pos..end)
            .ok_or_else(|| corrupt(format!("utterance {i} truncated")))?;
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        out.push(Tensor::new(vec![t, f], data).map_err(|e| corrupt(format!("utterance {i}: {e}")))?);
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

fn lines(sents: impl Iterator<Item = String>) -> String {
    let mut s = String::new();
    for l in sents {
        s.push_str(&l);
        s.push('\n');
    }
    s
}

/// Writes `frames.bin`, `src.txt` and `tgt.N.txt`; returns file checksums.
pub fn write_split(dir: &Path, corpus: &ParallelCorpus) -> Result<BTreeMap<String, String>, DataError> {
    std::fs::create_dir_all(dir)?;
    let refs = corpus.utterances.first().map_or(1, |u| u.targets.len());
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("frames.bin".into(), encode_frames(corpus)),
        (
            "src.txt".into(),
            lines(corpus.utterances.iter().map(|u| u.source.join(" "))).into_bytes(),
        ),
    ];
    for r in 0..refs {
        files.push((
            format!("tgt.{r}.txt"),
            lines(corpus.utterances.iter().map(|u| u.targets[r].join(" "))).into_bytes(),
        ));
    }
    let mut sums = BTreeMap::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(&name), &bytes)?;
        sums.insert(name, sha256_hex(&bytes));
    }
    Ok(sums)
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, DataError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

pub fn read_split(dir: &Path) -> Result<ParallelCorpus, DataError> {
    let frames = decode_frames(&std::fs::read(dir.join("frames.bin"))?)?;
    let src = read_lines(&dir.join("src.txt"))?;
    let mut refs = Vec::new();
    for r in 0.. {
        let p = dir.join(format!("tgt.{r}.txt"));
        if !p.exists() {
            break;
        }
        refs.push(read_lines(&p)?);
    }
    if refs.is_empty() {
        return Err(DataError::CorruptCorpus {
            file: dir.join("tgt.0.txt").display().to_string(),
            msg: "missing reference file".into(),
        });
    }
    let n = frames.len();
    if src.len() != n || refs.iter().any(|r| r.len() != n) {
        return Err(DataError::CorruptCorpus {
            file: dir.display().to_string(),
            msg: format!("{n} frame blocks but {} transcripts", src.len()),
        });
    }
    let utterances = frames
        .into_iter()
        .zip(src)
        .enumerate()
        .map(|(i, (frames, source))| Utterance {
            frames,
            source,
            targets: refs.iter().map(|r| r[i].clone()).collect(),
        })
        .collect();
    Ok(ParallelCorpus { utterances })
}

/// Writes every split, the embedding table, the lexicon and the manifest.
pub fn write_corpus_dir(dir: &Path, out: &SynthOutput, spec: &SynthSpec, config_hash: &str) -> Result<CorpusManifest, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for (name, corpus) in SPLITS.iter().zip([&out.train, &out.dev, &out.test]) {
        for (f, sum) in write_split(&dir.join(name), corpus)? {
            checksums.insert(format!("{name}/{f}"), sum);
        }
        splits.insert(
            name.to_string(),
            SplitManifest {
                utterances: corpus.len(),
                references: corpus.utterances.first().map_or(0, |u| u.targets.len()),
            },
        );
    }
    let vec_text = out.embeddings.to_vec_text();
    std::fs::write(dir.join("embeddings.vec"), &vec_text)?;
    checksums.insert("embeddings.vec".into(), sha256_hex(vec_text.as_bytes()));
    let lex = serde_json::to_string_pretty(&out.lexicon)?;
    std::fs::write(dir.join("lexicon.json"), &lex)?;
    checksums.insert("lexicon.json".into(), sha256_hex(lex.as_bytes()));
    let manifest = CorpusManifest {
        format: "semst-corpus".into(),
        version: 1,
        config_hash: config_hash.to_string(),
        spec: spec.clone(),
        splits,
        checksums,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads the manifest and the three splits of a corpus directory.
pub fn read_corpus_dir(dir: &Path) -> Result<(CorpusManifest, [ParallelCorpus; 3]), DataError> {
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let train = read_split(&dir.join("train"))?;
    let dev = read_split(&dir.join("dev"))?;
    let test = read_split(&dir.join("test"))?;
    Ok((manifest, [train, dev, test]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;

    #[test]
    fn split_round_trips_through_files() {
        let spec = SynthSpec {
            train_size: 6,
            dev_size: 3,
            test_size: 2,
            ..SynthSpec::default()
        };
        let out = synth_corpus(&spec).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let m = write_corpus_dir(tmp.path(), &out, &spec, "abc").unwrap();
        let (m2, [train, dev, test]) = read_corpus_dir(tmp.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(train, out.train);
        assert_eq!(dev, out.dev);
        assert_eq!(test, out.test);
        assert_eq!(m.splits["dev"].references, 4);
    }

    #[test]
    fn truncated_frames_are_reported() {
        let corpus = ParallelCorpus {
            utterances: vec![Utterance {
                frames: Tensor::zeros(&[2, 2]),
                source: vec!["a".into()],
                targets: vec![vec!["b".into()]],
            }],
        };
        let bytes = encode_frames(&corpus);
        assert!(decode_frames(&bytes[..bytes.len() - 3]).is_err());
        assert_eq!(decode_frames(&bytes).unwrap()[0], corpus.utterances[0].frames);
    }
}
