use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::embeddings::PAD;

/// Endless stream of index batches: each epoch reshuffles, groups utterances
/// of similar length, then shuffles the batch order.
pub struct BatchStream {
    lengths: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: Vec<Vec<usize>>,
    pub epoch: usize,
}

impl BatchStream {
    pub fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        assert!(!lengths.is_empty(), "cannot batch an empty corpus");
        BatchStream {
            lengths,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
            epoch: 0,
        }
    }

    fn refill(&mut self) {
        let keys: Vec<u64> = (0..self.lengths.len()).map(|_| self.rng.random()).collect();
        let mut idx: Vec<usize> = (0..self.lengths.len()).collect();
        idx.sort_by_key(|&i| (self.lengths[i], keys[i]));
        let mut batches: Vec<Vec<usize>> = idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        batches.shuffle(&mut self.rng);
        batches.reverse();
        self.pending = batches;
        self.epoch += 1;
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pending.is_empty() {
            self.refill();
        }
        self.pending.pop()
    }
}

/// Zero-padded frames of a group of utterances, time-major.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[T, B, F]` with `T` the longest length rounded up to a multiple of `align`.
    pub frames: Tensor,
    pub frame_lens: Vec<usize>,
}

impl Batch {
    pub fn from_frames(utts: &[&Tensor], align: usize) -> Batch {
        assert!(!utts.is_empty());
        let f = utts[0].cols();
        let b = utts.len();
        let longest = utts.iter().map(|u| u.rows()).max().unwrap();
        let t = longest.div_ceil(align) * align;
        let mut data = vec![0.0; t * b * f];
        for (bi, u) in utts.iter().enumerate() {
            for ti in 0..u.rows() {
                let dst = (ti * b + bi) * f;
                data[dst..dst + f].copy_from_slice(u.row_slice(ti));
            }
        }
        Batch {
            frames: Tensor::new(vec![t, b, f], data).expect("padded frame buffer"),
            frame_lens: utts.iter().map(|u| u.rows()).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.frame_lens.len()
    }

    pub fn padded_len(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `mask[t][b]` is true for real frames.
    pub fn frame_mask(&self) -> Vec<Vec<bool>> {
        (0..self.padded_len())
            .map(|t| self.frame_lens.iter().map(|&l| t < l).collect())
            .collect()
    }
}

/// Time-major PAD-padded token matrix and its mask.
pub fn pad_tokens(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let ids = (0..longest)
        .map(|t| seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect())
        .collect();
    let mask = (0..longest)
        .map(|t| seqs.iter().map(|s| t < s.len()).collect())
        .collect();
    (ids, mask)
}
