use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::sequence::TokenSequence;

/// Row-major flat view of `B` windowed sequences, cut to the longest
/// real length so trailing all-pad columns cost nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub l: usize,
    pub token_ids: Vec<usize>,
    pub time_years: Vec<f64>,
    pub age_years: Vec<f64>,
    pub segments: Vec<usize>,
    pub visit_types: Vec<usize>,
    pub valid: Vec<bool>,
    /// Real (non-pad) length of each row; every row is post-padded.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.n_real()).collect();
        if let Some(i) = lengths.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("batch row {i} has no real token")));
        }
        for (s, &n) in seqs.iter().zip(&lengths) {
            if s.attention_mask[..n].iter().any(|m| !m) {
                return Err(Error::Data("batch rows must be post-padded".into()));
            }
        }
        let l = *lengths.iter().max().unwrap();
        let b = seqs.len();
        let mut out = Batch {
            b,
            l,
            token_ids: Vec::with_capacity(b * l),
            time_years: Vec::with_capacity(b * l),
            age_years: Vec::with_capacity(b * l),
            segments: Vec::with_capacity(b * l),
            visit_types: Vec::with_capacity(b * l),
            valid: Vec::with_capacity(b * l),
            lengths,
        };
        for s in seqs {
            for i in 0..l {
                if i < s.len() {
                    out.token_ids.push(s.token_ids[i] as usize);
                    out.time_years.push(s.time_years[i]);
                    out.age_years.push(s.age_years[i]);
                    out.segments.push(s.visit_segment[i] as usize);
                    out.visit_types.push(s.visit_type_ids[i] as usize);
                    out.valid.push(s.attention_mask[i]);
                } else {
                    out.token_ids.push(0);
                    out.time_years.push(0.0);
                    out.age_years.push(0.0);
                    out.segments.push(0);
                    out.visit_types.push(0);
                    out.valid.push(false);
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.b * self.l
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Groups an already shuffled `order` into batches of similar length:
/// pools of `POOL` batches are sorted by length, cut into batches, and the
/// batch order is shuffled again.
pub fn length_batches<R: Rng + ?Sized>(order: &[usize], lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    const POOL: usize = 50;
    let mut batches = Vec::with_capacity(order.len() / batch_size.max(1) + 1);
    for pool in order.chunks(batch_size.max(1) * POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{WindowMode, FIRST_CONCEPT, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trims_to_longest_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mk = |n: usize| {
            let mut s = TokenSequence::default();
            for i in 0..n {
                s.push(FIRST_CONCEPT + i as u32, 50.0, 40.0, 1, 2);
            }
            s
        };
        let a = mk(3).window(300, WindowMode::FinetunePreTruncate, &mut rng);
        let b = mk(5).window(300, WindowMode::FinetunePreTruncate, &mut rng);
        let batch = Batch::new(&[&a, &b]).unwrap();
        assert_eq!((batch.b, batch.l), (2, 5));
        assert_eq!(batch.lengths, [3, 5]);
        assert_eq!(batch.token_ids[3], PAD as usize);
        assert!(!batch.valid[4] && batch.valid[9]);
    }

    #[test]
    fn length_batches_cover_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lengths: Vec<usize> = (0..100).map(|i| (i * 37) % 23).collect();
        let order: Vec<usize> = (0..100).rev().collect();
        let batches = length_batches(&order, &lengths, 8, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 8));
        for b in &batches {
            assert!(b.windows(2).all(|w| lengths[w[0]] <= lengths[w[1]]));
        }
    }
}
