//! Synthetic sequence task with a controllable difficulty axis.
//!
//! Each sequence position carries a feature vector and a class target drawn
//! from a small vocabulary. Half of the positions are *easy*: the target is
//! the argmax of a fixed random linear map of the features, so one expert's
//! worth of linear capacity fits it. The other half are *hard*: the target is
//! the argmax of a fixed random two-layer tanh network of the features, which
//! needs considerably more nonlinear capacity. The final feature coordinate
//! is a +/-1 difficulty marker, giving the router something to condition on —
//! the analogue of function words versus content words.
//!
//! Generation is fully deterministic in (task seed, sequence index).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    #[serde(rename = "easy")]
    Easy,
    #[serde(rename = "hard")]
    Hard,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub seed: u64,
    pub seq_len: usize,
    pub n_features: usize,
    pub vocab: usize,
    /// Easy-target readout: argmax over vocab of easy_w x.
    easy_w: Mat,
    /// Hard-target mixture: argmax over vocab of w2 tanh(w1 x).
    mix_w1: Mat,
    mix_w2: Mat,
}

/// One generated sequence: inputs (T x n_features), targets, and the
/// per-token difficulty labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub inputs: Mat,
    pub targets: Vec<usize>,
    pub difficulty: Vec<Difficulty>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl SyntheticTask {
    pub fn new(seed: u64, seq_len: usize, n_features: usize, vocab: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::InvalidInput("seq_len must be >= 2".into()));
        }
        if vocab < 2 {
            return Err(Error::InvalidInput("vocab must be >= 2".into()));
        }
        // The last feature is the difficulty marker; the targets read the
        // `vocab` (or more) plain feature coordinates before it.
        if n_features < vocab + 1 {
            return Err(Error::InvalidInput(format!(
                "n_features = {} must be at least vocab + 1 = {}",
                n_features,
                vocab + 1
            )));
        }
        let mix_hidden = 2 * vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xa5a5_a5a5));
        let mut easy_w = Mat::zeros(vocab, n_features);
        for v in easy_w.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let mut mix_w1 = Mat::zeros(mix_hidden, n_features);
        for v in mix_w1.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let mut mix_w2 = Mat::zeros(vocab, mix_hidden);
        for v in mix_w2.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        Ok(SyntheticTask {
            seed,
            seq_len,
            n_features,
            vocab,
            easy_w,
            mix_w1,
            mix_w2,
        })
    }

    /// Deterministically generates sequence number `index`.
    pub fn sample(&self, index: u64) -> SequenceSample {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed).wrapping_add(index));
        let t = self.seq_len;

        // Balanced labels: exactly floor(T/2) hard positions, shuffled.
        let mut labels: Vec<Difficulty> = (0..t)
            .map(|i| {
                if i < t / 2 {
                    Difficulty::Hard
                } else {
                    Difficulty::Easy
                }
            })
            .collect();
        labels.shuffle(&mut rng);

        let mut inputs = Mat::zeros(t, self.n_features);
        let mut targets = Vec::with_capacity(t);
        for (pos, &label) in labels.iter().enumerate() {
            let row = inputs.row_mut(pos);
            for v in row.iter_mut().take(self.n_features - 1) {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            row[self.n_features - 1] = match label {
                Difficulty::Hard => 1.0,
                Difficulty::Easy => -1.0,
            };
            let target = match label {
                Difficulty::Easy => argmax(&self.easy_w.matvec(row)),
                Difficulty::Hard => {
                    let mut h = self.mix_w1.matvec(row);
                    for v in h.iter_mut() {
                        *v = v.tanh();
                    }
                    argmax(&self.mix_w2.matvec(&h))
                }
            };
            targets.push(target);
        }
        SequenceSample {
            inputs,
            targets,
            difficulty: labels,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(42, 16, 16, 10).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = task().sample(3);
        let b = task().sample(3);
        assert_eq!(a, b);
        let c = task().sample(4);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_balanced() {
        for idx in 0..20 {
            let s = task().sample(idx);
            let hard = s
                .difficulty
                .iter()
                .filter(|&&d| d == Difficulty::Hard)
                .count();
            assert_eq!(hard, 8);
        }
    }

    #[test]
    fn easy_targets_are_the_linear_readout() {
        let tk = task();
        let s = tk.sample(0);
        for t in 0..16 {
            if s.difficulty[t] == Difficulty::Easy {
                let expected = argmax(&tk.easy_w.matvec(s.inputs.row(t)));
                assert_eq!(s.targets[t], expected);
            }
            assert!(s.targets[t] < 10);
        }
    }

    #[test]
    fn difficulty_marker_is_last_feature() {
        let s = task().sample(1);
        for t in 0..16 {
            let marker = s.inputs.get(t, 15);
            match s.difficulty[t] {
                Difficulty::Hard => assert_eq!(marker, 1.0),
                Difficulty::Easy => assert_eq!(marker, -1.0),
            }
        }
    }

    #[test]
    fn rejects_too_small_feature_width() {
        assert!(SyntheticTask::new(1, 8, 8, 8).is_err());
        assert!(SyntheticTask::new(1, 1, 16, 8).is_err());
    }
}
