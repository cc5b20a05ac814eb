//! Byte corpora chunked into fixed-length token windows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer::tokenize;
use crate::error::{EchoError, Result};

/// A corpus as non-overlapping windows of `seq_len` tokens. The trailing
/// partial window is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    seq_len: usize,
    windows: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_tokens(tokens: &[usize], seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(EchoError::Data(format!(
                "seq_len {seq_len} must be >= 2 for next-token targets"
            )));
        }
        let windows = tokens
            .chunks_exact(seq_len)
            .map(<[usize]>::to_vec)
            .collect();
        Ok(Self { seq_len, windows })
    }

    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        Self::from_tokens(&tokenize(bytes), seq_len)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Tokens covered by whole windows.
    pub fn total_tokens(&self) -> usize {
        self.windows.len() * self.seq_len
    }

    /// Splits off the last `fraction` of windows (at least one when possible)
    /// as a held-out set.
    pub fn split_holdout(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = self.windows.len();
        let held =
            ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let (train, eval) = self.windows.split_at(n - held);
        (
            Corpus {
                seq_len: self.seq_len,
                windows: train.to_vec(),
            },
            Corpus {
                seq_len: self.seq_len,
                windows: eval.to_vec(),
            },
        )
    }

    /// Same windows in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Corpus {
        let mut windows = self.windows.clone();
        windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Corpus {
            seq_len: self.seq_len,
            windows,
        }
    }

    /// Every window split into model inputs and shifted targets.
    pub fn batches(&self, batch: usize) -> impl Iterator<Item = Batch> + '_ {
        self.windows.chunks(batch.max(1)).map(Batch::from_windows)
    }
}

/// Inputs are each window minus its last token; targets are the window
/// shifted left by one.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// Tokens consumed from the corpus (`batch * window length`).
    pub tokens: usize,
}

impl Batch {
    pub fn from_windows(windows: &[Vec<usize>]) -> Self {
        let len = windows[0].len();
        let mut inputs = Vec::with_capacity(windows.len() * (len - 1));
        let mut targets = Vec::with_capacity(windows.len() * (len - 1));
        for w in windows {
            inputs.extend_from_slice(&w[..len - 1]);
            targets.extend_from_slice(&w[1..]);
        }
        Self {
            inputs,
            targets,
            batch: windows.len(),
            seq: len - 1,
            tokens: windows.len() * len,
        }
    }
}

/// Sequential reader over a corpus, without replacement. A cycling stream
/// restarts from the first window once exhausted; a one-pass stream ends.
#[derive(Clone, Debug)]
pub struct DataStream<'a> {
    corpus: &'a Corpus,
    cursor: usize,
    cycle: bool,
}

impl<'a> DataStream<'a> {
    pub fn cycling(corpus: &'a Corpus) -> Result<Self> {
        Self::new(corpus, true)
    }

    pub fn one_pass(corpus: &'a Corpus) -> Result<Self> {
        Self::new(corpus, false)
    }

    fn new(corpus: &'a Corpus, cycle: bool) -> Result<Self> {
        if corpus.is_empty() {
            return Err(EchoError::Data("corpus holds no complete window".into()));
        }
        Ok(Self {
            corpus,
            cursor: 0,
            cycle,
        })
    }

    /// Next batch of up to `batch` windows (fewer only at the end of a
    /// one-pass stream, or when `max_windows` caps it).
    pub fn next_batch(&mut self, batch: usize, max_windows: usize) -> Option<Batch> {
        let n = self.corpus.len();
        let want = batch.min(max_windows);
        if want == 0 {
            return None;
        }
        let mut picked = Vec::with_capacity(want);
        while picked.len() < want {
            if self.cursor == n {
                if !self.cycle {
                    break;
                }
                self.cursor = 0;
            }
            picked.push(self.corpus.windows[self.cursor].clone());
            self.cursor += 1;
        }
        (!picked.is_empty()).then(|| Batch::from_windows(&picked))
    }
}

/// Generates `len` bytes from a first-order Markov chain over a small
/// alphabet in which every symbol has three successors with probabilities
/// 0.7 / 0.2 / 0.1, so the next byte is highly predictable from the
/// current one.
pub fn synthetic_bigram(len: usize, seed: u64) -> Vec<u8> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz .,\n";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ALPHABET.len();
    let succ: Vec<[usize; 3]> = (0..k)
        .map(|_| {
            let a = rng.random_range(0..k);
            let b = (a + 1 + rng.random_range(0..k - 1)) % k;
            let mut c = rng.random_range(0..k);
            while c == a || c == b {
                c = rng.random_range(0..k);
            }
            [a, b, c]
        })
        .collect();
    let mut out = Vec::with_capacity(len);
    let mut cur = 0;
    for _ in 0..len {
        let r: f64 = rng.random();
        let pick = if r < 0.7 {
            0
        } else if r < 0.9 {
            1
        } else {
            2
        };
        cur = succ[cur][pick];
        out.push(ALPHABET[cur]);
    }
    out
}
