use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SpeakerProfile;
use crate::error::{Error, Result};

/// Shared vocabulary of the synthetic corpus.
pub const WORDS: [&str; 120] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "red", "blue", "green",
    "white", "black", "gold", "silver", "bright", "dark", "small", "large", "quick", "slow", "early", "late", "north",
    "south", "east", "west", "again", "always", "never", "often", "maybe", "today", "tomorrow", "tonight", "morning",
    "evening", "water", "fire", "stone", "river", "forest", "garden", "window", "door", "table", "chair", "house",
    "street", "city", "market", "school", "music", "story", "letter", "paper", "number", "people", "friend",
    "family", "doctor", "teacher", "player", "driver", "child", "mother", "father", "sister", "brother", "please",
    "thanks", "hello", "sorry", "open", "close", "bring", "take", "give", "make", "find", "keep", "move", "turn",
    "stop", "start", "place", "put", "read", "write", "speak", "listen", "watch", "learn", "build", "break", "carry",
    "follow", "answer", "question", "money", "price", "time", "year", "week", "minute", "hour", "night", "light",
    "sound", "voice", "word", "world", "plan", "game", "point", "line", "team",
];

/// Bigram language model over the shared vocabulary. `start` scores the
/// first word, `bigram[prev][next]` every following one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramLm {
    pub words: Vec<String>,
    pub start: Vec<f64>,
    pub bigram: Vec<Vec<f64>>,
}

impl BigramLm {
    /// Random logits with standard deviation `spread`, fixed by `seed`.
    pub fn generate(words: &[&str], seed: u64, spread: f64) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Empty("vocabulary".into()));
        }
        let mut rng = crate::stream_rng(seed, 0x4c4d);
        let normal = Normal::new(0.0, spread).map_err(|e| Error::Config(e.to_string()))?;
        let n = words.len();
        Ok(Self {
            words: words.iter().map(|w| w.to_string()).collect(),
            start: (0..n).map(|_| normal.sample(&mut rng)).collect(),
            bigram: (0..n).map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Next-word distribution after `prev` (`None` at sentence start):
    /// softmax of base logit plus the speaker's word bias and pair affinity.
    pub fn next_distribution(&self, prev: Option<usize>, profile: Option<&SpeakerProfile>) -> Vec<f64> {
        let n = self.len();
        let base = match prev {
            None => &self.start,
            Some(p) => &self.bigram[p],
        };
        let logits: Vec<f64> = (0..n)
            .map(|w| {
                let mut l = base[w];
                if let Some(s) = profile {
                    l += s.word_bias[w];
                    if let Some(p) = prev {
                        l += s.affinity[p * n + w];
                    }
                }
                l
            })
            .collect();
        softmax(&logits)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a sentence whose length is uniform in `length_range` (inclusive).
pub fn sample_sentence<R: Rng>(
    profile: Option<&SpeakerProfile>,
    lm: &BigramLm,
    length_range: (usize, usize),
    rng: &mut R,
) -> Result<Vec<String>> {
    if lm.is_empty() {
        return Err(Error::Empty("vocabulary".into()));
    }
    let (lo, hi) = length_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid sentence length range {lo}..={hi}")));
    }
    let len = rng.gen_range(lo..=hi);
    let mut out = Vec::with_capacity(len);
    let mut prev = None;
    for _ in 0..len {
        let w = draw(&lm.next_distribution(prev, profile), rng);
        out.push(lm.words[w].clone());
        prev = Some(w);
    }
    Ok(out)
}
