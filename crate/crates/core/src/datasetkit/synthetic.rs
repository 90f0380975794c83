//! Stand-ins for the face-embedding model and the speech recognizer, plus a
//! generator for two partially labeled corpora with known ground truth.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{normalized, EmbeddingProvider, Transcriber, VideoRecord};
use crate::error::{Error, Result};
use crate::speakersim::{sample_sentence, BigramLm, WORDS};

/// Stable 64-bit key of a string, for per-record random streams.
pub fn key64(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Random unit vector of identity `index`.
pub fn identity_vector(seed: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut rng = crate::stream_rng(seed, index as u64);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    normalized(&v)
}

/// Embeds a frame as the record's ground-truth identity vector plus
/// per-component Gaussian noise, renormalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticFaces {
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Record id → true identity.
    pub truth: BTreeMap<String, usize>,
}

impl EmbeddingProvider for SyntheticFaces {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("synthetic-faces/dim{}/sigma{}/seed{}", self.dim, self.sigma, self.seed)
    }

    fn embed(&self, record: &VideoRecord, frame: usize) -> Result<Vec<f64>> {
        let identity = *self
            .truth
            .get(&record.id)
            .ok_or_else(|| Error::Config(format!("no face known for record {}", record.id)))?;
        let base = identity_vector(self.seed, identity, self.dim);
        let noise = Normal::new(0.0, self.sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = crate::stream_rng(self.seed ^ key64(&record.id), frame as u64);
        let v: Vec<f64> = base.iter().map(|x| x + noise.sample(&mut rng)).collect();
        Ok(normalized(&v))
    }
}

/// Returns the ground-truth sentence with each word independently replaced,
/// at rate `rho`, by a different vocabulary word.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTranscriber {
    pub rho: f64,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub truth: BTreeMap<String, Vec<String>>,
}

impl SyntheticTranscriber {
    pub fn corrupt(&self, id: &str, words: &[String]) -> Vec<String> {
        let mut rng = crate::stream_rng(self.seed ^ key64(id), 0x5452);
        words
            .iter()
            .map(|w| {
                if self.vocab.len() < 2 || !rng.gen_bool(self.rho.clamp(0.0, 1.0)) {
                    return w.clone();
                }
                loop {
                    let c = &self.vocab[rng.gen_range(0..self.vocab.len())];
                    if c != w {
                        return c.clone();
                    }
                }
            })
            .collect()
    }
}

impl Transcriber for SyntheticTranscriber {
    fn transcribe(&self, record: &VideoRecord) -> std::result::Result<String, String> {
        let words = self.truth.get(&record.id).ok_or("no reference sentence for record")?;
        Ok(self.corrupt(&record.id, words).join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Identities present only in the primary corpus.
    pub primary_only: usize,
    /// Identities present only in the secondary corpus.
    pub secondary_only: usize,
    /// Identities present in both.
    pub shared: usize,
    pub videos_per_identity: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub dim: usize,
    pub sigma: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            primary_only: 20,
            secondary_only: 20,
            shared: 5,
            videos_per_identity: 120,
            min_duration_s: 20.0,
            max_duration_s: 40.0,
            dim: 128,
            sigma: 0.05,
            rho: 0.1,
            seed: 11,
        }
    }
}

/// Two corpora with hidden ground truth: the primary one carries
/// transcripts but no speaker ids, the secondary one speaker ids but no
/// transcripts.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub primary: Vec<VideoRecord>,
    pub secondary: Vec<VideoRecord>,
    pub faces: SyntheticFaces,
    pub transcriber: SyntheticTranscriber,
    /// Identities (true ids) planted in both corpora.
    pub shared: Vec<usize>,
}

pub const PRIMARY_TAG: &str = "transcribed";
pub const SECONDARY_TAG: &str = "identified";

impl Scenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        let c = config;
        if c.videos_per_identity == 0 || !(c.min_duration_s > 0.0) || c.max_duration_s < c.min_duration_s {
            return Err(Error::Config("scenario needs videos and a positive duration range".into()));
        }
        let lm = BigramLm::generate(&WORDS, c.seed, 1.0)?;
        let mut rng = crate::stream_rng(c.seed, 0x5343);
        let mut truth_face = BTreeMap::new();
        let mut truth_text = BTreeMap::new();
        let shared: Vec<usize> = (0..c.shared).collect();
        let primary_ids = (0..c.shared).chain(c.shared..c.shared + c.primary_only);
        let secondary_start = c.shared + c.primary_only;
        let secondary_ids = (0..c.shared).chain(secondary_start..secondary_start + c.secondary_only);
        let mut make = |tag: &str, ids: &mut dyn Iterator<Item = usize>, with_text: bool, with_speaker: bool| {
            let mut out = Vec::new();
            for identity in ids {
                for k in 0..c.videos_per_identity {
                    let id = format!("{tag}-{identity:03}-{k:03}");
                    let duration_s = rng.gen_range(c.min_duration_s..=c.max_duration_s);
                    let words = sample_sentence(None, &lm, (4, 12), &mut rng)?;
                    truth_face.insert(id.clone(), identity);
                    out.push(VideoRecord {
                        id: id.clone(),
                        source: tag.to_string(),
                        duration_s,
                        speaker_id: with_speaker.then(|| format!("{tag}-spk{identity:03}")),
                        transcript: with_text.then(|| words.join(" ")),
                        pseudo_label: false,
                        path: None,
                    });
                    truth_text.insert(id, words);
                }
            }
            Ok::<_, Error>(out)
        };
        let primary = make(PRIMARY_TAG, &mut primary_ids.into_iter(), true, false)?;
        let secondary = make(SECONDARY_TAG, &mut secondary_ids.into_iter(), false, true)?;
        Ok(Self {
            config: c.clone(),
            primary,
            secondary,
            faces: SyntheticFaces {
                dim: c.dim,
                sigma: c.sigma,
                seed: c.seed,
                truth: truth_face,
            },
            transcriber: SyntheticTranscriber {
                rho: c.rho,
                seed: c.seed,
                vocab: WORDS.iter().map(|w| w.to_string()).collect(),
                truth: truth_text,
            },
            shared,
        })
    }

    /// True identity of a record.
    pub fn identity(&self, record_id: &str) -> Option<usize> {
        self.faces.truth.get(record_id).copied()
    }
}
