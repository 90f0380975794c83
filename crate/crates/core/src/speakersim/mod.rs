//! Synthetic multi-speaker corpus.
//!
//! Speakers differ in how their glyphs look (stroke thickness, offset,
//! contrast, sensor noise), how fast they "speak" (frames per word) and which
//! words they prefer. Clips are rendered on demand from a per-utterance seed,
//! so an in-memory [`Corpus`] is cheap; [`build_corpus`] additionally writes
//! LVB1 clip files and a JSON-lines manifest.

mod io;
mod lm;
mod render;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoClip;

pub use io::{decode_lvb1, encode_lvb1, read_lvb1, read_manifest, write_lvb1, write_manifest, ManifestRow};
pub use lm::{sample_sentence, BigramLm, WORDS};
pub use render::{frames_per_word, render_clip, RenderConfig};

/// Relative tolerance on every per-speaker, per-split minute budget.
pub const BUDGET_TOLERANCE: f64 = 0.05;

const SPEED_RANGE: (f64, f64) = (0.6, 1.5);
const PREFERRED_WORDS: usize = 12;
const AFFINITY_PAIRS: usize = 60;

/// Identity, appearance, tempo and lexical habits of one synthetic speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Stroke width in pixels, 1–3.
    pub thickness: u32,
    /// Glyph translation `(dx, dy)` in pixels, each within ±3.
    pub offset: (i32, i32),
    /// Ink contrast multiplier, 0.6–1.4.
    pub contrast: f64,
    /// Standard deviation of additive pixel noise, in grey levels.
    pub noise_sigma: f64,
    /// Speaking speed; frames per word shrink as it grows. In `[0.6, 1.5]`.
    pub speed: f64,
    /// Per-word log-weight added to every next-word logit.
    pub word_bias: Vec<f64>,
    /// Flattened `V×V` affinity added to `logit(next | prev)`.
    pub affinity: Vec<f64>,
}

impl SpeakerProfile {
    /// Draws a profile; the result depends only on `(seed, index)` and the
    /// vocabulary size.
    pub fn generate(seed: u64, index: usize, speaker_id: impl Into<String>, vocab_len: usize) -> Self {
        let mut rng = crate::stream_rng(seed, 1 << 32 | index as u64);
        let thickness = rng.gen_range(1..=3);
        let offset = (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
        let contrast = rng.gen_range(0.6..=1.4);
        let noise_sigma = rng.gen_range(2.0..=12.0);
        let speed = rng.gen_range(SPEED_RANGE.0..=SPEED_RANGE.1);
        let mut word_bias = vec![0.0; vocab_len];
        let mut order: Vec<usize> = (0..vocab_len).collect();
        order.shuffle(&mut rng);
        for &w in order.iter().take(PREFERRED_WORDS.min(vocab_len)) {
            word_bias[w] = rng.gen_range(1.5..=3.0);
        }
        let mut affinity = vec![0.0; vocab_len * vocab_len];
        if vocab_len > 0 {
            for _ in 0..AFFINITY_PAIRS {
                let (p, n) = (rng.gen_range(0..vocab_len), rng.gen_range(0..vocab_len));
                affinity[p * vocab_len + n] = rng.gen_range(2.0..=4.0);
            }
        }
        Self {
            speaker_id: speaker_id.into(),
            thickness,
            offset,
            contrast,
            noise_sigma,
            speed,
            word_bias,
            affinity,
        }
    }

    /// Middle-of-the-road speaker with no lexical preferences.
    pub fn neutral(speaker_id: impl Into<String>, vocab_len: usize) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            thickness: 2,
            offset: (0, 0),
            contrast: 1.0,
            noise_sigma: 4.0,
            speed: 1.0,
            word_bias: vec![0.0; vocab_len],
            affinity: vec![0.0; vocab_len * vocab_len],
        }
    }

    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Config(format!("{}: speed must be positive", self.speaker_id)));
        }
        if self.word_bias.len() != vocab_len || self.affinity.len() != vocab_len * vocab_len {
            return Err(Error::shape(
                format!("{} language bias", self.speaker_id),
                vocab_len,
                self.word_bias.len(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Multi-speaker pool used to train the speaker-independent model.
    Baseline,
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Baseline => "baseline",
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Split::Baseline),
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Target (adaptation) speakers.
    pub num_speakers: usize,
    /// Speakers in the baseline pool.
    pub baseline_speakers: usize,
    pub baseline_minutes: f64,
    pub train_minutes: f64,
    pub valid_minutes: f64,
    pub test_minutes: f64,
    /// Nested adaptation budgets carved out of the train split, ascending.
    /// The last one should equal `train_minutes`.
    pub checkpoints: Vec<f64>,
    pub vocab: Vec<String>,
    pub lm_seed: u64,
    pub lm_spread: f64,
    pub length_range: (usize, usize),
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 10,
            baseline_speakers: 24,
            baseline_minutes: 20.0,
            train_minutes: 45.0,
            valid_minutes: 2.0,
            test_minutes: 2.0,
            checkpoints: vec![1.0, 5.0, 15.0, 30.0, 45.0],
            vocab: WORDS.iter().map(|w| w.to_string()).collect(),
            lm_seed: 7,
            lm_spread: 1.0,
            length_range: (3, 6),
            render: RenderConfig::default(),
            seed: 2024,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(Error::Empty("vocabulary".into()));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid sentence length range {lo}..={hi}")));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) || self.checkpoints.iter().any(|&c| c <= 0.0) {
            return Err(Error::Config("checkpoints must be positive and strictly ascending".into()));
        }
        if let Some(&last) = self.checkpoints.last() {
            if last > self.train_minutes * (1.0 + BUDGET_TOLERANCE) {
                return Err(Error::Config(format!(
                    "checkpoint {last} min exceeds the {} min train split",
                    self.train_minutes
                )));
            }
        }
        if self.render.frame_rate <= 0.0 {
            return Err(Error::Config("frame rate must be positive".into()));
        }
        Ok(())
    }

    fn target_id(index: usize) -> String {
        format!("S{}", index + 1)
    }

    fn pool_id(index: usize) -> String {
        format!("P{}", index + 1)
    }
}

/// One sentence by one speaker; the clip is rendered from `seed` on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub split: Split,
    pub words: Vec<String>,
    pub seed: u64,
    pub frames: usize,
    pub duration_s: f64,
    /// Smallest adaptation budget (minutes) that includes this utterance;
    /// only set on the train split.
    pub budget_min: Option<f64>,
}

impl Utterance {
    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub lm: BigramLm,
    /// Target speakers followed by the baseline pool.
    pub profiles: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Samples every sentence and its timing; nothing is rendered.
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let words: Vec<&str> = spec.vocab.iter().map(String::as_str).collect();
        let lm = BigramLm::generate(&words, spec.lm_seed, spec.lm_spread)?;
        let v = spec.vocab.len();
        let mut profiles: Vec<SpeakerProfile> = (0..spec.num_speakers)
            .map(|i| SpeakerProfile::generate(spec.seed, i, CorpusSpec::target_id(i), v))
            .collect();
        profiles.extend(
            (0..spec.baseline_speakers)
                .map(|i| SpeakerProfile::generate(spec.seed, 100_000 + i, CorpusSpec::pool_id(i), v)),
        );

        let mut utterances = Vec::new();
        for (si, profile) in profiles.iter().enumerate() {
            let mut rng = crate::stream_rng(spec.seed, 2 << 32 | si as u64);
            let mut seen = HashSet::new();
            let mut sampler = Sampler {
                spec,
                lm: &lm,
                profile,
                rng: &mut rng,
                seen: &mut seen,
                out: &mut utterances,
            };
            if si < spec.num_speakers {
                let mut budgets: Vec<f64> = spec.checkpoints.clone();
                if budgets.last().map_or(true, |&l| l < spec.train_minutes * (1.0 - BUDGET_TOLERANCE)) {
                    budgets.push(spec.train_minutes);
                }
                let mut total = 0.0;
                for b in budgets {
                    total = sampler.fill(Split::Train, b * 60.0, total, Some(b))?;
                }
                sampler.fill(Split::Valid, spec.valid_minutes * 60.0, 0.0, None)?;
                sampler.fill(Split::Test, spec.test_minutes * 60.0, 0.0, None)?;
            } else {
                sampler.fill(Split::Baseline, spec.baseline_minutes * 60.0, 0.0, None)?;
            }
        }
        let mut corpus = Self {
            spec: spec.clone(),
            lm,
            profiles,
            utterances,
        };
        corpus.ensure_coverage()?;
        Ok(corpus)
    }

    /// Rewrites baseline sentences until every vocabulary word occurs in the
    /// baseline split. Only words seen at least twice are overwritten, and
    /// word counts (hence durations) are unchanged.
    fn ensure_coverage(&mut self) -> Result<()> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for u in self.utterances.iter().filter(|u| u.split == Split::Baseline) {
            for w in &u.words {
                *counts.entry(w.clone()).or_default() += 1;
            }
        }
        let missing: Vec<String> = self.spec.vocab.iter().filter(|w| !counts.contains_key(*w)).cloned().collect();
        if missing.is_empty() {
            return Ok(());
        }
        let slots: Vec<usize> = self
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == Split::Baseline)
            .map(|(i, _)| i)
            .collect();
        if slots.is_empty() {
            return Ok(());
        }
        let mut cursor = 0;
        for word in missing {
            let mut placed = false;
            // walk the baseline sentences round-robin for a redundant word
            for _ in 0..slots.len() {
                let u = &mut self.utterances[slots[cursor % slots.len()]];
                cursor += 1;
                if let Some(pos) = (0..u.words.len()).find(|&i| counts[&u.words[i]] > 1) {
                    *counts.get_mut(&u.words[pos]).expect("counted") -= 1;
                    u.words[pos] = word.clone();
                    counts.insert(word.clone(), 1);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Infeasible(format!(
                    "baseline split too small to cover the vocabulary (missing {word:?})"
                )));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> &[String] {
        &self.spec.vocab
    }

    pub fn target_speakers(&self) -> &[SpeakerProfile] {
        &self.profiles[..self.spec.num_speakers]
    }

    pub fn profile(&self, speaker_id: &str) -> Option<&SpeakerProfile> {
        self.profiles.iter().find(|p| p.speaker_id == speaker_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn speaker_split(&self, speaker_id: &str, split: Split) -> impl Iterator<Item = &Utterance> {
        let speaker_id = speaker_id.to_string();
        self.utterances.iter().filter(move |u| u.split == split && u.speaker_id == speaker_id)
    }

    /// Train utterances inside the `minutes` adaptation budget; budgets are
    /// nested, so a smaller budget always yields a prefix of a larger one.
    pub fn adaptation_subset(&self, speaker_id: &str, minutes: f64) -> Result<Vec<&Utterance>> {
        if !self.spec.checkpoints.iter().any(|&c| (c - minutes).abs() < 1e-9) && (minutes - self.spec.train_minutes).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{minutes} min is not one of the corpus budgets {:?}",
                self.spec.checkpoints
            )));
        }
        let subset: Vec<&Utterance> = self
            .speaker_split(speaker_id, Split::Train)
            .filter(|u| u.budget_min.map_or(false, |b| b <= minutes + 1e-9))
            .collect();
        if subset.is_empty() {
            return Err(Error::Empty(format!("adaptation data for {speaker_id}")));
        }
        Ok(subset)
    }

    pub fn render(&self, utt: &Utterance) -> Result<VideoClip> {
        let profile = self
            .profile(&utt.speaker_id)
            .ok_or_else(|| Error::Config(format!("unknown speaker {}", utt.speaker_id)))?;
        render_clip(&utt.words, &self.spec.vocab, profile, &self.spec.render, utt.seed)
    }

    /// Summed duration per `(speaker, split)` in seconds.
    pub fn durations(&self) -> BTreeMap<(String, Split), f64> {
        let mut out = BTreeMap::new();
        for u in &self.utterances {
            *out.entry((u.speaker_id.clone(), u.split)).or_insert(0.0) += u.duration_s;
        }
        out
    }

    pub fn manifest_rows(&self, clip_dir: &str) -> Vec<ManifestRow> {
        self.utterances
            .iter()
            .map(|u| ManifestRow {
                id: u.id.clone(),
                speaker_id: u.speaker_id.clone(),
                path: format!("{clip_dir}/{}.lvb", u.id),
                duration_s: u.duration_s,
                transcript: u.transcript(),
                split: u.split.as_str().to_string(),
                source: None,
                cluster_id: None,
                pseudo_label: None,
            })
            .collect()
    }
}

struct Sampler<'a> {
    spec: &'a CorpusSpec,
    lm: &'a BigramLm,
    profile: &'a SpeakerProfile,
    rng: &'a mut ChaCha8Rng,
    seen: &'a mut HashSet<Vec<String>>,
    out: &'a mut Vec<Utterance>,
}

impl Sampler<'_> {
    /// Adds sentences until the running total reaches `target_s` (within
    /// tolerance), never overshooting. Returns the new running total.
    fn fill(&mut self, split: Split, target_s: f64, mut total: f64, budget: Option<f64>) -> Result<f64> {
        let per_word = frames_per_word(self.spec.render.base_frames, self.profile.speed);
        let fps = self.spec.render.frame_rate;
        let word_s = per_word as f64 / fps;
        let (lo, hi) = self.spec.length_range;
        // plan in whole words so the running total lands on the target
        let mut remaining = ((target_s - total) / word_s).round().max(0.0) as usize;
        let mut misses = 0;
        while remaining >= lo {
            let max_words = if remaining <= hi { remaining } else { hi.min(remaining - lo).max(lo) };
            let words = sample_sentence(Some(self.profile), self.lm, (lo, max_words), self.rng)?;
            if !self.seen.insert(words.clone()) {
                misses += 1;
                if misses > 10_000 {
                    break;
                }
                continue;
            }
            remaining -= words.len();
            let frames = per_word * words.len();
            let duration_s = frames as f64 / fps;
            total += duration_s;
            let n = self.out.iter().filter(|u| u.speaker_id == self.profile.speaker_id).count();
            self.out.push(Utterance {
                id: format!("{}-{:05}", self.profile.speaker_id, n),
                speaker_id: self.profile.speaker_id.clone(),
                split,
                words,
                seed: self.rng.gen(),
                frames,
                duration_s,
                budget_min: budget,
            });
        }
        // nested train budgets are measured cumulatively
        if (total - target_s).abs() > target_s * BUDGET_TOLERANCE {
            return Err(Error::Infeasible(format!(
                "{} {split}: reached {total:.1} s of {target_s:.1} s with sentences of {lo}-{hi} words",
                self.profile.speaker_id
            )));
        }
        Ok(total)
    }
}

/// Generates the corpus, renders every clip into `out_dir/clips` (LVB1) and
/// writes `out_dir/manifest.jsonl`. `workers` threads share the rendering.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path, workers: usize) -> Result<(Corpus, Vec<ManifestRow>)> {
    let corpus = Corpus::generate(spec)?;
    let clip_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let rows = corpus.manifest_rows("clips");
    let workers = workers.max(1);
    let chunk = corpus.utterances.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = corpus
            .utterances
            .chunks(chunk)
            .map(|shard| {
                let corpus = &corpus;
                let clip_dir = &clip_dir;
                scope.spawn(move || -> Result<()> {
                    for u in shard {
                        let clip = corpus.render(u)?;
                        write_lvb1(&clip_dir.join(format!("{}.lvb", u.id)), &clip)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("render worker panicked")?;
        }
        Ok(())
    })?;
    write_manifest(&out_dir.join("manifest.jsonl"), &rows)?;
    std::fs::write(out_dir.join("corpus_spec.json"), serde_json::to_vec_pretty(spec)?)
        .map_err(|e| Error::io(out_dir.join("corpus_spec.json"), e))?;
    Ok((corpus, rows))
}

/// Resolves a manifest `path` relative to the manifest's directory.
pub fn resolve_clip_path(manifest_dir: &Path, row: &ManifestRow) -> PathBuf {
    let p = Path::new(&row.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_speakers: 2,
            baseline_speakers: 3,
            baseline_minutes: 2.0,
            train_minutes: 3.0,
            valid_minutes: 0.5,
            test_minutes: 0.5,
            checkpoints: vec![1.0, 2.0, 3.0],
            render: RenderConfig {
                height: 12,
                width: 12,
                ..RenderConfig::default()
            },
            ..CorpusSpec::default()
        }
    }

    fn lm() -> BigramLm {
        BigramLm::generate(&WORDS, 7, 1.0).unwrap()
    }

    #[test]
    fn zero_bias_matches_base_lm() {
        let lm = lm();
        let neutral = SpeakerProfile::neutral("n", lm.len());
        for prev in [None, Some(3)] {
            let a = lm.next_distribution(prev, Some(&neutral));
            let b = lm.next_distribution(prev, None);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bias_raises_word_frequency() {
        let lm = lm();
        let seven = lm.index("seven").unwrap();
        let mut biased = SpeakerProfile::neutral("b", lm.len());
        biased.word_bias[seven] = 5.0;
        let count = |p: &SpeakerProfile| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..10_000)
                .map(|_| sample_sentence(Some(p), &lm, (1, 1), &mut rng).unwrap())
                .filter(|s| s[0] == "seven")
                .count()
        };
        let base = count(&SpeakerProfile::neutral("n", lm.len()));
        assert!(count(&biased) > base, "biased speaker should say seven more often");
    }

    #[test]
    fn speakers_have_distinct_unigrams() {
        let lm = lm();
        let unigram = |seed| {
            let p = SpeakerProfile::generate(seed, 0, "x", lm.len());
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut counts = vec![1e-9; lm.len()];
            for _ in 0..10_000 {
                for w in sample_sentence(Some(&p), &lm, (1, 1), &mut rng).unwrap() {
                    counts[lm.index(&w).unwrap()] += 1.0;
                }
            }
            let z: f64 = counts.iter().sum();
            counts.into_iter().map(|c| c / z).collect::<Vec<_>>()
        };
        let (p, q) = (unigram(1), unigram(2));
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        assert!(kl > 0.0);
    }

    #[test]
    fn frame_counts_follow_speed() {
        let vocab: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
        let mut p = SpeakerProfile::neutral("n", vocab.len());
        let cfg = RenderConfig::default();
        let clip = render_clip(&["one", "two", "three"], &vocab, &p, &cfg, 1).unwrap();
        assert_eq!(clip.t, 24);
        p.speed = 1.5;
        assert_eq!(frames_per_word(8, p.speed), 5);
        assert_eq!(frames_per_word(1, 1.5), 2);
        assert!(matches!(
            render_clip(&["flibber"], &vocab, &p, &cfg, 1),
            Err(Error::UnknownWord(_))
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let vocab: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
        let p = SpeakerProfile::generate(3, 4, "s", vocab.len());
        let cfg = RenderConfig::default();
        let a = render_clip(&["red", "door"], &vocab, &p, &cfg, 9).unwrap();
        let b = render_clip(&["red", "door"], &vocab, &p, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profiles_respect_ranges() {
        for i in 0..50 {
            let p = SpeakerProfile::generate(1, i, "s", 10);
            assert!((1..=3).contains(&p.thickness));
            assert!(p.offset.0.abs() <= 3 && p.offset.1.abs() <= 3);
            assert!((0.6..=1.4).contains(&p.contrast));
            assert!((0.6..=1.5).contains(&p.speed));
            p.validate(10).unwrap();
        }
        assert_eq!(SpeakerProfile::generate(1, 2, "s", 10), SpeakerProfile::generate(1, 2, "s", 10));
    }

    #[test]
    fn corpus_budgets_and_nesting() {
        let spec = small_spec();
        let corpus = Corpus::generate(&spec).unwrap();
        let d = corpus.durations();
        for p in corpus.target_speakers() {
            let id = &p.speaker_id;
            for (split, minutes) in [(Split::Train, 3.0), (Split::Valid, 0.5), (Split::Test, 0.5)] {
                let got = d[&(id.clone(), split)];
                assert!((got - minutes * 60.0).abs() <= minutes * 60.0 * BUDGET_TOLERANCE, "{id} {split} {got}");
            }
            let mut prev: Vec<String> = vec![];
            for &m in &spec.checkpoints {
                let ids: Vec<String> = corpus.adaptation_subset(id, m).unwrap().iter().map(|u| u.id.clone()).collect();
                let secs: f64 = corpus.adaptation_subset(id, m).unwrap().iter().map(|u| u.duration_s).sum();
                assert!((secs - m * 60.0).abs() <= m * 60.0 * BUDGET_TOLERANCE);
                assert!(prev.iter().all(|p| ids.contains(p)));
                prev = ids;
            }
            // sentences are disjoint across splits
            let sets: Vec<HashSet<Vec<String>>> = [Split::Train, Split::Valid, Split::Test]
                .iter()
                .map(|&s| corpus.speaker_split(id, s).map(|u| u.words.clone()).collect())
                .collect();
            assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        }
        let baseline_words: HashSet<&str> =
            corpus.split(Split::Baseline).flat_map(|u| u.words.iter().map(String::as_str)).collect();
        assert!(spec.vocab.iter().all(|w| baseline_words.contains(w.as_str())));
        assert!(corpus.adaptation_subset("S1", 7.0).is_err());
    }

    #[test]
    fn speakers_are_visually_separable() {
        let spec = small_spec();
        let corpus = Corpus::generate(&spec).unwrap();
        let mean_frame = |u: &Utterance| {
            let clip = corpus.render(u).unwrap();
            let n = clip.h * clip.w;
            let mut m = vec![0.0; n];
            for t in 0..clip.t {
                for (i, &v) in clip.frame(t).iter().enumerate() {
                    m[i] += v as f64 / clip.t as f64;
                }
            }
            m
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let per_speaker: Vec<Vec<Vec<f64>>> = corpus
            .target_speakers()
            .iter()
            .map(|p| corpus.speaker_split(&p.speaker_id, Split::Train).take(8).map(|u| mean_frame(u)).collect())
            .collect();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for (i, a) in per_speaker.iter().enumerate() {
            for (j, b) in per_speaker.iter().enumerate() {
                for (x, fa) in a.iter().enumerate() {
                    for (y, fb) in b.iter().enumerate() {
                        if i == j && x < y {
                            within += dist(fa, fb);
                            nw += 1;
                        } else if i < j {
                            between += dist(fa, fb);
                            nb += 1;
                        }
                    }
                }
            }
        }
        assert!(between / nb as f64 > within / nw as f64);
    }

    #[test]
    fn build_writes_identical_manifests() {
        let spec = CorpusSpec {
            baseline_speakers: 1,
            num_speakers: 1,
            train_minutes: 1.0,
            checkpoints: vec![1.0],
            baseline_minutes: 5.0,
            ..small_spec()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (corpus, rows) = build_corpus(&spec, a.path(), 2).unwrap();
        build_corpus(&spec, b.path(), 1).unwrap();
        let ma = std::fs::read(a.path().join("manifest.jsonl")).unwrap();
        let mb = std::fs::read(b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
        let row = &rows[0];
        let clip = read_lvb1(&resolve_clip_path(a.path(), row), spec.render.frame_rate).unwrap();
        assert_eq!(clip, corpus.render(&corpus.utterances[0]).unwrap());
        assert!((clip.duration_s() - row.duration_s).abs() < 1e-12);
        let train: f64 = rows.iter().filter(|r| r.split == "train").map(|r| r.duration_s).sum();
        assert!((train - 60.0).abs() <= 3.0);
    }
}
