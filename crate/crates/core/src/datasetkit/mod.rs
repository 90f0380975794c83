//! Building a speaker-annotated lip-reading set out of two corpora that each
//! lack half of the labels: one has transcripts but no speaker identities,
//! the other identities but no transcripts.
//!
//! Identities come from clustering face embeddings of three frames per video;
//! missing transcripts come from a pluggable transcriber. Both dependencies
//! are traits with synthetic implementations in [`synthetic`].

mod identity;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normalize;
use crate::speakersim::{ManifestRow, Split};

pub use identity::{
    clustering_accuracy, cosine, cross_corpus_overlap, extract_embeddings, identity_cluster, l2_norm, normalized,
    segment_frames, EmbeddingCache, EmbeddingProvider, IdentityIndex, IdentityMatch, SegmentFrames, VideoEmbeddings,
    DEFAULT_THRESHOLD,
};

/// Frame rate assumed when converting record durations to frame counts.
pub const VIDEO_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    /// Corpus tag.
    pub source: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default)]
    pub pseudo_label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl VideoRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Config(format!("record {} has duration {}", self.id, self.duration_s)));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * VIDEO_FPS).round() as usize
    }
}

/// Any record → text function; failures carry a message.
pub trait Transcriber: Sync {
    fn transcribe(&self, record: &VideoRecord) -> std::result::Result<String, String>;
}

/// Attaches an automatic transcript and marks the record as pseudo-labeled.
pub fn pseudo_label(record: &VideoRecord, transcriber: &dyn Transcriber) -> Result<VideoRecord> {
    let text = transcriber.transcribe(record).map_err(|message| Error::Transcriber {
        id: record.id.clone(),
        message,
    })?;
    Ok(VideoRecord {
        transcript: Some(text),
        pseudo_label: true,
        ..record.clone()
    })
}

/// Per-speaker minute budgets; a speaker needs at least `min_total_min` of
/// video to be considered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBudgets {
    pub train_min: f64,
    pub valid_min: f64,
    pub test_min: f64,
    pub min_total_min: f64,
    /// Relative slack allowed on every budget.
    pub tolerance: f64,
}

impl Default for SplitBudgets {
    fn default() -> Self {
        Self {
            train_min: 45.0,
            valid_min: 2.0,
            test_min: 2.0,
            min_total_min: 50.0,
            tolerance: 0.05,
        }
    }
}

impl SplitBudgets {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.train_min, self.valid_min, self.test_min].iter().all(|b| *b > 0.0)
            && (0.0..1.0).contains(&self.tolerance)
            && self.min_total_min >= 0.0;
        if !ok {
            return Err(Error::Config("split budgets must be positive with tolerance in [0, 1)".into()));
        }
        Ok(())
    }

    fn of(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train_min,
            Split::Valid => self.valid_min,
            Split::Test => self.test_min,
            Split::Baseline => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub speaker_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub rows: Vec<ManifestRow>,
    pub excluded: Vec<Exclusion>,
}

/// Smallest budgets first: their narrow windows get the coarse records,
/// the train budget absorbs the remainder.
const PACKED: [Split; 3] = [Split::Test, Split::Valid, Split::Train];

/// Packs each speaker's records, longest first, into test, valid and train
/// until every budget is met within the tolerance. Records that fit nowhere
/// stay unused; speakers below the minimum or with an unmet budget are
/// excluded with a reason.
pub fn build_splits(records: &[VideoRecord], budgets: &SplitBudgets) -> Result<SplitOutcome> {
    budgets.validate()?;
    let mut by_speaker: BTreeMap<&str, Vec<&VideoRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        let spk = r
            .speaker_id
            .as_deref()
            .ok_or_else(|| Error::Config(format!("record {} has no speaker id", r.id)))?;
        by_speaker.entry(spk).or_default().push(r);
    }
    let mut out = SplitOutcome::default();
    for (spk, mut recs) in by_speaker {
        let total_min = recs.iter().map(|r| r.duration_s).sum::<f64>() / 60.0;
        if total_min < budgets.min_total_min {
            out.excluded.push(Exclusion {
                speaker_id: spk.to_string(),
                reason: format!("{total_min:.1} min of video, below the {:.1} min minimum", budgets.min_total_min),
            });
            continue;
        }
        recs.sort_by(|a, b| b.duration_s.total_cmp(&a.duration_s).then(a.id.cmp(&b.id)));
        let mut used = vec![false; recs.len()];
        let mut rows = Vec::new();
        let mut failure = None;
        for split in PACKED {
            let target = budgets.of(split) * 60.0;
            let (lo, hi) = (target * (1.0 - budgets.tolerance), target * (1.0 + budgets.tolerance));
            let mut total = 0.0;
            for (k, r) in recs.iter().enumerate() {
                if total >= target {
                    break;
                }
                if !used[k] && total + r.duration_s <= hi {
                    used[k] = true;
                    total += r.duration_s;
                    rows.push(ManifestRow {
                        id: r.id.clone(),
                        speaker_id: spk.to_string(),
                        path: r.path.clone().unwrap_or_default(),
                        duration_s: r.duration_s,
                        transcript: r.transcript.clone().unwrap_or_default(),
                        split: split.as_str().to_string(),
                        source: Some(r.source.clone()),
                        cluster_id: None,
                        pseudo_label: Some(r.pseudo_label),
                    });
                }
            }
            if total < lo {
                failure = Some(format!(
                    "{split} budget infeasible: packed {:.2} of {:.2} min",
                    total / 60.0,
                    target / 60.0
                ));
                break;
            }
        }
        match failure {
            Some(reason) => out.excluded.push(Exclusion {
                speaker_id: spk.to_string(),
                reason,
            }),
            None => out.rows.extend(rows),
        }
    }
    Ok(out)
}

/// `|split ∩ train| / |split|`, or 0 for an empty split vocabulary.
pub fn overlap_ratio(split_vocab: &BTreeSet<String>, train_vocab: &BTreeSet<String>) -> f64 {
    if split_vocab.is_empty() {
        return 0.0;
    }
    split_vocab.intersection(train_vocab).count() as f64 / split_vocab.len() as f64
}

/// Normalized distinct words over `transcripts`.
pub fn vocabulary<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    transcripts.into_iter().flat_map(|t| normalize(t)).collect()
}

pub const OVERLAP_DEFINITION: &str = "overlap ratio = |split vocabulary ∩ train vocabulary| / |split vocabulary|";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub speaker_id: String,
    pub split: String,
    pub videos: usize,
    pub duration_min: f64,
    pub words: usize,
    pub overlap_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub overlap_definition: String,
    pub rows: Vec<StatsRow>,
}

/// Per speaker and split: video count, minutes, distinct words and the
/// vocabulary overlap with that speaker's train split.
pub fn stats_report(rows: &[ManifestRow]) -> StatsReport {
    let mut groups: BTreeMap<(&str, &str), Vec<&ManifestRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.speaker_id.as_str(), r.split.as_str())).or_default().push(r);
    }
    let vocab_of = |rs: &[&ManifestRow]| vocabulary(rs.iter().map(|r| r.transcript.as_str()));
    let empty = Vec::new();
    let out = groups
        .iter()
        .map(|(&(spk, split), rs)| {
            let train = groups.get(&(spk, Split::Train.as_str())).unwrap_or(&empty);
            let v = vocab_of(rs);
            StatsRow {
                speaker_id: spk.to_string(),
                split: split.to_string(),
                videos: rs.len(),
                duration_min: rs.iter().map(|r| r.duration_s).sum::<f64>() / 60.0,
                words: v.len(),
                overlap_ratio: overlap_ratio(&v, &vocab_of(train)),
            }
        })
        .collect();
    StatsReport {
        overlap_definition: OVERLAP_DEFINITION.to_string(),
        rows: out,
    }
}

impl StatsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# {}\nspeaker\tsplit\t# videos\tDuration(min)\t# words\toverlap ratio\n",
            self.overlap_definition
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\t{}\t{:.2}\n",
                r.speaker_id, r.split, r.videos, r.duration_min, r.words, r.overlap_ratio
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub threshold: f64,
    pub budgets: SplitBudgets,
    pub workers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            budgets: SplitBudgets::default(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBuild {
    pub rows: Vec<ManifestRow>,
    pub excluded: Vec<Exclusion>,
    /// Identities found in both corpora, by per-corpus cluster id.
    pub matches: Vec<IdentityMatch>,
    /// Record id → merged identity.
    pub identities: BTreeMap<String, usize>,
    pub stats: StatsReport,
}

/// Clusters each corpus on its own, merges identities found in both under
/// one id, names every record's speaker after its identity, pseudo-labels
/// records without transcripts and packs the splits.
pub fn build_dataset(
    primary: &[VideoRecord],
    secondary: &[VideoRecord],
    provider: &dyn EmbeddingProvider,
    transcriber: &dyn Transcriber,
    cfg: &DatasetConfig,
) -> Result<DatasetBuild> {
    let index_of = |recs: &[VideoRecord]| -> Result<IdentityIndex> {
        identity_cluster(&extract_embeddings(recs, provider, cfg.workers)?, cfg.threshold)
    };
    let (ia, ib) = (index_of(primary)?, index_of(secondary)?);
    let matches = cross_corpus_overlap(&ia, &ib, cfg.threshold);
    let mut merged_b = BTreeMap::new();
    for m in &matches {
        merged_b.insert(m.b, m.a);
    }
    let mut next = ia.clusters.keys().max().map_or(0, |m| m + 1);
    for &b in ib.clusters.keys() {
        merged_b.entry(b).or_insert_with(|| {
            next += 1;
            next - 1
        });
    }
    let mut identities = BTreeMap::new();
    let mut records = Vec::with_capacity(primary.len() + secondary.len());
    let primary_ids: BTreeMap<usize, usize> = ia.clusters.keys().map(|&c| (c, c)).collect();
    for (recs, idx, resolve) in [(primary, &ia, &primary_ids), (secondary, &ib, &merged_b)] {
        for r in recs {
            let id = resolve[&idx.assignment[&r.id]];
            identities.insert(r.id.clone(), id);
            let mut r = if r.transcript.is_none() {
                pseudo_label(r, transcriber)?
            } else {
                r.clone()
            };
            r.speaker_id = Some(identity_name(id));
            records.push(r);
        }
    }
    let mut split = build_splits(&records, &cfg.budgets)?;
    for row in &mut split.rows {
        row.cluster_id = Some(identities[&row.id]);
    }
    let stats = stats_report(&split.rows);
    Ok(DatasetBuild {
        rows: split.rows,
        excluded: split.excluded,
        matches,
        identities,
        stats,
    })
}

pub fn identity_name(id: usize) -> String {
    format!("ID{id:04}")
}

#[cfg(test)]
mod tests {
    use super::synthetic::{Scenario, ScenarioConfig, SyntheticTranscriber};
    use super::*;

    fn rec(id: &str, spk: &str, secs: f64, text: &str) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            source: "t".into(),
            duration_s: secs,
            speaker_id: Some(spk.into()),
            transcript: Some(text.into()),
            pseudo_label: false,
            path: None,
        }
    }

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn exact_packing_of_unit_records() {
        let recs: Vec<_> = (0..60).map(|i| rec(&format!("r{i:02}"), "A", 60.0, "a b")).collect();
        let budgets = SplitBudgets {
            train_min: 45.0,
            valid_min: 10.0,
            test_min: 5.0,
            min_total_min: 50.0,
            tolerance: 0.05,
        };
        let out = build_splits(&recs, &budgets).unwrap();
        let count = |s: &str| out.rows.iter().filter(|r| r.split == s).count();
        assert_eq!((count("train"), count("valid"), count("test")), (45, 10, 5));
        let ids: BTreeSet<_> = out.rows.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), out.rows.len());
    }

    #[test]
    fn short_speaker_excluded() {
        let recs: Vec<_> = (0..30).map(|i| rec(&format!("r{i}"), "B", 60.0, "a")).collect();
        let out = build_splits(&recs, &SplitBudgets::default()).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(out.excluded.len(), 1);
        assert!(out.excluded[0].reason.contains("minimum"));
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_ratio(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(overlap_ratio(&set(&["a", "b", "c", "d"]), &set(&["a", "b", "x"])), 0.5);
        assert_eq!(overlap_ratio(&set(&["a"]), &set(&["z"])), 0.0);
        assert_eq!(overlap_ratio(&set(&[]), &set(&["z"])), 0.0);
    }

    #[test]
    fn stats_match_brute_force() {
        let mut recs = Vec::new();
        for spk in ["A", "B"] {
            for i in 0..500 {
                let secs = 4.0 + (i % 9) as f64;
                recs.push(rec(&format!("{spk}{i}"), spk, secs, &format!("w{} w{} shared", i % 13, i % 3)));
            }
        }
        let out = build_splits(&recs, &SplitBudgets::default()).unwrap();
        let report = stats_report(&out.rows);
        assert_eq!(report.rows.len(), 6);
        for r in &report.rows {
            let rows: Vec<_> = out
                .rows
                .iter()
                .filter(|m| m.speaker_id == r.speaker_id && m.split == r.split)
                .collect();
            assert_eq!(r.videos, rows.len());
            assert_eq!(r.duration_min, rows.iter().map(|m| m.duration_s).sum::<f64>() / 60.0);
            let mut words: Vec<&str> = rows.iter().flat_map(|m| m.transcript.split(' ')).collect();
            words.sort();
            words.dedup();
            assert_eq!(r.words, words.len());
        }
        let tsv = report.to_tsv();
        for col in ["# videos", "Duration(min)", "# words", "overlap ratio"] {
            assert!(tsv.contains(col));
        }
    }

    #[test]
    fn pseudo_label_rates() {
        let words: Vec<String> = (0..10).map(|i| WORDS_10[i].to_string()).collect();
        let t = |rho| SyntheticTranscriber {
            rho,
            seed: 3,
            vocab: crate::speakersim::WORDS.iter().map(|w| w.to_string()).collect(),
            truth: [("x".to_string(), words.clone())].into_iter().collect(),
        };
        let r = rec("x", "A", 3.0, "");
        let r = VideoRecord { transcript: None, ..r };
        let clean = pseudo_label(&r, &t(0.0)).unwrap();
        assert_eq!(clean.transcript.as_deref(), Some(words.join(" ").as_str()));
        assert!(clean.pseudo_label);
        let all = t(1.0).corrupt("x", &words);
        assert!(all.iter().zip(&words).all(|(a, b)| a != b));

        let tr = t(0.1);
        let mut changed = 0;
        for k in 0..1000 {
            let out = tr.corrupt(&format!("u{k}"), &words);
            changed += out.iter().zip(&words).filter(|(a, b)| a != b).count();
        }
        let frac = changed as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "{frac}");

        let missing = VideoRecord { id: "nope".into(), ..r };
        let err = pseudo_label(&missing, &tr).unwrap_err();
        assert!(matches!(err, Error::Transcriber { ref id, .. } if id == "nope"));
    }

    const WORDS_10: [&str; 10] = ["red", "blue", "green", "stone", "river", "door", "table", "chair", "house", "city"];

    #[test]
    fn end_to_end_recovers_planted_identities() {
        let sc = Scenario::generate(&ScenarioConfig {
            primary_only: 4,
            secondary_only: 3,
            shared: 2,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let build = build_dataset(&sc.primary, &sc.secondary, &sc.faces, &sc.transcriber, &DatasetConfig::default())
            .unwrap();
        assert_eq!(build.matches.len(), 2);
        let speakers: BTreeSet<_> = build.rows.iter().map(|r| r.speaker_id.clone()).collect();
        assert_eq!(speakers.len(), 9, "{:?}", build.excluded);
        for r in &build.rows {
            assert!(r.transcript.split(' ').count() >= 4);
        }
    }
}
