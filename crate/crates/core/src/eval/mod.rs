//! Word error rate, per-speaker evaluation reports and the experiment
//! tables built on them.

mod experiments;
mod metric;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::model::{LipReader, Vocab};
use crate::speakersim::{read_lvb1, resolve_clip_path, ManifestRow};
use crate::training::Sample;

pub use metric::{edit_distance, normalize, wer, wer_text};
pub use experiments::{
    ablation_grid, improved_speakers, AblationRow, AblationTable, Cell, Experiment, ExperimentConfig, ExperimentData, Method,
    MethodRow, MethodTable, ParamCell, SweepRow, SweepTable, SWEEP_BUDGETS,
};

/// How per-utterance errors are aggregated; written into every report.
pub const AGGREGATION: &str =
    "corpus-level WER per speaker (total edits / total reference words), unweighted mean over speakers";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub speaker_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
    pub ref_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerWer {
    pub speaker_id: String,
    pub edits: usize,
    pub ref_words: usize,
    /// Percent.
    pub wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: String,
    pub speakers: Vec<SpeakerWer>,
    /// Percent; arithmetic mean of `speakers[..].wer`.
    pub mean_wer: f64,
    pub utterances: Vec<UtteranceResult>,
    /// Trainable element counts by component, when adapters were involved.
    pub trainable: BTreeMap<String, usize>,
    /// Free-form run metadata (plan, seed, corpus hash, ...).
    pub metadata: BTreeMap<String, serde_json::Value>,
    /// Utterances whose clip could not be loaded.
    pub missing: Vec<String>,
}

impl EvalReport {
    /// Builds the per-speaker and mean figures from utterance results.
    pub fn from_utterances(utterances: Vec<UtteranceResult>) -> Self {
        let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for u in &utterances {
            let e = per.entry(u.speaker_id.as_str()).or_default();
            e.0 += u.edits;
            e.1 += u.ref_words;
        }
        let mut per: Vec<_> = per.into_iter().collect();
        per.sort_by_key(|(id, _)| natural_key(id));
        let speakers: Vec<SpeakerWer> = per
            .into_iter()
            .map(|(id, (edits, ref_words))| SpeakerWer {
                speaker_id: id.to_string(),
                edits,
                ref_words,
                wer: 100.0 * edits as f64 / ref_words as f64,
            })
            .collect();
        let mean_wer = mean(speakers.iter().map(|s| s.wer));
        Self {
            aggregation: AGGREGATION.to_string(),
            speakers,
            mean_wer,
            utterances,
            ..Self::default()
        }
    }

    /// Concatenates reports over disjoint speakers and recomputes the mean.
    pub fn combine(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        let mut utts = Vec::new();
        let mut missing = Vec::new();
        let mut trainable = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for r in reports {
            utts.extend(r.utterances);
            missing.extend(r.missing);
            trainable.extend(r.trainable);
            metadata.extend(r.metadata);
        }
        let mut out = Self::from_utterances(utts);
        out.missing = missing;
        out.trainable = trainable;
        out.metadata = metadata;
        out
    }

    pub fn speaker_wer(&self, speaker_id: &str) -> Option<f64> {
        self.speakers.iter().find(|s| s.speaker_id == speaker_id).map(|s| s.wer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header comment, one line per speaker and a `Mean` line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# {}\nspeaker\tedits\tref_words\twer\n", self.aggregation);
        for s in &self.speakers {
            out.push_str(&format!("{}\t{}\t{}\t{:.1}\n", s.speaker_id, s.edits, s.ref_words, s.wer));
        }
        out.push_str(&format!("Mean\t\t\t{:.1}\n", self.mean_wer));
        out
    }
}

/// Orders ids like `S2` before `S10`: text prefix, then the trailing number.
fn natural_key(id: &str) -> (&str, u64, &str) {
    let digits = id.len() - id.bytes().rev().take_while(u8::is_ascii_digit).count();
    let (prefix, number) = id.split_at(digits);
    (prefix, number.parse().unwrap_or(0), id)
}

pub(crate) fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Greedy-decodes one sample and scores it.
pub fn score_sample(
    model: &LipReader,
    adapters: Option<&AdapterSet>,
    vocab: &Vocab,
    speaker_id: &str,
    sample: &Sample,
) -> Result<UtteranceResult> {
    let hyp = model.transcribe(&sample.clip, adapters)?;
    let reference = sample.target.to_text(vocab);
    let hypothesis = hyp.to_text(vocab);
    let (r, h) = (normalize(&reference), normalize(&hypothesis));
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(UtteranceResult {
        id: sample.id.clone(),
        speaker_id: speaker_id.to_string(),
        edits: edit_distance(&r, &h),
        ref_words: r.len(),
        reference,
        hypothesis,
    })
}

/// Evaluates one speaker's samples under one adapter set.
pub fn evaluate(
    model: &LipReader,
    adapters: Option<&AdapterSet>,
    vocab: &Vocab,
    speaker_id: &str,
    samples: &[Sample],
) -> Result<EvalReport> {
    let utts = samples
        .iter()
        .map(|s| score_sample(model, adapters, vocab, speaker_id, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_utterances(utts))
}

/// Evaluates manifest rows (clips on disk). Unreadable clips are listed in
/// [`EvalReport::missing`] rather than skipped silently.
pub fn evaluate_manifest(
    model: &LipReader,
    adapters: Option<&AdapterSet>,
    vocab: &Vocab,
    rows: &[ManifestRow],
    manifest_dir: &Path,
    frame_rate: f64,
) -> Result<EvalReport> {
    let mut utts = Vec::new();
    let mut missing = Vec::new();
    for row in rows {
        let clip = match read_lvb1(&resolve_clip_path(manifest_dir, row), frame_rate) {
            Ok(c) => c,
            Err(_) => {
                missing.push(row.id.clone());
                continue;
            }
        };
        let words = normalize(&row.transcript);
        let sample = Sample {
            id: row.id.clone(),
            clip,
            target: vocab.encode(&words)?,
        };
        utts.push(score_sample(model, adapters, vocab, &row.speaker_id, &sample)?);
    }
    let mut report = EvalReport::from_utterances(utts);
    report.missing = missing;
    Ok(report)
}
