//! Adaptation experiments on a synthetic corpus: the method comparison, the
//! adaptation-duration sweep and the LoRA ablation grid.
//!
//! An [`Experiment`] owns the corpus, the rendered evaluation data and a
//! trained baseline. Per-speaker results are cached by (method, budget,
//! speaker), so tables that share cells (the 45-minute sweep row and the
//! comparison's "Ours" row, say) train each cell once.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport};
use crate::adapters::{count_trainable, AdapterLayout, AdapterSet, LoraConfig, LoraTarget};
use crate::error::{Error, Result};
use crate::model::{LipReader, ModelConfig, Vocab};
use crate::speakersim::{Corpus, CorpusSpec, RenderConfig, Split};
use crate::training::{
    adapt_decoder_lora, adapt_language, adapt_vision, finetune, load_samples, train_baseline, AdaptationPlan,
    BaselineConfig, CosineSchedule, LrSchedule, RunLog, Sample,
};

/// Adaptation budgets of the duration sweep, in minutes.
pub const SWEEP_BUDGETS: [f64; 5] = [1.0, 5.0, 15.0, 30.0, 45.0];

const FRONTEND: &str = "frontend.";
const BACKEND: &str = "backend.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub baseline: BaselineConfig,
    pub plan: AdaptationPlan,
    /// Schedule of the full fine-tuning comparators.
    pub finetune_schedule: CosineSchedule,
    /// Adaptation data per speaker for the comparison and ablation.
    pub budget_minutes: f64,
    /// Speakers adapted concurrently.
    pub workers: usize,
}

impl ExperimentConfig {
    /// Compact preset sized for a single CPU core: 24×24 glyph clips, a
    /// two-block encoder and decoder, and adaptation runs of a few seconds.
    pub fn desk() -> Self {
        let model = ModelConfig {
            d_model: 32,
            d_dec: 64,
            encoder_blocks: 2,
            heads: 4,
            ff_dim: 64,
            decoder_blocks: 2,
            decoder_heads: 4,
            decoder_ff_dim: 128,
            vocab_size: 128,
            max_frames: 256,
            frame_h: 24,
            frame_w: 24,
            channels: 1,
            conv_channels: vec![4, 4],
        };
        let corpus = CorpusSpec {
            num_speakers: 10,
            baseline_speakers: 30,
            baseline_minutes: 6.0,
            // A wider test window than the default steadies per-speaker WER.
            test_minutes: 6.0,
            render: RenderConfig {
                base_frames: 6,
                ..RenderConfig::default()
            },
            ..CorpusSpec::default()
        };
        let mut baseline = BaselineConfig::desk(4000);
        baseline.batch_size = 8;
        baseline.grad_accum = 1;
        if let LrSchedule::TriStage(s) = &mut baseline.schedule {
            s.peak_lr = 2e-3;
        }
        let plan = AdaptationPlan {
            vision_steps: 100,
            grad_accum: 4,
            vision_schedule: CosineSchedule::vision_default().scaled(100.0),
            language_schedule: CosineSchedule::vision_default().scaled(1000.0),
            ..AdaptationPlan::default()
        };
        Self {
            corpus,
            model,
            model_seed: 1,
            baseline,
            plan,
            finetune_schedule: CosineSchedule::vision_default().scaled(10.0),
            budget_minutes: 45.0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        self.finetune_schedule.validate()?;
        if self.model.vocab_size < self.corpus.vocab.len() + 3 {
            return Err(Error::Config(format!(
                "model vocabulary {} cannot hold {} words plus specials",
                self.model.vocab_size,
                self.corpus.vocab.len()
            )));
        }
        if (self.corpus.render.height, self.corpus.render.width) != (self.model.frame_h, self.model.frame_w) {
            return Err(Error::Config("corpus frame size differs from the model's".into()));
        }
        Ok(())
    }
}

/// One row of the comparison (and, via [`Method::Lora`], the ablation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Baseline,
    /// Encoder LoRA without padding prompts.
    VLora,
    /// Padding prompts without LoRA.
    PaddingPrompt,
    FinetuneF,
    FinetuneB,
    FinetuneFB,
    OursVision,
    /// Decoder query/key/value LoRA.
    LLora,
    OursLanguage,
    /// Encoder fine-tuning followed by input prompt tuning.
    FinetuneFBPrompt,
    OursBoth,
    /// Encoder LoRA of the given configuration, without padding prompts.
    Lora(LoraConfig),
}

impl Method {
    /// Rows of the method comparison, in table order.
    pub fn comparison() -> Vec<Method> {
        use Method::*;
        vec![
            Baseline,
            VLora,
            PaddingPrompt,
            FinetuneF,
            FinetuneB,
            FinetuneFB,
            OursVision,
            LLora,
            OursLanguage,
            FinetuneFBPrompt,
            OursBoth,
        ]
    }

    pub fn label(&self) -> String {
        match self {
            Method::Baseline => "Baseline".into(),
            Method::VLora => "V LoRA".into(),
            Method::PaddingPrompt => "Padding Prompt".into(),
            Method::FinetuneF => "Finetune-F".into(),
            Method::FinetuneB => "Finetune-B".into(),
            Method::FinetuneFB | Method::FinetuneFBPrompt => "Finetune-F&B".into(),
            Method::OursVision | Method::OursLanguage | Method::OursBoth => "Ours".into(),
            Method::LLora => "L LoRA".into(),
            Method::Lora(l) => format!("{} r={}", targets_label(l), l.rank),
        }
    }

    /// Section of the comparison table the row belongs to.
    pub fn group(&self) -> &'static str {
        match self {
            Method::Baseline => "",
            Method::LLora | Method::OursLanguage => "Language-Level Adaptation",
            Method::FinetuneFBPrompt | Method::OursBoth => "Vision-and-Language-Level Adaptation",
            _ => "Vision-Level Adaptation",
        }
    }

    /// Stable identifier, used as the cache key and in JSON reports.
    pub fn key(&self) -> String {
        match self {
            Method::Lora(l) => format!(
                "lora[{}]r{}a{}",
                l.targets.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
                l.rank,
                l.alpha
            ),
            other => format!("{other:?}"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let group = self.group();
        if group.is_empty() {
            f.write_str(&self.label())
        } else {
            write!(f, "{} ({group})", self.label())
        }
    }
}

fn targets_label(l: &LoraConfig) -> String {
    l.targets.iter().map(|t| format!("W_{}", &t.as_str()[1..])).collect::<Vec<_>>().join(", ")
}

/// The LoRA ablation grid: each weight type alone at rank 8, the attention
/// triple, and all four targets at ranks 8, 4 and 2. Scaling stays 16.
pub fn ablation_grid() -> Vec<LoraConfig> {
    use LoraTarget::*;
    let mut grid: Vec<LoraConfig> = [Wc, Wq, Wk, Wv].into_iter().map(|t| LoraConfig::new(8, 16.0, [t])).collect();
    grid.push(LoraConfig::new(8, 16.0, [Wq, Wk, Wv]));
    for r in [8, 4, 2] {
        grid.push(LoraConfig::new(r, 16.0, LoraTarget::ALL));
    }
    grid
}

/// A trainable-parameter table cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamCell {
    /// Whole component (the baseline row).
    Total(usize),
    /// Base weights trained in place.
    Trained(usize),
    /// Parameters added next to frozen weights.
    Added(usize),
    None,
}

impl fmt::Display for ParamCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamCell::Total(n) => write!(f, "{n}*"),
            ParamCell::Trained(n) => write!(f, "{n}"),
            ParamCell::Added(n) => write!(f, "+{n}"),
            ParamCell::None => f.write_str("-"),
        }
    }
}

impl ParamCell {
    pub fn count(self) -> usize {
        match self {
            ParamCell::Total(n) | ParamCell::Trained(n) | ParamCell::Added(n) => n,
            ParamCell::None => 0,
        }
    }
}

/// Renders speakers, loads their evaluation clips and keeps a cache of
/// adaptation subsets.
pub struct ExperimentData {
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub speakers: Vec<String>,
    test: BTreeMap<String, Vec<Sample>>,
    /// Full adaptation split per speaker, rendered on first use.
    train: Mutex<BTreeMap<String, std::sync::Arc<Vec<Sample>>>>,
}

impl ExperimentData {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        let corpus = Corpus::generate(spec)?;
        let vocab = Vocab::new(corpus.vocab().to_vec());
        let speakers: Vec<String> = corpus.target_speakers().iter().map(|p| p.speaker_id.clone()).collect();
        let test = speakers
            .iter()
            .map(|s| Ok((s.clone(), load_samples(&corpus, corpus.speaker_split(s, Split::Test), &vocab)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            corpus,
            vocab,
            speakers,
            test,
            train: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn baseline_samples(&self) -> Result<Vec<Sample>> {
        load_samples(&self.corpus, self.corpus.split(Split::Baseline), &self.vocab)
    }

    pub fn test_samples(&self, speaker: &str) -> Result<&[Sample]> {
        self.test
            .get(speaker)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown target speaker {speaker}")))
    }

    /// The nested `minutes` adaptation subset of `speaker`.
    pub fn adaptation_samples(&self, speaker: &str, minutes: f64) -> Result<Vec<Sample>> {
        let full = {
            let mut cache = self.train.lock().expect("sample cache poisoned");
            match cache.get(speaker) {
                Some(s) => s.clone(),
                None => {
                    let all = load_samples(&self.corpus, self.corpus.speaker_split(speaker, Split::Train), &self.vocab)?;
                    let all = std::sync::Arc::new(all);
                    cache.insert(speaker.to_string(), all.clone());
                    all
                }
            }
        };
        let ids: std::collections::BTreeSet<&str> = self
            .corpus
            .adaptation_subset(speaker, minutes)?
            .into_iter()
            .map(|u| u.id.as_str())
            .collect();
        Ok(full.iter().filter(|s| ids.contains(s.id.as_str())).cloned().collect())
    }
}

/// Result of one method on one speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub report: EvalReport,
    pub encoder: ParamCell,
    pub decoder: ParamCell,
    pub optimizer_steps: usize,
}

/// A trained baseline plus data; runs and caches adaptation cells.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: ExperimentData,
    pub model: LipReader,
    pub baseline_log: Option<RunLog>,
    cache: Mutex<BTreeMap<(String, u64, String), Cell>>,
    /// Vision-level adapters by (budget, speaker); the second stage of
    /// "both" starts from them.
    vision: Mutex<BTreeMap<(u64, String), (AdapterSet, usize)>>,
}

impl Experiment {
    /// Generates the corpus and trains the baseline from scratch.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = ExperimentData::generate(&config.corpus)?;
        let mut model = LipReader::new(config.model.clone(), config.model_seed)?;
        let log = train_baseline(&mut model, &data.baseline_samples()?, &config.baseline)?;
        Ok(Self {
            config,
            data,
            model,
            baseline_log: Some(log),
            cache: Mutex::new(BTreeMap::new()),
            vision: Mutex::new(BTreeMap::new()),
        })
    }

    /// Uses an already trained baseline.
    pub fn with_model(config: ExperimentConfig, model: LipReader) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("baseline checkpoint configuration differs from the experiment's".into()));
        }
        let data = ExperimentData::generate(&config.corpus)?;
        Ok(Self {
            config,
            data,
            model,
            baseline_log: None,
            cache: Mutex::new(BTreeMap::new()),
            vision: Mutex::new(BTreeMap::new()),
        })
    }

    fn encoder_total(&self) -> usize {
        self.model.count_params(FRONTEND) + self.model.count_params(BACKEND)
    }

    fn decoder_total(&self) -> usize {
        self.model.count_params("decoder.")
    }

    /// Adapts to `train` with `method`; returns the model to evaluate (if
    /// base weights changed), the adapters and the parameter cells.
    /// Vision-level adaptation with the configured plan, cached.
    fn ours_vision(&self, minutes: f64, speaker: &str, train: &[Sample]) -> Result<(AdapterSet, usize)> {
        let key = (minutes.to_bits(), speaker.to_string());
        if let Some(v) = self.vision.lock().expect("vision cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let out = adapt_vision(&self.model, train, &self.config.plan)?;
        let v = (out.adapters, out.log.optimizer_steps);
        self.vision.lock().expect("vision cache poisoned").insert(key, v.clone());
        Ok(v)
    }

    fn adapt(&self, method: &Method, minutes: f64, speaker: &str, train: &[Sample]) -> Result<(Option<LipReader>, AdapterSet, ParamCell, ParamCell, usize)> {
        let plan = &self.config.plan;
        let counts = |a: &AdapterSet| count_trainable(a);
        let added = |n: usize| if n == 0 { ParamCell::None } else { ParamCell::Added(n) };
        let ft_plan = AdaptationPlan {
            vision_schedule: self.config.finetune_schedule,
            ..plan.clone()
        };
        let vision = |lora: Option<LoraConfig>, padding: bool| AdaptationPlan {
            lora: lora.unwrap_or_else(|| LoraConfig {
                targets: Default::default(),
                ..plan.lora.clone()
            }),
            padding_prompt: padding,
            ..plan.clone()
        };
        let ft_prefixes = |m: &Method| -> Vec<&'static str> {
            match m {
                Method::FinetuneF => vec![FRONTEND],
                Method::FinetuneB => vec![BACKEND],
                _ => vec![FRONTEND, BACKEND],
            }
        };
        Ok(match method {
            Method::Baseline => (
                None,
                AdapterSet::empty(),
                ParamCell::Total(self.encoder_total()),
                ParamCell::Total(self.decoder_total()),
                0,
            ),
            Method::OursVision => {
                let (adapters, steps) = self.ours_vision(minutes, speaker, train)?;
                let c = counts(&adapters);
                (None, adapters, added(c.encoder()), ParamCell::None, steps)
            }
            Method::VLora | Method::PaddingPrompt | Method::Lora(_) => {
                let p = match method {
                    Method::VLora => vision(Some(plan.lora.clone()), false),
                    Method::PaddingPrompt => vision(None, true),
                    Method::Lora(l) => vision(Some(l.clone()), false),
                    _ => unreachable!("vision-level comparator"),
                };
                let out = adapt_vision(&self.model, train, &p)?;
                let c = counts(&out.adapters);
                (None, out.adapters, added(c.encoder()), ParamCell::None, out.log.optimizer_steps)
            }
            Method::FinetuneF | Method::FinetuneB | Method::FinetuneFB => {
                let prefixes = ft_prefixes(method);
                let out = finetune(&self.model, train, &prefixes, &ft_plan)?;
                let n = prefixes.iter().map(|p| self.model.count_params(p)).sum();
                (out.model, out.adapters, ParamCell::Trained(n), ParamCell::None, out.log.optimizer_steps)
            }
            Method::LLora => {
                // Decoder LoRA diverges at the prompt's rate; it gets the
                // encoder LoRA schedule.
                let p = AdaptationPlan {
                    language_schedule: plan.vision_schedule,
                    ..plan.clone()
                };
                let out = adapt_decoder_lora(&self.model, train, &p)?;
                let c = counts(&out.adapters);
                (None, out.adapters, ParamCell::None, added(c.decoder()), out.log.optimizer_steps)
            }
            Method::OursLanguage => {
                let out = adapt_language(&self.model, None, train, plan)?;
                let c = counts(&out.adapters);
                (None, out.adapters, ParamCell::None, added(c.decoder()), out.log.optimizer_steps)
            }
            Method::OursBoth => {
                let (vision, vision_steps) = self.ours_vision(minutes, speaker, train)?;
                let both = adapt_language(&self.model, Some(&vision), train, plan)?;
                let c = counts(&both.adapters);
                let steps = vision_steps + both.log.optimizer_steps;
                (None, both.adapters, added(c.encoder()), added(c.decoder()), steps)
            }
            Method::FinetuneFBPrompt => {
                let prefixes = ft_prefixes(method);
                let ft = finetune(&self.model, train, &prefixes, &ft_plan)?;
                let tuned = ft.model.expect("fine-tuning returns a model");
                let lang = adapt_language(&tuned, None, train, plan)?;
                let c = counts(&lang.adapters);
                let n = prefixes.iter().map(|p| self.model.count_params(p)).sum();
                let steps = ft.log.optimizer_steps + lang.log.optimizer_steps;
                (Some(tuned), lang.adapters, ParamCell::Trained(n), added(c.decoder()), steps)
            }
        })
    }

    /// Adapts `speaker` on a `minutes` budget and evaluates on their test
    /// split. Cached.
    pub fn cell(&self, method: &Method, minutes: f64, speaker: &str) -> Result<Cell> {
        let key = (method.key(), minutes.to_bits(), speaker.to_string());
        if let Some(c) = self.cache.lock().expect("cell cache poisoned").get(&key) {
            return Ok(c.clone());
        }
        let test = self.data.test_samples(speaker)?;
        let train = if *method == Method::Baseline {
            Vec::new()
        } else {
            self.data.adaptation_samples(speaker, minutes)?
        };
        let (tuned, adapters, encoder, decoder, steps) = self.adapt(method, minutes, speaker, &train)?;
        let model = tuned.as_ref().unwrap_or(&self.model);
        let bound = (!adapters.is_empty()).then_some(&adapters);
        let mut report = evaluate(model, bound, &self.data.vocab, speaker, test)?;
        report.trainable.insert("encoder".into(), encoder.count());
        report.trainable.insert("decoder".into(), decoder.count());
        let cell = Cell {
            report,
            encoder,
            decoder,
            optimizer_steps: steps,
        };
        self.cache.lock().expect("cell cache poisoned").insert(key, cell.clone());
        Ok(cell)
    }

    /// One method over every target speaker, `workers` speakers at a time.
    pub fn run(&self, method: &Method, minutes: f64) -> Result<MethodRow> {
        let speakers = &self.data.speakers;
        let workers = self.config.workers.max(1).min(speakers.len().max(1));
        let cells: Vec<Cell> = if workers == 1 {
            speakers.iter().map(|s| self.cell(method, minutes, s)).collect::<Result<_>>()?
        } else {
            let chunk = speakers.len().div_ceil(workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> = speakers
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || part.iter().map(|s| self.cell(method, minutes, s)).collect::<Result<Vec<_>>>())
                    })
                    .collect();
                let mut out = Vec::new();
                for h in handles {
                    out.extend(h.join().expect("experiment worker panicked")?);
                }
                Ok::<_, Error>(out)
            })?
        };
        let encoder = cells[0].encoder;
        let decoder = cells[0].decoder;
        let mut report = EvalReport::combine(cells.into_iter().map(|c| c.report));
        report.trainable.insert("encoder".into(), encoder.count());
        report.trainable.insert("decoder".into(), decoder.count());
        report.metadata.insert("method".into(), serde_json::Value::String(method.key()));
        report.metadata.insert("budget_minutes".into(), minutes.into());
        report.metadata.insert("seed".into(), self.config.plan.seed.into());
        Ok(MethodRow {
            method: method.clone(),
            encoder,
            decoder,
            report,
        })
    }

    /// Every comparison row at the configured budget.
    pub fn method_comparison(&self, methods: &[Method]) -> Result<MethodTable> {
        let rows = methods
            .iter()
            .map(|m| self.run(m, self.config.budget_minutes))
            .collect::<Result<Vec<_>>>()?;
        Ok(MethodTable {
            budget_minutes: self.config.budget_minutes,
            rows,
        })
    }

    /// `method` at each budget, next to the unadapted baseline.
    pub fn duration_sweep(&self, method: &Method, budgets: &[f64]) -> Result<SweepTable> {
        let baseline = self.run(&Method::Baseline, 0.0)?;
        let rows = budgets
            .iter()
            .map(|&b| {
                let r = self.run(method, b)?;
                Ok(SweepRow {
                    minutes: b,
                    per_speaker: r.report.speakers.iter().map(|s| s.wer).collect(),
                    mean_wer: r.report.mean_wer,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepTable {
            method: method.clone(),
            speakers: baseline.report.speakers.iter().map(|s| s.speaker_id.clone()).collect(),
            baseline: baseline.report.speakers.iter().map(|s| s.wer).collect(),
            baseline_mean: baseline.report.mean_wer,
            rows,
        })
    }

    /// Vision-level LoRA of each configuration on one speaker.
    pub fn lora_ablation(&self, speaker: &str, grid: &[LoraConfig]) -> Result<AblationTable> {
        for l in grid {
            l.validate()?;
        }
        let base = self.cell(&Method::Baseline, 0.0, speaker)?;
        let rows = grid
            .iter()
            .map(|l| {
                let cell = self.cell(&Method::Lora(l.clone()), self.config.budget_minutes, speaker)?;
                let layout = AdapterLayout::vision(Some(l.clone()), false);
                let params = count_trainable(&AdapterSet::init(&self.config.model, layout, 0)?).encoder();
                Ok(AblationRow {
                    lora: l.clone(),
                    params,
                    wer: cell.report.mean_wer,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AblationTable {
            speaker: speaker.to_string(),
            baseline_wer: base.report.mean_wer,
            rows,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub encoder: ParamCell,
    pub decoder: ParamCell,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub budget_minutes: f64,
    pub rows: Vec<MethodRow>,
}

impl MethodTable {
    pub fn row(&self, method: &Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| &r.method == method)
    }

    pub fn mean_wer(&self, method: &Method) -> Option<f64> {
        self.row(method).map(|r| r.report.mean_wer)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "Method\tEncoder params\tDecoder params\tWER(%)\n# {} min adaptation data per speaker; * = total parameters\n",
            self.budget_minutes
        );
        let mut group = "";
        for r in &self.rows {
            if r.method.group() != group {
                group = r.method.group();
                out.push_str(&format!("-- {group} --\n"));
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.1}\n",
                r.method.label(),
                r.encoder,
                r.decoder,
                r.report.mean_wer
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub minutes: f64,
    pub per_speaker: Vec<f64>,
    pub mean_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub method: Method,
    pub speakers: Vec<String>,
    pub baseline: Vec<f64>,
    pub baseline_mean: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_wer).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("Duration\t{}\tMean\n", self.speakers.join("\t"));
        let line = |label: String, xs: &[f64], m: f64| {
            let cells: Vec<String> = xs.iter().map(|x| format!("{x:.1}")).collect();
            format!("{label}\t{}\t{m:.1}\n", cells.join("\t"))
        };
        out.push_str(&line("Baseline".into(), &self.baseline, self.baseline_mean));
        for r in &self.rows {
            out.push_str(&line(format!("{} min", r.minutes), &r.per_speaker, r.mean_wer));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lora: LoraConfig,
    pub params: usize,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub speaker: String,
    pub baseline_wer: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("Weight Type\tRank r\tParams\tWER(%)\n# speaker {}\n", self.speaker);
        out.push_str(&format!("Baseline\t-\t-\t{:.1}\n", self.baseline_wer));
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{:.1}\n", targets_label(&r.lora), r.lora.rank, r.params, r.wer));
        }
        out
    }
}

/// Speakers whose WER under `adapted` is strictly below `baseline`.
pub fn improved_speakers(adapted: &EvalReport, baseline: &EvalReport) -> usize {
    adapted
        .speakers
        .iter()
        .filter(|s| baseline.speaker_wer(&s.speaker_id).is_some_and(|b| s.wer < b))
        .count()
}
