//! Optimization: learning-rate schedules, AdamW, the accumulation loop,
//! speaker-independent baseline training and the adaptation procedures.

mod adapt;
mod schedule;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::model::{LipReader, ParamGrads, TokenSequence, Trainable, VideoClip, Vocab};
use crate::speakersim::{Corpus, Utterance};
use crate::tensor::Tensor;

pub use adapt::{
    adapt, adapt_both, adapt_decoder_lora, adapt_language, adapt_vision, finetune, train_adapters, AdaptLevel,
    AdaptOutcome, AdaptationPlan,
};
pub use schedule::{CosineSchedule, LrSchedule, TriStageSchedule};

/// One supervised example: a clip and its word tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: VideoClip,
    pub target: TokenSequence,
}

/// Renders `utterances` and tokenizes their transcripts.
pub fn load_samples<'a>(
    corpus: &Corpus,
    utterances: impl IntoIterator<Item = &'a Utterance>,
    vocab: &Vocab,
) -> Result<Vec<Sample>> {
    utterances
        .into_iter()
        .map(|u| {
            Ok(Sample {
                id: u.id.clone(),
                clip: corpus.render(u)?,
                target: vocab.encode(&u.words)?,
            })
        })
        .collect()
}

/// Decoupled-weight-decay Adam. State is keyed by parameter name, so base
/// and adapter parameters can share one optimizer.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamW {
    /// Advances the shared step counter; call once per optimizer step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn update(&mut self, key: &str, param: &mut Tensor, grad: &Tensor, lr: f64, weight_decay: f64) {
        debug_assert_eq!(param.shape(), grad.shape(), "{key}");
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let p = param.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * p[i]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub optimizer_steps: usize,
    /// Micro-batches left over after the last full accumulation window and
    /// therefore not used.
    pub dropped_micro_batches: usize,
}

impl RunLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn extend(&mut self, other: RunLog) {
        let offset = self.optimizer_steps;
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.step += offset;
            r
        }));
        self.optimizer_steps += other.optimizer_steps;
        self.dropped_micro_batches += other.dropped_micro_batches;
    }

    /// Mean loss over records with `from <= step < to`.
    pub fn mean_loss(&self, from: usize, to: usize) -> Option<f64> {
        let xs: Vec<f64> = self.records.iter().filter(|r| r.step >= from && r.step < to).map(|r| r.loss).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Optimizer steps affordable from `samples` examples, one pass each, and
/// the micro-batches that do not fill a final window.
pub fn plan_windows(samples: usize, batch_size: usize, grad_accum: usize) -> (usize, usize) {
    let micro = samples / batch_size.max(1);
    let per_step = grad_accum.max(1);
    (micro / per_step, micro % per_step + samples % batch_size.max(1))
}

/// Epoch-wise shuffled data order that depends only on `(seed, position)`.
#[derive(Clone, Debug)]
pub(crate) struct DataOrder {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl DataOrder {
    pub(crate) fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            perm: Vec::new(),
        }
    }

    pub(crate) fn index(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        if self.epoch != Some(epoch) {
            let mut rng = crate::stream_rng(self.seed, epoch as u64);
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[position % self.n]
    }
}

/// Settings of one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub schedule: LrSchedule,
    /// Decoupled weight decay on trainable base parameters.
    pub base_weight_decay: f64,
    /// Decoupled weight decay on adapter parameters.
    pub adapter_weight_decay: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Schedule and data position to resume from.
    pub start_step: usize,
}

impl LoopConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Runs `cfg.steps` optimizer steps. `sample` returns the loss and gradients
/// of data item `index`; a step averages `batch_size · grad_accum` of them
/// (the mean over accumulation windows of per-batch means).
pub(crate) fn run_loop<F>(
    model: &mut LipReader,
    adapters: &mut AdapterSet,
    n_data: usize,
    cfg: &LoopConfig,
    mut sample: F,
) -> Result<RunLog>
where
    F: FnMut(&LipReader, &AdapterSet, usize) -> Result<(f64, ParamGrads)>,
{
    cfg.validate()?;
    if n_data == 0 {
        return Err(Error::Empty("training data".into()));
    }
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut order = DataOrder::new(cfg.seed, n_data);
    let mut opt = AdamW::default();
    let mut log = RunLog::default();
    let start = Instant::now();
    for s in 0..cfg.steps {
        let step = cfg.start_step + s;
        let lr = cfg.schedule.lr_at(step);
        let mut loss = 0.0;
        let mut base: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut adapter: BTreeMap<String, Tensor> = BTreeMap::new();
        for k in 0..per_step {
            let idx = order.index(step * per_step + k);
            let (l, g) = sample(model, adapters, idx)?;
            if !l.is_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
            loss += l;
            accumulate(&mut base, g.base);
            accumulate(&mut adapter, g.adapter);
        }
        let inv = 1.0 / per_step as f64;
        loss *= inv;
        let mut norm2 = 0.0;
        for g in base.values_mut().chain(adapter.values_mut()) {
            for v in g.data_mut() {
                *v *= inv;
                norm2 += *v * *v;
            }
        }
        if !norm2.is_finite() {
            return Err(Error::Divergence { step, loss: norm2 });
        }
        if let Some(max) = cfg.clip_norm {
            let norm = norm2.sqrt();
            if norm > max {
                let f = max / norm;
                for g in base.values_mut().chain(adapter.values_mut()) {
                    for v in g.data_mut() {
                        *v *= f;
                    }
                }
            }
        }
        opt.begin_step();
        for (name, g) in &base {
            let p = model.params_mut().get_mut(name).expect("gradient for known parameter");
            opt.update(&format!("base:{name}"), p, g, lr, cfg.base_weight_decay);
        }
        for (name, g) in &adapter {
            let p = adapters.params_mut().get_mut(name).expect("gradient for known adapter");
            opt.update(&format!("adapter:{name}"), p, g, lr, cfg.adapter_weight_decay);
        }
        log.records.push(StepRecord {
            step,
            lr,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log.optimizer_steps += 1;
    }
    Ok(log)
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Speaker-independent training of every base parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub start_step: usize,
}

impl BaselineConfig {
    /// Tri-stage schedule peaking at 1e-3, with warmup and decay phases in
    /// the same 1:2 proportion as the reference recipe (10K/20K).
    pub fn desk(steps: usize) -> Self {
        let warmup = steps / 10;
        let decay = steps / 5;
        Self {
            steps,
            batch_size: 1,
            grad_accum: 4,
            schedule: LrSchedule::TriStage(TriStageSchedule {
                peak_lr: 1e-3,
                warmup_steps: warmup,
                decay_steps: (2 * warmup).max(decay).min(steps - warmup),
                total_steps: steps,
                floor: 0.01,
            }),
            weight_decay: 0.01,
            clip_norm: Some(5.0),
            seed: 0,
            start_step: 0,
        }
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            schedule: self.schedule,
            base_weight_decay: self.weight_decay,
            adapter_weight_decay: 0.0,
            clip_norm: self.clip_norm,
            seed: self.seed,
            start_step: self.start_step,
        }
    }
}

/// Trains all base parameters of `model` in place with teacher-forced
/// cross-entropy, then rounds them to 32-bit precision so a saved checkpoint
/// reloads bit-exactly. Aborts with [`Error::Divergence`] on a non-finite
/// loss.
pub fn train_baseline(model: &mut LipReader, data: &[Sample], cfg: &BaselineConfig) -> Result<RunLog> {
    let trainable = Trainable::all_base();
    let mut none = AdapterSet::empty();
    let log = run_loop(model, &mut none, data.len(), &cfg.loop_config(), |m, _, i| {
        m.loss_and_grads(&data[i].clip, &data[i].target, None, &trainable)
    })?;
    model.params_mut().snap_to_f32();
    Ok(log)
}
