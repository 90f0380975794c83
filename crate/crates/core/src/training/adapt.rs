//! Speaker adaptation: vision level (padding prompts + encoder LoRA),
//! language level (input prompt in front of the frozen decoder), their
//! combination, and the comparators used in method comparisons.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{run_loop, CosineSchedule, LoopConfig, LrSchedule, RunLog, Sample};
use crate::adapters::{AdapterLayout, AdapterSet, LoraConfig, LoraTarget, INPUT_PROMPT};
use crate::error::{Error, Result};
use crate::model::{AlignedFeatures, LipReader, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptLevel {
    Vision,
    Language,
    Both,
}

impl AdaptLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptLevel::Vision => "vision",
            AdaptLevel::Language => "language",
            AdaptLevel::Both => "both",
        }
    }
}

impl std::fmt::Display for AdaptLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(AdaptLevel::Vision),
            "language" => Ok(AdaptLevel::Language),
            "both" => Ok(AdaptLevel::Both),
            other => Err(Error::Config(format!("unknown adaptation level {other:?}"))),
        }
    }
}

/// Everything that determines an adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub level: AdaptLevel,
    pub vision_steps: usize,
    pub language_updates: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Encoder LoRA for vision-level adaptation.
    pub lora: LoraConfig,
    pub padding_prompt: bool,
    /// Input prompt length N_p.
    pub n_prompt: usize,
    pub seed: u64,
    /// Train vision adapters and the input prompt together instead of one
    /// after the other.
    pub joint: bool,
    pub vision_schedule: CosineSchedule,
    pub language_schedule: CosineSchedule,
    /// Decoder LoRA used by the decoder-LoRA comparator.
    pub decoder_lora: LoraConfig,
}

impl Default for AdaptationPlan {
    fn default() -> Self {
        Self {
            level: AdaptLevel::Vision,
            vision_steps: 300,
            language_updates: 70,
            batch_size: 1,
            grad_accum: 8,
            lora: LoraConfig::default(),
            padding_prompt: true,
            n_prompt: 10,
            seed: 0,
            joint: false,
            vision_schedule: CosineSchedule::vision_default(),
            language_schedule: CosineSchedule::vision_default(),
            decoder_lora: LoraConfig::new(8, 16.0, [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv]),
        }
    }
}

impl AdaptationPlan {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.level, AdaptLevel::Language | AdaptLevel::Both) && self.n_prompt == 0 {
            return Err(Error::Config("language-level adaptation needs a prompt length N_p > 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if matches!(self.level, AdaptLevel::Vision | AdaptLevel::Both) {
            self.lora.validate()?;
        }
        self.vision_schedule.validate()?;
        self.language_schedule.validate()
    }

    pub fn vision_loop(&self) -> LoopConfig {
        self.loop_config(self.vision_steps, self.vision_schedule, self.seed)
    }

    pub fn language_loop(&self) -> LoopConfig {
        self.loop_config(self.language_updates, self.language_schedule, self.seed.wrapping_add(1))
    }

    fn loop_config(&self, steps: usize, schedule: CosineSchedule, seed: u64) -> LoopConfig {
        LoopConfig {
            steps,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            schedule: LrSchedule::Cosine(schedule),
            base_weight_decay: 0.01,
            adapter_weight_decay: 0.0,
            clip_norm: None,
            seed,
            start_step: 0,
        }
    }
}

/// Result of an adaptation run. `model` is only set when base weights were
/// trained (the fine-tuning comparators).
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub adapters: AdapterSet,
    pub model: Option<LipReader>,
    pub log: RunLog,
}

const ENCODER_PREFIXES: [&str; 3] = ["frontend.", "backend.", "projector."];

fn encoder_frozen(model: &LipReader, adapters: &AdapterSet, trainable: &Trainable) -> bool {
    let base = model
        .params()
        .names()
        .filter(|n| ENCODER_PREFIXES.iter().any(|p| n.starts_with(p)))
        .any(|n| trainable.base_trainable(n));
    let adapter = adapters
        .params()
        .names()
        .filter(|n| n.starts_with("prompt.conv") || n.starts_with("lora.frontend.") || n.starts_with("lora.backend."))
        .any(|n| trainable.adapter_trainable(n));
    !base && !adapter
}

/// Optimizes the parameters `trainable` selects, in place. When nothing in
/// the encoder trains, each sample's aligned features are computed on first
/// use and reused, so only the decoder runs per step.
pub fn train_adapters(
    model: &mut LipReader,
    adapters: &mut AdapterSet,
    trainable: &Trainable,
    data: &[Sample],
    cfg: &LoopConfig,
) -> Result<RunLog> {
    if data.is_empty() {
        return Err(Error::Empty("speaker adaptation data".into()));
    }
    if encoder_frozen(model, adapters, trainable) {
        let mut cached: Vec<Option<AlignedFeatures>> = vec![None; data.len()];
        run_loop(model, adapters, data.len(), cfg, |m, a, i| {
            if cached[i].is_none() {
                cached[i] = Some(m.encode(&data[i].clip, Some(a))?);
            }
            let f = cached[i].as_ref().expect("just cached");
            m.loss_and_grads_aligned(f, &data[i].target, Some(a), trainable)
        })
    } else {
        run_loop(model, adapters, data.len(), cfg, |m, a, i| {
            m.loss_and_grads(&data[i].clip, &data[i].target, Some(a), trainable)
        })
    }
}

/// Trains freshly initialized adapters of `layout` with every base weight
/// frozen, and rounds them to 32-bit precision.
fn fit_new(
    model: &LipReader,
    prior: Option<&AdapterSet>,
    layout: AdapterLayout,
    data: &[Sample],
    cfg: &LoopConfig,
    seed: u64,
    train_prior: bool,
) -> Result<AdaptOutcome> {
    let fresh = AdapterSet::init(model.config(), layout, seed)?;
    let trainable = if train_prior {
        Trainable::adapters()
    } else {
        Trainable::adapter_prefixes(fresh.params().names().map(str::to_string).collect::<Vec<_>>())
    };
    let mut adapters = match prior {
        Some(p) => {
            let mut set = p.clone();
            set.merge(&fresh)?;
            set
        }
        None => fresh,
    };
    let mut frozen = model.clone();
    let log = train_adapters(&mut frozen, &mut adapters, &trainable, data, cfg)?;
    debug_assert_eq!(frozen.params(), model.params());
    adapters.params_mut().snap_to_f32();
    Ok(AdaptOutcome {
        adapters,
        model: None,
        log,
    })
}

/// Padding prompts plus encoder LoRA; decoder, projector and every base
/// weight stay frozen.
pub fn adapt_vision(model: &LipReader, data: &[Sample], plan: &AdaptationPlan) -> Result<AdaptOutcome> {
    let lora = (!plan.lora.targets.is_empty()).then(|| plan.lora.clone());
    if lora.is_none() && !plan.padding_prompt {
        return Err(Error::Config("vision adaptation needs LoRA targets or padding prompts".into()));
    }
    if let Some(l) = &lora {
        l.validate()?;
    }
    let layout = AdapterLayout::vision(lora, plan.padding_prompt);
    fit_new(model, None, layout, data, &plan.vision_loop(), plan.seed, false)
}

/// Trains only an `N_p×D_L` input prompt on top of `prior` (kept frozen).
/// The result holds `prior`'s adapters plus the prompt.
pub fn adapt_language(
    model: &LipReader,
    prior: Option<&AdapterSet>,
    data: &[Sample],
    plan: &AdaptationPlan,
) -> Result<AdaptOutcome> {
    if plan.n_prompt == 0 {
        return Err(Error::Config("language-level adaptation needs a prompt length N_p > 0".into()));
    }
    if prior.map_or(false, |p| p.params().contains(INPUT_PROMPT)) {
        return Err(Error::Config("adapter set already carries an input prompt".into()));
    }
    let layout = AdapterLayout::language(plan.n_prompt);
    fit_new(model, prior, layout, data, &plan.language_loop(), plan.seed.wrapping_add(1), false)
}

/// Vision then language (default), or both trained together for the
/// vision step budget when `plan.joint` is set.
pub fn adapt_both(model: &LipReader, data: &[Sample], plan: &AdaptationPlan) -> Result<AdaptOutcome> {
    if plan.n_prompt == 0 {
        return Err(Error::Config("language-level adaptation needs a prompt length N_p > 0".into()));
    }
    if plan.joint {
        let mut layout = AdapterLayout::vision(Some(plan.lora.clone()), plan.padding_prompt);
        layout.n_prompt = plan.n_prompt;
        return fit_new(model, None, layout, data, &plan.vision_loop(), plan.seed, true);
    }
    let vision = adapt_vision(model, data, plan)?;
    let mut both = adapt_language(model, Some(&vision.adapters), data, plan)?;
    let mut log = vision.log;
    log.extend(both.log);
    both.log = log;
    Ok(both)
}

pub fn adapt(model: &LipReader, data: &[Sample], plan: &AdaptationPlan) -> Result<AdaptOutcome> {
    plan.validate()?;
    match plan.level {
        AdaptLevel::Vision => adapt_vision(model, data, plan),
        AdaptLevel::Language => adapt_language(model, None, data, plan),
        AdaptLevel::Both => adapt_both(model, data, plan),
    }
}

/// LoRA on the decoder's attention projections, trained for the language
/// update budget with the encoder frozen.
pub fn adapt_decoder_lora(model: &LipReader, data: &[Sample], plan: &AdaptationPlan) -> Result<AdaptOutcome> {
    plan.decoder_lora.validate()?;
    let layout = AdapterLayout {
        decoder_lora: Some(plan.decoder_lora.clone()),
        ..AdapterLayout::default()
    };
    fit_new(model, None, layout, data, &plan.language_loop(), plan.seed.wrapping_add(2), false)
}

/// Full fine-tuning of the base parameters under `prefixes` (e.g.
/// `frontend.`), with the vision step budget and schedule. Returns the
/// updated model; the adapter set is empty.
pub fn finetune(model: &LipReader, data: &[Sample], prefixes: &[&str], plan: &AdaptationPlan) -> Result<AdaptOutcome> {
    if prefixes.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one parameter prefix".into()));
    }
    let trainable = Trainable::base_prefixes(prefixes.iter().copied());
    let mut tuned = model.clone();
    let mut none = AdapterSet::empty();
    let log = train_adapters(&mut tuned, &mut none, &trainable, data, &plan.vision_loop())?;
    for (name, t) in tuned.params_mut().iter_mut() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            t.snap_to_f32();
        }
    }
    Ok(AdaptOutcome {
        adapters: none,
        model: Some(tuned),
        log,
    })
}
