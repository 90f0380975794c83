//! Resolved run configuration: built-in defaults, overlaid by an optional
//! JSON config file, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use lipadapt::datasetkit::{synthetic::ScenarioConfig, DatasetConfig};
use lipadapt::eval::{ExperimentConfig, SWEEP_BUDGETS};
use lipadapt::training::AdaptationPlan;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const OUT_ENV: &str = "LIPADAPT_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const RESOLVED_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    /// Master seed. When set, every module seed is derived from it.
    pub seed: Option<u64>,
    pub workers: usize,
    /// Output directory of this run.
    pub out: PathBuf,
    /// Corpus, model, baseline training and the table presets.
    pub experiment: ExperimentConfig,
    /// Plan used by `adapt`.
    pub plan: AdaptationPlan,
    pub dataset: DatasetConfig,
    pub scenario: ScenarioConfig,
    pub sweep_budgets: Vec<f64>,
    pub ablation_speaker: String,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            workers: 1,
            out: PathBuf::new(),
            experiment: ExperimentConfig::desk(),
            plan: AdaptationPlan::default(),
            dataset: DatasetConfig::default(),
            scenario: ScenarioConfig::default(),
            sweep_budgets: SWEEP_BUDGETS.to_vec(),
            ablation_speaker: "S1".into(),
        }
    }

    /// Defaults overlaid with `file` (a partial JSON object; nested objects
    /// merge key by key).
    pub fn load(command: &str, file: Option<&Path>) -> Result<Self, CliError> {
        let mut base = serde_json::to_value(Self::defaults(command)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
            merge(&mut base, overlay);
        }
        let mut cfg: Self = serde_json::from_value(base)
            .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.command = command.to_string();
        Ok(cfg)
    }

    /// Applies the master seed and worker count to every module.
    pub fn propagate(&mut self) {
        if let Some(s) = self.seed {
            self.experiment.corpus.seed = s;
            self.experiment.model_seed = s;
            self.experiment.baseline.seed = s;
            self.experiment.plan.seed = s;
            self.plan.seed = s;
            self.scenario.seed = s;
        }
        self.workers = self.workers.max(1);
        self.experiment.workers = self.workers;
        self.dataset.workers = self.workers;
    }

    pub fn persist(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_FILE);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Output root: `LIPADAPT_OUT`, else `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
