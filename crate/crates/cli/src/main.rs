//! `lipadapt`: corpus generation, the dataset pipeline, baseline training,
//! speaker adaptation, evaluation and the experiment tables.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lipadapt::adapters::{count_trainable, parse_targets};
use lipadapt::checkpoint;
use lipadapt::datasetkit::{build_dataset, stats_report, synthetic::Scenario};
use lipadapt::eval::{ablation_grid, evaluate, evaluate_manifest, EvalReport, Experiment, ExperimentData, Method};
use lipadapt::model::{LipReader, Vocab};
use lipadapt::speakersim::{build_corpus, read_manifest, write_manifest};
use lipadapt::training::{adapt, train_baseline, AdaptLevel};
use serde::Serialize;

use config::{out_root, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] lipadapt::Error),
    #[error("{0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lipadapt", version, about = "Speaker-adaptive lip reading on synthetic speakers")]
struct Cli {
    /// Master seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON file overriding built-in defaults (flags override it in turn).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory of this run. Defaults to `$LIPADAPT_OUT/<command>`
    /// (or `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus to LVB1 clips plus a JSON-lines manifest.
    GenCorpus,
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the speaker-independent baseline and save a checkpoint.
    TrainBaseline {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adapt the baseline to one speaker and save the adapters.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint (optionally with adapters) on test clips.
    Eval(EvalArgs),
    /// Every adaptation method on every target speaker.
    Compare(TableArgs),
    /// Adaptation with growing amounts of speaker data.
    Sweep {
        #[command(flatten)]
        table: TableArgs,
        /// Comma-separated budgets in minutes.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
    },
    /// LoRA weight-type and rank grid on one speaker.
    Ablate {
        #[command(flatten)]
        table: TableArgs,
        #[arg(long)]
        speaker: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Cluster identities, pseudo-label and pack splits on a synthetic
    /// two-corpus scenario.
    Build,
    /// Statistics of an existing manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Vision,
    Language,
    Both,
}

impl From<Level> for AdaptLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Vision => AdaptLevel::Vision,
            Level::Language => AdaptLevel::Language,
            Level::Both => AdaptLevel::Both,
        }
    }
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    level: Level,
    #[arg(long, default_value = "S1")]
    speaker: String,
    #[arg(long, default_value_t = 45.0)]
    minutes: f64,
    /// LoRA targets, e.g. `wc,wq,wk,wv`.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Input prompt length.
    #[arg(long = "np")]
    n_prompt: Option<usize>,
    /// Vision-level optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Language-level optimizer updates.
    #[arg(long)]
    updates: Option<usize>,
    /// Multiplies both learning-rate schedules.
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    no_padding_prompt: bool,
    /// Baseline checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Evaluate the clips of this manifest instead of the generated test splits.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated target speakers (default: all).
    #[arg(long, value_delimiter = ',')]
    speakers: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct TableArgs {
    /// Baseline checkpoint; trained (and saved under the run directory)
    /// when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenCorpus => "gen-corpus",
        Command::Dataset(DatasetCommand::Build) => "dataset-build",
        Command::Dataset(DatasetCommand::Stats { .. }) => "dataset-stats",
        Command::TrainBaseline { .. } => "train-baseline",
        Command::Adapt(_) => "adapt",
        Command::Eval(_) => "eval",
        Command::Compare(_) => "compare",
        Command::Sweep { .. } => "sweep",
        Command::Ablate { .. } => "ablate",
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = command_name(&cli.command);
    let mut cfg = RunConfig::load(name, cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let root = out_root();
    cfg.out = cli.out.clone().unwrap_or_else(|| root.join(name));
    apply_flags(&mut cfg, &cli.command)?;
    cfg.propagate();
    validate(&cfg)?;
    cfg.persist()?;
    let default_ckpt = root.join("train-baseline");
    match &cli.command {
        Command::GenCorpus => gen_corpus(&cfg),
        Command::Dataset(DatasetCommand::Build) => dataset_build(&cfg),
        Command::Dataset(DatasetCommand::Stats { manifest }) => dataset_stats(&cfg, manifest),
        Command::TrainBaseline { .. } => train(&cfg),
        Command::Adapt(a) => run_adapt(&cfg, a, a.checkpoint.as_deref().unwrap_or(&default_ckpt)),
        Command::Eval(a) => run_eval(&cfg, a, a.checkpoint.as_deref().unwrap_or(&default_ckpt)),
        Command::Compare(t) => {
            let exp = experiment(&cfg, t.checkpoint.as_deref())?;
            let table = exp.method_comparison(&Method::comparison())?;
            emit_table(&cfg, &table.to_text(), &table)
        }
        Command::Sweep { table, .. } => {
            let exp = experiment(&cfg, table.checkpoint.as_deref())?;
            let t = exp.duration_sweep(&Method::OursBoth, &cfg.sweep_budgets)?;
            emit_table(&cfg, &t.to_text(), &t)
        }
        Command::Ablate { table, .. } => {
            let exp = experiment(&cfg, table.checkpoint.as_deref())?;
            let t = exp.lora_ablation(&cfg.ablation_speaker, &ablation_grid())?;
            emit_table(&cfg, &t.to_text(), &t)
        }
    }
}

fn apply_flags(cfg: &mut RunConfig, command: &Command) -> Result<(), CliError> {
    match command {
        Command::TrainBaseline { steps: Some(s) } => {
            cfg.experiment.baseline = lipadapt::training::BaselineConfig {
                steps: *s,
                ..cfg.experiment.baseline.clone()
            };
        }
        Command::Adapt(a) => {
            let p = &mut cfg.plan;
            p.level = a.level.into();
            if let Some(t) = &a.targets {
                p.lora.targets = parse_targets(t).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            if let Some(r) = a.rank {
                p.lora.rank = r;
            }
            if let Some(al) = a.alpha {
                p.lora.alpha = al;
            }
            if let Some(n) = a.n_prompt {
                p.n_prompt = n;
            }
            if let Some(s) = a.steps {
                p.vision_steps = s;
            }
            if let Some(u) = a.updates {
                p.language_updates = u;
            }
            if let Some(f) = a.lr_scale {
                if !(f > 0.0) {
                    return Err(CliError::Usage("--lr-scale must be positive".into()));
                }
                p.vision_schedule = p.vision_schedule.scaled(f);
                p.language_schedule = p.language_schedule.scaled(f);
            }
            if a.no_padding_prompt {
                p.padding_prompt = false;
            }
            if !(a.minutes > 0.0) {
                return Err(CliError::Usage("--minutes must be positive".into()));
            }
        }
        Command::Sweep { budgets: Some(b), .. } => cfg.sweep_budgets = b.clone(),
        Command::Ablate { speaker: Some(s), .. } => cfg.ablation_speaker = s.clone(),
        _ => {}
    }
    Ok(())
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let usage = |e: lipadapt::Error| CliError::Usage(e.to_string());
    cfg.experiment.validate().map_err(usage)?;
    if cfg.command == "adapt" {
        cfg.plan.validate().map_err(usage)?;
    }
    if cfg.command.starts_with("dataset") {
        cfg.dataset.budgets.validate().map_err(usage)?;
    }
    if cfg.sweep_budgets.is_empty() || cfg.sweep_budgets.iter().any(|&b| !(b > 0.0)) {
        return Err(CliError::Usage("sweep budgets must be positive".into()));
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(lipadapt::Error::from)?;
    write(path, text + "\n")
}

fn gen_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let (_, rows) = build_corpus(&cfg.experiment.corpus, &cfg.out, cfg.workers)?;
    println!("{} clips written to {}", rows.len(), cfg.out.display());
    Ok(())
}

fn dataset_build(cfg: &RunConfig) -> Result<(), CliError> {
    let sc = Scenario::generate(&cfg.scenario)?;
    let build = build_dataset(&sc.primary, &sc.secondary, &sc.faces, &sc.transcriber, &cfg.dataset)?;
    write_manifest(&cfg.out.join("manifest.jsonl"), &build.rows)?;
    write_json(&cfg.out.join("identities.json"), &build.identities)?;
    write_json(&cfg.out.join("matches.json"), &build.matches)?;
    write_json(&cfg.out.join("excluded.json"), &build.excluded)?;
    write(&cfg.out.join("stats.json"), build.stats.to_json()? + "\n")?;
    write(&cfg.out.join("stats.tsv"), build.stats.to_tsv())?;
    println!(
        "{} rows, {} cross-corpus matches, {} speakers excluded",
        build.rows.len(),
        build.matches.len(),
        build.excluded.len()
    );
    Ok(())
}

fn dataset_stats(cfg: &RunConfig, manifest: &Path) -> Result<(), CliError> {
    let rows = read_manifest(manifest)?;
    let report = stats_report(&rows);
    write(&cfg.out.join("stats.json"), report.to_json()? + "\n")?;
    let tsv = report.to_tsv();
    write(&cfg.out.join("stats.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let e = &cfg.experiment;
    let data = ExperimentData::generate(&e.corpus)?;
    let mut model = LipReader::new(e.model.clone(), e.model_seed)?;
    let log = train_baseline(&mut model, &data.baseline_samples()?, &e.baseline)?;
    checkpoint::save_model(&cfg.out, &model)?;
    log.write_jsonl(&cfg.out.join("train_log.jsonl"))?;
    println!("baseline {} saved to {}", model.base_hash(), cfg.out.display());
    Ok(())
}

fn load_baseline(cfg: &RunConfig, dir: &Path) -> Result<LipReader, CliError> {
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(CliError::Failed(format!(
            "no baseline checkpoint at {} (run train-baseline or pass --checkpoint)",
            dir.display()
        )));
    }
    let model = checkpoint::load_model(dir)?;
    if model.config() != &cfg.experiment.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with a different model configuration",
            dir.display()
        )));
    }
    Ok(model)
}

#[derive(Serialize)]
struct AdaptSummary<'a> {
    speaker: &'a str,
    level: AdaptLevel,
    minutes: f64,
    utterances: usize,
    trainable: lipadapt::adapters::TrainableCounts,
    base_hash_before: String,
    base_hash_after: String,
    baseline: EvalReport,
    adapted: EvalReport,
}

fn run_adapt(cfg: &RunConfig, a: &AdaptArgs, ckpt: &Path) -> Result<(), CliError> {
    let model = load_baseline(cfg, ckpt)?;
    let data = ExperimentData::generate(&cfg.experiment.corpus)?;
    let train = data.adaptation_samples(&a.speaker, a.minutes)?;
    let test = data.test_samples(&a.speaker)?;
    let before = model.base_hash();
    let out = adapt(&model, &train, &cfg.plan)?;
    let after = model.base_hash();
    checkpoint::save_adapters(&cfg.out, &out.adapters, &model)?;
    out.log.write_jsonl(&cfg.out.join("adapt_log.jsonl"))?;
    let summary = AdaptSummary {
        speaker: &a.speaker,
        level: cfg.plan.level,
        minutes: a.minutes,
        utterances: train.len(),
        trainable: count_trainable(&out.adapters),
        base_hash_before: before,
        base_hash_after: after,
        baseline: evaluate(&model, None, &data.vocab, &a.speaker, test)?,
        adapted: evaluate(&model, Some(&out.adapters), &data.vocab, &a.speaker, test)?,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "{} {}: WER {:.1} -> {:.1}, {} trainable parameters, base unchanged: {}",
        a.speaker,
        cfg.plan.level,
        summary.baseline.mean_wer,
        summary.adapted.mean_wer,
        summary.trainable.total(),
        summary.base_hash_before == summary.base_hash_after
    );
    Ok(())
}

fn run_eval(cfg: &RunConfig, a: &EvalArgs, ckpt: &Path) -> Result<(), CliError> {
    let model = load_baseline(cfg, ckpt)?;
    let adapters = match &a.adapters {
        Some(dir) => Some(checkpoint::load_adapters(dir, model.config())?),
        None => None,
    };
    let report = match &a.manifest {
        Some(path) => {
            let vocab = Vocab::new(cfg.experiment.corpus.vocab.clone());
            let mut rows = read_manifest(path)?;
            rows.retain(|r| r.split == "test" && a.speakers.as_ref().map_or(true, |s| s.contains(&r.speaker_id)));
            let dir = path.parent().unwrap_or(Path::new("."));
            evaluate_manifest(&model, adapters.as_ref(), &vocab, &rows, dir, cfg.experiment.corpus.render.frame_rate)?
        }
        None => {
            let data = ExperimentData::generate(&cfg.experiment.corpus)?;
            let speakers = a.speakers.clone().unwrap_or_else(|| data.speakers.clone());
            let reports = speakers
                .iter()
                .map(|s| evaluate(&model, adapters.as_ref(), &data.vocab, s, data.test_samples(s)?))
                .collect::<lipadapt::Result<Vec<_>>>()?;
            EvalReport::combine(reports)
        }
    };
    write(&cfg.out.join("report.json"), report.to_json()? + "\n")?;
    let tsv = report.to_tsv();
    write(&cfg.out.join("report.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn experiment(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<Experiment, CliError> {
    match ckpt {
        Some(dir) => Ok(Experiment::with_model(cfg.experiment.clone(), load_baseline(cfg, dir)?)?),
        None => {
            let exp = Experiment::prepare(cfg.experiment.clone())?;
            let dir = cfg.out.join("baseline");
            checkpoint::save_model(&dir, &exp.model)?;
            if let Some(log) = &exp.baseline_log {
                log.write_jsonl(&dir.join("train_log.jsonl"))?;
            }
            Ok(exp)
        }
    }
}

fn emit_table(cfg: &RunConfig, text: &str, value: &impl Serialize) -> Result<(), CliError> {
    write(&cfg.out.join("table.txt"), text)?;
    write_json(&cfg.out.join("table.json"), value)?;
    print!("{text}");
    Ok(())
}
