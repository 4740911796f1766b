use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use vcc_core::conversion::ConversionCheckpoint;
use vcc_core::embedder::{pretrain_embedder, verify_frozen, EmbedderCheckpoint};
use vcc_core::evaluation::{evaluate_system, format_table, write_reports, EvalReport};
use vcc_core::experiment::{hash_tree, run_ablation, speaker_profiles, ExperimentConfig};
use vcc_core::features::{Corpus, FormatOptions, Split};
use vcc_core::runtime::{build_profile, convert_utterance, SpeakerProfile};
use vcc_core::synth::{generate, speaker_separation_score};
use vcc_core::training::{adapt, train_average, System};

const LOG_ENV: &str = "VCC_LOG_LEVEL";

#[derive(Parser, Debug)]
#[command(name = "vcc", version, about = "Average-model voice conversion with a speaker-embedding cycle loss")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalFlags {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// ama-r, ama-rc, ama-se-r or ama-se-rc.
    #[arg(long, global = true)]
    system: Option<System>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    include_c0: bool,
    #[arg(long, global = true)]
    dtw: bool,
    /// Validate and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct PathFlags {
    /// Corpus manifest.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Training embedder sidecar JSON.
    #[arg(long)]
    embedder: Option<PathBuf>,
    /// Conversion checkpoint sidecar JSON.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-speaker corpus.
    SynthCorpus,
    /// Pretrain the speaker embedder on a corpus.
    PretrainEmbedder {
        #[command(flatten)]
        paths: PathFlags,
    },
    /// Train an average conversion model.
    TrainAverage {
        #[command(flatten)]
        paths: PathFlags,
    },
    /// Fine-tune an average checkpoint on one target speaker.
    Adapt {
        #[command(flatten)]
        paths: PathFlags,
        #[arg(long)]
        target: String,
    },
    /// Convert one utterance toward a target speaker.
    Convert {
        #[command(flatten)]
        paths: PathFlags,
        #[arg(long)]
        utterance: String,
        /// Defaults to the checkpoint's adapted speaker.
        #[arg(long)]
        target: Option<String>,
        /// Accept an average (non-adapted) checkpoint.
        #[arg(long)]
        allow_average: bool,
    },
    /// Score adapted checkpoints on the eval split.
    Eval {
        #[command(flatten)]
        paths: PathFlags,
        /// Additional adapted checkpoints (one per target).
        #[arg(long = "also")]
        more_checkpoints: Vec<PathBuf>,
        /// Independent embedder for CCD.
        #[arg(long)]
        measurement_embedder: Option<PathBuf>,
    },
    /// Run every system end to end and emit the comparison report.
    Ablation,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthCorpus => "synth-corpus",
            Command::PretrainEmbedder { .. } => "pretrain-embedder",
            Command::TrainAverage { .. } => "train-average",
            Command::Adapt { .. } => "adapt",
            Command::Convert { .. } => "convert",
            Command::Eval { .. } => "eval",
            Command::Ablation => "ablation",
        }
    }
}

/// Problems with the invocation or config, reported with exit code 2.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn init_logging() -> Result<()> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !matches!(level.as_str(), "error" | "warn" | "info" | "debug") {
        return Err(invalid(format!("{LOG_ENV}: expected error, warn, info or debug, got {level:?}")));
    }
    let _ = env_logger::Builder::new().parse_filters(&level).try_init();
    Ok(())
}

fn load_config(global: &GlobalFlags) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| invalid(format!("--config {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.corpus.seed = seed;
    }
    if let Some(a) = global.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = global.system {
        cfg.systems = vec![s];
    }
    if global.include_c0 {
        cfg.evaluation.include_c0 = true;
    }
    if global.dtw {
        cfg.evaluation.dtw = true;
    }
    if let Some(o) = &global.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_paths(cfg: &mut ExperimentConfig, p: &PathFlags) {
    if p.corpus.is_some() {
        cfg.paths.corpus = p.corpus.clone();
    }
    if p.embedder.is_some() {
        cfg.paths.embedder = p.embedder.clone();
    }
    if p.checkpoint.is_some() {
        cfg.paths.checkpoint = p.checkpoint.clone();
    }
}

/// Resolves a required input path, naming the config field when absent.
fn require(field: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
    let p = value
        .clone()
        .ok_or_else(|| invalid(format!("{field}: required but not set")))?;
    if !p.is_file() {
        return Err(invalid(format!("{field}: file not found: {}", p.display())));
    }
    Ok(p)
}

fn optional(field: &str, value: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    match value {
        Some(_) => require(field, value).map(Some),
        None => Ok(None),
    }
}

fn single_system(cfg: &ExperimentConfig) -> Result<System> {
    match cfg.systems.as_slice() {
        [s] => Ok(*s),
        _ => Err(invalid("--system: choose exactly one system for this command")),
    }
}

/// Fresh `<out>/<command>-<timestamp>[-n]` directory; never reuses one.
fn create_run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0..1000 {
        let name = if n == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{n}")
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    bail!("could not allocate a run directory under {}", out.display())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn finish_run(run_dir: &Path) -> Result<()> {
    let files = hash_tree(run_dir)?;
    write_json(&run_dir.join("files.json"), &files)?;
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load(path, &FormatOptions::lenient()).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_embedder(path: &Path) -> Result<EmbedderCheckpoint> {
    EmbedderCheckpoint::load(path).with_context(|| format!("loading embedder {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ConversionCheckpoint> {
    ConversionCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn plan(cfg: &ExperimentConfig, command: &Command, out: &Path) -> Vec<String> {
    let mut steps = vec![format!("run directory: {}/{}-<timestamp>", out.display(), command.name())];
    let systems: Vec<&str> = cfg.systems.iter().map(|s| s.label()).collect();
    match command {
        Command::SynthCorpus => steps.push(format!(
            "generate {} speakers x {} utterances (seed {})",
            cfg.corpus.n_speakers, cfg.corpus.utterances_per_speaker, cfg.corpus.seed
        )),
        Command::PretrainEmbedder { .. } => {
            steps.push(format!("pretrain embedder for {} steps", cfg.embedder_training.steps))
        }
        Command::TrainAverage { .. } => steps.push(format!(
            "train {} average model for {} steps (alpha {})",
            systems.join(","),
            cfg.average.steps,
            cfg.alpha
        )),
        Command::Adapt { target, .. } => steps.push(format!(
            "adapt to {target} for {} steps (alpha {})",
            cfg.adaptation.steps, cfg.alpha
        )),
        Command::Convert { utterance, .. } => steps.push(format!("convert {utterance}")),
        Command::Eval { .. } => steps.push("evaluate MCD and CCD on the eval split".into()),
        Command::Ablation => {
            steps.push("generate corpus and pretrain embedders".into());
            for s in &systems {
                steps.push(format!(
                    "{s}: average {} steps, adapt {} steps per target",
                    cfg.average.steps, cfg.adaptation.steps
                ));
            }
            steps.push("write reports".into());
        }
    }
    steps
}

fn run(cli: Cli) -> Result<()> {
    init_logging()?;
    let mut cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::PretrainEmbedder { paths } | Command::TrainAverage { paths } | Command::Adapt { paths, .. } => {
            apply_paths(&mut cfg, paths)
        }
        Command::Convert { paths, .. } => apply_paths(&mut cfg, paths),
        Command::Eval {
            paths,
            measurement_embedder,
            ..
        } => {
            apply_paths(&mut cfg, paths);
            if measurement_embedder.is_some() {
                cfg.paths.measurement_embedder = measurement_embedder.clone();
            }
        }
        Command::SynthCorpus | Command::Ablation => {}
    }
    let resolved = cfg.resolved().map_err(|e| invalid(format!("config: {e}")))?;

    // Validate required inputs up front so nothing long-running starts on a
    // bad invocation.
    let corpus_path = match &cli.command {
        Command::SynthCorpus | Command::Ablation => None,
        _ => Some(require("paths.corpus", &cfg.paths.corpus)?),
    };
    let embedder_path = optional("paths.embedder", &cfg.paths.embedder)?;
    let checkpoint_path = match &cli.command {
        Command::Adapt { .. } | Command::Convert { .. } | Command::Eval { .. } => {
            Some(require("paths.checkpoint", &cfg.paths.checkpoint)?)
        }
        _ => None,
    };
    let measurement_path = optional("paths.measurement_embedder", &cfg.paths.measurement_embedder)?;
    if let Command::Eval { more_checkpoints, .. } = &cli.command {
        for p in more_checkpoints {
            require("--also", &Some(p.clone()))?;
        }
    }
    if matches!(cli.command, Command::TrainAverage { .. } | Command::Adapt { .. }) {
        let system = single_system(&resolved)?;
        if system.needs_embedder() && embedder_path.is_none() {
            return Err(invalid(format!("paths.embedder: required for {system}")));
        }
    }

    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    if cli.global.dry_run {
        println!("dry run, nothing will be written");
        for line in plan(&resolved, &cli.command, &out) {
            println!("  {line}");
        }
        return Ok(());
    }

    let run_dir = create_run_dir(&out, cli.command.name())?;
    write_json(&run_dir.join("config.json"), &resolved)?;
    write_json(
        &run_dir.join("run.json"),
        &serde_json::json!({
            "command": cli.command.name(),
            "started": chrono::Local::now().to_rfc3339(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;

    match &cli.command {
        Command::SynthCorpus => {
            let dir = run_dir.join("corpus");
            generate(&resolved.corpus, &dir)?;
            let corpus = load_corpus(&dir.join("manifest.json"))?;
            let score = speaker_separation_score(&corpus)?;
            println!("corpus: {}", dir.join("manifest.json").display());
            println!("speaker separation score: {score:.3}");
        }
        Command::PretrainEmbedder { .. } => {
            let corpus = load_corpus(corpus_path.as_deref().expect("validated"))?;
            let mut ecfg = resolved.embedder.clone();
            ecfg.input_dim = corpus.mcc_dim;
            let emb = pretrain_embedder(&corpus, &ecfg, &resolved.embedder_training)?;
            let path = emb.save(&run_dir, "embedder")?;
            if let Some(acc) = emb.meta.heldout_accuracy {
                println!("held-out speaker accuracy: {acc:.3}");
            }
            println!("embedder: {}", path.display());
        }
        Command::TrainAverage { .. } => {
            let corpus = load_corpus(corpus_path.as_deref().expect("validated"))?;
            let system = single_system(&resolved)?;
            let emb = embedder_path.as_deref().map(load_embedder).transpose()?;
            let snapshot = emb.clone();
            let mut net = resolved.network.clone();
            net.input_dim = corpus.ppg_dim;
            net.output_dim = corpus.mcc_dim;
            let tcfg = resolved.average.train_config(system, resolved.alpha, resolved.seed);
            let (model, log) = train_average(&corpus, &net, &tcfg, emb.as_ref())?;
            check_frozen(snapshot.as_ref(), emb.as_ref())?;
            log.write_jsonl(run_dir.join("train_log.jsonl"))?;
            let path = model.save(&run_dir, "average")?;
            println!("checkpoint: {} ({})", path.display(), model.parameter_hash());
        }
        Command::Adapt { target, .. } => {
            let corpus = load_corpus(corpus_path.as_deref().expect("validated"))?;
            if !corpus.manifest.speakers.contains(target) {
                return Err(invalid(format!("--target: speaker {target:?} is not in the corpus")));
            }
            let system = single_system(&resolved)?;
            let average = load_checkpoint(checkpoint_path.as_deref().expect("validated"))?;
            let emb = embedder_path.as_deref().map(load_embedder).transpose()?;
            let snapshot = emb.clone();
            let slice = corpus.speaker_split(target, Split::Adapt);
            let tcfg = resolved
                .adaptation
                .train_config(system, resolved.alpha, resolved.seed.wrapping_add(1));
            let (model, log) = adapt(&average, &slice, &tcfg, emb.as_ref())?;
            check_frozen(snapshot.as_ref(), emb.as_ref())?;
            log.write_jsonl(run_dir.join("adapt_log.jsonl"))?;
            let path = model.save(&run_dir, &format!("adapted_{target}"))?;
            let profile = build_profile(&slice, emb.as_ref(), emb.is_some())?;
            profile.save(run_dir.join(format!("profile_{target}.json")))?;
            println!("checkpoint: {} ({})", path.display(), model.parameter_hash());
        }
        Command::Convert {
            utterance,
            target,
            allow_average,
            ..
        } => {
            let corpus = load_corpus(corpus_path.as_deref().expect("validated"))?;
            let model = load_checkpoint(checkpoint_path.as_deref().expect("validated"))?;
            let target = target
                .clone()
                .or_else(|| model.meta.target_speaker.clone())
                .ok_or_else(|| invalid("--target: required for a checkpoint without an adapted speaker"))?;
            let utt = corpus
                .get(utterance)
                .ok_or_else(|| invalid(format!("--utterance: {utterance:?} is not in the corpus")))?;
            let emb = embedder_path.as_deref().map(load_embedder).transpose()?;
            let profiles = profiles_for(&corpus, emb.as_ref())?;
            let src = lookup(&profiles, &utt.record.speaker)?;
            let tgt = lookup(&profiles, &target)?;
            let out = convert_utterance(&utt.ppg, &utt.lf0, src, tgt, &model, *allow_average)?;
            let (mcc, lf0) = out.write(run_dir.join("converted"))?;
            println!("converted: {} {}", mcc.display(), lf0.display());
        }
        Command::Eval { more_checkpoints, .. } => {
            let corpus = load_corpus(corpus_path.as_deref().expect("validated"))?;
            let emb = embedder_path.as_deref().map(load_embedder).transpose()?;
            let measurement = match (&measurement_path, &emb) {
                (Some(p), _) => load_embedder(p)?,
                (None, Some(e)) => e.clone(),
                (None, None) => return Err(invalid("paths.embedder: required to measure CCD")),
            };
            let profiles = profiles_for(&corpus, emb.as_ref())?;
            let mut parts = Vec::new();
            let mut label = None;
            let all = std::iter::once(checkpoint_path.clone().expect("validated")).chain(more_checkpoints.iter().cloned());
            for p in all {
                let model = load_checkpoint(&p)?;
                let target = model
                    .meta
                    .target_speaker
                    .clone()
                    .ok_or_else(|| invalid(format!("{}: not an adapted checkpoint", p.display())))?;
                let system = model.meta.system.clone().unwrap_or_else(|| "unknown".into());
                let system = system.parse::<System>().map(|s| s.label().to_string()).unwrap_or(system);
                label.get_or_insert(system.clone());
                parts.push(evaluate_system(
                    &corpus,
                    &model,
                    &measurement,
                    &profiles,
                    &target,
                    &system,
                    resolved.evaluation.mcd(),
                    false,
                )?);
            }
            let report = EvalReport::merge(label.unwrap_or_default(), parts);
            write_reports(std::slice::from_ref(&report), run_dir.join("reports"))?;
            print!("{}", format_table(std::slice::from_ref(&report)));
        }
        Command::Ablation => {
            let outcome = run_ablation(&resolved, &run_dir)?;
            let broken: Vec<&str> = outcome
                .summary
                .freeze_checks
                .iter()
                .filter(|c| !c.intact)
                .map(|c| c.run.as_str())
                .collect();
            if !broken.is_empty() {
                bail!("embedder parameters changed during {}", broken.join(", "));
            }
            print!("{}", format_table(&outcome.summary.reports));
        }
    }
    finish_run(&run_dir)
}

fn profiles_for(corpus: &Corpus, emb: Option<&EmbedderCheckpoint>) -> Result<BTreeMap<String, SpeakerProfile>> {
    match emb {
        Some(e) => Ok(speaker_profiles(corpus, e)?),
        None => {
            let mut out = BTreeMap::new();
            for spk in &corpus.manifest.speakers {
                let mut slice = corpus.speaker_split(spk, Split::Train);
                if slice.utterances.is_empty() {
                    slice = corpus.speaker_split(spk, Split::Adapt);
                }
                out.insert(spk.clone(), build_profile(&slice, None, false)?);
            }
            Ok(out)
        }
    }
}

fn lookup<'a>(profiles: &'a BTreeMap<String, SpeakerProfile>, speaker: &str) -> Result<&'a SpeakerProfile> {
    profiles
        .get(speaker)
        .ok_or_else(|| invalid(format!("speaker {speaker:?} is not in the corpus")))
}

fn check_frozen(before: Option<&EmbedderCheckpoint>, after: Option<&EmbedderCheckpoint>) -> Result<()> {
    if let (Some(b), Some(a)) = (before, after) {
        if !verify_frozen(b, a) {
            return Err(anyhow!("embedder parameters changed during training"));
        }
        info!("embedder archive unchanged ({})", a.parameter_hash());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Invalid>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
