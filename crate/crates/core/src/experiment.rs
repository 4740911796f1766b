//! End-to-end ablation: synthesize a corpus, pretrain embedders, train and
//! adapt every system, then score all of them on the parallel eval split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conversion::{init_model, ConversionCheckpoint, ConversionConfig};
use crate::embedder::{pretrain_embedder, verify_frozen, EmbedderCheckpoint, EmbedderConfig, EmbedderTrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_system, write_reports, EvalReport, McdOptions};
use crate::features::{Corpus, FormatOptions, Split};
use crate::losses::DEFAULT_ALPHA;
use crate::nn::NormStats;
use crate::runtime::{build_profile, SpeakerProfile};
use crate::synth::{generate, speaker_separation_score, SynthesisConfig};
use crate::training::{adapt, model_config_for, train_average, System, TrainConfig, TrainLog};

/// Optimizer settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl PhaseConfig {
    pub fn train_config(&self, system: System, alpha: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            system,
            alpha,
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EvaluationConfig {
    pub include_c0: bool,
    pub dtw: bool,
    /// Measure CCD with a separately pretrained embedder rather than the one
    /// used as the training loss network.
    pub independent_embedder: bool,
}

impl EvaluationConfig {
    pub fn mcd(&self) -> McdOptions {
        McdOptions {
            include_c0: self.include_c0,
            dtw: self.dtw,
        }
    }
}

/// Existing artifacts consumed by the single-step commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    /// Corpus manifest.
    pub corpus: Option<PathBuf>,
    /// Sidecar JSON of the training (loss network) embedder.
    pub embedder: Option<PathBuf>,
    /// Sidecar JSON of an independently trained embedder used only for CCD.
    pub measurement_embedder: Option<PathBuf>,
    /// Sidecar JSON of a conversion checkpoint.
    pub checkpoint: Option<PathBuf>,
}

/// Everything an ablation run needs. Feature dimensions of the embedder and
/// the conversion network are taken from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: SynthesisConfig,
    pub embedder: EmbedderConfig,
    pub embedder_training: EmbedderTrainConfig,
    pub network: ConversionConfig,
    pub average: PhaseConfig,
    pub adaptation: PhaseConfig,
    pub alpha: f64,
    pub systems: Vec<System>,
    /// Target speakers to adapt to; empty means every target in the corpus.
    pub targets: Vec<String>,
    pub evaluation: EvaluationConfig,
    pub paths: InputPaths,
    /// Parent directory of run directories.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = SynthesisConfig {
            n_targets: 1,
            ..SynthesisConfig::default()
        };
        Self {
            seed: 0,
            embedder: EmbedderConfig {
                input_dim: corpus.mcc_dim,
                channels: 32,
                embedding_dim: 16,
                n_res_blocks: 4,
                ..EmbedderConfig::default()
            },
            embedder_training: EmbedderTrainConfig::default(),
            network: ConversionConfig {
                input_dim: corpus.ppg_dim,
                output_dim: corpus.mcc_dim,
                hidden: 32,
                n_recurrent_layers: 2,
                ..ConversionConfig::default()
            },
            average: PhaseConfig {
                steps: 1000,
                learning_rate: 0.01,
                ..PhaseConfig::default()
            },
            adaptation: PhaseConfig {
                steps: 200,
                learning_rate: 0.005,
                ..PhaseConfig::default()
            },
            alpha: DEFAULT_ALPHA,
            systems: System::ALL.to_vec(),
            targets: Vec::new(),
            evaluation: EvaluationConfig::default(),
            paths: InputPaths::default(),
            out_dir: None,
            corpus,
        }
    }
}

/// Recursively overwrites `base` with the keys present in `overlay`.
fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Parses a JSON config whose keys override the defaults, including keys
    /// inside nested sections. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::Parse("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default()).map_err(|e| Error::Parse(e.to_string()))?;
        overlay(&mut merged, doc);
        serde_json::from_value(merged).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Copies corpus dimensions into the model configs and checks the result.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.corpus.validate()?;
        cfg.embedder.input_dim = cfg.corpus.mcc_dim;
        cfg.network.input_dim = cfg.corpus.ppg_dim;
        cfg.network.output_dim = cfg.corpus.mcc_dim;
        cfg.embedder_training.seed = cfg.seed;
        cfg.embedder.validate()?;
        if !cfg.alpha.is_finite() || cfg.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be finite and non-negative".into()));
        }
        if cfg.systems.is_empty() {
            return Err(Error::InvalidConfig("systems must not be empty".into()));
        }
        let known = cfg.corpus.speaker_ids();
        for t in &cfg.targets {
            let idx = known.iter().position(|s| s == t).ok_or_else(|| {
                Error::InvalidConfig(format!("targets: unknown speaker {t:?}"))
            })?;
            if !cfg.corpus.is_target(idx) {
                return Err(Error::InvalidConfig(format!("targets: {t:?} has no adapt split")));
            }
        }
        if cfg.targets.is_empty() {
            cfg.targets = known
                .iter()
                .enumerate()
                .filter(|(i, _)| cfg.corpus.is_target(*i))
                .map(|(_, s)| s.clone())
                .collect();
        }
        for phase in [&cfg.average, &cfg.adaptation] {
            phase.train_config(System::AmaR, cfg.alpha, 0).validate()?;
        }
        Ok(cfg)
    }

    /// Seed of the measurement embedder, distinct from the training one.
    pub fn measurement_seed(&self) -> u64 {
        self.seed.wrapping_add(0x9e37_79b9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub run: String,
    pub intact: bool,
}

/// Deterministic outputs of an ablation run (no timings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub corpus_fingerprint: String,
    pub separation_score: f64,
    pub training_embedder_hash: String,
    pub measurement_embedder_hash: String,
    pub training_embedder_heldout_accuracy: Option<f64>,
    pub measurement_embedder_heldout_accuracy: Option<f64>,
    pub untrained: EvalReport,
    pub reports: Vec<EvalReport>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub freeze_checks: Vec<FreezeCheck>,
}

impl AblationSummary {
    pub fn report(&self, system: System) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.system == system.label())
    }
}

pub struct AblationOutcome {
    pub summary: AblationSummary,
    pub logs: BTreeMap<String, TrainLog>,
    pub models: BTreeMap<String, ConversionCheckpoint>,
    pub profiles: BTreeMap<String, SpeakerProfile>,
    pub corpus: Corpus,
    pub embedder: EmbedderCheckpoint,
    pub measurement: EmbedderCheckpoint,
}

/// SHA-256 of every regular file under `root`, keyed by relative path.
pub fn hash_tree(root: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let root = root.as_ref();
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Profiles for every speaker: sources from their train split, targets from
/// their adapt split. Reference embeddings come from `embedder`.
pub fn speaker_profiles(corpus: &Corpus, embedder: &EmbedderCheckpoint) -> Result<BTreeMap<String, SpeakerProfile>> {
    let mut out = BTreeMap::new();
    for spk in &corpus.manifest.speakers {
        let mut slice = corpus.speaker_split(spk, Split::Train);
        if slice.utterances.is_empty() {
            slice = corpus.speaker_split(spk, Split::Adapt);
        }
        out.insert(spk.clone(), build_profile(&slice, Some(embedder), true)?);
    }
    Ok(out)
}

fn evaluate_targets(
    corpus: &Corpus,
    models: &[(&str, &ConversionCheckpoint)],
    measurement: &EmbedderCheckpoint,
    profiles: &BTreeMap<String, SpeakerProfile>,
    label: &str,
    opts: McdOptions,
    allow_average: bool,
) -> Result<EvalReport> {
    let parts = models
        .iter()
        .map(|(target, model)| evaluate_system(corpus, model, measurement, profiles, target, label, opts, allow_average))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::merge(label, parts))
}

/// Runs the whole ablation, writing artifacts under `out_dir`:
/// `corpus/`, `embedders/`, `profiles/`, `checkpoints/`, `logs/`, `reports/`
/// and `summary.json`.
pub fn run_ablation(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<AblationOutcome> {
    let cfg = config.resolved()?;
    let out = out_dir.as_ref();
    mkdir(out)?;
    write_json(&cfg, &out.join("config.json"))?;

    let corpus_dir = out.join("corpus");
    generate(&cfg.corpus, &corpus_dir)?;
    let corpus = Corpus::load(
        corpus_dir.join("manifest.json"),
        &FormatOptions::with_dims(cfg.corpus.ppg_dim, cfg.corpus.mcc_dim),
    )?;
    let separation_score = speaker_separation_score(&corpus)?;
    log::info!("corpus {}: separation score {separation_score:.3}", corpus.manifest.corpus_name);

    let emb_dir = out.join("embedders");
    let embedder = pretrain_embedder(&corpus, &cfg.embedder, &cfg.embedder_training)?;
    embedder.save(&emb_dir, "training")?;
    let measurement = if cfg.evaluation.independent_embedder {
        let train = EmbedderTrainConfig {
            seed: cfg.measurement_seed(),
            ..cfg.embedder_training.clone()
        };
        let m = pretrain_embedder(&corpus, &cfg.embedder, &train)?;
        m.save(&emb_dir, "measurement")?;
        m
    } else {
        embedder.clone()
    };
    let pristine = embedder.clone();

    let profiles = speaker_profiles(&corpus, &embedder)?;
    let prof_dir = out.join("profiles");
    mkdir(&prof_dir)?;
    for (spk, p) in &profiles {
        p.save(prof_dir.join(format!("{spk}.json")))?;
    }

    let opts = cfg.evaluation.mcd();
    let untrained = {
        let train_utts = corpus.select(Split::Train, None);
        let mut model = init_model(&model_config_for(&cfg.network, System::AmaR, None), cfg.seed)?;
        model.meta.norm_stats = NormStats::from_frames(train_utts.iter().map(|u| u.mcc.frames.view()), corpus.mcc_dim);
        let pairs: Vec<(&str, &ConversionCheckpoint)> = cfg.targets.iter().map(|t| (t.as_str(), &model)).collect();
        evaluate_targets(&corpus, &pairs, &measurement, &profiles, "untrained", opts, true)?
    };

    let ckpt_dir = out.join("checkpoints");
    let log_dir = out.join("logs");
    mkdir(&log_dir)?;
    let mut reports = Vec::new();
    let mut logs = BTreeMap::new();
    let mut models = BTreeMap::new();
    let mut checkpoint_hashes = BTreeMap::new();
    let mut freeze_checks = Vec::new();
    let adapt_corpus = corpus.subset(|r| r.split == Split::Adapt);

    for &system in &cfg.systems {
        let emb = system.needs_embedder().then_some(&embedder);
        let tcfg = cfg.average.train_config(system, cfg.alpha, cfg.seed);
        let (average, log) = train_average(&corpus, &cfg.network, &tcfg, emb)?;
        let run = format!("{}/average", system.slug());
        freeze_checks.push(FreezeCheck {
            run: run.clone(),
            intact: verify_frozen(&pristine, &embedder),
        });
        let dir = ckpt_dir.join(system.slug());
        average.save(&dir, "average")?;
        log.write_jsonl(log_dir.join(format!("{}_average.jsonl", system.slug())))?;
        checkpoint_hashes.insert(run.clone(), average.parameter_hash());
        logs.insert(run.clone(), log);

        let mut adapted = Vec::new();
        for target in &cfg.targets {
            let acfg = cfg.adaptation.train_config(system, cfg.alpha, cfg.seed.wrapping_add(1));
            let target_corpus = adapt_corpus.subset(|r| &r.speaker == target);
            let (model, log) = adapt(&average, &target_corpus, &acfg, emb)?;
            let run = format!("{}/{target}", system.slug());
            freeze_checks.push(FreezeCheck {
                run: run.clone(),
                intact: verify_frozen(&pristine, &embedder),
            });
            model.save(&dir, &format!("adapted_{target}"))?;
            log.write_jsonl(log_dir.join(format!("{}_{target}.jsonl", system.slug())))?;
            checkpoint_hashes.insert(run.clone(), model.parameter_hash());
            logs.insert(run.clone(), log);
            adapted.push((target.as_str(), model));
        }
        let pairs: Vec<(&str, &ConversionCheckpoint)> = adapted.iter().map(|(t, m)| (*t, m)).collect();
        let report = evaluate_targets(&corpus, &pairs, &measurement, &profiles, system.label(), opts, false)?;
        log::info!(
            "{}: MCD {:.3} dB, CCD {:.4} over {} utterances",
            report.system,
            report.average_mcd,
            report.average_ccd,
            report.n_utterances
        );
        reports.push(report);
        models.insert(format!("{}/average", system.slug()), average);
        for (t, m) in adapted {
            models.insert(format!("{}/{t}", system.slug()), m);
        }
    }

    write_reports(&reports, out.join("reports"))?;
    let summary = AblationSummary {
        corpus_fingerprint: corpus.fingerprint(),
        separation_score,
        training_embedder_hash: embedder.parameter_hash(),
        measurement_embedder_hash: measurement.parameter_hash(),
        training_embedder_heldout_accuracy: embedder.meta.heldout_accuracy,
        measurement_embedder_heldout_accuracy: measurement.meta.heldout_accuracy,
        untrained,
        reports,
        checkpoint_hashes,
        freeze_checks,
    };
    write_json(&summary, &out.join("summary.json"))?;
    Ok(AblationOutcome {
        summary,
        logs,
        models,
        profiles,
        corpus,
        embedder,
        measurement,
    })
}
