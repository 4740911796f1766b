//! Average-model training and target-speaker adaptation for the four system
//! variants (with/without speaker-embedding input, with/without the cycle
//! consistency loss).
//!
//! Each step draws a batch of utterances, converts their PPGs, and scores the
//! normalized output against the natural MCCs. Cycle-consistency systems also
//! de-normalize the converted MCCs, run them through the frozen embedder and
//! penalize the distance to the reference embedding. Only conversion-model
//! parameters are updated; the embedder is held by shared reference.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversion::{init_model, ConversionCheckpoint, ConversionConfig, Stage};
use crate::embedder::{EmbedderCheckpoint, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::features::{Corpus, Split};
use crate::losses::{self, LossBreakdown, DEFAULT_ALPHA};
use crate::nn::{Adam, Grads, NormStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "ama-r")]
    AmaR,
    #[serde(rename = "ama-rc")]
    AmaRc,
    #[serde(rename = "ama-se-r")]
    AmaSeR,
    #[serde(rename = "ama-se-rc")]
    AmaSeRc,
}

impl System {
    pub const ALL: [System; 4] = [System::AmaR, System::AmaRc, System::AmaSeR, System::AmaSeRc];

    pub fn uses_cycle_loss(self) -> bool {
        matches!(self, System::AmaRc | System::AmaSeRc)
    }

    pub fn uses_embedding_input(self) -> bool {
        matches!(self, System::AmaSeR | System::AmaSeRc)
    }

    pub fn needs_embedder(self) -> bool {
        self.uses_cycle_loss() || self.uses_embedding_input()
    }

    pub fn slug(self) -> &'static str {
        match self {
            System::AmaR => "ama-r",
            System::AmaRc => "ama-rc",
            System::AmaSeR => "ama-se-r",
            System::AmaSeRc => "ama-se-rc",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            System::AmaR => "AMA-R",
            System::AmaRc => "AMA-RC",
            System::AmaSeR => "AMA-SE-R",
            System::AmaSeRc => "AMA-SE-RC",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.slug().eq_ignore_ascii_case(s) || sys.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown system {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub system: System,
    /// Weight of the cycle consistency loss; ignored (forced to 0) for
    /// reconstruction-only systems.
    pub alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            system: System::AmaSeRc,
            alpha: DEFAULT_ALPHA,
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn effective_alpha(&self) -> f64 {
        if self.system.uses_cycle_loss() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_rec: f64,
    pub l_cc: f64,
    pub alpha: f64,
    pub l_all: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
    /// `(step, parameter hash)` at the start and end of the run.
    pub checkpoint_hashes: Vec<(usize, String)>,
}

impl TrainLog {
    /// Line-delimited JSON, one record per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
            .collect()
    }
}

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub ppg: Array2<f64>,
    /// Natural MCC in the model's normalized space.
    pub target: Array2<f64>,
    /// Embedding the cycle loss pulls the converted speech toward.
    pub reference: Option<Vec<f64>>,
    /// Embedding fed to the model as conditioning input.
    pub conditioning: Option<Vec<f64>>,
}

/// What the embedder contributes to a step.
#[derive(Clone, Copy)]
struct LossSetup<'a> {
    alpha: f64,
    embedder: Option<&'a EmbedderCheckpoint>,
    /// Compute L_cc through the embedder (for the gradient or for monitoring).
    score_cc: bool,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub l_rec: f64,
    pub l_cc: f64,
    pub value: f64,
    pub grads: Grads,
    /// Gradient with respect to the model input (PPG, then conditioning).
    pub d_input: Array2<f64>,
}

/// Value and gradients of `w_rec * L_rec + w_cc * L_cc` for one example.
///
/// L_cc is evaluated whenever an embedder and a reference are present; it is
/// only back-propagated when `w_cc > 0`. The embedder itself receives no
/// gradient.
pub fn objective(
    model: &ConversionCheckpoint,
    ex: &TrainingExample,
    embedder: Option<&EmbedderCheckpoint>,
    w_rec: f64,
    w_cc: f64,
) -> Result<ObjectiveOutput> {
    let (y, cache) = model.forward_normalized(ex.ppg.view(), ex.conditioning.as_deref())?;
    let l_rec = losses::reconstruction_loss_frames(y.view(), ex.target.view())?;
    let mut d_y = losses::reconstruction_grad(y.view(), ex.target.view())?;
    d_y.mapv_inplace(|v| v * w_rec);
    let mut l_cc = 0.0;
    if let (Some(emb), Some(reference)) = (embedder, ex.reference.as_deref()) {
        let norm = &model.meta.norm_stats;
        let raw = norm.denormalize(&y);
        if w_cc > 0.0 {
            let (s_conv, ecache) = emb.forward(raw.view())?;
            l_cc = losses::embedding_distance(s_conv.as_slice().expect("contiguous"), reference)?;
            let d_s: Vec<f64> = losses::embedding_distance_grad(s_conv.as_slice().expect("contiguous"), reference)?
                .into_iter()
                .map(|g| g * w_cc)
                .collect();
            let d_raw = emb.backward(&ecache, ndarray::ArrayView1::from(&d_s), None);
            for (mut row, d_row) in d_y.outer_iter_mut().zip(d_raw.outer_iter()) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += d_row[j] * norm.std[j];
                }
            }
        } else {
            let s_conv = emb.embed_frames(raw.view())?;
            l_cc = losses::embedding_distance(s_conv.as_slice().expect("contiguous"), reference)?;
        }
    }
    let mut grads = Grads::zeros(model.parameter_count());
    let d_input = model.backward(&cache, d_y.view(), Some(&mut grads));
    Ok(ObjectiveOutput {
        l_rec,
        l_cc,
        value: w_rec * l_rec + w_cc * l_cc,
        grads,
        d_input,
    })
}

fn utterance_step(model: &ConversionCheckpoint, item: &TrainingExample, setup: LossSetup<'_>) -> Result<(LossBreakdown, Grads)> {
    let embedder = if setup.score_cc { setup.embedder } else { None };
    let out = objective(model, item, embedder, 1.0, setup.alpha)?;
    let breakdown = losses::joint_loss(out.l_rec, out.l_cc, setup.alpha)?;
    Ok((breakdown, out.grads))
}

/// Mean loss breakdown and mean gradient over a batch, reduced in batch order.
fn batch_step(model: &ConversionCheckpoint, batch: &[&TrainingExample], setup: LossSetup<'_>) -> Result<(LossBreakdown, Grads)> {
    let results: Vec<Result<(LossBreakdown, Grads)>> =
        batch.par_iter().map(|item| utterance_step(model, item, setup)).collect();
    let mut total = Grads::zeros(model.parameter_count());
    let (mut l_rec, mut l_cc, mut l_all) = (0.0, 0.0, 0.0);
    for r in results {
        let (b, g) = r?;
        l_rec += b.l_rec;
        l_cc += b.l_cc;
        l_all += b.l_all;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((
        LossBreakdown {
            l_rec: l_rec / n,
            l_cc: l_cc / n,
            alpha: setup.alpha,
            l_all: l_all / n,
        },
        total,
    ))
}

/// Runs the optimization loop over `items`, mutating `model` in place.
fn run_loop(model: &mut ConversionCheckpoint, items: &[TrainingExample], cfg: &TrainConfig, setup: LossSetup<'_>, phase: &str) -> Result<TrainLog> {
    let start = Instant::now();
    let mut log = TrainLog {
        checkpoint_hashes: vec![(0, model.parameter_hash())],
        ..TrainLog::default()
    };
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let report_every = (cfg.steps / 10).max(1);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(items.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&items[order[cursor]]);
            cursor += 1;
        }
        let (b, mut g) = batch_step(model, &batch, setup)?;
        if !b.l_all.is_finite() || g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                batch: batch.iter().map(|i| i.id.clone()).collect(),
            });
        }
        g.clip_global_norm(cfg.clip_norm);
        adam.update(&mut model.params, &g);
        log.records.push(StepRecord {
            step,
            l_rec: b.l_rec,
            l_cc: b.l_cc,
            alpha: b.alpha,
            l_all: b.l_all,
        });
        if step % report_every == 0 || step + 1 == cfg.steps {
            log::info!(
                "{phase} {} step {step}/{}: l_rec {:.4} l_cc {:.4} l_all {:.4}",
                cfg.system.slug(),
                cfg.steps,
                b.l_rec,
                b.l_cc,
                b.l_all
            );
        }
    }
    model.meta.parameter_hash = model.parameter_hash();
    log.checkpoint_hashes.push((cfg.steps, model.meta.parameter_hash.clone()));
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

fn require_embedder(system: System, embedder: Option<&EmbedderCheckpoint>) -> Result<Option<&EmbedderCheckpoint>> {
    if system.needs_embedder() && embedder.is_none() {
        return Err(Error::MissingEmbedder(system.label().into()));
    }
    Ok(embedder)
}

/// Conversion-model config for a system: conditioning is switched on (with
/// the embedder's dimension) exactly for speaker-embedding systems.
pub fn model_config_for(base: &ConversionConfig, system: System, embedder: Option<&EmbedderCheckpoint>) -> ConversionConfig {
    let mut cfg = base.clone();
    cfg.use_speaker_embedding = system.uses_embedding_input();
    cfg.embedding_dim = if cfg.use_speaker_embedding {
        embedder.map(EmbedderCheckpoint::embedding_dim)
    } else {
        None
    };
    cfg
}

fn embed_all(embedder: &EmbedderCheckpoint, corpus: &Corpus, ids: &[String]) -> Result<Vec<Vec<f64>>> {
    ids.par_iter()
        .map(|id| {
            let u = &corpus.utterances[id];
            embedder.embed_frames(u.mcc.to_f64().view()).map(|e| e.to_vec())
        })
        .collect()
}

/// Trains the average model on the train split of a multi-speaker corpus.
pub fn train_average(
    corpus: &Corpus,
    base: &ConversionConfig,
    cfg: &TrainConfig,
    embedder: Option<&EmbedderCheckpoint>,
) -> Result<(ConversionCheckpoint, TrainLog)> {
    cfg.validate()?;
    let embedder = require_embedder(cfg.system, embedder)?;
    let speakers = corpus.manifest.speakers_in(Split::Train);
    if speakers.len() < 2 {
        return Err(Error::DegenerateCorpus(format!(
            "average training needs at least two speakers in the train split, found {}",
            speakers.len()
        )));
    }
    let net_cfg = model_config_for(base, cfg.system, embedder);
    if net_cfg.input_dim != corpus.ppg_dim {
        return Err(Error::dim("model input_dim vs corpus ppg_dim", corpus.ppg_dim, net_cfg.input_dim));
    }
    if net_cfg.output_dim != corpus.mcc_dim {
        return Err(Error::dim("model output_dim vs corpus mcc_dim", corpus.mcc_dim, net_cfg.output_dim));
    }
    let mut model = init_model(&net_cfg, cfg.seed)?;
    let utts = corpus.select(Split::Train, None);
    let norm = NormStats::from_frames(utts.iter().map(|u| u.mcc.frames.view()), corpus.mcc_dim);
    model.meta.norm_stats = norm.clone();

    let ids: Vec<String> = utts.iter().map(|u| u.record.id.clone()).collect();
    let embeddings = match embedder {
        Some(e) => Some(embed_all(e, corpus, &ids)?),
        None => None,
    };
    if let (true, Some(e)) = (cfg.system.uses_embedding_input(), &embeddings) {
        model.meta.embedding_stats = Some(NormStats::centered_rows(e, net_cfg.conditioning_dim()));
    }
    let items: Vec<TrainingExample> = utts
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let own = embeddings.as_ref().map(|e| e[i].clone());
            TrainingExample {
                id: u.record.id.clone(),
                ppg: u.ppg.to_f64(),
                target: norm.normalize(&u.mcc.to_f64()),
                conditioning: if cfg.system.uses_embedding_input() { own.clone() } else { None },
                reference: own,
            }
        })
        .collect();
    let setup = LossSetup {
        alpha: cfg.effective_alpha(),
        embedder,
        score_cc: embedder.is_some(),
    };
    let log = run_loop(&mut model, &items, cfg, setup, "average")?;
    model.meta.alpha = cfg.effective_alpha();
    model.meta.system = Some(cfg.system.slug().into());
    model.meta.steps = cfg.steps;
    Ok((model, log))
}

/// Mean embedding over a set of utterances.
pub fn mean_embedding(embedder: &EmbedderCheckpoint, corpus: &Corpus, ids: &[String]) -> Result<SpeakerEmbedding> {
    let all: Vec<SpeakerEmbedding> = embed_all(embedder, corpus, ids)?
        .into_iter()
        .map(SpeakerEmbedding::new)
        .collect();
    SpeakerEmbedding::mean_of(&all)
}

/// Fine-tunes an average model on one target speaker's adapt split.
/// `target` may hold other splits; only adapt utterances are used and they
/// must all belong to a single speaker.
pub fn adapt(
    average: &ConversionCheckpoint,
    target: &Corpus,
    cfg: &TrainConfig,
    embedder: Option<&EmbedderCheckpoint>,
) -> Result<(ConversionCheckpoint, TrainLog)> {
    cfg.validate()?;
    if average.meta.stage != Stage::Average {
        return Err(Error::WrongStage {
            expected: Stage::Average.name(),
            found: average.meta.stage.name(),
        });
    }
    let embedder = require_embedder(cfg.system, embedder)?;
    if average.config().use_speaker_embedding != cfg.system.uses_embedding_input() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint conditioning does not match system {}",
            cfg.system
        )));
    }
    let utts = target.select(Split::Adapt, None);
    let mut speakers: Vec<String> = utts.iter().map(|u| u.record.speaker.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() > 1 {
        return Err(Error::MultipleSpeakers(speakers));
    }
    if utts.is_empty() {
        return Err(Error::DegenerateCorpus("adapt split is empty".into()));
    }
    let norm = average.meta.norm_stats.clone();
    let ids: Vec<String> = utts.iter().map(|u| u.record.id.clone()).collect();
    let target_embedding = match embedder {
        Some(e) => Some(mean_embedding(e, target, &ids)?.values),
        None => None,
    };
    let items: Vec<TrainingExample> = utts
        .iter()
        .map(|u| TrainingExample {
            id: u.record.id.clone(),
            ppg: u.ppg.to_f64(),
            target: norm.normalize(&u.mcc.to_f64()),
            conditioning: if cfg.system.uses_embedding_input() {
                target_embedding.clone()
            } else {
                None
            },
            reference: target_embedding.clone(),
        })
        .collect();
    let mut model = average.clone();
    let setup = LossSetup {
        alpha: cfg.effective_alpha(),
        embedder,
        score_cc: embedder.is_some(),
    };
    let log = run_loop(&mut model, &items, cfg, setup, "adapt")?;
    model.meta.stage = Stage::Adapted;
    model.meta.parent_hash = Some(average.parameter_hash());
    model.meta.alpha = cfg.effective_alpha();
    model.meta.system = Some(cfg.system.slug().into());
    model.meta.target_speaker = Some(speakers.remove(0));
    model.meta.steps = cfg.steps;
    Ok((model, log))
}

/// Median of `l_all` over the first and last `fraction` of a log.
pub fn head_tail_medians(records: &[StepRecord], fraction: f64) -> Option<(f64, f64)> {
    let k = ((records.len() as f64 * fraction).ceil() as usize).max(1);
    if records.len() < 2 * k {
        return None;
    }
    let median = |rs: &[StepRecord]| {
        let mut v: Vec<f64> = rs.iter().map(|r| r.l_all).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    Some((median(&records[..k]), median(&records[records.len() - k..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_names_round_trip() {
        for s in System::ALL {
            assert_eq!(s.slug().parse::<System>().unwrap(), s);
            assert_eq!(s.label().parse::<System>().unwrap(), s);
        }
        assert!("ama-x".parse::<System>().is_err());
    }

    #[test]
    fn alpha_forced_to_zero_for_reconstruction_systems() {
        let cfg = TrainConfig {
            system: System::AmaSeR,
            alpha: 0.7,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_alpha(), 0.0);
        let cfg = TrainConfig {
            system: System::AmaRc,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_alpha(), DEFAULT_ALPHA);
    }

    #[test]
    fn medians() {
        let recs: Vec<StepRecord> = (0..20)
            .map(|i| StepRecord {
                step: i,
                l_rec: 0.0,
                l_cc: 0.0,
                alpha: 0.0,
                l_all: 20.0 - i as f64,
            })
            .collect();
        let (head, tail) = head_tail_medians(&recs, 0.1).unwrap();
        assert_eq!(head, 19.5);
        assert_eq!(tail, 1.5);
    }
}
