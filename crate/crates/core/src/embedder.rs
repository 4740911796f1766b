//! Speaker-embedding extractor used as the frozen loss network.
//!
//! Architecture: per-dimension input normalization, a linear 1x1 stem into
//! `channels`, then `n_res_blocks` residual blocks
//! (`z = x + relu(W2 relu(W1 x))` followed by max-pooling over time with
//! window 2 and stride 2), a final 1x1 convolution to `embedding_dim`, and
//! mean pooling over the remaining frames. Pretraining adds a linear speaker
//! classifier on top of the embedding; it is stored with the checkpoint but
//! plays no part in [`EmbedderCheckpoint::embed`].

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Corpus, FeatureSequence, Split};
use crate::nn::{Adam, Dense, Grads, Layout, NormStats, Params, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_utterance_id: Option<String>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            source_utterance_id: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Element-wise mean of several embeddings of equal dimension.
    pub fn mean_of(items: &[SpeakerEmbedding]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::DegenerateCorpus("no embeddings to average".into()))?;
        let mut acc = vec![0.0; first.dim()];
        for e in items {
            if e.dim() != acc.len() {
                return Err(Error::dim("speaker embedding", acc.len(), e.dim()));
            }
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        Ok(Self::new(acc.into_iter().map(|a| a / n).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub n_res_blocks: usize,
    pub channels: usize,
    pub embedding_dim: usize,
    pub input_dim: usize,
    pub pool: Pool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 5,
            channels: 64,
            embedding_dim: 128,
            input_dim: crate::features::DEFAULT_MCC_DIM,
            pool: Pool::Mean,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(Error::InvalidConfig("embedder needs at least one residual block".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig("embedding_dim must be at least 2".into()));
        }
        if self.channels == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig("embedder channels and input_dim must be positive".into()));
        }
        Ok(())
    }

    /// Shortest sequence that survives every pooling stage with one frame left.
    pub fn min_frames(&self) -> usize {
        1 << self.n_res_blocks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random crop length used for each training example.
    pub crop_frames: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            crop_frames: 96,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Dense,
    conv2: Dense,
}

/// Slot map for a given config; rebuilt from metadata on load.
#[derive(Debug, Clone)]
struct Net {
    input_mean: Slot,
    input_std: Slot,
    stem: Dense,
    blocks: Vec<Block>,
    head: Dense,
    classifier: Dense,
}

impl Net {
    fn build(cfg: &EmbedderConfig, n_speakers: usize) -> (Self, Layout) {
        let mut layout = Layout::default();
        let input_mean = layout.add("input.mean", 1, cfg.input_dim, false);
        let input_std = layout.add("input.std", 1, cfg.input_dim, false);
        let stem = Dense::new(&mut layout, "stem", cfg.input_dim, cfg.channels);
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| Block {
                conv1: Dense::new(&mut layout, &format!("block{i}.conv1"), cfg.channels, cfg.channels),
                conv2: Dense::new(&mut layout, &format!("block{i}.conv2"), cfg.channels, cfg.channels),
            })
            .collect();
        let head = Dense::new(&mut layout, "head", cfg.channels, cfg.embedding_dim);
        let classifier = Dense::new(&mut layout, "classifier", cfg.embedding_dim, n_speakers);
        (
            Self {
                input_mean,
                input_std,
                stem,
                blocks,
                head,
                classifier,
            },
            layout,
        )
    }
}

struct BlockCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    /// Row in the pre-pool sequence that won each pooled cell.
    argmax: Array2<usize>,
    pre_pool_rows: usize,
}

pub struct EmbedCache {
    x_norm: Array2<f64>,
    blocks: Vec<BlockCache>,
    pooled: Array2<f64>,
    frames_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderMeta {
    pub config: EmbedderConfig,
    pub speakers: Vec<String>,
    pub steps: usize,
    pub seed: u64,
    pub corpus_hash: String,
    pub parameter_hash: String,
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbedderCheckpoint {
    pub params: Params,
    pub meta: EmbedderMeta,
    net: Net,
}

/// JSON sidecar written next to the parameter archive.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: EmbedderMeta,
    params_file: String,
}

impl EmbedderCheckpoint {
    pub fn config(&self) -> &EmbedderConfig {
        &self.meta.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.meta.config.embedding_dim
    }

    pub fn parameter_hash(&self) -> String {
        self.params.hash()
    }

    fn check_input(&self, frames: usize, dim: usize) -> Result<()> {
        if dim != self.meta.config.input_dim {
            return Err(Error::dim("embedder input", self.meta.config.input_dim, dim));
        }
        let min = self.meta.config.min_frames();
        if frames < min {
            return Err(Error::SequenceTooShort { frames, min });
        }
        Ok(())
    }

    pub fn embed(&self, mcc: &FeatureSequence) -> Result<SpeakerEmbedding> {
        let values = self.embed_frames(mcc.to_f64().view())?;
        Ok(SpeakerEmbedding {
            values: values.to_vec(),
            source_utterance_id: Some(mcc.utterance_id.clone()),
        })
    }

    pub fn embed_frames(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Forward pass keeping everything needed for [`Self::backward`].
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, EmbedCache)> {
        self.check_input(x.nrows(), x.ncols())?;
        let p = &self.params;
        let mean = p.row(self.net.input_mean);
        let std = p.row(self.net.input_std);
        let x_norm = (&x - &mean) / std;
        let mut z = self.net.stem.forward(p, x_norm.view());
        let mut blocks = Vec::with_capacity(self.net.blocks.len());
        for b in &self.net.blocks {
            let h1 = b.conv1.forward(p, z.view()).mapv(relu);
            let h2 = b.conv2.forward(p, h1.view()).mapv(relu);
            let sum = &z + &h2;
            let (pooled, argmax) = max_pool2(sum.view());
            blocks.push(BlockCache {
                input: z,
                h1,
                h2,
                argmax,
                pre_pool_rows: sum.nrows(),
            });
            z = pooled;
        }
        let frames = self.net.head.forward(p, z.view());
        let emb = frames.mean_axis(Axis(0)).expect("at least one pooled frame");
        let cache = EmbedCache {
            x_norm,
            blocks,
            frames_out: frames.nrows(),
            pooled: z,
        };
        Ok((emb, cache))
    }

    /// Backpropagates `d_emb` to the (un-normalized) input frames. Parameter
    /// gradients are accumulated only when `grads` is given.
    pub fn backward(&self, cache: &EmbedCache, d_emb: ArrayView1<f64>, mut grads: Option<&mut Grads>) -> Array2<f64> {
        let p = &self.params;
        let d_frames = Array2::from_shape_fn((cache.frames_out, d_emb.len()), |(_, j)| {
            d_emb[j] / cache.frames_out as f64
        });
        let mut d_z = self.net.head.backward(p, cache.pooled.view(), d_frames.view(), grads.as_deref_mut());
        for (b, c) in self.net.blocks.iter().zip(&cache.blocks).rev() {
            let mut d_sum = Array2::<f64>::zeros((c.pre_pool_rows, d_z.ncols()));
            for ((t, ch), &row) in c.argmax.indexed_iter() {
                d_sum[[row, ch]] += d_z[[t, ch]];
            }
            let d_a2 = &d_sum * &c.h2.mapv(relu_mask);
            let d_h1 = b.conv2.backward(p, c.h1.view(), d_a2.view(), grads.as_deref_mut());
            let d_a1 = d_h1 * c.h1.mapv(relu_mask);
            let d_in = b.conv1.backward(p, c.input.view(), d_a1.view(), grads.as_deref_mut());
            d_z = d_sum + d_in;
        }
        let d_xnorm = self.net.stem.backward(p, cache.x_norm.view(), d_z.view(), grads);
        d_xnorm / p.row(self.net.input_std)
    }

    /// Speaker logits from an embedding (pretraining head).
    fn logits(&self, emb: ArrayView1<f64>) -> Array1<f64> {
        let e = emb.insert_axis(Axis(0));
        self.net.classifier.forward(&self.params, e).row(0).to_owned()
    }

    /// Index of the most likely training speaker.
    pub fn classify(&self, mcc: &FeatureSequence) -> Result<usize> {
        let emb = self.embed_frames(mcc.to_f64().view())?;
        let logits = self.logits(emb.view());
        Ok(argmax(logits.view()))
    }

    /// Cross-entropy loss and gradients for one labelled example.
    fn example_grads(&self, x: ArrayView2<f64>, label: usize) -> Result<(f64, Grads)> {
        let (emb, cache) = self.forward(x)?;
        let logits = self.logits(emb.view());
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exp = logits.mapv(|l| (l - max).exp());
        let z = exp.sum();
        let loss = z.ln() + max - logits[label];
        let mut d_logits = exp / z;
        d_logits[label] -= 1.0;
        let mut g = Grads::zeros(self.params.values.len());
        let e2 = emb.view().insert_axis(Axis(0));
        let d_emb = self.net.classifier.backward(
            &self.params,
            e2,
            d_logits.view().insert_axis(Axis(0)),
            Some(&mut g),
        );
        self.backward(&cache, d_emb.row(0), Some(&mut g));
        Ok((loss, g))
    }

    /// Makes the checkpoint trainable again. Only tests and explicit
    /// fine-tuning should ever call this.
    pub fn unfreeze(&mut self) {
        self.meta.frozen = false;
    }

    /// Plain SGD step on one labelled example; refuses frozen checkpoints.
    pub fn sgd_step(&mut self, x: ArrayView2<f64>, label: usize, learning_rate: f64) -> Result<f64> {
        if self.meta.frozen {
            return Err(Error::InvariantViolation("embedder checkpoint is frozen".into()));
        }
        let (loss, g) = self.example_grads(x, label)?;
        let mask = self.params.layout.trainable_mask();
        for ((v, gv), m) in self.params.values.iter_mut().zip(&g.values).zip(mask) {
            if m {
                *v -= learning_rate * gv;
            }
        }
        self.meta.parameter_hash = self.params.hash();
        Ok(loss)
    }

    /// Writes `<stem>.params` and `<stem>.json`; returns the sidecar path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params_file = format!("{stem}.params");
        let params_path = dir.join(&params_file);
        fs::write(&params_path, self.params.to_archive()).map_err(|e| Error::io(&params_path, e))?;
        let sidecar = Sidecar {
            meta: self.meta.clone(),
            params_file,
        };
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(json_path)
    }

    pub fn load(sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let path = sidecar_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let params_path = path.parent().unwrap_or(Path::new(".")).join(&sidecar.params_file);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let params = Params::from_archive(&bytes)?;
        let meta = sidecar.meta;
        meta.config.validate()?;
        let (net, layout) = Net::build(&meta.config, meta.speakers.len());
        if layout != params.layout {
            return Err(Error::Parse(format!("{}: parameter layout does not match config", path.display())));
        }
        if params.hash() != meta.parameter_hash {
            return Err(Error::Parse(format!("{}: parameter hash mismatch", path.display())));
        }
        Ok(Self { params, meta, net })
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn relu_mask(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Window-2 stride-2 max pooling over rows; ties go to the earlier frame.
fn max_pool2(x: ArrayView2<f64>) -> (Array2<f64>, Array2<usize>) {
    let rows = x.nrows() / 2;
    let mut out = Array2::zeros((rows, x.ncols()));
    let mut idx = Array2::zeros((rows, x.ncols()));
    for t in 0..rows {
        for c in 0..x.ncols() {
            let (a, b) = (x[[2 * t, c]], x[[2 * t + 1, c]]);
            if b > a {
                out[[t, c]] = b;
                idx[[t, c]] = 2 * t + 1;
            } else {
                out[[t, c]] = a;
                idx[[t, c]] = 2 * t;
            }
        }
    }
    (out, idx)
}

/// Randomly initialized, untrained extractor.
pub fn init_embedder(cfg: &EmbedderConfig, speakers: Vec<String>, input_stats: &NormStats, seed: u64) -> Result<EmbedderCheckpoint> {
    cfg.validate()?;
    if input_stats.mean.len() != cfg.input_dim {
        return Err(Error::dim("embedder input statistics", cfg.input_dim, input_stats.mean.len()));
    }
    let (net, layout) = Net::build(cfg, speakers.len().max(1));
    let mut params = Params::zeros(layout);
    params.slice_mut(net.input_mean).copy_from_slice(&input_stats.mean);
    params.slice_mut(net.input_std).copy_from_slice(&input_stats.std);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.stem.init(&mut params, &mut rng);
    for b in &net.blocks {
        b.conv1.init(&mut params, &mut rng);
        b.conv2.init(&mut params, &mut rng);
    }
    net.head.init(&mut params, &mut rng);
    net.classifier.init(&mut params, &mut rng);
    let parameter_hash = params.hash();
    Ok(EmbedderCheckpoint {
        params,
        meta: EmbedderMeta {
            config: cfg.clone(),
            speakers,
            steps: 0,
            seed,
            corpus_hash: String::new(),
            parameter_hash,
            frozen: false,
            heldout_accuracy: None,
        },
        net,
    })
}

/// Trains the extractor as a speaker classifier on the train and adapt splits,
/// reports accuracy on the eval split, and returns a frozen checkpoint.
pub fn pretrain_embedder(corpus: &Corpus, cfg: &EmbedderConfig, train: &EmbedderTrainConfig) -> Result<EmbedderCheckpoint> {
    cfg.validate()?;
    if cfg.input_dim != corpus.mcc_dim {
        return Err(Error::dim("embedder input_dim vs corpus mcc_dim", corpus.mcc_dim, cfg.input_dim));
    }
    let min = cfg.min_frames();
    let crop = train.crop_frames.max(min);
    let mut speakers = Vec::new();
    let mut examples: Vec<(usize, ArrayView2<f32>)> = Vec::new();
    for spk in &corpus.manifest.speakers {
        let utts: Vec<_> = [Split::Train, Split::Adapt]
            .into_iter()
            .flat_map(|s| corpus.select(s, Some(spk)))
            .filter(|u| u.mcc.len() >= min)
            .collect();
        if utts.len() < 2 {
            continue;
        }
        let label = speakers.len();
        speakers.push(spk.clone());
        examples.extend(utts.iter().map(|u| (label, u.mcc.frames.view())));
    }
    if speakers.len() < 2 {
        return Err(Error::DegenerateCorpus(format!(
            "embedder pretraining needs two speakers with two usable utterances, found {}",
            speakers.len()
        )));
    }
    let stats = NormStats::from_frames(examples.iter().map(|(_, f)| *f), cfg.input_dim);
    let mut ckpt = init_embedder(cfg, speakers.clone(), &stats, train.seed)?;
    let mut adam = Adam::new(&ckpt.params, train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_e1b0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (label, frames) = examples[order[cursor]];
            cursor += 1;
            let len = crop.min(frames.nrows());
            let start = rng.random_range(0..=frames.nrows() - len);
            batch.push((label, start, len, frames));
        }
        let results: Vec<Result<(f64, Grads)>> = batch
            .par_iter()
            .map(|&(label, start, len, frames)| {
                let x = frames.slice(ndarray::s![start..start + len, ..]).mapv(f64::from);
                ckpt.example_grads(x.view(), label)
            })
            .collect();
        let mut total = Grads::zeros(ckpt.params.values.len());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch: Vec::new(),
            });
        }
        total.scale(1.0 / n);
        total.clip_global_norm(train.clip_norm);
        adam.update(&mut ckpt.params, &total);
        if step % 50 == 0 || step + 1 == train.steps {
            log::debug!("embedder step {step}: cross-entropy {loss:.4}");
        }
    }

    let heldout: Vec<_> = corpus
        .select(Split::Eval, None)
        .into_iter()
        .filter(|u| u.mcc.len() >= min)
        .filter_map(|u| speakers.iter().position(|s| *s == u.record.speaker).map(|l| (l, u)))
        .collect();
    let accuracy = if heldout.is_empty() {
        None
    } else {
        let correct = heldout
            .par_iter()
            .map(|(label, u)| ckpt.classify(&u.mcc).map(|p| usize::from(p == *label)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Some(correct as f64 / heldout.len() as f64)
    };
    if let Some(a) = accuracy {
        log::info!("embedder held-out speaker accuracy {a:.3} over {} utterances", heldout.len());
    }
    ckpt.meta.steps = train.steps;
    ckpt.meta.corpus_hash = corpus.fingerprint();
    ckpt.meta.heldout_accuracy = accuracy;
    ckpt.meta.frozen = true;
    ckpt.meta.parameter_hash = ckpt.params.hash();
    Ok(ckpt)
}

/// True iff the two checkpoints carry bit-identical parameter archives.
pub fn verify_frozen(before: &EmbedderCheckpoint, after: &EmbedderCheckpoint) -> bool {
    before.params.to_archive() == after.params.to_archive()
}
