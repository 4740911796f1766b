//! PPG-to-MCC conversion model: a tanh feed-forward input layer, a stack of
//! unidirectional LSTMs, and a linear projection into z-normalized MCC space.
//! When conditioning is enabled the speaker embedding is concatenated to the
//! input of every frame.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence, DEFAULT_MCC_DIM, DEFAULT_PPG_DIM};
use crate::nn::{Dense, Grads, Layout, Lstm, LstmCache, NormStats, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversionConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub n_recurrent_layers: usize,
    pub use_speaker_embedding: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            input_dim: DEFAULT_PPG_DIM,
            output_dim: DEFAULT_MCC_DIM,
            hidden: 256,
            n_recurrent_layers: 4,
            use_speaker_embedding: false,
            embedding_dim: None,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 {
            return Err(Error::InvalidConfig("hidden must be at least 1".into()));
        }
        if self.n_recurrent_layers < 1 {
            return Err(Error::InvalidConfig("n_recurrent_layers must be at least 1".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("input_dim and output_dim must be positive".into()));
        }
        match (self.use_speaker_embedding, self.embedding_dim) {
            (true, None) | (true, Some(0)) => Err(Error::InvalidConfig(
                "embedding_dim is required when use_speaker_embedding is set".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidConfig(
                "embedding_dim given but use_speaker_embedding is off".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn conditioning_dim(&self) -> usize {
        if self.use_speaker_embedding {
            self.embedding_dim.unwrap_or(0)
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Average,
    Adapted,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Average => "average",
            Stage::Adapted => "adapted",
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    ff: Dense,
    lstms: Vec<Lstm>,
    out: Dense,
}

impl Net {
    fn build(cfg: &ConversionConfig) -> (Self, Layout) {
        let mut layout = Layout::default();
        let ff = Dense::new(&mut layout, "ff", cfg.input_dim + cfg.conditioning_dim(), cfg.hidden);
        let lstms = (0..cfg.n_recurrent_layers)
            .map(|i| Lstm::new(&mut layout, &format!("lstm{i}"), cfg.hidden, cfg.hidden))
            .collect();
        let out = Dense::new(&mut layout, "out", cfg.hidden, cfg.output_dim);
        (Self { ff, lstms, out }, layout)
    }
}

pub struct ForwardCache {
    input: Array2<f64>,
    ff_act: Array2<f64>,
    lstm: Vec<LstmCache>,
    last_hidden: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionMeta {
    pub config: ConversionConfig,
    pub stage: Stage,
    /// Parameter hash of the average checkpoint an adapted model came from.
    pub parent_hash: Option<String>,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Speaker the model was adapted to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_speaker: Option<String>,
    pub norm_stats: NormStats,
    /// Standardization applied to the conditioning embedding before it
    /// enters the network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_stats: Option<NormStats>,
    pub seed: u64,
    pub steps: usize,
    pub parameter_hash: String,
}

#[derive(Debug, Clone)]
pub struct ConversionCheckpoint {
    pub params: Params,
    pub meta: ConversionMeta,
    net: Net,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: ConversionMeta,
    params_file: String,
}

/// Freshly initialized average-stage model with identity output normalization.
pub fn init_model(config: &ConversionConfig, seed: u64) -> Result<ConversionCheckpoint> {
    config.validate()?;
    let (net, layout) = Net::build(config);
    let mut params = Params::zeros(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.ff.init(&mut params, &mut rng);
    for l in &net.lstms {
        l.init(&mut params, &mut rng);
    }
    net.out.init(&mut params, &mut rng);
    let parameter_hash = params.hash();
    log::debug!("conversion model initialized with {} parameters", params.values.len());
    Ok(ConversionCheckpoint {
        params,
        meta: ConversionMeta {
            config: config.clone(),
            stage: Stage::Average,
            parent_hash: None,
            alpha: 0.0,
            system: None,
            target_speaker: None,
            norm_stats: NormStats::identity(config.output_dim),
            embedding_stats: None,
            seed,
            steps: 0,
            parameter_hash,
        },
        net,
    })
}

impl ConversionCheckpoint {
    pub fn config(&self) -> &ConversionConfig {
        &self.meta.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values.len()
    }

    pub fn parameter_hash(&self) -> String {
        self.params.hash()
    }

    fn assemble_input(&self, ppg: ArrayView2<f64>, emb: Option<&[f64]>) -> Result<Array2<f64>> {
        let cfg = &self.meta.config;
        if ppg.ncols() != cfg.input_dim {
            return Err(Error::dim("conversion input (ppg)", cfg.input_dim, ppg.ncols()));
        }
        if ppg.nrows() == 0 {
            return Err(Error::InvariantViolation("empty ppg sequence".into()));
        }
        match (cfg.use_speaker_embedding, emb) {
            (true, None) => Err(Error::MissingEmbedding),
            (false, Some(_)) => Err(Error::UnexpectedEmbedding),
            (false, None) => Ok(ppg.to_owned()),
            (true, Some(e)) => {
                let m = cfg.conditioning_dim();
                if e.len() != m {
                    return Err(Error::dim("conditioning embedding", m, e.len()));
                }
                let mut x = Array2::zeros((ppg.nrows(), cfg.input_dim + m));
                x.slice_mut(s![.., ..cfg.input_dim]).assign(&ppg);
                let row: ndarray::Array1<f64> = match &self.meta.embedding_stats {
                    Some(st) => e.iter().zip(st.mean.iter().zip(&st.std)).map(|(v, (m, sd))| (v - m) / sd).collect(),
                    None => ndarray::Array1::from(e.to_vec()),
                };
                for mut r in x.slice_mut(s![.., cfg.input_dim..]).outer_iter_mut() {
                    r.assign(&row);
                }
                Ok(x)
            }
        }
    }

    /// Output in z-normalized MCC space together with the backward cache.
    pub fn forward_normalized(&self, ppg: ArrayView2<f64>, emb: Option<&[f64]>) -> Result<(Array2<f64>, ForwardCache)> {
        let p = &self.params;
        let input = self.assemble_input(ppg, emb)?;
        let ff_act = self.net.ff.forward(p, input.view()).mapv(f64::tanh);
        let mut h = ff_act.clone();
        let mut caches = Vec::with_capacity(self.net.lstms.len());
        for l in &self.net.lstms {
            let (next, cache) = l.forward(p, h.view());
            caches.push(cache);
            h = next;
        }
        let y = self.net.out.forward(p, h.view());
        Ok((
            y,
            ForwardCache {
                input,
                ff_act,
                lstm: caches,
                last_hidden: h,
            },
        ))
    }

    /// Backpropagates `d_y` (gradient w.r.t. the normalized output). Returns
    /// the gradient w.r.t. the assembled input, whose trailing columns belong
    /// to the conditioning embedding.
    pub fn backward(&self, cache: &ForwardCache, d_y: ArrayView2<f64>, mut grads: Option<&mut Grads>) -> Array2<f64> {
        let p = &self.params;
        let mut d_h = self.net.out.backward(p, cache.last_hidden.view(), d_y, grads.as_deref_mut());
        for (l, c) in self.net.lstms.iter().zip(&cache.lstm).rev() {
            d_h = l.backward(p, c, d_h.view(), grads.as_deref_mut());
        }
        let d_pre = d_h * cache.ff_act.mapv(|a| 1.0 - a * a);
        self.net.ff.backward(p, cache.input.view(), d_pre.view(), grads)
    }

    /// Gradient of a loss w.r.t. the conditioning embedding, from the input gradient.
    pub fn embedding_grad(&self, d_input: &Array2<f64>) -> Option<Vec<f64>> {
        let cfg = &self.meta.config;
        cfg.use_speaker_embedding.then(|| {
            let g = d_input.slice(s![.., cfg.input_dim..]).sum_axis(Axis(0));
            match &self.meta.embedding_stats {
                Some(st) => g.iter().zip(&st.std).map(|(v, sd)| v / sd).collect(),
                None => g.to_vec(),
            }
        })
    }

    /// Converted MCC frames in the original (de-normalized) scale.
    pub fn convert_frames(&self, ppg: ArrayView2<f64>, emb: Option<&[f64]>) -> Result<Array2<f64>> {
        let (y, _) = self.forward_normalized(ppg, emb)?;
        Ok(self.meta.norm_stats.denormalize(&y))
    }

    pub fn forward(&self, ppg: &FeatureSequence, spk: Option<&SpeakerEmbedding>) -> Result<FeatureSequence> {
        if ppg.kind != FeatureKind::Ppg {
            return Err(Error::InvariantViolation(format!(
                "conversion input must be a ppg sequence, got {}",
                ppg.kind.name()
            )));
        }
        let frames = self.convert_frames(ppg.to_f64().view(), spk.map(|e| e.values.as_slice()))?;
        Ok(FeatureSequence::from_f64(FeatureKind::Mcc, &frames, ppg.utterance_id.clone()))
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params_file = format!("{stem}.params");
        let params_path = dir.join(&params_file);
        fs::write(&params_path, self.params.to_archive()).map_err(|e| Error::io(&params_path, e))?;
        let mut meta = self.meta.clone();
        meta.parameter_hash = self.params.hash();
        let text = serde_json::to_string_pretty(&Sidecar { meta, params_file })
            .map_err(|e| Error::Parse(e.to_string()))?;
        let json_path = dir.join(format!("{stem}.json"));
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
        let (net, layout) = Net::build(&meta.config);
        if layout != params.layout {
            return Err(Error::Parse(format!("{}: parameter layout does not match config", path.display())));
        }
        if params.hash() != meta.parameter_hash {
            return Err(Error::Parse(format!("{}: parameter hash mismatch", path.display())));
        }
        if meta.stage == Stage::Adapted && meta.parent_hash.is_none() {
            return Err(Error::Parse(format!("{}: adapted checkpoint without parent link", path.display())));
        }
        Ok(Self { params, meta, net })
    }
}
