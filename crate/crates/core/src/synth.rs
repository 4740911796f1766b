//! Synthetic multi-speaker corpora with known speaker structure.
//!
//! Each frame's content is a point on the PPG simplex drawn from a symmetric
//! Dirichlet(0.5). Speaker `s` renders content through a fixed affine map,
//! `mcc = A_s c + b_s + noise`, where `A_s` and `b_s` are a shared base map
//! plus a speaker deviation scaled by `speaker_map_scale`. Log-f0 frames are
//! Gaussian per speaker, with a fraction of frames marked unvoiced.
//!
//! Eval utterances are parallel: the k-th eval utterance of every speaker
//! renders the same content sequence, tagged with content key `eval_kkk`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    write_feature_file, Corpus, CorpusManifest, FeatureKind, FeatureSequence, Split, UtteranceRecord, UNVOICED,
};

pub const DIRICHLET_CONCENTRATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub corpus_name: String,
    pub n_speakers: usize,
    /// The last `n_targets` speakers are adaptation targets; they contribute
    /// adapt and eval utterances but nothing to the train split.
    pub n_targets: usize,
    pub utterances_per_speaker: usize,
    /// Inclusive frame-count range per utterance.
    pub frames_per_utterance: (usize, usize),
    pub ppg_dim: usize,
    pub mcc_dim: usize,
    pub speaker_map_scale: f64,
    pub noise_std: f64,
    pub lf0_mean_range: (f64, f64),
    pub lf0_std_range: (f64, f64),
    pub unvoiced_fraction: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            corpus_name: "synthetic".into(),
            n_speakers: 6,
            n_targets: 2,
            utterances_per_speaker: 40,
            frames_per_utterance: (100, 200),
            ppg_dim: 16,
            mcc_dim: 20,
            speaker_map_scale: 0.5,
            noise_std: 0.3,
            lf0_mean_range: (4.4, 5.6),
            lf0_std_range: (0.1, 0.3),
            unvoiced_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_speakers < 2 {
            return bad("n_speakers must be at least 2");
        }
        if self.n_targets >= self.n_speakers || self.n_speakers - self.n_targets < 2 {
            return bad("need at least two non-target speakers for average-model training");
        }
        if self.utterances_per_speaker < 2 {
            return bad("utterances_per_speaker must be at least 2");
        }
        let (lo, hi) = self.frames_per_utterance;
        if lo == 0 || lo > hi {
            return bad("frames_per_utterance must be a non-empty positive range");
        }
        if self.ppg_dim < 2 || self.mcc_dim < 1 {
            return bad("ppg_dim must be >= 2 and mcc_dim >= 1");
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad("noise_std must be finite and non-negative");
        }
        if self.speaker_map_scale.is_nan() || self.speaker_map_scale < 0.0 {
            return bad("speaker_map_scale must be non-negative");
        }
        for (name, (a, b)) in [("lf0_mean_range", self.lf0_mean_range), ("lf0_std_range", self.lf0_std_range)] {
            if !a.is_finite() || !b.is_finite() || a >= b {
                return Err(Error::InvalidConfig(format!("{name} must satisfy low < high")));
            }
        }
        if self.lf0_std_range.0 <= 0.0 {
            return bad("lf0_std_range must be positive");
        }
        if !(0.0..1.0).contains(&self.unvoiced_fraction) {
            return bad("unvoiced_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// `(eval, adapt)` utterance counts per target speaker: 20/50 when there
    /// are at least 70 utterances, otherwise scaled to the same proportion.
    pub fn split_counts(&self) -> (usize, usize) {
        let u = self.utterances_per_speaker;
        if u >= 70 {
            (20, 50)
        } else {
            let eval = ((u as f64 * 20.0 / 70.0).round() as usize).clamp(1, u - 1);
            (eval, u - eval)
        }
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        (0..self.n_speakers).map(|i| format!("spk{i:02}")).collect()
    }

    pub fn is_target(&self, index: usize) -> bool {
        index >= self.n_speakers - self.n_targets
    }
}

/// Ground-truth generative parameters of one speaker.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub map: Array2<f64>,
    pub bias: Array1<f64>,
    pub lf0_mean: f64,
    pub lf0_std: f64,
}

impl SpeakerModel {
    pub fn render(&self, content: &Array2<f64>) -> Array2<f64> {
        content.dot(&self.map.t()) + &self.bias
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let n = Normal::new(0.0, std.max(0.0)).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Draws the speaker maps; the base map is shared, deviations are per speaker.
pub fn draw_speakers<R: Rng>(cfg: &SynthesisConfig, rng: &mut R) -> Vec<SpeakerModel> {
    let base_map = gaussian_matrix(cfg.mcc_dim, cfg.ppg_dim, 1.0, rng);
    let base_bias = gaussian_matrix(1, cfg.mcc_dim, 1.0, rng).row(0).to_owned();
    (0..cfg.n_speakers)
        .map(|_| {
            let map = &base_map + &gaussian_matrix(cfg.mcc_dim, cfg.ppg_dim, cfg.speaker_map_scale, rng);
            let bias = &base_bias + &gaussian_matrix(1, cfg.mcc_dim, cfg.speaker_map_scale, rng).row(0);
            let lf0_mean = rng.random_range(cfg.lf0_mean_range.0..cfg.lf0_mean_range.1);
            let lf0_std = rng.random_range(cfg.lf0_std_range.0..cfg.lf0_std_range.1);
            SpeakerModel {
                map,
                bias,
                lf0_mean,
                lf0_std,
            }
        })
        .collect()
}

/// `frames` rows drawn from a symmetric Dirichlet on the `dim`-simplex.
pub fn draw_content<R: Rng>(frames: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let gamma = Gamma::new(DIRICHLET_CONCENTRATION, 1.0).expect("valid gamma");
    let mut out = Array2::zeros((frames, dim));
    for mut row in out.outer_iter_mut() {
        loop {
            for v in row.iter_mut() {
                *v = gamma.sample(rng);
            }
            let s = row.sum();
            if s > 0.0 {
                row /= s;
                break;
            }
        }
    }
    out
}

/// Rounds to f32 and renormalizes so rows sum to one in the stored precision.
fn to_ppg_frames(content: &Array2<f64>) -> Array2<f32> {
    let mut out = content.mapv(|v| v as f32);
    for mut row in out.outer_iter_mut() {
        let s: f32 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

struct Writer<'a> {
    root: &'a Path,
    records: Vec<UtteranceRecord>,
}

impl Writer<'_> {
    #[allow(clippy::too_many_arguments)]
    fn write(
        &mut self,
        id: String,
        speaker: &str,
        split: Split,
        content_key: Option<String>,
        ppg: Array2<f32>,
        mcc: Array2<f64>,
        lf0: Array2<f32>,
    ) -> Result<()> {
        let frames = ppg.nrows();
        let rel = |ext: &str| PathBuf::from("features").join(format!("{id}.{ext}"));
        let (ppg_rel, mcc_rel, lf0_rel) = (rel("ppg"), rel("mcc"), rel("lf0"));
        write_feature_file(&FeatureSequence::new(FeatureKind::Ppg, ppg, id.clone()), self.root.join(&ppg_rel))?;
        write_feature_file(&FeatureSequence::from_f64(FeatureKind::Mcc, &mcc, id.clone()), self.root.join(&mcc_rel))?;
        write_feature_file(&FeatureSequence::new(FeatureKind::Lf0, lf0, id.clone()), self.root.join(&lf0_rel))?;
        self.records.push(UtteranceRecord {
            id,
            speaker: speaker.to_string(),
            ppg: ppg_rel,
            mcc: mcc_rel,
            lf0: lf0_rel,
            frames,
            split,
            content: content_key,
        });
        Ok(())
    }
}

fn draw_lf0<R: Rng>(frames: usize, spk: &SpeakerModel, unvoiced: f64, rng: &mut R) -> Array2<f32> {
    let n = Normal::new(spk.lf0_mean, spk.lf0_std).expect("valid lf0 distribution");
    Array2::from_shape_fn((frames, 1), |_| {
        if rng.random::<f64>() < unvoiced {
            UNVOICED
        } else {
            n.sample(rng) as f32
        }
    })
}

/// Writes a corpus under `out_dir` (`manifest.json` plus `features/`) and
/// returns its manifest. Output bytes depend only on `cfg`.
pub fn generate(cfg: &SynthesisConfig, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    cfg.validate()?;
    let root = out_dir.as_ref();
    let features = root.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speakers = draw_speakers(cfg, &mut rng);
    let (n_eval, n_adapt) = cfg.split_counts();
    let (lo, hi) = cfg.frames_per_utterance;
    let eval_content: Vec<Array2<f64>> = (0..n_eval)
        .map(|_| {
            let t = rng.random_range(lo..=hi);
            draw_content(t, cfg.ppg_dim, &mut rng)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");

    let ids = cfg.speaker_ids();
    let mut writer = Writer {
        root,
        records: Vec::new(),
    };
    for (si, (spk_id, spk)) in ids.iter().zip(&speakers).enumerate() {
        let (own_split, n_own) = if cfg.is_target(si) {
            (Split::Adapt, n_adapt)
        } else {
            (Split::Train, cfg.utterances_per_speaker - n_eval)
        };
        let render = |content: &Array2<f64>, rng: &mut ChaCha8Rng| {
            let mut mcc = spk.render(content);
            mcc.mapv_inplace(|v| v + noise.sample(rng));
            let lf0 = draw_lf0(content.nrows(), spk, cfg.unvoiced_fraction, rng);
            (to_ppg_frames(content), mcc, lf0)
        };
        for k in 0..n_own {
            let t = rng.random_range(lo..=hi);
            let content = draw_content(t, cfg.ppg_dim, &mut rng);
            let (ppg, mcc, lf0) = render(&content, &mut rng);
            let split_name = if own_split == Split::Adapt { "adapt" } else { "train" };
            writer.write(format!("{spk_id}_{split_name}_{k:03}"), spk_id, own_split, None, ppg, mcc, lf0)?;
        }
        for (k, content) in eval_content.iter().enumerate() {
            let (ppg, mcc, lf0) = render(content, &mut rng);
            writer.write(
                format!("{spk_id}_eval_{k:03}"),
                spk_id,
                Split::Eval,
                Some(format!("eval_{k:03}")),
                ppg,
                mcc,
                lf0,
            )?;
        }
    }

    let manifest = CorpusManifest {
        corpus_name: cfg.corpus_name.clone(),
        speakers: ids,
        utterances: writer.records,
        root: root.to_path_buf(),
    };
    manifest.save(root.join("manifest.json"))?;
    Ok(manifest)
}

/// Ratio of mean inter-speaker to mean intra-speaker Euclidean distance
/// between per-utterance mean MCC vectors.
pub fn speaker_separation_score(corpus: &Corpus) -> Result<f64> {
    let mut means: Vec<(&str, Array1<f64>)> = Vec::new();
    for rec in &corpus.manifest.utterances {
        let u = &corpus.utterances[&rec.id];
        let m = u.mcc.to_f64().mean_axis(ndarray::Axis(0)).expect("non-empty");
        means.push((rec.speaker.as_str(), m));
    }
    let speakers: Vec<&str> = corpus.manifest.speakers.iter().map(String::as_str).collect();
    if speakers.len() < 2 {
        return Err(Error::DegenerateCorpus("separation score needs two speakers".into()));
    }
    for s in &speakers {
        let n = means.iter().filter(|(spk, _)| spk == s).count();
        if n < 2 {
            return Err(Error::DegenerateCorpus(format!("speaker {s} has {n} utterances, need 2")));
        }
    }
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = (&means[i].1 - &means[j].1).mapv(|v| v * v).sum().sqrt();
            if means[i].0 == means[j].0 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    if intra == 0.0 {
        return Ok(if inter == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(inter / intra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_scale() {
        let mut c = SynthesisConfig::default();
        assert_eq!(c.split_counts(), (11, 29));
        c.utterances_per_speaker = 100;
        assert_eq!(c.split_counts(), (20, 50));
        c.utterances_per_speaker = 2;
        assert_eq!(c.split_counts(), (1, 1));
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn invalid_configs() {
        let mut c = SynthesisConfig::default();
        c.n_speakers = 1;
        assert!(c.validate().is_err());
        let mut c = SynthesisConfig::default();
        c.noise_std = -1.0;
        assert!(c.validate().is_err());
        let mut c = SynthesisConfig::default();
        c.lf0_std_range = (0.3, 0.3);
        assert!(c.validate().is_err());
        let mut c = SynthesisConfig::default();
        c.n_targets = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn content_rows_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = draw_content(50, 16, &mut rng);
        for row in c.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let f = to_ppg_frames(&c);
        for row in f.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn noiseless_render_is_a_function_of_content() {
        let cfg = SynthesisConfig {
            noise_std: 0.0,
            ..SynthesisConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spk = &draw_speakers(&cfg, &mut rng)[0];
        let content = draw_content(5, cfg.ppg_dim, &mut rng);
        assert_eq!(spk.render(&content), spk.render(&content.clone()));
    }
}
