//! Run-time conversion: source PPG to target MCC through an adapted model,
//! plus mean/variance matching of log-f0 between speaker profiles.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conversion::{ConversionCheckpoint, Stage};
use crate::embedder::{EmbedderCheckpoint, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::features::{write_feature_file, Corpus, FeatureKind, FeatureSequence, UNVOICED};
use crate::training::mean_embedding;

/// Voiced frames needed before a profile's statistics are trusted.
pub const MIN_VOICED_FRAMES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Mean log-f0 over voiced frames.
    pub lf0_mean: f64,
    pub lf0_std: f64,
    pub n_stat_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl SpeakerProfile {
    pub fn reference_embedding(&self) -> Option<SpeakerEmbedding> {
        self.embedding.clone().map(SpeakerEmbedding::new)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if p.lf0_std.is_nan() || p.lf0_std <= 0.0 {
            return Err(Error::InvariantViolation(format!("{}: lf0_std must be positive", path.display())));
        }
        Ok(p)
    }
}

/// Voiced log-f0 values of a sequence, widened to f64.
pub fn voiced_values(lf0: &FeatureSequence) -> impl Iterator<Item = f64> + '_ {
    lf0.frames
        .iter()
        .copied()
        .filter(|&v| FeatureSequence::is_voiced(v))
        .map(f64::from)
}

/// Mean and sample standard deviation of a set of log-f0 values.
pub fn lf0_statistics(values: impl IntoIterator<Item = f64>) -> Result<(f64, f64, usize)> {
    let v: Vec<f64> = values.into_iter().collect();
    if v.len() < MIN_VOICED_FRAMES {
        return Err(Error::InsufficientVoicedFrames {
            found: v.len(),
            min: MIN_VOICED_FRAMES,
        });
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if std.is_nan() || std <= 0.0 {
        return Err(Error::InvariantViolation("log-f0 has zero variance".into()));
    }
    Ok((mean, std, v.len()))
}

/// Profile from every utterance in `slice`, which must hold a single speaker.
/// With `with_embedding`, the reference embedding is the mean embedding of
/// the slice's natural MCCs.
pub fn build_profile(slice: &Corpus, embedder: Option<&EmbedderCheckpoint>, with_embedding: bool) -> Result<SpeakerProfile> {
    let speakers = &slice.manifest.speakers;
    if speakers.len() > 1 {
        return Err(Error::MultipleSpeakers(speakers.clone()));
    }
    let speaker_id = speakers
        .first()
        .cloned()
        .ok_or_else(|| Error::DegenerateCorpus("profile slice has no utterances".into()))?;
    let (lf0_mean, lf0_std, n) = lf0_statistics(slice.utterances.values().flat_map(|u| voiced_values(&u.lf0)))?;
    let embedding = if with_embedding {
        let emb = embedder.ok_or_else(|| Error::MissingEmbedder(format!("profile of {speaker_id}")))?;
        let ids: Vec<String> = slice.manifest.utterances.iter().map(|r| r.id.clone()).collect();
        Some(mean_embedding(emb, slice, &ids)?.values)
    } else {
        None
    };
    Ok(SpeakerProfile {
        speaker_id,
        lf0_mean,
        lf0_std,
        n_stat_frames: n,
        embedding,
    })
}

/// Mean/variance matching of one voiced log-f0 value.
pub fn transform_log_f0(x: f64, src: &SpeakerProfile, tgt: &SpeakerProfile) -> f64 {
    (x - src.lf0_mean) * (tgt.lf0_std / src.lf0_std) + tgt.lf0_mean
}

/// Applies [`transform_log_f0`] to voiced frames; unvoiced frames are copied.
pub fn convert_f0(lf0: &FeatureSequence, src: &SpeakerProfile, tgt: &SpeakerProfile) -> FeatureSequence {
    let frames = lf0.frames.mapv(|v| {
        if FeatureSequence::is_voiced(v) {
            transform_log_f0(f64::from(v), src, tgt) as f32
        } else {
            UNVOICED
        }
    });
    FeatureSequence {
        frames,
        ..lf0.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedUtterance {
    pub mcc: FeatureSequence,
    pub lf0: FeatureSequence,
}

impl ConvertedUtterance {
    /// Writes `<id>.mcc` and `<id>.lf0` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mcc = dir.join(format!("{}.mcc", self.mcc.utterance_id));
        let lf0 = dir.join(format!("{}.lf0", self.lf0.utterance_id));
        write_feature_file(&self.mcc, &mcc)?;
        write_feature_file(&self.lf0, &lf0)?;
        Ok((mcc, lf0))
    }
}

/// Converts one utterance toward `tgt`. Average-stage checkpoints are
/// rejected unless `allow_average` is set, in which case a warning is logged.
pub fn convert_utterance(
    ppg: &FeatureSequence,
    lf0: &FeatureSequence,
    src: &SpeakerProfile,
    tgt: &SpeakerProfile,
    model: &ConversionCheckpoint,
    allow_average: bool,
) -> Result<ConvertedUtterance> {
    if model.meta.stage == Stage::Average {
        if !allow_average {
            return Err(Error::AverageCheckpoint);
        }
        log::warn!("converting {} with an average (non-adapted) checkpoint", ppg.utterance_id);
    }
    if lf0.kind != FeatureKind::Lf0 {
        return Err(Error::InvariantViolation(format!("expected lf0 sequence, got {}", lf0.kind.name())));
    }
    if ppg.len() != lf0.len() {
        return Err(Error::ShapeMismatch(format!(
            "ppg has {} frames, lf0 has {}",
            ppg.len(),
            lf0.len()
        )));
    }
    let conditioning = if model.config().use_speaker_embedding {
        Some(tgt.reference_embedding().ok_or(Error::MissingEmbedding)?)
    } else {
        None
    };
    let mcc = model.forward(ppg, conditioning.as_ref())?;
    Ok(ConvertedUtterance {
        mcc,
        lf0: convert_f0(lf0, src, tgt),
    })
}

/// Convenience for callers holding f64 contours (no f32 rounding).
pub fn transform_contour(values: &Array2<f64>, src: &SpeakerProfile, tgt: &SpeakerProfile) -> Array2<f64> {
    values.mapv(|v| {
        if v == f64::from(UNVOICED) {
            v
        } else {
            transform_log_f0(v, src, tgt)
        }
    })
}
