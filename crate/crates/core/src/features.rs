//! Feature sequences, the `VCF1` binary feature file, and corpus manifests.
//!
//! Layout of a feature file (all integers and reals little-endian):
//!
//! | bytes      | content                                |
//! |------------|----------------------------------------|
//! | 0..4       | magic `VCF1`                           |
//! | 4..8       | `u32` frame count `T`                  |
//! | 8..12      | `u32` dimension `D`                    |
//! | 12..16     | `u32` kind code (0 = PPG, 1 = MCC, 2 = LF0) |
//! | 16..       | `T * D` `f32` values, frame-major      |
//!
//! Unvoiced log-f0 frames hold [`UNVOICED`] rather than NaN so that files
//! compare bit-exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VCF1";
pub const HEADER_BYTES: usize = 16;
pub const DEFAULT_PPG_DIM: usize = 42;
pub const DEFAULT_MCC_DIM: usize = 40;
pub const DEFAULT_FRAME_SHIFT_MS: f64 = 5.0;
/// Log-f0 value marking a frame without pitch.
pub const UNVOICED: f32 = -1e10;
pub const PPG_SUM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Ppg,
    Mcc,
    Lf0,
}

impl FeatureKind {
    pub fn code(self) -> u32 {
        match self {
            FeatureKind::Ppg => 0,
            FeatureKind::Mcc => 1,
            FeatureKind::Lf0 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Ppg),
            1 => Some(FeatureKind::Mcc),
            2 => Some(FeatureKind::Lf0),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Ppg => "ppg",
            FeatureKind::Mcc => "mcc",
            FeatureKind::Lf0 => "lf0",
        }
    }
}

/// Dimension expectations applied when reading or validating sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatOptions {
    /// Reject PPG/MCC files whose dimension differs from the configured one.
    pub strict_dims: bool,
    pub ppg_dim: usize,
    pub mcc_dim: usize,
}

impl Default for FormatOptions {
    fn default() -> Self {
        Self {
            strict_dims: true,
            ppg_dim: DEFAULT_PPG_DIM,
            mcc_dim: DEFAULT_MCC_DIM,
        }
    }
}

impl FormatOptions {
    pub fn with_dims(ppg_dim: usize, mcc_dim: usize) -> Self {
        Self {
            strict_dims: true,
            ppg_dim,
            mcc_dim,
        }
    }

    pub fn lenient() -> Self {
        Self {
            strict_dims: false,
            ..Self::default()
        }
    }
}

/// A `T x D` matrix of one feature kind for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub kind: FeatureKind,
    pub frames: Array2<f32>,
    pub frame_shift_ms: f64,
    pub utterance_id: String,
}

impl FeatureSequence {
    pub fn new(kind: FeatureKind, frames: Array2<f32>, utterance_id: impl Into<String>) -> Self {
        Self {
            kind,
            frames,
            frame_shift_ms: DEFAULT_FRAME_SHIFT_MS,
            utterance_id: utterance_id.into(),
        }
    }

    pub fn from_f64(kind: FeatureKind, frames: &Array2<f64>, utterance_id: impl Into<String>) -> Self {
        Self::new(kind, frames.mapv(|v| v as f32), utterance_id)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }

    pub fn is_voiced(value: f32) -> bool {
        value != UNVOICED
    }

    /// Checks the kind-specific invariants.
    pub fn validate(&self, opts: &FormatOptions) -> Result<()> {
        let (t, d) = self.frames.dim();
        if t == 0 || d == 0 {
            return Err(Error::InvariantViolation(format!(
                "{}: empty {} sequence ({t}x{d})",
                self.utterance_id,
                self.kind.name()
            )));
        }
        for ((frame, dim), v) in self.frames.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { frame, dim });
            }
        }
        match self.kind {
            FeatureKind::Ppg => {
                if opts.strict_dims && d != opts.ppg_dim {
                    return Err(Error::dim("ppg dimension", opts.ppg_dim, d));
                }
                for (t, row) in self.frames.outer_iter().enumerate() {
                    check_simplex_row(&self.utterance_id, t, row)?;
                }
            }
            FeatureKind::Mcc => {
                if opts.strict_dims && d != opts.mcc_dim {
                    return Err(Error::dim("mcc dimension", opts.mcc_dim, d));
                }
            }
            FeatureKind::Lf0 => {
                if d != 1 {
                    return Err(Error::dim("lf0 dimension", 1, d));
                }
            }
        }
        Ok(())
    }
}

fn check_simplex_row(id: &str, t: usize, row: ArrayView1<f32>) -> Result<()> {
    let mut sum = 0.0f64;
    for &v in row {
        if v < 0.0 {
            return Err(Error::InvariantViolation(format!(
                "{id}: negative posterior {v} at frame {t}"
            )));
        }
        sum += f64::from(v);
    }
    if (sum - 1.0).abs() > f64::from(PPG_SUM_TOLERANCE) {
        return Err(Error::InvariantViolation(format!(
            "{id}: posterior row {t} sums to {sum}"
        )));
    }
    Ok(())
}

/// Serializes a sequence into the `VCF1` byte layout.
pub fn encode_feature(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let (t, d) = seq.frames.dim();
    if t == 0 || d == 0 {
        return Err(Error::InvariantViolation(format!(
            "refusing to write empty sequence {} ({t}x{d})",
            seq.utterance_id
        )));
    }
    let to_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvariantViolation(format!("dimension {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * t * d);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&to_u32(t)?.to_le_bytes());
    out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    out.extend_from_slice(&seq.kind.code().to_le_bytes());
    for v in seq.frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses `VCF1` bytes; `path` is used for error messages and the utterance id.
pub fn decode_feature(bytes: &[u8], path: &Path, opts: &FormatOptions) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_BYTES {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(bad_magic(bytes, path));
        }
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: HEADER_BYTES,
            found: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(bad_magic(bytes, path));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let t = word(4) as usize;
    let d = word(8) as usize;
    let kind = FeatureKind::from_code(word(12))
        .ok_or_else(|| Error::Parse(format!("{}: unknown kind code {}", path.display(), word(12))))?;
    let expected = HEADER_BYTES + 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    let frames = Array2::from_shape_vec((t, d), values)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let seq = FeatureSequence::new(kind, frames, id);
    seq.validate(opts)?;
    Ok(seq)
}

fn bad_magic(bytes: &[u8], path: &Path) -> Error {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    Error::BadMagic {
        path: path.to_path_buf(),
        found,
    }
}

/// Reads a feature file with the default (strict, 42/40-dim) options.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    read_feature_file_with(path, &FormatOptions::default())
}

pub fn read_feature_file_with(path: impl AsRef<Path>, opts: &FormatOptions) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature(&bytes, path, opts)
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Adapt,
    Eval,
}

/// One utterance entry as it appears in the manifest JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub ppg: PathBuf,
    pub mcc: PathBuf,
    pub lf0: PathBuf,
    pub frames: usize,
    pub split: Split,
    /// Shared key for utterances rendering the same content latents
    /// (parallel sentences across speakers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub corpus_name: String,
    pub speakers: Vec<String>,
    pub utterances: Vec<UtteranceRecord>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn utterances_of<'a>(
        &'a self,
        speaker: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a UtteranceRecord> + 'a {
        self.utterances
            .iter()
            .filter(move |u| u.speaker == speaker && u.split == split)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> + '_ {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Speakers (in manifest order) that own at least one utterance in `split`.
    pub fn speakers_in(&self, split: Split) -> Vec<String> {
        self.speakers
            .iter()
            .filter(|s| self.utterances_of(s, split).next().is_some())
            .cloned()
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn check_structure(&self) -> Result<()> {
        let speakers: HashSet<&str> = self.speakers.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Parse(format!("duplicate utterance id {}", u.id)));
            }
            if !speakers.contains(u.speaker.as_str()) {
                return Err(Error::UnknownSpeaker {
                    utterance: u.id.clone(),
                    speaker: u.speaker.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Features of one utterance, kept in memory after validation.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub ppg: FeatureSequence,
    pub mcc: FeatureSequence,
    pub lf0: FeatureSequence,
}

/// A validated manifest together with all of its feature data.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: BTreeMap<String, Utterance>,
    pub ppg_dim: usize,
    pub mcc_dim: usize,
}

impl Corpus {
    pub fn load(path: impl AsRef<Path>, opts: &FormatOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(manifest, opts)
    }

    pub fn from_manifest(manifest: CorpusManifest, opts: &FormatOptions) -> Result<Self> {
        manifest.check_structure()?;
        let mut utterances = BTreeMap::new();
        let mut dims: Option<(usize, usize)> = None;
        for rec in &manifest.utterances {
            let load = |p: &Path, kind: FeatureKind| -> Result<FeatureSequence> {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingFile {
                        utterance: rec.id.clone(),
                        path: full,
                    });
                }
                let seq = read_feature_file_with(&full, opts)?;
                if seq.kind != kind {
                    return Err(Error::Parse(format!(
                        "{}: expected {} file, found {}",
                        full.display(),
                        kind.name(),
                        seq.kind.name()
                    )));
                }
                if seq.len() != rec.frames {
                    return Err(Error::FrameCountMismatch {
                        utterance: rec.id.clone(),
                        kind: kind.name(),
                        expected: rec.frames,
                        found: seq.len(),
                    });
                }
                Ok(FeatureSequence {
                    utterance_id: rec.id.clone(),
                    ..seq
                })
            };
            let ppg = load(&rec.ppg, FeatureKind::Ppg)?;
            let mcc = load(&rec.mcc, FeatureKind::Mcc)?;
            let lf0 = load(&rec.lf0, FeatureKind::Lf0)?;
            let these = (ppg.dim(), mcc.dim());
            match dims {
                None => dims = Some(these),
                Some(d) if d != these => {
                    return Err(Error::ShapeMismatch(format!(
                        "utterance {} has ppg/mcc dims {these:?}, corpus uses {d:?}",
                        rec.id
                    )))
                }
                _ => {}
            }
            utterances.insert(
                rec.id.clone(),
                Utterance {
                    record: rec.clone(),
                    ppg,
                    mcc,
                    lf0,
                },
            );
        }
        let (ppg_dim, mcc_dim) = dims.ok_or_else(|| Error::DegenerateCorpus("manifest has no utterances".into()))?;
        Ok(Self {
            manifest,
            utterances,
            ppg_dim,
            mcc_dim,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.get(id)
    }

    /// Utterances of `split` in manifest order, optionally restricted to one speaker.
    pub fn select(&self, split: Split, speaker: Option<&str>) -> Vec<&Utterance> {
        self.manifest
            .utterances
            .iter()
            .filter(|r| r.split == split && speaker.is_none_or(|s| r.speaker == s))
            .map(|r| &self.utterances[&r.id])
            .collect()
    }

    /// A corpus holding only the utterances accepted by `keep`; the speaker
    /// list shrinks to speakers that still own utterances.
    pub fn subset(&self, keep: impl Fn(&UtteranceRecord) -> bool) -> Corpus {
        let records: Vec<UtteranceRecord> = self.manifest.utterances.iter().filter(|r| keep(r)).cloned().collect();
        let speakers = self
            .manifest
            .speakers
            .iter()
            .filter(|s| records.iter().any(|r| &r.speaker == *s))
            .cloned()
            .collect();
        let utterances = records
            .iter()
            .map(|r| (r.id.clone(), self.utterances[&r.id].clone()))
            .collect();
        Corpus {
            manifest: CorpusManifest {
                corpus_name: self.manifest.corpus_name.clone(),
                speakers,
                utterances: records,
                root: self.manifest.root.clone(),
            },
            utterances,
            ppg_dim: self.ppg_dim,
            mcc_dim: self.mcc_dim,
        }
    }

    /// One speaker's utterances in one split.
    pub fn speaker_split(&self, speaker: &str, split: Split) -> Corpus {
        self.subset(|r| r.speaker == speaker && r.split == split)
    }

    /// Content hash over the manifest and every feature payload.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for rec in &self.manifest.utterances {
            let u = &self.utterances[&rec.id];
            h.update(rec.id.as_bytes());
            h.update(rec.speaker.as_bytes());
            for seq in [&u.ppg, &u.mcc, &u.lf0] {
                if let Ok(bytes) = encode_feature(seq) {
                    h.update(&bytes);
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Loads and fully validates a manifest (every referenced file is read).
pub fn load_manifest(path: impl AsRef<Path>, opts: &FormatOptions) -> Result<CorpusManifest> {
    Corpus::load(path, opts).map(|c| c.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mcc(t: usize, d: usize) -> FeatureSequence {
        let frames = Array2::from_shape_fn((t, d), |(i, j)| (i as f32) * 0.5 - (j as f32) * 0.25);
        FeatureSequence::new(FeatureKind::Mcc, frames, "u")
    }

    #[test]
    fn lf0_single_frame_layout() {
        let seq = FeatureSequence::new(FeatureKind::Lf0, array![[5.0f32]], "x");
        let bytes = encode_feature(&seq).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"VCF1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &5.0f32.to_le_bytes());
    }

    #[test]
    fn empty_sequence_rejected() {
        let seq = FeatureSequence::new(FeatureKind::Mcc, Array2::zeros((0, 40)), "x");
        assert!(matches!(encode_feature(&seq), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode_feature(&mcc(3, 40)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_feature(&bytes, Path::new("a.vcf"), &FormatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found, .. } if &found == b"XXXX"));
    }

    #[test]
    fn truncated_payload_detected() {
        let bytes = encode_feature(&mcc(3, 40)).unwrap();
        let err = decode_feature(&bytes[..bytes.len() - 1], Path::new("a"), &FormatOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::TruncatedPayload { .. }));
    }

    #[test]
    fn strict_dims_toggle() {
        let bytes = encode_feature(&mcc(2, 20)).unwrap();
        let err = decode_feature(&bytes, Path::new("a"), &FormatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 40, found: 20, .. }));
        assert!(decode_feature(&bytes, Path::new("a"), &FormatOptions::lenient()).is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        let mut seq = mcc(2, 40);
        seq.frames[[1, 3]] = f32::NAN;
        let bytes = encode_feature(&seq).unwrap();
        let err = decode_feature(&bytes, Path::new("a"), &FormatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { frame: 1, dim: 3 }));
    }

    #[test]
    fn ppg_rows_must_sum_to_one() {
        let seq = FeatureSequence::new(FeatureKind::Ppg, array![[0.5f32, 0.4]], "p");
        assert!(seq.validate(&FormatOptions::lenient()).is_err());
        let seq = FeatureSequence::new(FeatureKind::Ppg, array![[0.5f32, 0.5]], "p");
        assert!(seq.validate(&FormatOptions::lenient()).is_ok());
    }

    #[test]
    fn unvoiced_sentinel_survives() {
        let seq = FeatureSequence::new(FeatureKind::Lf0, array![[UNVOICED], [4.9]], "f");
        let back = decode_feature(&encode_feature(&seq).unwrap(), Path::new("f"), &FormatOptions::default()).unwrap();
        assert_eq!(back.frames, seq.frames);
        assert!(!FeatureSequence::is_voiced(back.frames[[0, 0]]));
    }
}
