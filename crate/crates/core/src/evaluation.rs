//! Objective metrics: mel-cepstral distortion between converted and natural
//! MCCs, and cycle-consistency distance between their speaker embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversion::ConversionCheckpoint;
use crate::embedder::EmbedderCheckpoint;
use crate::error::{Error, Result};
use crate::features::{Corpus, FeatureSequence, Split};
use crate::losses::embedding_distance;
use crate::runtime::{convert_utterance, SpeakerProfile};

/// 10 / ln(10), the dB scaling of the cepstral distance.
pub const DB_SCALE: f64 = 4.342_944_819_032_518;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McdOptions {
    /// Include the energy coefficient c0 in the distance.
    pub include_c0: bool,
    /// Align frames by dynamic time warping before averaging.
    pub dtw: bool,
}

fn frame_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    DB_SCALE * (2.0 * sq).sqrt()
}

/// Frame index pairs of the minimum-cost monotone alignment between two
/// sequences, using Euclidean local cost and unit steps.
pub fn dtw_path(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let local = |i: usize, j: usize| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = local(i, j);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = c + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        // Prefer the diagonal on ties so paths stay short.
        let mut next = (i, j);
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 {
            best = acc[(i - 1) * m + j - 1];
            next = (i - 1, j - 1);
        }
        if i > 0 && acc[(i - 1) * m + j] < best {
            best = acc[(i - 1) * m + j];
            next = (i - 1, j);
        }
        if j > 0 && acc[i * m + j - 1] < best {
            next = (i, j - 1);
        }
        (i, j) = next;
        path.push(next);
    }
    path.reverse();
    path
}

/// Mean per-frame MCD in dB between two MCC matrices.
pub fn mcd_frames(converted: ArrayView2<f64>, reference: ArrayView2<f64>, opts: McdOptions) -> Result<f64> {
    if converted.ncols() != reference.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "converted has {} coefficients, reference has {}",
            converted.ncols(),
            reference.ncols()
        )));
    }
    if !opts.dtw && converted.nrows() != reference.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "converted has {} frames, reference has {}; enable DTW to align them",
            converted.nrows(),
            reference.nrows()
        )));
    }
    let first = usize::from(!opts.include_c0);
    if converted.nrows() == 0 || reference.nrows() == 0 || converted.ncols() <= first {
        return Err(Error::EmptyOverlap);
    }
    let a = converted.slice(s![.., first..]);
    let b = reference.slice(s![.., first..]);
    let pairs: Vec<(usize, usize)> = if opts.dtw {
        dtw_path(a, b)
    } else {
        (0..a.nrows()).map(|t| (t, t)).collect()
    };
    let total: f64 = pairs.iter().map(|&(i, j)| frame_distance(a.row(i), b.row(j))).sum();
    Ok(total / pairs.len() as f64)
}

pub fn mcd(converted: &FeatureSequence, reference: &FeatureSequence, opts: McdOptions) -> Result<f64> {
    mcd_frames(converted.to_f64().view(), reference.to_f64().view(), opts)
}

/// Distance between the embeddings of converted and reference MCCs.
pub fn ccd(converted: &FeatureSequence, reference: &FeatureSequence, embedder: &EmbedderCheckpoint) -> Result<f64> {
    let a = embedder.embed(converted)?;
    let b = embedder.embed(reference)?;
    embedding_distance(&a.values, &b.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub source_speaker: String,
    pub target_speaker: String,
    pub mcd_db: f64,
    pub ccd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub per_utterance: Vec<UtteranceScore>,
    pub average_mcd: f64,
    pub average_ccd: f64,
    pub n_utterances: usize,
}

impl EvalReport {
    pub fn from_scores(system: impl Into<String>, per_utterance: Vec<UtteranceScore>) -> Self {
        let n = per_utterance.len();
        let avg = |f: fn(&UtteranceScore) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                per_utterance.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            system: system.into(),
            average_mcd: avg(|u| u.mcd_db),
            average_ccd: avg(|u| u.ccd),
            n_utterances: n,
            per_utterance,
        }
    }

    /// Pools the rows of several reports (e.g. one per target speaker).
    pub fn merge(system: impl Into<String>, parts: impl IntoIterator<Item = EvalReport>) -> Self {
        let rows = parts.into_iter().flat_map(|r| r.per_utterance).collect();
        Self::from_scores(system, rows)
    }
}

/// Converts every eval utterance of every non-target speaker toward the
/// target and scores it against the target's parallel recording.
///
/// `profiles` must contain each source speaker and the target. Eval
/// utterances are paired by their `content` key.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_system(
    eval: &Corpus,
    model: &ConversionCheckpoint,
    measurement: &EmbedderCheckpoint,
    profiles: &BTreeMap<String, SpeakerProfile>,
    target: &str,
    system: &str,
    opts: McdOptions,
    allow_average: bool,
) -> Result<EvalReport> {
    let tgt = profiles
        .get(target)
        .ok_or_else(|| Error::UnknownSpeaker {
            utterance: "<profile>".into(),
            speaker: target.into(),
        })?;
    let mut references = BTreeMap::new();
    for u in eval.select(Split::Eval, Some(target)) {
        if let Some(key) = &u.record.content {
            references.insert(key.clone(), u);
        }
    }
    let sources: Vec<_> = eval
        .select(Split::Eval, None)
        .into_iter()
        .filter(|u| u.record.speaker != target)
        .collect();
    if sources.is_empty() {
        return Err(Error::DegenerateCorpus(format!("no eval utterances to convert toward {target}")));
    }
    let rows: Vec<UtteranceScore> = sources
        .par_iter()
        .map(|u| {
            let reference = u
                .record
                .content
                .as_ref()
                .and_then(|k| references.get(k))
                .ok_or_else(|| Error::MissingReference(u.record.id.clone()))?;
            let src = profiles.get(&u.record.speaker).ok_or_else(|| Error::UnknownSpeaker {
                utterance: u.record.id.clone(),
                speaker: u.record.speaker.clone(),
            })?;
            let out = convert_utterance(&u.ppg, &u.lf0, src, tgt, model, allow_average)?;
            Ok(UtteranceScore {
                utterance_id: u.record.id.clone(),
                source_speaker: u.record.speaker.clone(),
                target_speaker: target.into(),
                mcd_db: mcd(&out.mcc, &reference.mcc, opts)?,
                ccd: ccd(&out.mcc, &reference.mcc, measurement)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_scores(system, rows))
}

/// Fixed-width summary with one row per system.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.system.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}  {:>5}", "system", "MCD [dB]", "CCD", "n");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.3}  {:>7.4}  {:>5}",
            r.system, r.average_mcd, r.average_ccd, r.n_utterances
        );
    }
    out
}

/// Per-utterance rows of all reports as CSV.
pub fn format_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("system,utterance_id,source_speaker,target_speaker,mcd_db,ccd\n");
    for r in reports {
        for u in &r.per_utterance {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.system, u.utterance_id, u.source_speaker, u.target_speaker, u.mcd_db, u.ccd
            );
        }
    }
    out
}

/// Writes `report.json`, `report.txt` and `per_utterance.csv` into `dir`.
pub fn write_reports(reports: &[EvalReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Parse(e.to_string()))?;
    for (name, body) in [
        ("report.json", json + "\n"),
        ("report.txt", format_table(reports)),
        ("per_utterance.csv", format_csv(reports)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
