use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcc_core::experiment::hash_tree;
use vcc_core::features::{Corpus, FormatOptions, Split};
use vcc_core::runtime::voiced_values;
use vcc_core::synth::*;

fn load(cfg: &SynthesisConfig, dir: &Path) -> Corpus {
    generate(cfg, dir).unwrap();
    Corpus::load(dir.join("manifest.json"), &FormatOptions::with_dims(cfg.ppg_dim, cfg.mcc_dim)).unwrap()
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

#[test]
fn same_seed_same_bytes() {
    let cfg = SynthesisConfig {
        utterances_per_speaker: 10,
        ..SynthesisConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&cfg, a.path()).unwrap();
    generate(&cfg, b.path()).unwrap();
    assert_eq!(hash_tree(a.path()).unwrap(), hash_tree(b.path()).unwrap());
    let c = tempfile::tempdir().unwrap();
    generate(&SynthesisConfig { seed: 8, ..cfg }, c.path()).unwrap();
    assert_ne!(hash_tree(a.path()).unwrap(), hash_tree(c.path()).unwrap());
}

#[test]
fn per_speaker_least_squares_recovers_noise_level() {
    // PPG rows sum to one, so the affine map is linear in the PPG and an
    // intercept-free regression is exact up to noise.
    let cfg = SynthesisConfig {
        n_speakers: 4,
        n_targets: 1,
        utterances_per_speaker: 30,
        frames_per_utterance: (100, 100),
        ppg_dim: 16,
        mcc_dim: 20,
        ..SynthesisConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let corpus = load(&cfg, dir.path());
    for spk in &corpus.manifest.speakers {
        let utts: Vec<_> = corpus.utterances.values().filter(|u| &u.record.speaker == spk).collect();
        let p = cfg.ppg_dim;
        let mut xtx = vec![vec![0.0; p]; p];
        let mut xty = vec![vec![0.0; p]; cfg.mcc_dim];
        for u in &utts {
            for (x, y) in u.ppg.frames.outer_iter().zip(u.mcc.frames.outer_iter()) {
                for i in 0..p {
                    for j in 0..p {
                        xtx[i][j] += f64::from(x[i]) * f64::from(x[j]);
                    }
                    for (d, row) in xty.iter_mut().enumerate() {
                        row[i] += f64::from(x[i]) * f64::from(y[d]);
                    }
                }
            }
        }
        let coef: Vec<Vec<f64>> = xty.into_iter().map(|b| solve(xtx.clone(), b)).collect();
        let (mut ss, mut n) = (0.0, 0usize);
        for u in &utts {
            for (x, y) in u.ppg.frames.outer_iter().zip(u.mcc.frames.outer_iter()) {
                for (d, c) in coef.iter().enumerate() {
                    let pred: f64 = c.iter().zip(x.iter()).map(|(a, v)| a * f64::from(*v)).sum();
                    ss += (f64::from(y[d]) - pred).powi(2);
                    n += 1;
                }
            }
        }
        let rms = (ss / n as f64).sqrt();
        assert!(rms <= cfg.noise_std * 1.1, "{spk}: residual {rms}");
        assert!(rms >= cfg.noise_std * 0.9, "{spk}: residual {rms} suspiciously small");
    }
}

#[test]
fn default_corpus_is_separable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = load(&SynthesisConfig::default(), dir.path());
    let score = speaker_separation_score(&corpus).unwrap();
    assert!(score > 2.0, "separation {score}");
}

#[test]
fn far_biases_separate_strongly() {
    let cfg = SynthesisConfig {
        n_speakers: 2,
        n_targets: 0,
        utterances_per_speaker: 10,
        speaker_map_scale: 30.0,
        noise_std: 0.0,
        ..SynthesisConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let score = speaker_separation_score(&load(&cfg, dir.path())).unwrap();
    assert!(score > 20.0, "separation {score}");
}

#[test]
fn duplicated_speaker_scores_about_one() {
    let cfg = SynthesisConfig {
        n_speakers: 2,
        n_targets: 0,
        utterances_per_speaker: 60,
        noise_std: 0.0,
        ..SynthesisConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let corpus = load(&cfg, dir.path());
    let mut one = corpus.subset(|r| r.speaker == "spk00");
    for (i, r) in one.manifest.utterances.iter_mut().enumerate() {
        if i % 2 == 1 {
            r.speaker = "spk00_copy".into();
        }
    }
    one.manifest.speakers.push("spk00_copy".into());
    let score = speaker_separation_score(&one).unwrap();
    assert!((score - 1.0).abs() < 0.1, "separation {score}");
}

#[test]
fn single_utterance_speaker_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = load(&SynthesisConfig::default(), dir.path());
    let thin = corpus.subset(|r| r.speaker != "spk00" || r.id == "spk00_train_000");
    assert!(speaker_separation_score(&thin).is_err());
}

#[test]
fn splits_follow_target_layout() {
    let cfg = SynthesisConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let corpus = load(&cfg, dir.path());
    let (n_eval, n_adapt) = cfg.split_counts();
    assert_eq!((n_eval, n_adapt), (11, 29));
    for (i, spk) in cfg.speaker_ids().iter().enumerate() {
        let count = |s| corpus.select(s, Some(spk)).len();
        assert_eq!(count(Split::Eval), n_eval);
        if cfg.is_target(i) {
            assert_eq!((count(Split::Adapt), count(Split::Train)), (n_adapt, 0));
        } else {
            assert_eq!((count(Split::Adapt), count(Split::Train)), (0, cfg.utterances_per_speaker - n_eval));
        }
    }
    // Eval utterances are parallel: same content key, same PPG, across speakers.
    let a = corpus.get("spk00_eval_003").unwrap();
    let b = corpus.get("spk05_eval_003").unwrap();
    assert_eq!(a.record.content, b.record.content);
    assert_eq!(a.ppg.frames, b.ppg.frames);
    assert_ne!(a.mcc.frames, b.mcc.frames);
}

#[test]
fn lf0_statistics_match_drawn_parameters() {
    let cfg = SynthesisConfig {
        n_speakers: 3,
        n_targets: 1,
        utterances_per_speaker: 20,
        ..SynthesisConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let corpus = load(&cfg, dir.path());
    let models = draw_speakers(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    for (spk, model) in cfg.speaker_ids().iter().zip(&models) {
        let v: Vec<f64> = corpus
            .utterances
            .values()
            .filter(|u| &u.record.speaker == spk)
            .flat_map(|u| voiced_values(&u.lf0).collect::<Vec<_>>())
            .collect();
        let n = v.len() as f64;
        assert!(n >= 1000.0);
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se_mean = model.lf0_std / n.sqrt();
        assert!((mean - model.lf0_mean).abs() < 3.0 * se_mean, "{spk} mean");
        // Standard error of the sample std under normality.
        let se_std = model.lf0_std / (2.0 * (n - 1.0)).sqrt();
        assert!((var.sqrt() - model.lf0_std).abs() < 3.0 * se_std, "{spk} std");
    }
}
