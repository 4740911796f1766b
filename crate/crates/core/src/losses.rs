//! Frame-level reconstruction loss, utterance-level cycle consistency loss,
//! and their weighted combination.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::embedder::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;

/// Default weight of the cycle consistency term.
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_cc: f64,
    pub alpha: f64,
    pub l_all: f64,
}

fn check_shapes(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "converted is {:?}, reference is {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::ShapeMismatch("empty sequences".into()));
    }
    Ok(())
}

/// Per-frame squared error summed over coefficients, averaged over frames.
pub fn reconstruction_loss_frames(converted: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    check_shapes(converted, reference)?;
    let total = Zip::from(converted)
        .and(reference)
        .fold(0.0, |acc, &c, &r| acc + (c - r) * (c - r));
    Ok(total / converted.nrows() as f64)
}

/// Gradient of [`reconstruction_loss_frames`] with respect to `converted`.
pub fn reconstruction_grad(converted: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_shapes(converted, reference)?;
    let scale = 2.0 / converted.nrows() as f64;
    Ok((&converted - &reference) * scale)
}

pub fn reconstruction_loss(converted: &FeatureSequence, reference: &FeatureSequence) -> Result<f64> {
    reconstruction_loss_frames(converted.to_f64().view(), reference.to_f64().view())
}

/// Euclidean distance between two embedding vectors.
pub fn embedding_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("speaker embedding", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Gradient of [`embedding_distance`] with respect to `a`. At `a == b` the
/// zero subgradient is returned.
pub fn embedding_distance_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = embedding_distance(a, b)?;
    if d == 0.0 {
        return Ok(vec![0.0; a.len()]);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) / d).collect())
}

pub fn cycle_consistency_loss(s_conv: &SpeakerEmbedding, s_ref: &SpeakerEmbedding) -> Result<f64> {
    embedding_distance(&s_conv.values, &s_ref.values)
}

pub fn joint_loss(l_rec: f64, l_cc: f64, alpha: f64) -> Result<LossBreakdown> {
    for v in [l_rec, l_cc] {
        if v < 0.0 || v.is_nan() {
            return Err(Error::NegativeLossInput(v));
        }
    }
    Ok(LossBreakdown {
        l_rec,
        l_cc,
        alpha,
        l_all: l_rec + alpha * l_cc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn emb(v: Vec<f64>) -> SpeakerEmbedding {
        SpeakerEmbedding::new(v)
    }

    #[test]
    fn reconstruction_examples() {
        let a = Array2::<f64>::zeros((1, 4));
        assert_eq!(reconstruction_loss_frames(a.view(), a.view()).unwrap(), 0.0);
        let b = array![[0.3, -0.4, 0.0, 0.0]];
        let l = reconstruction_loss_frames(b.view(), a.view()).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let c = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            reconstruction_loss_frames(c.view(), a.view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cycle_examples() {
        assert_eq!(cycle_consistency_loss(&emb(vec![1.0, 2.0]), &emb(vec![1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(cycle_consistency_loss(&emb(vec![3.0, 4.0]), &emb(vec![0.0, 0.0])).unwrap(), 5.0);
        assert!(matches!(
            cycle_consistency_loss(&emb(vec![1.0]), &emb(vec![1.0, 2.0])),
            Err(Error::DimMismatch { .. })
        ));
        assert_eq!(embedding_distance_grad(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn joint_examples() {
        let b = joint_loss(1.0, 0.5, DEFAULT_ALPHA).unwrap();
        assert!((b.l_all - 1.1).abs() < 1e-12);
        assert_eq!(joint_loss(3.5, 9.0, 0.0).unwrap().l_all, 3.5);
        assert_eq!(joint_loss(0.0, 0.0, 0.7).unwrap().l_all, 0.0);
        assert!(matches!(joint_loss(-1.0, 0.0, 0.2), Err(Error::NegativeLossInput(_))));
    }

    proptest! {
        #[test]
        fn losses_symmetric_and_nonnegative(
            a in prop::collection::vec(-10.0f64..10.0, 12),
            b in prop::collection::vec(-10.0f64..10.0, 12),
            shift in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let ma = Array2::from_shape_vec((3, 4), a.clone()).unwrap();
            let mb = Array2::from_shape_vec((3, 4), b.clone()).unwrap();
            let l1 = reconstruction_loss_frames(ma.view(), mb.view()).unwrap();
            let l2 = reconstruction_loss_frames(mb.view(), ma.view()).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert_eq!(l1, l2);

            let d1 = embedding_distance(&a, &b).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1, embedding_distance(&b, &a).unwrap());

            // Integer-valued shifts keep the translated differences exact.
            let ai: Vec<f64> = a.iter().map(|v| v.round()).collect();
            let bi: Vec<f64> = b.iter().map(|v| v.round()).collect();
            let si: Vec<f64> = shift.iter().map(|v| v.round()).collect();
            let at: Vec<f64> = ai.iter().zip(&si).map(|(x, s)| x + s).collect();
            let bt: Vec<f64> = bi.iter().zip(&si).map(|(x, s)| x + s).collect();
            prop_assert_eq!(embedding_distance(&ai, &bi).unwrap(), embedding_distance(&at, &bt).unwrap());

            let j = joint_loss(l1, d1, 0.2).unwrap();
            prop_assert!((j.l_all - (j.l_rec + j.alpha * j.l_cc)).abs() <= 1e-12 * j.l_all.abs().max(1.0));
        }
    }
}
