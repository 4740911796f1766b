use ndarray::Array2;
use proptest::prelude::*;
use vcc_core::embedder::SpeakerEmbedding;
use vcc_core::evaluation::{mcd_frames, McdOptions, DB_SCALE};
use vcc_core::losses::*;
use vcc_core::Error;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..12, 1usize..9).prop_flat_map(|(t, d)| (matrix(t, d), matrix(t, d)))
}

fn vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|m| (prop::collection::vec(-5.0f64..5.0, m), prop::collection::vec(-5.0f64..5.0, m)))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn joint_loss_examples() {
    let b = joint_loss(1.0, 0.5, DEFAULT_ALPHA).unwrap();
    assert!((b.l_all - 1.1).abs() < 1e-12);
    assert_eq!(DEFAULT_ALPHA, 0.2);
    assert_eq!(joint_loss(0.0, 0.0, 7.0).unwrap().l_all, 0.0);
    assert!(matches!(joint_loss(-1.0, 0.0, 0.2), Err(Error::NegativeLossInput(_))));
    assert!(matches!(joint_loss(1.0, f64::NAN, 0.2), Err(Error::NegativeLossInput(_))));
}

#[test]
fn mcd_of_half_unit_difference_is_the_db_constant() {
    let a = Array2::from_shape_vec((1, 3), vec![0.0, 0.5, 0.5]).unwrap();
    let b = Array2::zeros((1, 3));
    // c0 excluded by default; the remaining squared difference sums to 0.5.
    let v = mcd_frames(a.view(), b.view(), McdOptions::default()).unwrap();
    assert!((v - 4.342_944_819).abs() < 1e-9);
    assert!((DB_SCALE - 10.0 / std::f64::consts::LN_10).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reconstruction_is_a_symmetric_premetric((a, b) in pair()) {
        let ab = reconstruction_loss_frames(a.view(), b.view()).unwrap();
        let ba = reconstruction_loss_frames(b.view(), a.view()).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(reconstruction_loss_frames(a.view(), a.view()).unwrap(), 0.0);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn cycle_loss_is_a_metric((a, b) in vectors(), shift in -3.0f64..3.0) {
        let sa = SpeakerEmbedding::new(a.clone());
        let sb = SpeakerEmbedding::new(b.clone());
        let d = cycle_consistency_loss(&sa, &sb).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, cycle_consistency_loss(&sb, &sa).unwrap());
        prop_assert_eq!(cycle_consistency_loss(&sa, &sa).unwrap(), 0.0);
        // Translating both embeddings by a constant vector only perturbs the
        // differences by rounding.
        let ta: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let tb: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let dt = embedding_distance(&ta, &tb).unwrap();
        prop_assert!((dt - d).abs() <= 1e-12 * d.max(1.0));
    }

    #[test]
    fn breakdown_is_consistent(l_rec in 0.0f64..100.0, l_cc in 0.0f64..100.0, alpha in 0.0f64..5.0) {
        let b = joint_loss(l_rec, l_cc, alpha).unwrap();
        prop_assert!(rel(b.l_all, b.l_rec + b.alpha * b.l_cc) <= 1e-12 || b.l_all == 0.0);
        prop_assert_eq!(joint_loss(l_rec, l_cc, 0.0).unwrap().l_all, l_rec);
    }

    #[test]
    fn reconstruction_gradient_matches_differences((a, b) in pair(), pick in any::<prop::sample::Index>()) {
        let g = reconstruction_grad(a.view(), b.view()).unwrap();
        let idx = pick.index(a.len());
        let (t, d) = (idx / a.ncols(), idx % a.ncols());
        let h = 1e-5;
        let (mut up, mut down) = (a.clone(), a.clone());
        up[[t, d]] += h;
        down[[t, d]] -= h;
        let fd = (reconstruction_loss_frames(up.view(), b.view()).unwrap()
            - reconstruction_loss_frames(down.view(), b.view()).unwrap()) / (2.0 * h);
        prop_assert!((fd - g[[t, d]]).abs() <= 1e-6 * fd.abs().max(g[[t, d]].abs()).max(1e-3), "fd {} analytic {}", fd, g[[t, d]]);
    }

    #[test]
    fn cycle_gradient_matches_differences((a, b) in vectors(), pick in any::<prop::sample::Index>()) {
        let d0 = embedding_distance(&a, &b).unwrap();
        prop_assume!(d0 > 1e-3);
        let g = embedding_distance_grad(&a, &b).unwrap();
        let i = pick.index(a.len());
        let h = 1e-6;
        let (mut up, mut down) = (a.clone(), a.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (embedding_distance(&up, &b).unwrap() - embedding_distance(&down, &b).unwrap()) / (2.0 * h);
        prop_assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(g[i].abs()).max(1e-3), "fd {} analytic {}", fd, g[i]);
    }

    #[test]
    fn mcd_is_symmetric_and_translation_invariant((a, b) in pair(), c in prop::collection::vec(-3.0f64..3.0, 8)) {
        let opts = McdOptions { include_c0: true, dtw: false };
        let ab = mcd_frames(a.view(), b.view(), opts).unwrap();
        prop_assert!(rel(ab, mcd_frames(b.view(), a.view(), opts).unwrap()) <= 1e-12 || ab == 0.0);
        prop_assert_eq!(mcd_frames(a.view(), a.view(), opts).unwrap(), 0.0);
        let offset = ndarray::Array1::from(c[..a.ncols()].to_vec());
        let (sa, sb) = (&a + &offset, &b + &offset);
        let shifted = mcd_frames(sa.view(), sb.view(), opts).unwrap();
        prop_assert!((shifted - ab).abs() <= 1e-9 * ab.max(1.0));
    }
}

#[test]
fn zero_distance_has_zero_subgradient() {
    let a = vec![1.0, -2.0, 3.0];
    assert_eq!(embedding_distance_grad(&a, &a).unwrap(), vec![0.0; 3]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = Array2::<f64>::zeros((3, 2));
    let b = Array2::<f64>::zeros((3, 3));
    assert!(matches!(reconstruction_loss_frames(a.view(), b.view()), Err(Error::ShapeMismatch(_))));
    assert!(matches!(embedding_distance(&[1.0], &[1.0, 2.0]), Err(Error::DimMismatch { .. })));
}
