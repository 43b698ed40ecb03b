mod common;

use std::collections::BTreeSet;

use carm_core::anatomy::{canonical_skeleton, generate_patients, split_patients, units_to_mm, LandmarkId, LANDMARKS};
use carm_core::conformal::{calibrate, score_estimates, CalibrationPolicy};
use carm_core::eval::{evaluate, prcp};
use carm_core::losses::{skeleton_pose_loss, Vec3s};
use carm_core::regressor::{Architecture, McdEstimate, Regressor};
use carm_core::rng;
use carm_core::sampler::{build_dataset, AugmentationConfig, AugmentationLevel, ObservationModel, Pose};
use carm_core::tensor::{draw_dropout_masks, Matrix, Mlp};
use proptest::prelude::*;
use rand::Rng as _;

fn level() -> impl Strategy<Value = AugmentationLevel> {
    prop::sample::select(AugmentationLevel::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_partition_the_cohort(n in 10usize..120, seed in any::<u64>()) {
        let patients = generate_patients(&canonical_skeleton(), n, seed);
        let s = split_patients(&patients, seed).unwrap();
        let ids: Vec<u64> = s.train.iter().chain(&s.calibration).chain(&s.test).map(|p| p.id).collect();
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(unique, (0..n as u64).collect::<BTreeSet<_>>());
        prop_assert_eq!(s.calibration.len(), s.test.len());
    }

    #[test]
    fn axial_landmarks_keep_their_vertical_order(seed in any::<u64>()) {
        let p = &generate_patients(&canonical_skeleton(), 1, seed)[0];
        let y = |id: LandmarkId| p.position(id)[1];
        prop_assert!(y(LandmarkId::SKULL) < y(LandmarkId::T1));
        prop_assert!(y(LandmarkId::T1) < y(LandmarkId::CARINA));
        prop_assert!(y(LandmarkId::CARINA) < y(LandmarkId::T12));
    }

    #[test]
    fn samples_stay_in_the_unit_cube_and_reconstruct_exactly(seed in any::<u64>(), lvl in level()) {
        let patients = generate_patients(&canonical_skeleton(), 3, seed);
        let ds = build_dataset(&patients, 20, &AugmentationConfig::from_level(lvl), &ObservationModel::default(), seed)
            .unwrap();
        for s in &ds {
            prop_assert!(s.pose.is_in_unit_cube());
            for k in 0..LANDMARKS {
                let p = s.true_position(k);
                prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                let t = s.targets[k];
                prop_assert_eq!([s.pose.x + t[0], s.pose.y + t[1], s.pose.z + t[2]], p);
            }
        }
        if lvl == AugmentationLevel::None {
            for s in &ds {
                let patient = &patients[s.patient_id as usize];
                for k in 0..LANDMARKS {
                    prop_assert_eq!(s.true_position(k), patient.landmark_positions[k]);
                }
            }
        }
    }

    #[test]
    fn skeleton_loss_is_translation_invariant(seed in any::<u64>(), shift in prop::array::uniform3(-0.25f64..0.25)) {
        let g = canonical_skeleton();
        let mut r = rng::stream(seed, "prop", 0);
        let truth: Vec3s<f64> = std::array::from_fn(|k| g.canonical_positions[k]);
        let pred: Vec3s<f64> = truth.map(|p| p.map(|v| v + r.random_range(-0.05..0.05)));
        let moved = pred.map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]);
        let a = skeleton_pose_loss(&pred, &truth, &g).value;
        let b = skeleton_pose_loss(&moved, &truth, &g).value;
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn quantiles_are_monotone_in_alpha(seed in any::<u64>(), n in 34usize..300) {
        let mut r = rng::stream(seed, "prop", 1);
        let scores: Vec<Vec<f64>> = (0..LANDMARKS).map(|_| (0..n).map(|_| r.random_range(0.0..5.0)).collect()).collect();
        let table = calibrate(&scores, &[0.3, 0.1, 0.05, 0.03], CalibrationPolicy::RequireFinite).unwrap();
        for q in &table.quantiles {
            prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn gradient_checks_hold(seed in any::<u64>()) {
        prop_assert!(common::mlp_instance(seed) < common::TOL);
        prop_assert!(common::nll_instance(seed) < common::TOL);
        prop_assert!(common::skeleton_instance(seed) < common::TOL);
    }

    #[test]
    fn prcp_ignores_sample_order(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "prop", 2);
        let mut draw = |n: usize| {
            let est: Vec<McdEstimate<f64>> = (0..n)
                .map(|_| McdEstimate::certain([[0.0; 3]; LANDMARKS], [[r.random_range(0.5..2.0); 3]; LANDMARKS]))
                .collect();
            let truth: Vec<Vec3s<f64>> = (0..n)
                .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))))
                .collect();
            (est, truth)
        };
        let (ce, ct) = draw(60);
        let table = calibrate(&score_estimates(&ce, &ct).unwrap(), &[0.1, 0.05], CalibrationPolicy::RequireFinite).unwrap();
        let (mut te, mut tt) = draw(80);
        let before = prcp(&te, &tt, &table).unwrap();
        te.reverse();
        tt.reverse();
        let rot = r.random_range(0..80);
        te.rotate_left(rot);
        tt.rotate_left(rot);
        prop_assert_eq!(before, prcp(&te, &tt, &table).unwrap());
    }
}

/// 42 coordinates are tested at once: at most two may sit outside
/// `3 sigma / sqrt(N)` (expected 0.11), none outside `4 sigma / sqrt(N)`.
#[test]
fn jitter_is_unbiased_for_every_landmark() {
    let g = canonical_skeleton();
    let n = 4000;
    let patients = generate_patients(&g, n, 31);
    let mut outside_3 = Vec::new();
    for k in 0..LANDMARKS {
        let se = g.per_landmark_sigma[k] / (n as f64).sqrt();
        for a in 0..3 {
            let mean = patients.iter().map(|p| p.landmark_positions[k][a]).sum::<f64>() / n as f64;
            let z = (mean - g.canonical_positions[k][a]) / se;
            assert!(z.abs() < 4.0, "landmark {} axis {a}: z = {z}", k + 1);
            if z.abs() >= 3.0 {
                outside_3.push((k + 1, a, z));
            }
        }
    }
    assert!(outside_3.len() <= 2, "{outside_3:?}");
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let mut r = rng::stream(5, "dropout-expectation", 0);
    let net = Mlp::<f64>::new(&[6, 10, 3], false, &mut r).unwrap();
    let x = Matrix::from_vec(1, 6, (0..6).map(|_| r.random_range(-1.0..1.0)).collect());
    // the output layer is linear, so E[out] over masks is the unmasked output
    let (plain, _) = net.forward(&x, None).unwrap();
    let n = 20_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let masks = draw_dropout_masks::<f64>(&net.dropout_widths(), 0.3, &mut r).unwrap();
        let (out, _) = net.forward(&x, Some(&masks)).unwrap();
        for j in 0..3 {
            sum[j] += out.get(0, j);
            sq[j] += out.get(0, j) * out.get(0, j);
        }
    }
    for j in 0..3 {
        let mean = sum[j] / n as f64;
        let sd = (sq[j] / n as f64 - mean * mean).sqrt();
        let tol = 3.0 * sd / (n as f64).sqrt();
        assert!(
            (mean - plain.get(0, j)).abs() < tol,
            "output {j}: {mean} vs {}",
            plain.get(0, j)
        );
    }
}

#[test]
fn forward_and_backward_are_pure() {
    let mut r = rng::stream(6, "pure", 0);
    let net = Mlp::<f64>::new(&[4, 8, 2], false, &mut r).unwrap();
    let x = Matrix::from_vec(2, 4, (0..8).map(|_| r.random_range(-1.0..1.0)).collect());
    let masks = draw_dropout_masks::<f64>(&net.dropout_widths(), 0.5, &mut r).unwrap();
    let (a, ta) = net.forward(&x, Some(&masks)).unwrap();
    let (b, tb) = net.forward(&x, Some(&masks)).unwrap();
    assert_eq!(a, b);
    let g = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
    assert_eq!(net.backward(&ta, &g).unwrap(), net.backward(&tb, &g).unwrap());
}

#[test]
fn median_epistemic_grows_with_dropout_rate() {
    let model = Regressor::<f64>::new(Architecture::default(), &mut rng::stream(8, "init", 0)).unwrap();
    let patients = generate_patients(&canonical_skeleton(), 4, 8);
    let ds = build_dataset(
        &patients,
        25,
        &AugmentationConfig::none(),
        &ObservationModel::default(),
        8,
    )
    .unwrap();
    let median = |p: f64| {
        let stream = rng::SeedStream::new(8, "mcd");
        let inputs: Vec<(&[f64], Pose)> = ds.iter().map(|s| (s.observation.as_slice(), s.pose)).collect();
        let est = model.mcd_predict_many(&inputs, 20, p, &stream).unwrap();
        let mut v: Vec<f64> = est
            .iter()
            .map(|e| e.epistemic.iter().flatten().sum::<f64>() / (3 * LANDMARKS) as f64)
            .collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let m: Vec<f64> = [0.0, 0.1, 0.3, 0.5].iter().map(|&p| median(p)).collect();
    assert_eq!(m[0], 0.0);
    assert!(m.windows(2).all(|w| w[0] <= w[1]), "{m:?}");
}

#[test]
fn reported_millimetres_are_exact_multiples() {
    let mut r = rng::stream(9, "mm", 0);
    let est: Vec<McdEstimate<f64>> = (0..50)
        .map(|_| {
            McdEstimate::certain(
                std::array::from_fn(|_| std::array::from_fn(|_| r.random_range(-0.2..0.2))),
                [[0.01; 3]; LANDMARKS],
            )
        })
        .collect();
    let truth: Vec<Vec3s<f64>> = vec![[[0.0; 3]; LANDMARKS]; 50];
    let table = calibrate(
        &score_estimates(&est, &truth).unwrap(),
        &[0.1],
        CalibrationPolicy::RequireFinite,
    )
    .unwrap();
    let rep = evaluate(&est, &truth, &table).unwrap();
    assert_eq!(rep.distance_mm.overall, rep.distance.overall * 1800.0);
    for k in 0..LANDMARKS {
        assert_eq!(
            rep.distance_mm.per_landmark[k],
            units_to_mm(rep.distance.per_landmark[k])
        );
    }
}
