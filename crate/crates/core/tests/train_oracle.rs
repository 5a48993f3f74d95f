//! Training-module checks: generator properties, loss closed forms, the
//! schedule shape, and short end-to-end optimization runs.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use spcg::nn::Tape;
use spcg::train::{
    augment, log_csv, loss_bce, loss_combined, loss_mse, manifest_clouds, parse_manifest,
    rate_weight, synth_cloud, synth_dataset, train, CloudKind, Schedule, TrainOptions, TrainTask,
};

#[test]
fn synth_is_deterministic() {
    for kind in CloudKind::ALL {
        let a = synth_cloud(kind, 6, 42).unwrap();
        let b = synth_cloud(kind, 6, 42).unwrap();
        assert_eq!(a.points, b.points, "{}", kind.as_str());
        let c = synth_cloud(kind, 6, 43).unwrap();
        assert_ne!(a.points, c.points, "{}", kind.as_str());
    }
}

#[test]
fn sphere_shell_stays_on_the_shell() {
    // Center and radius are randomized per seed, so recover the center as
    // the centroid and check that the distances form a thin shell.
    let cloud = synth_cloud(CloudKind::SphereShell, 6, 7).unwrap();
    let n = cloud.points.len() as f64;
    let mut c = [0.0f64; 3];
    for p in &cloud.points {
        c[0] += p.x as f64 / n;
        c[1] += p.y as f64 / n;
        c[2] += p.z as f64 / n;
    }
    let mut mean_d = 0.0;
    let mut dists = Vec::new();
    for p in &cloud.points {
        let d = ((p.x as f64 - c[0]).powi(2)
            + (p.y as f64 - c[1]).powi(2)
            + (p.z as f64 - c[2]).powi(2))
        .sqrt();
        mean_d += d / n;
        dists.push(d);
    }
    assert!((19.0..29.0).contains(&mean_d), "mean radius {}", mean_d);
    for d in dists {
        assert!((d - mean_d).abs() <= 2.0, "distance {} vs mean {}", d, mean_d);
    }
}

#[test]
fn line_scan_is_much_sparser_than_sphere_shell() {
    let dense = synth_cloud(CloudKind::SphereShell, 6, 1).unwrap();
    let sparse = synth_cloud(CloudKind::LineScan, 6, 1).unwrap();
    assert!(
        sparse.len() * 4 < dense.len(),
        "line_scan {} vs sphere_shell {}",
        sparse.len(),
        dense.len()
    );
}

#[test]
fn synth_rejects_out_of_range_precision() {
    assert!(synth_cloud(CloudKind::SphereShell, 3, 0).is_err());
    assert!(synth_cloud(CloudKind::SphereShell, 11, 0).is_err());
}

#[test]
fn augment_shrinks_and_stays_in_range() {
    let cloud = synth_cloud(CloudKind::BoxSurface, 6, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let a = augment(&cloud, &mut rng);
        assert!(a.len() <= cloud.len());
        assert!(!a.is_empty());
        let side = 1 << a.n_bits;
        for p in &a.points {
            assert!(p.x >= 0 && p.x < side && p.y >= 0 && p.y < side && p.z >= 0 && p.z < side);
        }
    }
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(augment(&cloud, &mut r1).points, augment(&cloud, &mut r2).points);
}

#[test]
fn bce_closed_forms() {
    assert!((loss_bce(&[0.5], &[true]) - 1.0).abs() < 1e-12);
    assert!((loss_bce(&[0.5], &[false]) - 1.0).abs() < 1e-12);
    assert!(loss_bce(&[1.0], &[true]) < 1e-5);
    assert!(loss_bce(&[0.0], &[false]) < 1e-5);
}

#[test]
fn bce_matches_tape_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probs: Vec<f64> = (0..64).map(|_| rng.gen_range(0.01..0.99)).collect();
    let symbols: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
    let mut tape = Tape::new();
    let p = tape.input(64, 1, probs.clone());
    let l = tape.bce(p, &symbols);
    assert!((tape.scalar(l) - loss_bce(&probs, &symbols)).abs() < 1e-10);
}

#[test]
fn combined_loss_components() {
    let probs = [0.5, 0.9];
    let symbols = [true, true];
    // w = 0 collapses to plain BCE
    let l0 = loss_combined(&probs, &symbols, &[1.5, -2.0], &[1.0], 0.0);
    assert!((l0.total - loss_bce(&probs, &symbols)).abs() < 1e-12);
    // zero latents at b = 1: each symbol costs -log2(1 - exp(-1/2)) bits
    let q = [0.0; 5];
    let l1 = loss_combined(&probs, &symbols, &q, &[1.0], 1.0);
    let per = -(1.0 - (-0.5f64).exp()).log2();
    assert!((per - 1.3456).abs() < 1e-3);
    assert!((l1.feature_rate - 5.0 * per).abs() < 1e-9);
    assert!((l1.total - (l1.bce + l1.feature_rate)).abs() < 1e-12);
    assert!(l1.total >= l1.bce.max(l1.feature_rate));
}

#[test]
fn mse_closed_forms_and_oracle() {
    use spcg::tensor::Coord3;
    let truth = vec![Coord3::new(4, 4, 4), Coord3::new(20, 4, 4)];
    let exact: Vec<[f64; 3]> = truth.iter().map(|c| [c.x as f64, c.y as f64, c.z as f64]).collect();
    assert_eq!(loss_mse(&exact, &truth).unwrap(), 0.0);
    assert!((loss_mse(&[[5.0, 4.0, 4.0]], &truth).unwrap() - 1.0).abs() < 1e-12);
    assert!(loss_mse(&[], &truth).is_err());

    // small jitter keeps the pairing unique, so the value has a closed form
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let truth: Vec<Coord3> = (0..40)
        .map(|i| Coord3::new(4 * i, (7 * i) % 64, (11 * i) % 64))
        .collect();
    let mut expect = 0.0;
    let adjusted: Vec<[f64; 3]> = truth
        .iter()
        .map(|c| {
            let d: [f64; 3] = [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ];
            expect += d.iter().map(|v| v * v).sum::<f64>();
            [c.x as f64 + d[0], c.y as f64 + d[1], c.z as f64 + d[2]]
        })
        .collect();
    expect /= truth.len() as f64;
    assert!((loss_mse(&adjusted, &truth).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn schedule_shape() {
    let s = Schedule::default();
    let total = 100;
    assert!((s.lr_at(0, total) - 8e-4).abs() < 1e-15);
    assert!((s.lr_at(total - 1, total) - 2e-5).abs() < 1e-15);
    for t in 1..total {
        assert!(s.lr_at(t, total) < s.lr_at(t - 1, total));
    }
    assert_eq!(rate_weight(0, 99), 0.0);
    assert_eq!(rate_weight(50, 99), 1.0);
    assert!(rate_weight(16, 99) > 0.0 && rate_weight(16, 99) < 1.0);
}

#[test]
fn manifest_parsing() {
    let text = "# comment\nsphere_shell 6 1\n\nline_scan 5 99\n";
    let rows = parse_manifest(text).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], (CloudKind::SphereShell, 6, 1));
    assert_eq!(rows[1], (CloudKind::LineScan, 5, 99));
    assert!(parse_manifest("mystery_shape 6 1\n").is_err());
    assert!(parse_manifest("sphere_shell 6\n").is_err());
    let clouds = manifest_clouds(text).unwrap();
    assert_eq!(clouds[0].points, synth_cloud(CloudKind::SphereShell, 6, 1).unwrap().points);
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = synth_dataset(CloudKind::SphereShell, 2, 4, 0).unwrap();
    let sched = Schedule {
        epochs: 0,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 5,
        ..Default::default()
    };
    let (models, log) = train(TrainTask::OneStage, &data, &sched, &opts).unwrap();
    assert!(log.is_empty());
    // the initializer draws from the same stream the trainer seeds
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fresh = spcg::nn::Network::new(spcg::nn::ArchId::OneStageSopa, 3, 8, 1, 0).unwrap();
    fresh.init(&mut rng);
    assert_eq!(models.occupancy.unwrap().checksum(), fresh.checksum());
}

#[test]
fn training_reduces_bce() {
    let data = synth_dataset(CloudKind::SphereShell, 12, 5, 100).unwrap();
    let sched = Schedule {
        epochs: 3,
        batch: 4,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 1,
        ..Default::default()
    };
    let (_, log) = train(TrainTask::OneStage, &data, &sched, &opts).unwrap();
    assert_eq!(log.len(), 3);
    assert!(
        log[2].bce < log[0].bce,
        "bce did not improve: {} -> {}",
        log[0].bce,
        log[2].bce
    );
    let csv = log_csv(&log);
    assert!(csv.starts_with("epoch,bce,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn multistage_training_reduces_bce() {
    let data = synth_dataset(CloudKind::BoxSurface, 8, 5, 200).unwrap();
    let sched = Schedule {
        epochs: 3,
        batch: 4,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 2,
        ..Default::default()
    };
    let (models, log) = train(TrainTask::EightStage, &data, &sched, &opts).unwrap();
    assert!(log[2].bce < log[0].bce);
    assert_eq!(
        models.occupancy.unwrap().arch,
        spcg::nn::ArchId::MultistageSopa8
    );
}

#[test]
fn slne_training_runs_and_improves() {
    let data = synth_dataset(CloudKind::SphereShell, 8, 5, 300).unwrap();
    let sched = Schedule {
        epochs: 3,
        batch: 4,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 3,
        ..Default::default()
    };
    let (models, log) = train(TrainTask::SlneOneStage, &data, &sched, &opts).unwrap();
    assert!(models.slne_enc.is_some() && models.slne_dec.is_some() && models.slne_sopa.is_some());
    assert!(log.iter().all(|e| e.bce.is_finite() && e.feature_rate.is_finite()));
    assert!(log[2].bce < log[0].bce, "{} -> {}", log[0].bce, log[2].bce);
}

#[test]
fn position_training_reduces_mse() {
    let data = synth_dataset(CloudKind::LineScan, 8, 5, 400).unwrap();
    let sched = Schedule {
        epochs: 4,
        batch: 4,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 4,
        ..Default::default()
    };
    let (models, log) = train(TrainTask::Position, &data, &sched, &opts).unwrap();
    assert!(models.position.is_some());
    assert!(
        log.last().unwrap().mse < log[0].mse,
        "{} -> {}",
        log[0].mse,
        log.last().unwrap().mse
    );
}

#[test]
fn training_is_deterministic() {
    let data = synth_dataset(CloudKind::PlanePatch, 4, 4, 500).unwrap();
    let sched = Schedule {
        epochs: 2,
        batch: 2,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 6,
        ..Default::default()
    };
    let (a, la) = train(TrainTask::OneStage, &data, &sched, &opts).unwrap();
    let (b, lb) = train(TrainTask::OneStage, &data, &sched, &opts).unwrap();
    assert_eq!(
        a.occupancy.unwrap().checksum(),
        b.occupancy.unwrap().checksum()
    );
    assert_eq!(log_csv(&la), log_csv(&lb));
}
