//! End-to-end bitstream checks: lossless identity under arbitrary weights,
//! rate accounting, determinism, and corruption handling.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use spcg::codec::{
    decode, encode, rate_report, Bitstream, ChunkKind, CodecConfig, CodecMode, LosslessArch,
    ModelSet,
};
use spcg::nn::{ArchId, Network};
use spcg::ply::PointCloud;
use spcg::tensor::Coord3;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, n_bits: u32) -> PointCloud {
    let side = 1 << n_bits;
    let points: Vec<Coord3> = (0..n)
        .map(|_| {
            Coord3::new(
                rng.gen_range(0..side),
                rng.gen_range(0..side),
                rng.gen_range(0..side),
            )
        })
        .collect();
    PointCloud::from_points(points, n_bits).unwrap()
}

fn model_set(seed: u64) -> ModelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |arch, k, c, c_in, c_lat| {
        let mut net = Network::new(arch, k, c, c_in, c_lat).unwrap();
        net.init(&mut rng);
        net
    };
    ModelSet {
        occupancy: Some(mk(ArchId::MultistageSopa8, 3, 8, 1, 0)),
        slne_enc: Some(mk(ArchId::SlneEncoder, 3, 8, 1, 4)),
        slne_dec: Some(mk(ArchId::SlneDecoder, 3, 8, 4, 4)),
        slne_sopa: Some(mk(ArchId::OneStageSopa, 3, 8, 8, 0)),
        refine: Some(mk(ArchId::OneStageSopa, 3, 8, 1, 0)),
        position: Some(mk(ArchId::SopaPosition, 3, 8, 1, 0)),
    }
}

fn model_set_for(arch: LosslessArch, seed: u64) -> ModelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ_arch = match arch {
        LosslessArch::OneStage | LosslessArch::SlneOneStage => ArchId::OneStageSopa,
        LosslessArch::ThreeStage => ArchId::MultistageSopa3,
        LosslessArch::EightStage => ArchId::MultistageSopa8,
    };
    let mut mk = |arch, c_in, c_lat| {
        let mut net = Network::new(arch, 3, 8, c_in, c_lat).unwrap();
        net.init(&mut rng);
        net
    };
    ModelSet {
        occupancy: Some(mk(occ_arch, 1, 0)),
        slne_enc: Some(mk(ArchId::SlneEncoder, 1, 4)),
        slne_dec: Some(mk(ArchId::SlneDecoder, 4, 4)),
        slne_sopa: Some(mk(ArchId::OneStageSopa, 8, 0)),
        refine: None,
        position: None,
    }
}

#[test]
fn lossless_round_trip_all_arches_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for arch in [
        LosslessArch::OneStage,
        LosslessArch::ThreeStage,
        LosslessArch::EightStage,
        LosslessArch::SlneOneStage,
    ] {
        let models = model_set_for(arch, 100 + arch as u64);
        for trial in 0..3 {
            let n_bits = rng.gen_range(3..=5);
            let n_points = rng.gen_range(1..80);
            let cloud = random_cloud(&mut rng, n_points, n_bits);
            let cfg = CodecConfig::lossless(n_bits, arch);
            let (bs, _) = encode(&cloud, &cfg, &models).unwrap();
            let out = decode(&bs, &models).unwrap();
            assert_eq!(out.points, cloud.points, "{:?} trial {}", arch, trial);
        }
    }
}

#[test]
fn lossless_single_point_minimal() {
    let cloud = PointCloud::from_points(vec![Coord3::new(0, 0, 0)], 1).unwrap();
    let models = model_set_for(LosslessArch::EightStage, 9);
    let cfg = CodecConfig::lossless(1, LosslessArch::EightStage);
    let (bs, report) = encode(&cloud, &cfg, &models).unwrap();
    assert_eq!(report.entries.len(), 1);
    assert_eq!(report.entries[0].symbols, 8);
    let out = decode(&bs, &models).unwrap();
    assert_eq!(out.points, cloud.points);
}

#[test]
fn per_scale_bits_track_model_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let models = model_set_for(LosslessArch::EightStage, 18);
    for _ in 0..5 {
        let cloud = random_cloud(&mut rng, 200, 5);
        let cfg = CodecConfig::lossless(5, LosslessArch::EightStage);
        let (_, report) = encode(&cloud, &cfg, &models).unwrap();
        for e in &report.entries {
            assert!(
                (e.payload_bits as f64 - e.ideal_bits).abs() <= 64.0,
                "scale {}: coded {} ideal {}",
                e.scale,
                e.payload_bits,
                e.ideal_bits
            );
        }
    }
}

#[test]
fn untrained_bpp_is_one_bit_per_candidate() {
    // Zero weights make every probability exactly 1/2, so the occupancy
    // payload must be one bit per MP-POV up to coder termination.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cloud = random_cloud(&mut rng, 500, 8);
    let models = ModelSet {
        occupancy: Some(Network::new(ArchId::MultistageSopa8, 3, 8, 1, 0).unwrap()),
        ..Default::default()
    };
    let cfg = CodecConfig::lossless(8, LosslessArch::EightStage);
    let (bs, report) = encode(&cloud, &cfg, &models).unwrap();
    let pyramid = spcg::codec::build_pyramid(&cloud).unwrap();
    for e in &report.entries {
        let candidates = 8 * pyramid[(e.scale - 1) as usize].len() as u64;
        assert_eq!(e.symbols, candidates);
        assert!(
            (e.payload_bits as f64 - candidates as f64).abs() <= 64.0,
            "scale {}: {} bits for {} candidates",
            e.scale,
            e.payload_bits,
            candidates
        );
    }
    let out = decode(&bs, &models).unwrap();
    assert_eq!(out.points, cloud.points);
}

#[test]
fn encode_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cloud = random_cloud(&mut rng, 150, 5);
    let models = model_set_for(LosslessArch::SlneOneStage, 32);
    let cfg = CodecConfig::lossless(5, LosslessArch::SlneOneStage);
    let a = encode(&cloud, &cfg, &models).unwrap().0.to_bytes();
    let b = encode(&cloud, &cfg, &models).unwrap().0.to_bytes();
    assert_eq!(a, b);
}

#[test]
fn serialization_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cloud = random_cloud(&mut rng, 60, 4);
    let models = model_set_for(LosslessArch::EightStage, 42);
    let cfg = CodecConfig::lossless(4, LosslessArch::EightStage);
    let (bs, _) = encode(&cloud, &cfg, &models).unwrap();
    let bytes = bs.to_bytes();
    let back = Bitstream::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    // tamper with one payload byte
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    assert!(Bitstream::from_bytes(&bad).is_err());

    // truncation never panics
    for cut in [0, 3, 8, bytes.len() - 1] {
        assert!(Bitstream::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn decode_rejects_wrong_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let cloud = random_cloud(&mut rng, 60, 4);
    let models = model_set_for(LosslessArch::EightStage, 52);
    let cfg = CodecConfig::lossless(4, LosslessArch::EightStage);
    let (bs, _) = encode(&cloud, &cfg, &models).unwrap();
    let other = model_set_for(LosslessArch::EightStage, 53);
    let err = decode(&bs, &other).unwrap_err();
    assert!(err.to_string().contains("model mismatch"));
}

#[test]
fn lossy_dense_counts_and_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let models = model_set(62);
    let cloud = random_cloud(&mut rng, 300, 6);
    let pyramid = spcg::codec::build_pyramid(&cloud).unwrap();
    let cfg = CodecConfig {
        mode: CodecMode::LossyDense,
        n_bits: 6,
        m: 3,
        arch: LosslessArch::EightStage,
    };
    let (bs, _) = encode(&cloud, &cfg, &models).unwrap();
    // chunk inventory: occupancy for scales 1..=3, feature+occupancy at 4,
    // counts at 5 and 6
    let kinds: Vec<(u32, ChunkKind)> = bs.chunks.iter().map(|c| (c.scale, c.kind)).collect();
    assert_eq!(
        kinds,
        vec![
            (1, ChunkKind::Occupancy),
            (2, ChunkKind::Occupancy),
            (3, ChunkKind::Occupancy),
            (4, ChunkKind::Feature),
            (4, ChunkKind::Occupancy),
            (5, ChunkKind::Count),
            (6, ChunkKind::Count),
        ]
    );
    let out = decode(&bs, &models).unwrap();
    // output size equals the transmitted final count
    let final_count = bs.chunks.last().unwrap().count as usize;
    assert_eq!(out.points.len(), final_count);
    assert_eq!(final_count, pyramid[6].len().min(8 * (bs.chunks[5].count as usize)));

    // encoder's own reconstruction is reproduced exactly by the decoder
    let (bs2, _) = encode(&cloud, &cfg, &models).unwrap();
    assert_eq!(bs.to_bytes(), bs2.to_bytes());
}

#[test]
fn lossy_sparse_preserves_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let models = model_set(72);
    let cloud = random_cloud(&mut rng, 200, 6);
    let pyramid = spcg::codec::build_pyramid(&cloud).unwrap();
    let cfg = CodecConfig {
        mode: CodecMode::LossySparse,
        n_bits: 6,
        m: 4,
        arch: LosslessArch::EightStage,
    };
    let (bs, _) = encode(&cloud, &cfg, &models).unwrap();
    let out = decode(&bs, &models).unwrap();
    // one reconstructed point per scale-m POV; duplicates merge only in
    // canonicalization and are visible through original_count
    assert_eq!(out.original_count, pyramid[4].len());
    assert!(out.points.len() <= pyramid[4].len());
    assert!(!out.points.is_empty());
}

#[test]
fn rate_report_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let cloud = random_cloud(&mut rng, 120, 5);
    let models = model_set_for(LosslessArch::EightStage, 82);
    let cfg = CodecConfig::lossless(5, LosslessArch::EightStage);
    let (bs, _) = encode(&cloud, &cfg, &models).unwrap();
    let r = rate_report(&bs);
    assert_eq!(r.total_bits as usize, bs.to_bytes().len() * 8);
    let per_scale: u64 = r.per_scale.iter().map(|(_, b)| b).sum();
    assert_eq!(per_scale + r.header_bits, r.total_bits);
    assert!((r.bpp - r.total_bits as f64 / cloud.original_count as f64).abs() < 1e-12);
}

#[test]
fn empty_and_out_of_range_inputs_error() {
    let models = model_set_for(LosslessArch::EightStage, 91);
    let cfg = CodecConfig::lossless(4, LosslessArch::EightStage);
    let empty = PointCloud {
        points: Vec::new(),
        n_bits: 4,
        original_count: 0,
    };
    assert!(encode(&empty, &cfg, &models).is_err());
    assert!(PointCloud::from_points(vec![Coord3::new(16, 0, 0)], 4).is_err());
    assert!(PointCloud::from_points(vec![Coord3::new(-1, 0, 0)], 4).is_err());
}

#[test]
fn invalid_configs_rejected() {
    let models = model_set(95);
    let mut rng = ChaCha8Rng::seed_from_u64(96);
    let cloud = random_cloud(&mut rng, 20, 4);
    for (mode, m) in [
        (CodecMode::LossyDense, 0),
        (CodecMode::LossyDense, 4),
        (CodecMode::LossySparse, 7),
    ] {
        let cfg = CodecConfig {
            mode,
            n_bits: 4,
            m,
            arch: LosslessArch::EightStage,
        };
        assert!(encode(&cloud, &cfg, &models).is_err(), "mode {:?} m {}", mode, m);
    }
}
