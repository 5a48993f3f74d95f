//! Metric and I/O checks against exhaustive oracles and closed forms.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use spcg::metrics::{d1_psnr, d1_psnr_exhaustive, d2_psnr, smallest_eigenvector};
use spcg::ply::{quantize, read_ply, write_ply, PointCloud};
use spcg::tensor::Coord3;

fn random_coords(rng: &mut ChaCha8Rng, n: usize, side: i32) -> Vec<Coord3> {
    let mut set = std::collections::BTreeSet::new();
    while set.len() < n {
        set.insert((
            rng.gen_range(0..side),
            rng.gen_range(0..side),
            rng.gen_range(0..side),
        ));
    }
    set.into_iter().map(|(x, y, z)| Coord3 { x, y, z }).collect()
}

#[test]
fn d1_identical_sets_flagged_infinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_coords(&mut rng, 50, 64);
    assert!(d1_psnr(&a, &a, 63.0).unwrap().is_infinite());
}

#[test]
fn d1_single_point_closed_form() {
    let a = vec![Coord3::new(5, 5, 5)];
    let b = vec![Coord3::new(6, 5, 5)];
    let psnr = d1_psnr(&a, &b, 1023.0).unwrap();
    let expect = 10.0 * (3.0 * 1023.0f64 * 1023.0).log10();
    assert!((psnr - expect).abs() < 1e-9);
    assert!((psnr - 64.97).abs() < 0.01);
}

#[test]
fn d1_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (na, nb) = (rng.gen_range(1..120), rng.gen_range(1..120));
        let a = random_coords(&mut rng, na, 48);
        let b = random_coords(&mut rng, nb, 48);
        let fast = d1_psnr(&a, &b, 47.0).unwrap();
        let slow = d1_psnr_exhaustive(&a, &b, 47.0).unwrap();
        if fast.is_infinite() {
            assert!(slow.is_infinite());
        } else {
            assert!((fast - slow).abs() < 1e-9, "{} vs {}", fast, slow);
        }
    }
}

#[test]
fn d1_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_coords(&mut rng, 80, 32);
    let b = random_coords(&mut rng, 60, 32);
    assert_eq!(d1_psnr(&a, &b, 31.0).unwrap(), d1_psnr(&b, &a, 31.0).unwrap());
}

#[test]
fn d1_improves_when_missing_points_added() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_coords(&mut rng, 100, 32);
    let b: Vec<Coord3> = a.iter().copied().take(60).collect();
    let before = d1_psnr(&a, &b, 31.0).unwrap();
    let after = d1_psnr(&a, &a, 31.0).unwrap();
    assert!(after > before);
}

#[test]
fn d1_empty_errors() {
    assert!(d1_psnr(&[], &[Coord3::new(0, 0, 0)], 1.0).is_err());
}

#[test]
fn jacobi_finds_plane_normal() {
    // covariance of points spread in the xy plane: smallest eigenvector is z
    let cov = [[4.0, 0.3, 0.0], [0.3, 2.0, 0.0], [0.0, 0.0, 0.01]];
    let n = smallest_eigenvector(cov);
    assert!(n[2].abs() > 0.999, "normal {:?}", n);
}

#[test]
fn d2_in_plane_displacement_vanishes() {
    // two parallel plane samplings shifted strictly in-plane
    let a: Vec<Coord3> = (0..12)
        .flat_map(|x| (0..12).map(move |y| Coord3::new(x, y, 5)))
        .collect();
    let b: Vec<Coord3> = a.iter().map(|c| Coord3::new(c.x + 1, c.y, 5)).collect();
    let d1 = d1_psnr(&a, &b, 31.0).unwrap();
    let d2 = d2_psnr(&a, &b, 31.0).unwrap();
    assert!(d1.is_finite());
    assert!(d2 > d1 + 10.0, "d2 {} should dwarf d1 {}", d2, d1);
}

#[test]
fn d2_normal_displacement_matches_d1() {
    let a: Vec<Coord3> = (0..12)
        .flat_map(|x| (0..12).map(move |y| Coord3::new(x, y, 5)))
        .collect();
    let b: Vec<Coord3> = a.iter().map(|c| Coord3::new(c.x, c.y, 7)).collect();
    let d1 = d1_psnr(&a, &b, 31.0).unwrap();
    let d2 = d2_psnr(&a, &b, 31.0).unwrap();
    assert!((d1 - d2).abs() < 1.0, "d1 {} d2 {}", d1, d2);
}

#[test]
fn d2_never_exceeds_d1_error() {
    // projection onto a unit normal shrinks every displacement, so D2 MSE
    // is bounded by D1 MSE and PSNR is at least as high
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a = random_coords(&mut rng, 60, 24);
        let b = random_coords(&mut rng, 60, 24);
        let d1 = d1_psnr(&a, &b, 23.0).unwrap();
        let d2 = d2_psnr(&a, &b, 23.0).unwrap();
        assert!(d2 >= d1 - 1e-9, "d1 {} d2 {}", d1, d2);
    }
}

#[test]
fn quantize_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw: Vec<[f64; 3]> = (0..200)
        .map(|_| [rng.gen_range(-3.0..9.0), rng.gen_range(0.0..5.0), rng.gen_range(1.0..2.0)])
        .collect();
    let bbox = ([-3.0, 0.0, 1.0], [9.0, 5.0, 2.0]);
    let cloud = quantize(&raw, 6, bbox).unwrap();
    assert_eq!(cloud.original_count, 200);
    for (p, q) in raw.iter().zip(std::iter::repeat(())) {
        let _ = q;
        let expect = |a: usize, lo: f64, hi: f64| -> i32 {
            (((p[a] - lo) / (hi - lo)).clamp(0.0, 1.0) * 63.0).round() as i32
        };
        let e = Coord3::new(
            expect(0, -3.0, 9.0),
            expect(1, 0.0, 5.0),
            expect(2, 1.0, 2.0),
        );
        assert!(cloud.points.contains(&e));
    }
}

#[test]
fn quantize_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let raw: Vec<[f64; 3]> = (0..100)
        .map(|_| [rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0)])
        .collect();
    let bbox = ([0.0, 0.0, 0.0], [63.0, 63.0, 63.0]);
    let once = quantize(&raw, 6, bbox).unwrap();
    let back: Vec<[f64; 3]> = once
        .points
        .iter()
        .map(|p| [p.x as f64, p.y as f64, p.z as f64])
        .collect();
    let twice = quantize(&back, 6, bbox).unwrap();
    assert_eq!(once.points, twice.points);
}

#[test]
fn quantize_rejects_degenerate_bbox() {
    assert!(quantize(&[[0.0, 0.0, 0.0]], 6, ([0.0; 3], [0.0, 1.0, 1.0])).is_err());
}

#[test]
fn ply_ascii_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = PointCloud::from_points(random_coords(&mut rng, 100, 64), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ply");
    write_ply(&cloud, &path).unwrap();
    let back = read_ply(&path, 6).unwrap();
    assert_eq!(back.points, cloud.points);
}

#[test]
fn ply_minimal_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.ply");
    std::fs::write(
        &one,
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n3 4 5\n",
    )
    .unwrap();
    let cloud = read_ply(&one, 4).unwrap();
    assert_eq!(cloud.points, vec![Coord3::new(3, 4, 5)]);

    let bad = dir.path().join("bad.ply");
    std::fs::write(&bad, "ply\nformat ascii 1.0\nend_header\n").unwrap();
    let err = read_ply(&bad, 4).unwrap_err();
    assert!(err.to_string().contains("element vertex"), "{}", err);

    let nomagic = dir.path().join("nomagic.ply");
    std::fs::write(&nomagic, "plx\n").unwrap();
    assert!(read_ply(&nomagic, 4).is_err());
}

#[test]
fn ply_binary_little_endian() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ply");
    let mut body = Vec::new();
    body.extend_from_slice(
        b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n",
    );
    for (p, r) in [([1.0f32, 2.0, 3.0], 10u8), ([4.0, 5.0, 6.0], 20)] {
        for v in p {
            body.extend_from_slice(&v.to_le_bytes());
        }
        body.push(r);
    }
    std::fs::write(&path, &body).unwrap();
    let cloud = read_ply(&path, 4).unwrap();
    assert_eq!(
        cloud.points,
        vec![Coord3::new(1, 2, 3), Coord3::new(4, 5, 6)]
    );
}

#[test]
fn ply_floats_are_voxelized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ply");
    std::fs::write(
        &path,
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0.0 0.0 0.0\n1.5 1.5 1.5\n",
    )
    .unwrap();
    let cloud = read_ply(&path, 3).unwrap();
    assert_eq!(cloud.len(), 2);
    assert_eq!(cloud.points[0], Coord3::new(0, 0, 0));
    assert_eq!(cloud.points[1], Coord3::new(7, 7, 7));
}
