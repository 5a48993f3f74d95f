//! Desk-scale training: synthetic dataset generation, the loss terms, and
//! optimization loops for every trainable architecture.
//!
//! A batch is 8 independent clouds whose gradients are averaged; there is no
//! cross-cloud convolution. The learning rate follows a cosine from 8e-4
//! down to 2e-5 over all optimizer steps.

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::codec::{build_pyramid, ModelSet};
use crate::entropy::{clamp_prob, laplace_mass};
use crate::error::{Error, Result};
use crate::metrics::NnIndex;
use crate::nn::{adam_step, AdamState, ArchId, ArchPlan, Network, Tape};
use crate::ply::PointCloud;
use crate::sopa::{
    multistage_forward, one_stage_forward, position_forward, slne_decoder_forward,
    slne_encoder_forward, TeacherForcing,
};
use crate::tensor::{Coord3, GroupingArrangement, GroupingVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudKind {
    SphereShell,
    BoxSurface,
    PlanePatch,
    LineScan,
    Union,
}

impl CloudKind {
    pub const ALL: [CloudKind; 5] = [
        CloudKind::SphereShell,
        CloudKind::BoxSurface,
        CloudKind::PlanePatch,
        CloudKind::LineScan,
        CloudKind::Union,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CloudKind::SphereShell => "sphere_shell",
            CloudKind::BoxSurface => "box_surface",
            CloudKind::PlanePatch => "plane_patch",
            CloudKind::LineScan => "line_scan",
            CloudKind::Union => "union",
        }
    }

    pub fn from_str(s: &str) -> Result<CloudKind> {
        CloudKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Training(format!("unknown cloud kind '{}'", s)))
    }
}

fn push_rounded(out: &mut Vec<Coord3>, p: [f64; 3], side: i32) {
    let c = Coord3::new(
        (p[0].round() as i32).clamp(0, side - 1),
        (p[1].round() as i32).clamp(0, side - 1),
        (p[2].round() as i32).clamp(0, side - 1),
    );
    out.push(c);
}

fn sphere_shell(rng: &mut ChaCha8Rng, side: i32) -> Vec<Coord3> {
    // Sub-voxel placement is randomized per cloud so the surface position
    // is not inferable from the coarse geometry alone.
    let center = [
        side as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        side as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        side as f64 / 2.0 + rng.gen_range(-1.0..1.0),
    ];
    let r = side as f64 * rng.gen_range(0.30..0.44);
    // roughly 4 samples per surface voxel so the shell is near-saturated
    let samples = ((16.0 * std::f64::consts::PI * r * r) as usize).clamp(64, 30_000);
    let mut pts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let s = (1.0 - z * z).sqrt();
        push_rounded(
            &mut pts,
            [
                center[0] + r * s * phi.cos(),
                center[1] + r * s * phi.sin(),
                center[2] + r * z,
            ],
            side,
        );
    }
    pts
}

fn box_surface(rng: &mut ChaCha8Rng, side: i32) -> Vec<Coord3> {
    // Face planes are jittered off the voxel grid, same reasoning as the
    // sphere shell.
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        lo[a] = side as f64 / 4.0 + rng.gen_range(-1.0..1.0);
        hi[a] = 3.0 * side as f64 / 4.0 + rng.gen_range(-1.0..1.0);
    }
    let w = side as f64 / 2.0;
    let samples = ((24.0 * w * w) as usize).clamp(64, 30_000);
    let mut pts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let face = rng.gen_range(0..6usize);
        let axis = face / 2;
        let (ua, va) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let u: f64 = rng.gen_range(lo[ua]..hi[ua]);
        let v: f64 = rng.gen_range(lo[va]..hi[va]);
        let f = if face % 2 == 0 { lo[axis] } else { hi[axis] };
        let p = match axis {
            0 => [f, u, v],
            1 => [u, f, v],
            _ => [u, v, f],
        };
        push_rounded(&mut pts, p, side);
    }
    pts
}

fn plane_patch(rng: &mut ChaCha8Rng, side: i32) -> Vec<Coord3> {
    let lo = side as f64 / 8.0;
    let hi = 7.0 * side as f64 / 8.0;
    let a: f64 = rng.gen_range(-0.5..0.5);
    let b: f64 = rng.gen_range(-0.5..0.5);
    let z0: f64 = rng.gen_range(0.3 * side as f64..0.7 * side as f64);
    let w = hi - lo;
    let samples = ((4.0 * w * w) as usize).clamp(64, 30_000);
    let mut pts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x: f64 = rng.gen_range(lo..hi);
        let y: f64 = rng.gen_range(lo..hi);
        let z = z0 + a * (x - side as f64 / 2.0) + b * (y - side as f64 / 2.0);
        push_rounded(&mut pts, [x, y, z], side);
    }
    pts
}

/// Sparse scan-line pattern: a few concentric arcs at stepped heights, with
/// point spacing of several voxels along each arc.
fn line_scan(rng: &mut ChaCha8Rng, side: i32) -> Vec<Coord3> {
    let center = side as f64 / 2.0;
    let lines = 12;
    let mut pts = Vec::new();
    for l in 0..lines {
        let r = side as f64 * (0.15 + 0.3 * l as f64 / lines as f64);
        let z = side as f64 * (0.2 + 0.6 * l as f64 / lines as f64) + rng.gen_range(-1.0..1.0);
        // spacing of roughly 4 voxels between consecutive returns
        let steps = ((std::f64::consts::TAU * r / 4.0) as usize).max(8);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for s in 0..steps {
            let phi = phase + std::f64::consts::TAU * s as f64 / steps as f64;
            push_rounded(
                &mut pts,
                [center + r * phi.cos(), center + r * phi.sin(), z],
                side,
            );
        }
    }
    pts
}

/// Deterministic synthetic cloud: surface-like patterns for the dense
/// regime, scan lines for the sparse regime, or a union of both.
pub fn synth_cloud(kind: CloudKind, n_bits: u32, seed: u64) -> Result<PointCloud> {
    if !(4..=10).contains(&n_bits) {
        return Err(Error::Training(format!(
            "synthetic precision {} out of range [4, 10]",
            n_bits
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 1 << n_bits;
    let pts = match kind {
        CloudKind::SphereShell => sphere_shell(&mut rng, side),
        CloudKind::BoxSurface => box_surface(&mut rng, side),
        CloudKind::PlanePatch => plane_patch(&mut rng, side),
        CloudKind::LineScan => line_scan(&mut rng, side),
        CloudKind::Union => {
            let mut p = sphere_shell(&mut rng, side);
            p.extend(box_surface(&mut rng, side));
            p
        }
    };
    PointCloud::from_points(pts, n_bits)
}

/// Random down-scaling augmentation: s ~ U(0.5, 1), round, deduplicate.
pub fn augment(cloud: &PointCloud, rng: &mut ChaCha8Rng) -> PointCloud {
    let s: f64 = rng.gen_range(0.5..1.0);
    let pts = cloud
        .points
        .iter()
        .map(|c| {
            Coord3::new(
                (c.x as f64 * s).round() as i32,
                (c.y as f64 * s).round() as i32,
                (c.z as f64 * s).round() as i32,
            )
        })
        .collect();
    PointCloud::from_points(pts, cloud.n_bits).expect("scaling down cannot leave the range")
}

/// Manifest line: `kind n_bits seed`, whitespace separated. Blank lines and
/// `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<(CloudKind, u32, u64)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Training(format!(
                "manifest line {}: expected 'kind n_bits seed'",
                ln + 1
            )));
        }
        let kind = CloudKind::from_str(f[0])?;
        let n: u32 = f[1]
            .parse()
            .map_err(|_| Error::Training(format!("manifest line {}: bad precision", ln + 1)))?;
        let seed: u64 = f[2]
            .parse()
            .map_err(|_| Error::Training(format!("manifest line {}: bad seed", ln + 1)))?;
        out.push((kind, n, seed));
    }
    Ok(out)
}

pub fn manifest_clouds(text: &str) -> Result<Vec<PointCloud>> {
    parse_manifest(text)?
        .into_iter()
        .map(|(kind, n, seed)| synth_cloud(kind, n, seed))
        .collect()
}

/// `count` clouds of one kind with consecutive seeds.
pub fn synth_dataset(kind: CloudKind, count: usize, n_bits: u32, seed0: u64) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| synth_cloud(kind, n_bits, seed0 + i as u64))
        .collect()
}

/// Binary cross-entropy in bits (element-wise sum), the plain-number twin of
/// the tape op.
pub fn loss_bce(probs: &[f64], symbols: &[bool]) -> f64 {
    assert_eq!(probs.len(), symbols.len());
    probs
        .iter()
        .zip(symbols)
        .map(|(&p, &s)| {
            let p = clamp_prob(p);
            -if s { p.log2() } else { (1.0 - p).log2() }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub feature_rate: f64,
    pub mse: f64,
}

/// Rate-augmented loss: BCE plus `w` times the factorized feature rate, with
/// per-channel Laplace scales cycling over `b`.
pub fn loss_combined(probs: &[f64], symbols: &[bool], q: &[f64], b: &[f64], w: f64) -> LossValue {
    let bce = loss_bce(probs, symbols);
    let rate: f64 = q
        .iter()
        .enumerate()
        .map(|(j, &v)| -laplace_mass(v, b[j % b.len()]).max(1e-12).log2())
        .sum();
    LossValue {
        total: bce + w * rate,
        bce,
        feature_rate: rate,
        mse: 0.0,
    }
}

/// Mean squared distance between adjusted points and their nearest
/// ground-truth points (pairing by rounded position).
pub fn loss_mse(adjusted: &[[f64; 3]], truth: &[Coord3]) -> Result<f64> {
    if adjusted.is_empty() || truth.is_empty() {
        return Err(Error::Training("mse needs non-empty point sets".into()));
    }
    let index = NnIndex::build(truth);
    let total: f64 = adjusted
        .iter()
        .map(|a| {
            let probe = Coord3::new(
                a[0].round() as i32,
                a[1].round() as i32,
                a[2].round() as i32,
            );
            let (j, _) = index.nearest(probe, None);
            let t = truth[j as usize];
            let d = [
                a[0] - t.x as f64,
                a[1] - t.y as f64,
                a[2] - t.z as f64,
            ];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        })
        .sum();
    Ok(total / adjusted.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 5,
            batch: 8,
            lr_start: 8e-4,
            lr_end: 2e-5,
        }
    }
}

impl Schedule {
    /// Cosine decay from `lr_start` to `lr_end` over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr_start;
        }
        let t = step as f64 / (total - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Feature-rate weight: linear ramp from 0 to 1 over the first third of
/// training, then 1.
pub fn rate_weight(step: usize, total: usize) -> f64 {
    let third = (total as f64 / 3.0).max(1.0);
    (step as f64 / third).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    OneStage,
    ThreeStage,
    EightStage,
    SlneOneStage,
    Position,
}

impl TrainTask {
    pub const ALL: [TrainTask; 5] = [
        TrainTask::OneStage,
        TrainTask::ThreeStage,
        TrainTask::EightStage,
        TrainTask::SlneOneStage,
        TrainTask::Position,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainTask::OneStage => "one_stage",
            TrainTask::ThreeStage => "three_stage",
            TrainTask::EightStage => "eight_stage",
            TrainTask::SlneOneStage => "slne_one_stage",
            TrainTask::Position => "position",
        }
    }

    pub fn from_str(s: &str) -> Result<TrainTask> {
        TrainTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Training(format!("unknown training task '{}'", s)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub k: usize,
    pub c: usize,
    pub c_lat: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            k: 3,
            c: 8,
            c_lat: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub feature_rate: f64,
    pub mse: f64,
    pub lr: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,bce,feature_rate,mse,lr\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.bce, e.feature_rate, e.mse, e.lr
        ));
    }
    out
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training("loss diverged (non-finite value)".into()))
    }
}

struct NetTrainer {
    net: Network,
    adam: AdamState,
    grads: Vec<f64>,
}

impl NetTrainer {
    fn new(net: Network) -> NetTrainer {
        let n = net.params.len();
        NetTrainer {
            net,
            adam: AdamState::new(n),
            grads: vec![0.0; n],
        }
    }

    fn step(&mut self, batch_size: usize, lr: f64) {
        for g in &mut self.grads {
            *g /= batch_size as f64;
        }
        adam_step(&mut self.net.params, &self.grads, &mut self.adam, lr);
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Per-cloud loss components accumulated for the epoch log. Values are
/// normalized per occupancy candidate (or per point for position training).
#[derive(Default, Clone, Copy)]
struct CloudLoss {
    bce: f64,
    feature_rate: f64,
    mse: f64,
}

fn occupancy_cloud_pass(
    trainer: &mut NetTrainer,
    cloud: &PointCloud,
    multistage: Option<GroupingVariant>,
) -> Result<CloudLoss> {
    let pyramid = build_pyramid(cloud)?;
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    let mut total_syms = 0usize;
    for i in 1..=cloud.n_bits {
        let prev = &pyramid[(i - 1) as usize];
        let truth: HashSet<Coord3> = pyramid[i as usize].coords().iter().copied().collect();
        let x = tape.input(prev.len(), prev.width(), prev.features().to_vec());
        match multistage {
            None => {
                let (coords, probs) =
                    one_stage_forward(&mut tape, &trainer.net, prev.coords(), x)?;
                let symbols: Vec<bool> = coords.iter().map(|c| truth.contains(c)).collect();
                total_syms += symbols.len();
                terms.push(tape.bce(probs, &symbols));
            }
            Some(variant) => {
                let arr = GroupingArrangement::new(variant);
                let mut coder = TeacherForcing { truth: &truth };
                let (_, traces) = multistage_forward(
                    &mut tape,
                    &trainer.net,
                    prev.coords(),
                    x,
                    &arr,
                    &mut coder,
                )?;
                for t in traces {
                    if !t.symbols.is_empty() {
                        total_syms += t.symbols.len();
                        terms.push(tape.bce(t.probs, &t.symbols));
                    }
                }
            }
        }
    }
    let scale = 1.0 / total_syms.max(1) as f64;
    let loss = tape.weighted_sum(terms.iter().map(|&t| (t, scale)).collect());
    let bce = check_finite(tape.scalar(loss))?;
    tape.backward(&trainer.net.params, loss, &mut trainer.grads);
    Ok(CloudLoss {
        bce,
        ..Default::default()
    })
}

fn slne_cloud_pass(
    enc: &mut NetTrainer,
    dec: &mut NetTrainer,
    sopa: &mut NetTrainer,
    cloud: &PointCloud,
    rng: &mut ChaCha8Rng,
    w: f64,
) -> Result<CloudLoss> {
    let log_b = match &enc.net.plan {
        ArchPlan::SlneEncoder { log_b, .. } => *log_b,
        _ => unreachable!(),
    };
    let pyramid = build_pyramid(cloud)?;
    let mut tape = Tape::new();
    let mut bce_terms = Vec::new();
    let mut rate_terms = Vec::new();
    let mut total_syms = 0usize;
    let mut total_lat = 0usize;
    // The root transition carries no latent context and is coded at p = 1/2,
    // so only transitions from scale 2 upward contribute gradients.
    for i in 2..=cloud.n_bits {
        let cur = &pyramid[i as usize];
        let truth: HashSet<Coord3> = cur.coords().iter().copied().collect();
        tape.set_pool(0);
        let x = tape.input(cur.len(), cur.width(), cur.features().to_vec());
        let (c1, c2, z) = slne_encoder_forward(&mut tape, &enc.net, cur.coords(), x)?;
        let (zr, zc) = tape.shape(z);
        let deltas: Vec<f64> = (0..zr * zc).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let zq = tape.shift(z, &deltas);
        total_lat += zr * zc;
        rate_terms.push(tape.laplace_rate(&enc.net.params, zq, log_b));
        tape.set_pool(1);
        let f = slne_decoder_forward(&mut tape, &dec.net, zq, &c2, &c1)?;
        tape.set_pool(2);
        let (coords, probs) = one_stage_forward(&mut tape, &sopa.net, &c1, f)?;
        let symbols: Vec<bool> = coords.iter().map(|c| truth.contains(c)).collect();
        total_syms += symbols.len();
        bce_terms.push(tape.bce(probs, &symbols));
        tape.set_pool(0);
    }
    let bs = 1.0 / total_syms.max(1) as f64;
    let rs = 1.0 / total_lat.max(1) as f64;
    // Both terms are normalized by the occupancy symbol count so the loss is
    // total bits per coded symbol; at w = 1 a latent bit costs exactly as
    // much as an occupancy bit. The log still reports rate per latent entry.
    let mut terms: Vec<(usize, f64)> = bce_terms.iter().map(|&t| (t, bs)).collect();
    terms.extend(rate_terms.iter().map(|&t| (t, w * bs)));
    let loss = tape.weighted_sum(terms);
    check_finite(tape.scalar(loss))?;
    let bce = bce_terms.iter().map(|&t| tape.scalar(t)).sum::<f64>() * bs;
    let rate = rate_terms.iter().map(|&t| tape.scalar(t)).sum::<f64>() * rs;
    tape.backward_pools(
        &[&enc.net.params, &dec.net.params, &sopa.net.params],
        loss,
        &mut [&mut enc.grads, &mut dec.grads, &mut sopa.grads],
    );
    Ok(CloudLoss {
        bce,
        feature_rate: rate,
        mse: 0.0,
    })
}

fn position_cloud_pass(trainer: &mut NetTrainer, cloud: &PointCloud) -> Result<CloudLoss> {
    let n = cloud.n_bits;
    if n < 3 {
        return Err(Error::Training(
            "position training needs at least 3-bit clouds".into(),
        ));
    }
    let m = n - 2;
    let pyramid = build_pyramid(cloud)?;
    let coarse = &pyramid[m as usize];
    let factor = (1 << (n - m)) as f64;
    let mut tape = Tape::new();
    let x = tape.input(coarse.len(), coarse.width(), coarse.features().to_vec());
    let offsets = position_forward(&mut tape, &trainer.net, coarse.coords(), x)?;
    // Pair each adjusted point with its nearest ground-truth point, then
    // regress the offset toward that target.
    let index = NnIndex::build(&cloud.points);
    let vals = tape.value(offsets).to_vec();
    let mut target = Vec::with_capacity(vals.len());
    for (j, c) in coarse.coords().iter().enumerate() {
        let base = [
            c.x as f64 * factor,
            c.y as f64 * factor,
            c.z as f64 * factor,
        ];
        let probe = Coord3::new(
            (base[0] + vals[3 * j]).round() as i32,
            (base[1] + vals[3 * j + 1]).round() as i32,
            (base[2] + vals[3 * j + 2]).round() as i32,
        );
        let (t, _) = index.nearest(probe, None);
        let t = cloud.points[t as usize];
        target.push(t.x as f64 - base[0]);
        target.push(t.y as f64 - base[1]);
        target.push(t.z as f64 - base[2]);
    }
    let loss = tape.mse(offsets, &target);
    let mse = check_finite(tape.scalar(loss))?;
    tape.backward(&trainer.net.params, loss, &mut trainer.grads);
    Ok(CloudLoss {
        mse,
        ..Default::default()
    })
}

/// Trains the networks for `task` on `dataset` and returns them in their
/// codec roles, plus the per-epoch log. Deterministic for fixed seeds.
pub fn train(
    task: TrainTask,
    dataset: &[PointCloud],
    sched: &Schedule,
    opts: &TrainOptions,
) -> Result<(ModelSet, Vec<EpochLog>)> {
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if sched.batch == 0 {
        return Err(Error::Training("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut init = |arch, c_in, c_lat| -> Result<NetTrainer> {
        let mut net = Network::new(arch, opts.k, opts.c, c_in, c_lat)?;
        net.init(&mut rng);
        Ok(NetTrainer::new(net))
    };
    let mut trainers: Vec<NetTrainer> = match task {
        TrainTask::OneStage => vec![init(ArchId::OneStageSopa, 1, 0)?],
        TrainTask::ThreeStage => vec![init(ArchId::MultistageSopa3, 1, 0)?],
        TrainTask::EightStage => vec![init(ArchId::MultistageSopa8, 1, 0)?],
        TrainTask::SlneOneStage => vec![
            init(ArchId::SlneEncoder, 1, opts.c_lat)?,
            init(ArchId::SlneDecoder, opts.c_lat, opts.c_lat)?,
            init(ArchId::OneStageSopa, opts.c, 0)?,
        ],
        TrainTask::Position => vec![init(ArchId::SopaPosition, 1, 0)?],
    };

    let batches_per_epoch = dataset.len().div_ceil(sched.batch);
    let total_steps = sched.epochs * batches_per_epoch;
    let mut log = Vec::with_capacity(sched.epochs);
    let mut step = 0usize;
    for epoch in 0..sched.epochs {
        let mut sum = CloudLoss::default();
        let mut clouds_seen = 0usize;
        let mut lr = sched.lr_start;
        for batch in dataset.chunks(sched.batch) {
            let w = rate_weight(step, total_steps);
            for cloud in batch {
                let cl = match task {
                    TrainTask::OneStage => occupancy_cloud_pass(&mut trainers[0], cloud, None)?,
                    TrainTask::ThreeStage => occupancy_cloud_pass(
                        &mut trainers[0],
                        cloud,
                        Some(GroupingVariant::ThreeStage),
                    )?,
                    TrainTask::EightStage => occupancy_cloud_pass(
                        &mut trainers[0],
                        cloud,
                        Some(GroupingVariant::EightStage),
                    )?,
                    TrainTask::SlneOneStage => {
                        let (enc, rest) = trainers.split_at_mut(1);
                        let (dec, sopa) = rest.split_at_mut(1);
                        slne_cloud_pass(
                            &mut enc[0],
                            &mut dec[0],
                            &mut sopa[0],
                            cloud,
                            &mut rng,
                            w,
                        )?
                    }
                    TrainTask::Position => position_cloud_pass(&mut trainers[0], cloud)?,
                };
                sum.bce += cl.bce;
                sum.feature_rate += cl.feature_rate;
                sum.mse += cl.mse;
                clouds_seen += 1;
            }
            lr = sched.lr_at(step, total_steps);
            for t in &mut trainers {
                t.step(batch.len(), lr);
            }
            step += 1;
        }
        let n = clouds_seen.max(1) as f64;
        log.push(EpochLog {
            epoch,
            bce: sum.bce / n,
            feature_rate: sum.feature_rate / n,
            mse: sum.mse / n,
            lr,
        });
    }

    let mut nets = trainers.into_iter().map(|t| t.net);
    let models = match task {
        TrainTask::OneStage | TrainTask::ThreeStage | TrainTask::EightStage => ModelSet {
            occupancy: Some(nets.next().unwrap()),
            ..Default::default()
        },
        TrainTask::SlneOneStage => ModelSet {
            slne_enc: Some(nets.next().unwrap()),
            slne_dec: Some(nets.next().unwrap()),
            slne_sopa: Some(nets.next().unwrap()),
            ..Default::default()
        },
        TrainTask::Position => ModelSet {
            position: Some(nets.next().unwrap()),
            ..Default::default()
        },
    };
    Ok((models, log))
}
