//! Multiscale encode/decode orchestration and the bitstream container.
//!
//! A bitstream is a header, a list of per-scale chunks, and a trailing
//! content checksum. Every arithmetic payload is self-terminated, so a
//! corrupted scale never cascades silently: the content checksum catches
//! tampering and each chunk length is validated up front.

use std::collections::HashSet;

use crate::entropy::{
    factorized_decode, factorized_encode_tracked, quantize_prob, FactorizedModel, RangeDecoder,
    RangeEncoder,
};
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::nn::{ArchId, Network, Tape};
use crate::ply::PointCloud;
use crate::sopa::{
    lossy_threshold, multistage_forward, one_stage_forward, reconstruct, slne_encode,
    sopa_one_stage, sopa_position, OccCoder, StreamDecoder,
};
use crate::tensor::{Coord3, GroupingArrangement, GroupingVariant, OccupancyRole, SparseTensor};

pub const STREAM_MAGIC: &[u8; 4] = b"SPCG";
pub const STREAM_VERSION: u8 = 1;

/// Laplace scale and support used for coded position offsets; fixed so the
/// decoder needs no side information.
const OFFSET_LAPLACE_B: f64 = 2.0;
/// Integer support bound of the SLNE latent coder; outliers escape.
const LATENT_SUPPORT: i64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    Lossless,
    LossyDense,
    LossySparse,
}

impl CodecMode {
    fn to_u8(self) -> u8 {
        match self {
            CodecMode::Lossless => 0,
            CodecMode::LossyDense => 1,
            CodecMode::LossySparse => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => CodecMode::Lossless,
            1 => CodecMode::LossyDense,
            2 => CodecMode::LossySparse,
            _ => return Err(Error::Bitstream(format!("unknown mode byte {}", v))),
        })
    }
}

/// Occupancy model family used in the lossless phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LosslessArch {
    OneStage,
    ThreeStage,
    EightStage,
    /// One-Stage conditioned on transmitted neighborhood embeddings.
    SlneOneStage,
}

impl LosslessArch {
    fn to_u8(self) -> u8 {
        match self {
            LosslessArch::OneStage => 0,
            LosslessArch::ThreeStage => 1,
            LosslessArch::EightStage => 2,
            LosslessArch::SlneOneStage => 3,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => LosslessArch::OneStage,
            1 => LosslessArch::ThreeStage,
            2 => LosslessArch::EightStage,
            3 => LosslessArch::SlneOneStage,
            _ => return Err(Error::Bitstream(format!("unknown arch byte {}", v))),
        })
    }

    pub fn grouping(self) -> Option<GroupingVariant> {
        match self {
            LosslessArch::ThreeStage => Some(GroupingVariant::ThreeStage),
            LosslessArch::EightStage => Some(GroupingVariant::EightStage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub n_bits: u32,
    /// Lossless/lossy split scale; ignored in lossless mode.
    pub m: u32,
    pub arch: LosslessArch,
}

impl CodecConfig {
    pub fn lossless(n_bits: u32, arch: LosslessArch) -> CodecConfig {
        CodecConfig {
            mode: CodecMode::Lossless,
            n_bits,
            m: 0,
            arch,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_bits == 0 || self.n_bits > 18 {
            return Err(Error::Codec(format!(
                "precision {} out of range",
                self.n_bits
            )));
        }
        if self.mode != CodecMode::Lossless && !(0 < self.m && self.m < self.n_bits) {
            return Err(Error::Codec(format!(
                "split scale m={} must satisfy 0 < m < N={}",
                self.m, self.n_bits
            )));
        }
        Ok(())
    }
}

/// Trained networks grouped by role. Only the roles a mode needs must be
/// present; `validate` enforces that before any coding starts.
#[derive(Default)]
pub struct ModelSet {
    /// Lossless-phase occupancy model (one- or multi-stage).
    pub occupancy: Option<Network>,
    pub slne_enc: Option<Network>,
    pub slne_dec: Option<Network>,
    /// One-Stage model whose input is the SLNE feature field.
    pub slne_sopa: Option<Network>,
    /// Plain One-Stage model for thresholded upper scales.
    pub refine: Option<Network>,
    pub position: Option<Network>,
}

impl ModelSet {
    fn require<'a>(
        slot: &'a Option<Network>,
        role: &str,
        arch: ArchId,
    ) -> Result<&'a Network> {
        let net = slot
            .as_ref()
            .ok_or_else(|| Error::Codec(format!("model set lacks the {} model", role)))?;
        if net.arch != arch {
            return Err(Error::Codec(format!(
                "{} model has architecture {}, expected {}",
                role,
                net.arch.as_str(),
                arch.as_str()
            )));
        }
        Ok(net)
    }

    /// The models a configuration uses, in a fixed role order.
    fn used(&self, cfg: &CodecConfig) -> Result<Vec<(u8, &Network)>> {
        let mut out: Vec<(u8, &Network)> = Vec::new();
        let occ_arch = match cfg.arch {
            LosslessArch::OneStage | LosslessArch::SlneOneStage => ArchId::OneStageSopa,
            LosslessArch::ThreeStage => ArchId::MultistageSopa3,
            LosslessArch::EightStage => ArchId::MultistageSopa8,
        };
        let needs_slne = cfg.arch == LosslessArch::SlneOneStage
            || (cfg.mode == CodecMode::LossyDense);
        match cfg.mode {
            CodecMode::Lossless => {
                if cfg.arch == LosslessArch::SlneOneStage {
                    out.push((3, Self::require(&self.slne_sopa, "slne_sopa", ArchId::OneStageSopa)?));
                } else {
                    out.push((0, Self::require(&self.occupancy, "occupancy", occ_arch)?));
                }
            }
            CodecMode::LossyDense => {
                out.push((0, Self::require(&self.occupancy, "occupancy", occ_arch)?));
                out.push((3, Self::require(&self.slne_sopa, "slne_sopa", ArchId::OneStageSopa)?));
                out.push((4, Self::require(&self.refine, "refine", ArchId::OneStageSopa)?));
            }
            CodecMode::LossySparse => {
                out.push((0, Self::require(&self.occupancy, "occupancy", occ_arch)?));
                out.push((5, Self::require(&self.position, "position", ArchId::SopaPosition)?));
            }
        }
        if needs_slne {
            out.push((1, Self::require(&self.slne_enc, "slne_enc", ArchId::SlneEncoder)?));
            out.push((2, Self::require(&self.slne_dec, "slne_dec", ArchId::SlneDecoder)?));
        }
        Ok(out)
    }

    /// Combined checksum over the models a configuration uses.
    pub fn checksum(&self, cfg: &CodecConfig) -> Result<u64> {
        let mut bytes = Vec::new();
        for (role, net) in self.used(cfg)? {
            bytes.push(role);
            bytes.extend_from_slice(&net.checksum().to_le_bytes());
        }
        Ok(fnv1a64(&bytes))
    }
}

pub const BUNDLE_MAGIC: &[u8; 4] = b"SPNB";
const BUNDLE_VERSION: u8 = 1;

impl ModelSet {
    fn slots(&self) -> [(u8, &Option<Network>); 6] {
        [
            (0, &self.occupancy),
            (1, &self.slne_enc),
            (2, &self.slne_dec),
            (3, &self.slne_sopa),
            (4, &self.refine),
            (5, &self.position),
        ]
    }

    fn slot_mut(&mut self, role: u8) -> Option<&mut Option<Network>> {
        Some(match role {
            0 => &mut self.occupancy,
            1 => &mut self.slne_enc,
            2 => &mut self.slne_dec,
            3 => &mut self.slne_sopa,
            4 => &mut self.refine,
            5 => &mut self.position,
            _ => return None,
        })
    }

    /// Serializes every present network with its role tag.
    pub fn to_bundle(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.push(BUNDLE_VERSION);
        let present: Vec<(u8, &Network)> = self
            .slots()
            .into_iter()
            .filter_map(|(role, slot)| slot.as_ref().map(|n| (role, n)))
            .collect();
        out.push(present.len() as u8);
        for (role, net) in present {
            let mut body = Vec::new();
            crate::nn::write_model(net, &mut body)?;
            out.push(role);
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bundle(buf: &[u8]) -> Result<ModelSet> {
        let mut set = ModelSet::default();
        set.merge_bundle(buf)?;
        Ok(set)
    }

    /// Loads a bundle into this set; occupied slots are overwritten.
    pub fn merge_bundle(&mut self, buf: &[u8]) -> Result<()> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = buf
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Codec("truncated model bundle".into()))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != BUNDLE_MAGIC {
            return Err(Error::Codec("not a model bundle".into()));
        }
        if take(&mut pos, 1)?[0] != BUNDLE_VERSION {
            return Err(Error::Codec("unsupported bundle version".into()));
        }
        let count = take(&mut pos, 1)?[0];
        for _ in 0..count {
            let role = take(&mut pos, 1)?[0];
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let body = take(&mut pos, len)?;
            let net = crate::nn::read_model(&mut &body[..])?;
            let slot = self
                .slot_mut(role)
                .ok_or_else(|| Error::Codec(format!("unknown model role {}", role)))?;
            *slot = Some(net);
        }
        if pos != buf.len() {
            return Err(Error::Codec("trailing bytes after model bundle".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkKind {
    /// Arithmetic-coded occupancy symbols.
    Occupancy,
    /// Factorized-coded SLNE latents.
    Feature,
    /// Factorized-coded position offsets.
    Offsets,
    /// Count-only chunk for thresholded scales (no payload).
    Count,
}

impl ChunkKind {
    fn to_u8(self) -> u8 {
        match self {
            ChunkKind::Occupancy => 0,
            ChunkKind::Feature => 1,
            ChunkKind::Offsets => 2,
            ChunkKind::Count => 3,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ChunkKind::Occupancy,
            1 => ChunkKind::Feature,
            2 => ChunkKind::Offsets,
            3 => ChunkKind::Count,
            _ => return Err(Error::Bitstream(format!("unknown chunk kind {}", v))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Chunk {
    pub scale: u32,
    pub kind: ChunkKind,
    pub count: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Bitstream {
    pub mode: CodecMode,
    pub arch: LosslessArch,
    pub n_bits: u32,
    pub m: u32,
    pub original_count: u64,
    pub model_checksum: u64,
    pub chunks: Vec<Chunk>,
}

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn read_varint(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    let mut shift = 0;
    loop {
        let byte = *buf
            .get(*pos)
            .ok_or_else(|| Error::Bitstream("truncated varint".into()))?;
        *pos += 1;
        if shift >= 64 {
            return Err(Error::Bitstream("varint overflow".into()));
        }
        v |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
        shift += 7;
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STREAM_MAGIC);
        out.push(STREAM_VERSION);
        out.push(self.mode.to_u8());
        out.push(self.arch.to_u8());
        out.push(self.n_bits as u8);
        out.push(self.m as u8);
        write_varint(&mut out, self.original_count);
        out.extend_from_slice(&self.model_checksum.to_le_bytes());
        write_varint(&mut out, self.chunks.len() as u64);
        for c in &self.chunks {
            out.push(c.scale as u8);
            out.push(c.kind.to_u8());
            write_varint(&mut out, c.count);
            out.extend_from_slice(&(c.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&c.payload);
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Bitstream> {
        if buf.len() < 8 {
            return Err(Error::Bitstream("stream shorter than its checksum".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::Bitstream("content checksum mismatch".into()));
        }
        let mut pos = 0;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = body
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Bitstream("truncated header".into()))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != STREAM_MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        if take(&mut pos, 1)?[0] != STREAM_VERSION {
            return Err(Error::Bitstream("unsupported version".into()));
        }
        let mode = CodecMode::from_u8(take(&mut pos, 1)?[0])?;
        let arch = LosslessArch::from_u8(take(&mut pos, 1)?[0])?;
        let n_bits = take(&mut pos, 1)?[0] as u32;
        let m = take(&mut pos, 1)?[0] as u32;
        let original_count = read_varint(body, &mut pos)?;
        let model_checksum = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let chunk_count = read_varint(body, &mut pos)? as usize;
        let mut chunks = Vec::with_capacity(chunk_count);
        for _ in 0..chunk_count {
            let scale = take(&mut pos, 1)?[0] as u32;
            let kind = ChunkKind::from_u8(take(&mut pos, 1)?[0])?;
            let count = read_varint(body, &mut pos)?;
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let payload = take(&mut pos, len)?.to_vec();
            chunks.push(Chunk {
                scale,
                kind,
                count,
                payload,
            });
        }
        if pos != body.len() {
            return Err(Error::Bitstream("trailing bytes after chunks".into()));
        }
        Ok(Bitstream {
            mode,
            arch,
            n_bits,
            m,
            original_count,
            model_checksum,
            chunks,
        })
    }
}

/// Per-chunk rate accounting from the encoder, used to verify that coded
/// sizes track the model's own entropy estimates.
#[derive(Debug, Clone, Default)]
pub struct EncodeReport {
    pub entries: Vec<ChunkRate>,
}

#[derive(Debug, Clone)]
pub struct ChunkRate {
    pub scale: u32,
    pub kind: ChunkKind,
    pub payload_bits: u64,
    pub ideal_bits: f64,
    pub symbols: u64,
}

struct TrackingEncoder<'a, 'b> {
    truth: &'a HashSet<Coord3>,
    enc: &'b mut RangeEncoder,
    symbols: u64,
}

impl OccCoder for TrackingEncoder<'_, '_> {
    fn code(&mut self, coord: Coord3, prob: f64) -> Result<bool> {
        let sym = self.truth.contains(&coord);
        self.enc.encode_bit(quantize_prob(prob), sym);
        self.symbols += 1;
        Ok(sym)
    }
}

fn pov_tensor(scale: u32, coords: Vec<Coord3>) -> SparseTensor {
    SparseTensor::from_coords(scale, coords, OccupancyRole::Pov)
        .expect("coords are already unique")
}

/// Ground-truth POV tensors for scales 0..=N. Scale 0 is the single root
/// voxel, occupied by construction.
pub fn build_pyramid(cloud: &PointCloud) -> Result<Vec<SparseTensor>> {
    if cloud.is_empty() {
        return Err(Error::Codec("cannot encode an empty cloud".into()));
    }
    let mut scales = vec![pov_tensor(cloud.n_bits, cloud.points.clone())];
    for _ in 0..cloud.n_bits {
        scales.push(scales.last().unwrap().voxel_downscale_geom()?);
    }
    scales.reverse();
    debug_assert_eq!(scales[0].coords(), &[Coord3::new(0, 0, 0)]);
    Ok(scales)
}

fn latent_model(slne_enc: &Network) -> Result<FactorizedModel> {
    let log_b = match &slne_enc.plan {
        crate::nn::ArchPlan::SlneEncoder { log_b, .. } => *log_b,
        _ => return Err(Error::Codec("slne_enc model has the wrong plan".into())),
    };
    let scales: Vec<f64> = (0..log_b.len)
        .map(|i| slne_enc.params[log_b.base + i].exp())
        .collect();
    FactorizedModel::new(scales, LATENT_SUPPORT)
}

fn offset_model() -> FactorizedModel {
    FactorizedModel::new(vec![OFFSET_LAPLACE_B; 3], LATENT_SUPPORT).unwrap()
}

/// One-stage coded transition shared by the plain and SLNE-featured paths.
/// Returns the surviving child coordinates.
fn one_stage_encode(
    net: &Network,
    prev: &SparseTensor,
    truth: &HashSet<Coord3>,
    enc: &mut RangeEncoder,
) -> Result<Vec<Coord3>> {
    let mut tape = Tape::new();
    let x = tape.input(prev.len(), prev.width(), prev.features().to_vec());
    let (coords, probs) = one_stage_forward(&mut tape, net, prev.coords(), x)?;
    let p = tape.value(probs);
    let mut kept = Vec::new();
    for (i, &c) in coords.iter().enumerate() {
        let sym = truth.contains(&c);
        enc.encode_bit(quantize_prob(p[i]), sym);
        if sym {
            kept.push(c);
        }
    }
    Ok(kept)
}

fn one_stage_decode(
    net: &Network,
    prev: &SparseTensor,
    dec: &mut RangeDecoder,
) -> Result<Vec<Coord3>> {
    let mut tape = Tape::new();
    let x = tape.input(prev.len(), prev.width(), prev.features().to_vec());
    let (coords, probs) = one_stage_forward(&mut tape, net, prev.coords(), x)?;
    let p = tape.value(probs);
    let mut kept = Vec::new();
    for (i, &c) in coords.iter().enumerate() {
        if dec.decode_bit(quantize_prob(p[i]))? {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// SLNE features for the POVs of scale `i-1`, as a feature tensor ready to
/// feed a One-Stage model. Identical on both sides given identical latents.
fn slne_feature_tensor(
    q: &[i64],
    coords_im2: &[Coord3],
    prev: &SparseTensor,
    slne_dec: &Network,
) -> Result<SparseTensor> {
    let feats = crate::sopa::slne_decode_features(q, coords_im2, prev.coords(), slne_dec)?;
    prev.with_features(feats, slne_dec.c)
}

pub fn encode(
    cloud: &PointCloud,
    cfg: &CodecConfig,
    models: &ModelSet,
) -> Result<(Bitstream, EncodeReport)> {
    cfg.validate()?;
    let model_checksum = models.checksum(cfg)?;
    let pyramid = build_pyramid(cloud)?;
    let n = cfg.n_bits;
    let mut chunks = Vec::new();
    let mut report = EncodeReport::default();
    let push = |chunks: &mut Vec<Chunk>, report: &mut EncodeReport, c: Chunk, ideal: f64, syms: u64| {
        report.entries.push(ChunkRate {
            scale: c.scale,
            kind: c.kind,
            payload_bits: (c.payload.len() * 8) as u64,
            ideal_bits: ideal,
            symbols: syms,
        });
        chunks.push(c);
    };

    let lossless_top = match cfg.mode {
        CodecMode::Lossless => n,
        _ => cfg.m,
    };

    // Lossless phase: scales 1..=lossless_top.
    for i in 1..=lossless_top {
        let prev = &pyramid[(i - 1) as usize];
        let truth: HashSet<Coord3> = pyramid[i as usize].coords().iter().copied().collect();
        let ideal;
        let mut symbols = 0u64;
        let payload;
        match cfg.arch {
            LosslessArch::OneStage => {
                let net = ModelSet::require(&models.occupancy, "occupancy", ArchId::OneStageSopa)?;
                let mut enc = RangeEncoder::new();
                let kept = one_stage_encode(net, prev, &truth, &mut enc)?;
                symbols = 8 * prev.len() as u64;
                debug_assert_eq!(kept.len(), truth.len());
                ideal = enc.cost_bits();
                payload = enc.finish();
            }
            LosslessArch::ThreeStage | LosslessArch::EightStage => {
                let (role_arch, variant) = if cfg.arch == LosslessArch::ThreeStage {
                    (ArchId::MultistageSopa3, GroupingVariant::ThreeStage)
                } else {
                    (ArchId::MultistageSopa8, GroupingVariant::EightStage)
                };
                let net = ModelSet::require(&models.occupancy, "occupancy", role_arch)?;
                let arr = GroupingArrangement::new(variant);
                let mut enc = RangeEncoder::new();
                let mut tape = Tape::new();
                let x = tape.input(prev.len(), prev.width(), prev.features().to_vec());
                let mut coder = TrackingEncoder {
                    truth: &truth,
                    enc: &mut enc,
                    symbols: 0,
                };
                let (kept, _) =
                    multistage_forward(&mut tape, net, prev.coords(), x, &arr, &mut coder)?;
                symbols = coder.symbols;
                debug_assert_eq!(kept.len(), truth.len());
                ideal = enc.cost_bits();
                payload = enc.finish();
            }
            LosslessArch::SlneOneStage => {
                let sopa = ModelSet::require(&models.slne_sopa, "slne_sopa", ArchId::OneStageSopa)?;
                if i >= 2 {
                    let slne_enc =
                        ModelSet::require(&models.slne_enc, "slne_enc", ArchId::SlneEncoder)?;
                    let slne_dec =
                        ModelSet::require(&models.slne_dec, "slne_dec", ArchId::SlneDecoder)?;
                    let fm = latent_model(slne_enc)?;
                    let (geom, c2, q) = slne_encode(&pyramid[i as usize], slne_enc)?;
                    debug_assert_eq!(geom.coords(), prev.coords());
                    let c_lat = slne_enc.c_lat;
                    let (fpayload, fideal) = factorized_encode_tracked(&q, &fm, |j| j % c_lat);
                    let fsyms = q.len() as u64;
                    push(
                        &mut chunks,
                        &mut report,
                        Chunk {
                            scale: i,
                            kind: ChunkKind::Feature,
                            count: fsyms,
                            payload: fpayload,
                        },
                        fideal,
                        fsyms,
                    );
                    let featured = slne_feature_tensor(&q, &c2, prev, slne_dec)?;
                    let mut enc = RangeEncoder::new();
                    one_stage_encode(sopa, &featured, &truth, &mut enc)?;
                    symbols = 8 * prev.len() as u64;
                    ideal = enc.cost_bits();
                    payload = enc.finish();
                } else {
                    // Root transition: no latent context exists yet, code the
                    // 8 children at p = 1/2.
                    let mut enc = RangeEncoder::new();
                    for c in prev.voxel_upscale_geom().coords() {
                        let sym = truth.contains(c);
                        enc.encode_bit(quantize_prob(0.5), sym);
                        symbols += 1;
                    }
                    ideal = enc.cost_bits();
                    payload = enc.finish();
                }
            }
        }
        push(
            &mut chunks,
            &mut report,
            Chunk {
                scale: i,
                kind: ChunkKind::Occupancy,
                count: truth.len() as u64,
                payload,
            },
            ideal,
            symbols,
        );
    }

    match cfg.mode {
        CodecMode::Lossless => {}
        CodecMode::LossyDense => {
            // Transition m -> m+1: SLNE side information plus coded occupancy.
            let slne_enc = ModelSet::require(&models.slne_enc, "slne_enc", ArchId::SlneEncoder)?;
            let slne_dec = ModelSet::require(&models.slne_dec, "slne_dec", ArchId::SlneDecoder)?;
            let sopa = ModelSet::require(&models.slne_sopa, "slne_sopa", ArchId::OneStageSopa)?;
            let refine = ModelSet::require(&models.refine, "refine", ArchId::OneStageSopa)?;
            let i = cfg.m + 1;
            let prev = &pyramid[cfg.m as usize];
            let truth: HashSet<Coord3> = pyramid[i as usize].coords().iter().copied().collect();
            let fm = latent_model(slne_enc)?;
            let (_, c2, q) = slne_encode(&pyramid[i as usize], slne_enc)?;
            let c_lat = slne_enc.c_lat;
            let (fpayload, fideal) = factorized_encode_tracked(&q, &fm, |j| j % c_lat);
            let fsyms = q.len() as u64;
            push(
                &mut chunks,
                &mut report,
                Chunk {
                    scale: i,
                    kind: ChunkKind::Feature,
                    count: fsyms,
                    payload: fpayload,
                },
                fideal,
                fsyms,
            );
            let featured = slne_feature_tensor(&q, &c2, prev, slne_dec)?;
            let mut enc = RangeEncoder::new();
            let mut rec = one_stage_encode(sopa, &featured, &truth, &mut enc)?;
            let ideal = enc.cost_bits();
            push(
                &mut chunks,
                &mut report,
                Chunk {
                    scale: i,
                    kind: ChunkKind::Occupancy,
                    count: truth.len() as u64,
                    payload: enc.finish(),
                },
                ideal,
                8 * prev.len() as u64,
            );

            // Thresholded upper scales: only the kept count is transmitted.
            for i in (cfg.m + 2)..=n {
                let prev_t = pov_tensor(i - 1, rec);
                let pred = sopa_one_stage(&prev_t, refine)?;
                let k = pyramid[i as usize].len().min(pred.coords.len());
                rec = lossy_threshold(&pred, k)?;
                push(
                    &mut chunks,
                    &mut report,
                    Chunk {
                        scale: i,
                        kind: ChunkKind::Count,
                        count: k as u64,
                        payload: Vec::new(),
                    },
                    0.0,
                    0,
                );
            }
        }
        CodecMode::LossySparse => {
            let position = ModelSet::require(&models.position, "position", ArchId::SopaPosition)?;
            let coarse = &pyramid[cfg.m as usize];
            let pred = sopa_position(coarse, position)?;
            let values: Vec<i64> = pred
                .offsets
                .iter()
                .flat_map(|o| o.iter().map(|&v| v.round() as i64))
                .collect();
            let fm = offset_model();
            let (payload, ideal) = factorized_encode_tracked(&values, &fm, |j| j % 3);
            let syms = values.len() as u64;
            push(
                &mut chunks,
                &mut report,
                Chunk {
                    scale: cfg.m,
                    kind: ChunkKind::Offsets,
                    count: coarse.len() as u64,
                    payload,
                },
                ideal,
                syms,
            );
        }
    }

    Ok((
        Bitstream {
            mode: cfg.mode,
            arch: cfg.arch,
            n_bits: n,
            m: cfg.m,
            original_count: cloud.original_count as u64,
            model_checksum,
            chunks,
        },
        report,
    ))
}

pub fn decode(bs: &Bitstream, models: &ModelSet) -> Result<PointCloud> {
    let cfg = CodecConfig {
        mode: bs.mode,
        n_bits: bs.n_bits,
        m: bs.m,
        arch: bs.arch,
    };
    cfg.validate()?;
    if models.checksum(&cfg)? != bs.model_checksum {
        return Err(Error::Codec("model mismatch".into()));
    }

    let mut chunks = bs.chunks.iter();
    fn next_chunk<'a>(
        it: &mut std::slice::Iter<'a, Chunk>,
        scale: u32,
        kind: ChunkKind,
    ) -> Result<&'a Chunk> {
        let c = it
            .next()
            .ok_or_else(|| Error::Bitstream("missing chunk".into()))?;
        if c.scale != scale || c.kind != kind {
            return Err(Error::Bitstream(format!(
                "unexpected chunk (scale {}, kind {:?})",
                c.scale, c.kind
            )));
        }
        Ok(c)
    }

    let lossless_top = match bs.mode {
        CodecMode::Lossless => bs.n_bits,
        _ => bs.m,
    };
    let mut scales: Vec<Vec<Coord3>> = vec![vec![Coord3::new(0, 0, 0)]];
    for i in 1..=lossless_top {
        let prev = pov_tensor(i - 1, scales[(i - 1) as usize].clone());
        let kept = match cfg.arch {
            LosslessArch::OneStage => {
                let net = ModelSet::require(&models.occupancy, "occupancy", ArchId::OneStageSopa)?;
                let c = next_chunk(&mut chunks, i, ChunkKind::Occupancy)?;
                let mut dec = RangeDecoder::new(&c.payload)?;
                one_stage_decode(net, &prev, &mut dec)?
            }
            LosslessArch::ThreeStage | LosslessArch::EightStage => {
                let (role_arch, variant) = if cfg.arch == LosslessArch::ThreeStage {
                    (ArchId::MultistageSopa3, GroupingVariant::ThreeStage)
                } else {
                    (ArchId::MultistageSopa8, GroupingVariant::EightStage)
                };
                let net = ModelSet::require(&models.occupancy, "occupancy", role_arch)?;
                let arr = GroupingArrangement::new(variant);
                let c = next_chunk(&mut chunks, i, ChunkKind::Occupancy)?;
                let mut dec = RangeDecoder::new(&c.payload)?;
                let mut tape = Tape::new();
                let x = tape.input(prev.len(), prev.width(), prev.features().to_vec());
                let mut coder = StreamDecoder { dec: &mut dec };
                let (kept, _) =
                    multistage_forward(&mut tape, net, prev.coords(), x, &arr, &mut coder)?;
                kept
            }
            LosslessArch::SlneOneStage => {
                let sopa = ModelSet::require(&models.slne_sopa, "slne_sopa", ArchId::OneStageSopa)?;
                if i >= 2 {
                    let slne_enc =
                        ModelSet::require(&models.slne_enc, "slne_enc", ArchId::SlneEncoder)?;
                    let slne_dec =
                        ModelSet::require(&models.slne_dec, "slne_dec", ArchId::SlneDecoder)?;
                    let fm = latent_model(slne_enc)?;
                    let fc = next_chunk(&mut chunks, i, ChunkKind::Feature)?;
                    let c_lat = slne_enc.c_lat;
                    let n_latent = scales[(i - 2) as usize].len() * c_lat;
                    if fc.count != n_latent as u64 {
                        return Err(Error::Bitstream("latent count mismatch".into()));
                    }
                    let q = factorized_decode(&fc.payload, n_latent, &fm, |j| j % c_lat)?;
                    let c2 = scales[(i - 2) as usize].clone();
                    let featured = slne_feature_tensor(&q, &c2, &prev, slne_dec)?;
                    let oc = next_chunk(&mut chunks, i, ChunkKind::Occupancy)?;
                    let mut dec = RangeDecoder::new(&oc.payload)?;
                    one_stage_decode(sopa, &featured, &mut dec)?
                } else {
                    let oc = next_chunk(&mut chunks, i, ChunkKind::Occupancy)?;
                    let mut dec = RangeDecoder::new(&oc.payload)?;
                    let mut kept = Vec::new();
                    for &c in prev.voxel_upscale_geom().coords() {
                        if dec.decode_bit(quantize_prob(0.5))? {
                            kept.push(c);
                        }
                    }
                    kept
                }
            }
        };
        scales.push(kept);
    }

    let final_points = match bs.mode {
        CodecMode::Lossless => scales.pop().unwrap(),
        CodecMode::LossyDense => {
            let slne_enc = ModelSet::require(&models.slne_enc, "slne_enc", ArchId::SlneEncoder)?;
            let slne_dec = ModelSet::require(&models.slne_dec, "slne_dec", ArchId::SlneDecoder)?;
            let sopa = ModelSet::require(&models.slne_sopa, "slne_sopa", ArchId::OneStageSopa)?;
            let refine = ModelSet::require(&models.refine, "refine", ArchId::OneStageSopa)?;
            let i = bs.m + 1;
            let prev = pov_tensor(bs.m, scales[bs.m as usize].clone());
            let fm = latent_model(slne_enc)?;
            let fc = next_chunk(&mut chunks, i, ChunkKind::Feature)?;
            let c_lat = slne_enc.c_lat;
            let n_latent = scales[(bs.m - 1) as usize].len() * c_lat;
            if fc.count != n_latent as u64 {
                return Err(Error::Bitstream("latent count mismatch".into()));
            }
            let q = factorized_decode(&fc.payload, n_latent, &fm, |j| j % c_lat)?;
            let c2 = scales[(bs.m - 1) as usize].clone();
            let featured = slne_feature_tensor(&q, &c2, &prev, slne_dec)?;
            let oc = next_chunk(&mut chunks, i, ChunkKind::Occupancy)?;
            let mut dec = RangeDecoder::new(&oc.payload)?;
            let mut rec = one_stage_decode(sopa, &featured, &mut dec)?;
            for i in (bs.m + 2)..=bs.n_bits {
                let c = next_chunk(&mut chunks, i, ChunkKind::Count)?;
                let prev_t = pov_tensor(i - 1, rec);
                let pred = sopa_one_stage(&prev_t, refine)?;
                rec = lossy_threshold(&pred, c.count as usize)?;
            }
            rec
        }
        CodecMode::LossySparse => {
            let c = next_chunk(&mut chunks, bs.m, ChunkKind::Offsets)?;
            let coarse = &scales[bs.m as usize];
            if c.count != coarse.len() as u64 {
                return Err(Error::Bitstream("offset count mismatch".into()));
            }
            let fm = offset_model();
            let values = factorized_decode(&c.payload, coarse.len() * 3, &fm, |j| j % 3)?;
            coarse
                .iter()
                .zip(values.chunks_exact(3))
                .map(|(&p, o)| {
                    reconstruct(
                        p,
                        [o[0] as f64, o[1] as f64, o[2] as f64],
                        bs.n_bits,
                        bs.m,
                    )
                })
                .collect()
        }
    };
    if chunks.next().is_some() {
        return Err(Error::Bitstream("unconsumed chunks".into()));
    }
    let n_raw = final_points.len();
    let mut cloud = PointCloud::from_points(final_points, bs.n_bits)?;
    cloud.original_count = n_raw;
    Ok(cloud)
}

#[derive(Debug, Clone)]
pub struct RateReport {
    /// (scale, bits including the chunk's local header)
    pub per_scale: Vec<(u32, u64)>,
    pub header_bits: u64,
    pub total_bits: u64,
    pub bpp: f64,
}

pub fn rate_report(bs: &Bitstream) -> RateReport {
    let total_bits = (bs.to_bytes().len() * 8) as u64;
    let mut per_scale: Vec<(u32, u64)> = Vec::new();
    for c in &bs.chunks {
        let mut var = Vec::new();
        write_varint(&mut var, c.count);
        let bits = ((1 + 1 + var.len() + 4 + c.payload.len()) * 8) as u64;
        match per_scale.iter_mut().find(|(s, _)| *s == c.scale) {
            Some(slot) => slot.1 += bits,
            None => per_scale.push((c.scale, bits)),
        }
    }
    let chunk_bits: u64 = per_scale.iter().map(|(_, b)| b).sum();
    RateReport {
        per_scale,
        header_bits: total_bits - chunk_bits,
        total_bits,
        bpp: total_bits as f64 / bs.original_count.max(1) as f64,
    }
}
