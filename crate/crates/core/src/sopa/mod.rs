//! Occupancy-probability models over the scale pyramid: one-stage and
//! multi-stage child prediction, local neighborhood embeddings for side
//! information, probability thresholding and position offset adjustment.
//!
//! Encoder and decoder share the exact forward code paths here, so the
//! probability sequence seen by the range coder is bit-identical on both
//! sides as long as the tensors and weights match.

use std::collections::{HashMap, HashSet};

use crate::entropy::{quantize_prob, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::{
    down2_pairs, forward_dfa, forward_ool, up2_coords, up2_pairs, ArchId, ArchPlan, NeighborMap,
    Network, NodeId, Tape,
};
use crate::tensor::{
    child_offset, Coord3, GroupingArrangement, OccupancyRole, SparseTensor,
};

#[derive(Debug, Clone)]
pub struct StagePrediction {
    pub coords: Vec<Coord3>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OffsetPrediction {
    pub coords: Vec<Coord3>,
    pub offsets: Vec<[f64; 3]>,
}

/// One coded occupancy decision. The implementation decides where the
/// symbol comes from (ground truth, the bitstream, or teacher forcing) and
/// whether it also goes to a coder.
pub trait OccCoder {
    fn code(&mut self, coord: Coord3, prob: f64) -> Result<bool>;
}

/// Encode side: symbol is ground-truth membership, written to the stream.
pub struct TruthEncoder<'a, 'b> {
    pub truth: &'a HashSet<Coord3>,
    pub enc: &'b mut RangeEncoder,
}

impl OccCoder for TruthEncoder<'_, '_> {
    fn code(&mut self, coord: Coord3, prob: f64) -> Result<bool> {
        let sym = self.truth.contains(&coord);
        self.enc.encode_bit(quantize_prob(prob), sym);
        Ok(sym)
    }
}

/// Decode side: symbol is pulled from the stream.
pub struct StreamDecoder<'a, 'b> {
    pub dec: &'a mut RangeDecoder<'b>,
}

impl OccCoder for StreamDecoder<'_, '_> {
    fn code(&mut self, _coord: Coord3, prob: f64) -> Result<bool> {
        self.dec.decode_bit(quantize_prob(prob))
    }
}

/// Training side: ground-truth symbols, nothing coded.
pub struct TeacherForcing<'a> {
    pub truth: &'a HashSet<Coord3>,
}

impl OccCoder for TeacherForcing<'_> {
    fn code(&mut self, coord: Coord3, _prob: f64) -> Result<bool> {
        Ok(self.truth.contains(&coord))
    }
}

fn check_arch(net: &Network, want: &[ArchId]) -> Result<()> {
    if !want.contains(&net.arch) {
        return Err(Error::Network(format!(
            "architecture {} not usable here",
            net.arch.as_str()
        )));
    }
    Ok(())
}

/// One-stage prediction on the tape: all 8 children of every input POV get
/// a probability in one pass. Returns (child coords, probability node).
pub fn one_stage_forward(
    tape: &mut Tape,
    net: &Network,
    prev_coords: &[Coord3],
    prev_feats: NodeId,
) -> Result<(Vec<Coord3>, NodeId)> {
    check_arch(net, &[ArchId::OneStageSopa])?;
    let (embed, dfa_lo, up, dfa_hi, ool) = match &net.plan {
        ArchPlan::OneStage {
            embed,
            dfa_lo,
            up,
            dfa_hi,
            ool,
        } => (embed, dfa_lo, up, dfa_hi, ool),
        _ => unreachable!(),
    };
    if tape.shape(prev_feats).1 != net.c_in {
        return Err(Error::Network(format!(
            "input width {} != expected {}",
            tape.shape(prev_feats).1,
            net.c_in
        )));
    }
    let nb_lo = NeighborMap::build(prev_coords, net.k);
    let e = tape.conv(&net.params, prev_feats, embed, nb_lo.full.clone(), prev_coords.len());
    let h = forward_dfa(tape, &net.params, e, dfa_lo, &nb_lo);
    let child_coords = up2_coords(prev_coords);
    let u = tape.conv(
        &net.params,
        h,
        up,
        up2_pairs(prev_coords.len()),
        child_coords.len(),
    );
    let nb_hi = NeighborMap::build(&child_coords, net.k);
    let h = forward_dfa(tape, &net.params, u, dfa_hi, &nb_hi);
    let p = forward_ool(tape, &net.params, h, ool, &nb_hi);
    Ok((child_coords, p))
}

/// Inference wrapper: probabilities for all MP-POV children of `prev`.
pub fn sopa_one_stage(prev: &SparseTensor, net: &Network) -> Result<StagePrediction> {
    let mut tape = Tape::new();
    let x = tape.input(prev.len(), prev.width(), prev.features().to_vec());
    let (coords, p) = one_stage_forward(&mut tape, net, prev.coords(), x)?;
    Ok(StagePrediction {
        coords,
        probs: tape.value(p).to_vec(),
    })
}

/// Per-stage record from a multi-stage pass. `probs` holds exactly the
/// stage's MP-POV rows, aligned with `coords` and `symbols`.
pub struct StageTrace {
    pub coords: Vec<Coord3>,
    pub probs: NodeId,
    pub symbols: Vec<bool>,
}

/// Multi-stage prediction and coding. Shared by encoder (symbols from
/// ground truth), decoder (symbols from the stream) and training (teacher
/// forcing): the working tensor at stage n holds earlier survivors with
/// their latest features plus stage-n candidates with backbone features, so
/// stage-n probabilities depend only on already-decided occupancy.
pub fn multistage_forward(
    tape: &mut Tape,
    net: &Network,
    prev_coords: &[Coord3],
    prev_feats: NodeId,
    arr: &GroupingArrangement,
    coder: &mut dyn OccCoder,
) -> Result<(Vec<Coord3>, Vec<StageTrace>)> {
    check_arch(net, &[ArchId::MultistageSopa3, ArchId::MultistageSopa8])?;
    let (embed, dfa_lo, up, stages) = match &net.plan {
        ArchPlan::Multistage {
            embed,
            dfa_lo,
            up,
            stages,
        } => (embed, dfa_lo, up, stages),
        _ => unreachable!(),
    };
    if stages.len() != arr.stage_count() {
        return Err(Error::Network(format!(
            "network has {} stages, arrangement has {}",
            stages.len(),
            arr.stage_count()
        )));
    }
    if prev_coords.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }

    let nb_lo = NeighborMap::build(prev_coords, net.k);
    let e = tape.conv(&net.params, prev_feats, embed, nb_lo.full.clone(), prev_coords.len());
    let h = forward_dfa(tape, &net.params, e, dfa_lo, &nb_lo);
    let children = up2_coords(prev_coords);
    let backbone = tape.conv(&net.params, h, up, up2_pairs(prev_coords.len()), children.len());

    // Children bucketed by stage, each bucket in Morton order.
    let mut by_stage: Vec<Vec<(Coord3, u32)>> = vec![Vec::new(); arr.stage_count()];
    for (row, &c) in children.iter().enumerate() {
        let (_, stage) = arr.group_of(child_offset(c));
        by_stage[stage - 1].push((c, row as u32));
    }

    // Survivors carry (coord, source node, source row); kept Morton-sorted.
    let mut survivors: Vec<(Coord3, NodeId, u32)> = Vec::new();
    let mut traces = Vec::new();
    for (s, (dfa, ool)) in stages.iter().enumerate() {
        let candidates = &by_stage[s];
        if candidates.is_empty() && survivors.is_empty() {
            traces.push(StageTrace {
                coords: Vec::new(),
                probs: tape.input(0, 1, Vec::new()),
                symbols: Vec::new(),
            });
            continue;
        }
        let mut working: Vec<(Coord3, NodeId, u32, bool)> = survivors
            .iter()
            .map(|&(c, n, r)| (c, n, r, false))
            .chain(candidates.iter().map(|&(c, r)| (c, backbone, r, true)))
            .collect();
        working.sort_by_key(|&(c, ..)| c.morton());
        let coords_w: Vec<Coord3> = working.iter().map(|&(c, ..)| c).collect();
        let x = tape.gather(working.iter().map(|&(_, n, r, _)| (n, r)).collect());
        let nb = NeighborMap::build(&coords_w, net.k);
        let hw = forward_dfa(tape, &net.params, x, dfa, &nb);
        let pw = forward_ool(tape, &net.params, hw, ool, &nb);

        let stage_rows: Vec<usize> = working
            .iter()
            .enumerate()
            .filter(|(_, &(.., cand))| cand)
            .map(|(i, _)| i)
            .collect();
        let mut coords = Vec::with_capacity(stage_rows.len());
        let mut symbols = Vec::with_capacity(stage_rows.len());
        let p_vals = tape.value(pw).to_vec();
        let mut next: Vec<(Coord3, NodeId, u32)> = Vec::new();
        for (i, &(c, .., cand)) in working.iter().enumerate() {
            if cand {
                let sym = coder.code(c, p_vals[i])?;
                coords.push(c);
                symbols.push(sym);
                if sym {
                    next.push((c, hw, i as u32));
                }
            } else {
                next.push((c, hw, i as u32));
            }
        }
        survivors = next;
        let probs = tape.gather_or_empty(stage_rows.iter().map(|&i| (pw, i as u32)).collect(), 1);
        traces.push(StageTrace {
            coords,
            probs,
            symbols,
        });
    }
    Ok((survivors.iter().map(|&(c, ..)| c).collect(), traces))
}

/// Keeps the `k` highest-probability coordinates; ties resolve toward the
/// earlier (Morton-smaller) coordinate. Output stays in Morton order.
pub fn lossy_threshold(pred: &StagePrediction, k: usize) -> Result<Vec<Coord3>> {
    if k > pred.coords.len() {
        return Err(Error::Codec(format!(
            "keep count {} exceeds candidate count {}",
            k,
            pred.coords.len()
        )));
    }
    let mut order: Vec<usize> = (0..pred.coords.len()).collect();
    order.sort_by(|&a, &b| {
        pred.probs[b]
            .partial_cmp(&pred.probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(pred.coords[a].morton().cmp(&pred.coords[b].morton()))
    });
    let mut keep: Vec<Coord3> = order[..k].iter().map(|&i| pred.coords[i]).collect();
    keep.sort_by_key(|c| c.morton());
    Ok(keep)
}

/// SLNE analysis transform on the tape: aggregates scale-i geometry down
/// two dyadic steps and projects to the narrow latent. Returns the two
/// coarser coordinate lists and the pre-quantization latent node.
pub fn slne_encoder_forward(
    tape: &mut Tape,
    net: &Network,
    coords_i: &[Coord3],
    feats: NodeId,
) -> Result<(Vec<Coord3>, Vec<Coord3>, NodeId)> {
    check_arch(net, &[ArchId::SlneEncoder])?;
    let (embed, dfa1, down1, dfa2, down2, dfa3, proj) = match &net.plan {
        ArchPlan::SlneEncoder {
            embed,
            dfa1,
            down1,
            dfa2,
            down2,
            dfa3,
            proj,
            ..
        } => (embed, dfa1, down1, dfa2, down2, dfa3, proj),
        _ => unreachable!(),
    };
    let downscale = |coords: &[Coord3]| -> (Vec<Coord3>, HashMap<Coord3, usize>) {
        let mut parents: Vec<Coord3> = coords.iter().map(|c| c.parent()).collect();
        parents.sort_by_key(|c| c.morton());
        parents.dedup();
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        (parents, index)
    };

    let nb_i = NeighborMap::build(coords_i, net.k);
    let e = tape.conv(&net.params, feats, embed, nb_i.full.clone(), coords_i.len());
    let h = forward_dfa(tape, &net.params, e, dfa1, &nb_i);

    let (c1, idx_i) = downscale(coords_i);
    let h = tape.conv(&net.params, h, down1, down2_pairs(&c1, &idx_i), c1.len());
    let nb1 = NeighborMap::build(&c1, net.k);
    let h = forward_dfa(tape, &net.params, h, dfa2, &nb1);

    let (c2, idx_1) = downscale(&c1);
    let h = tape.conv(&net.params, h, down2, down2_pairs(&c2, &idx_1), c2.len());
    let nb2 = NeighborMap::build(&c2, net.k);
    let h = forward_dfa(tape, &net.params, h, dfa3, &nb2);
    let z = tape.conv(&net.params, h, proj, nb2.center.clone(), c2.len());
    Ok((c1, c2, z))
}

/// Inference-side SLNE: quantize by rounding (half away from zero).
/// Returns (scale i-1 geometry, scale i-2 coords, quantized latents
/// row-major n x c_lat).
pub fn slne_encode(t: &SparseTensor, net: &Network) -> Result<(SparseTensor, Vec<Coord3>, Vec<i64>)> {
    let mut tape = Tape::new();
    let x = tape.input(t.len(), t.width(), t.features().to_vec());
    let (c1, c2, z) = slne_encoder_forward(&mut tape, net, t.coords(), x)?;
    let q: Vec<i64> = tape.value(z).iter().map(|&v| v.round() as i64).collect();
    let geom = SparseTensor::from_coords(t.scale() - 1, c1, OccupancyRole::Pov)?;
    Ok((geom, c2, q))
}

/// SLNE synthesis on the tape: latent at scale i-2 up to the known POV
/// coordinates of scale i-1 plus a DFA. All three callers (encoder, decoder,
/// training) go through here.
pub fn slne_decoder_forward(
    tape: &mut Tape,
    net: &Network,
    zq: NodeId,
    coords_im2: &[Coord3],
    coords_im1: &[Coord3],
) -> Result<NodeId> {
    check_arch(net, &[ArchId::SlneDecoder])?;
    let (up, dfa) = match &net.plan {
        ArchPlan::SlneDecoder { up, dfa } => (up, dfa),
        _ => unreachable!(),
    };
    let children = up2_coords(coords_im2);
    let u = tape.conv(&net.params, zq, up, up2_pairs(coords_im2.len()), children.len());
    let rows: HashMap<Coord3, u32> = children
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i as u32))
        .collect();
    let mut sources = Vec::with_capacity(coords_im1.len());
    for &c in coords_im1 {
        let r = rows
            .get(&c)
            .ok_or_else(|| Error::Codec("latent coords do not cover the POV set".into()))?;
        sources.push((u, *r));
    }
    let g = tape.gather_or_empty(sources, net.c);
    let nb = NeighborMap::build(coords_im1, net.k);
    Ok(forward_dfa(tape, &net.params, g, dfa, &nb))
}

/// Inference wrapper: decoded features attached to the scale-(i-1) POVs.
pub fn slne_decode_features(
    q: &[i64],
    coords_im2: &[Coord3],
    coords_im1: &[Coord3],
    net: &Network,
) -> Result<Vec<f64>> {
    if q.len() != coords_im2.len() * net.c_in {
        return Err(Error::Codec("latent length mismatch".into()));
    }
    let mut tape = Tape::new();
    let z = tape.input(
        coords_im2.len(),
        net.c_in,
        q.iter().map(|&v| v as f64).collect(),
    );
    let f = slne_decoder_forward(&mut tape, net, z, coords_im2, coords_im1)?;
    Ok(tape.value(f).to_vec())
}

/// Offset head on the tape: per-voxel real 3-vectors at the coarse scale.
pub fn position_forward(
    tape: &mut Tape,
    net: &Network,
    coords: &[Coord3],
    feats: NodeId,
) -> Result<NodeId> {
    check_arch(net, &[ArchId::SopaPosition])?;
    let (embed, dfa, ool) = match &net.plan {
        ArchPlan::Position { embed, dfa, ool } => (embed, dfa, ool),
        _ => unreachable!(),
    };
    let nb = NeighborMap::build(coords, net.k);
    let e = tape.conv(&net.params, feats, embed, nb.full.clone(), coords.len());
    let h = forward_dfa(tape, &net.params, e, dfa, &nb);
    Ok(forward_ool(tape, &net.params, h, ool, &nb))
}

pub fn sopa_position(coarse: &SparseTensor, net: &Network) -> Result<OffsetPrediction> {
    let mut tape = Tape::new();
    let x = tape.input(coarse.len(), coarse.width(), coarse.features().to_vec());
    let o = position_forward(&mut tape, net, coarse.coords(), x)?;
    let v = tape.value(o);
    Ok(OffsetPrediction {
        coords: coarse.coords().to_vec(),
        offsets: v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

/// Maps a scale-m coordinate plus a predicted offset to full precision:
/// upscale by 2^(N-m), add the rounded offset, clamp into [0, 2^N).
pub fn reconstruct(coord: Coord3, offset: [f64; 3], n_bits: u32, m: u32) -> Coord3 {
    let f = 1i64 << (n_bits - m);
    let hi = (1i64 << n_bits) - 1;
    let comp = |c: i32, o: f64| ((c as i64 * f + o.round() as i64).clamp(0, hi)) as i32;
    Coord3::new(
        comp(coord.x, offset[0]),
        comp(coord.y, offset[1]),
        comp(coord.z, offset[2]),
    )
}
