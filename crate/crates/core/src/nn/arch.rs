//! Network architectures: parameter layouts for the occupancy-probability,
//! neighborhood-embedding and position-offset models, plus forward
//! evaluation of their shared building blocks.

use std::rc::Rc;

use rand::Rng;

use super::layers::{
    center_kernel, child_kernel, full_kernel, init_conv, ConvSpec, LayoutBuilder, NeighborMap,
    Pair, ScalarBlock,
};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    OneStageSopa,
    MultistageSopa3,
    MultistageSopa8,
    SlneEncoder,
    SlneDecoder,
    SopaPosition,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::OneStageSopa => "one_stage_sopa",
            ArchId::MultistageSopa3 => "multistage_sopa_3",
            ArchId::MultistageSopa8 => "multistage_sopa_8",
            ArchId::SlneEncoder => "slne_encoder",
            ArchId::SlneDecoder => "slne_decoder",
            ArchId::SopaPosition => "sopa_position",
        }
    }

    pub fn from_str(s: &str) -> Result<ArchId> {
        Ok(match s {
            "one_stage_sopa" => ArchId::OneStageSopa,
            "multistage_sopa_3" => ArchId::MultistageSopa3,
            "multistage_sopa_8" => ArchId::MultistageSopa8,
            "slne_encoder" => ArchId::SlneEncoder,
            "slne_decoder" => ArchId::SlneDecoder,
            "sopa_position" => ArchId::SopaPosition,
            other => return Err(Error::Network(format!("unknown arch id '{}'", other))),
        })
    }
}

/// One Inception-ResNet unit: two parallel branches at C/2 channels,
/// concatenated, fused by a 1^3 conv, plus the input residual.
#[derive(Debug, Clone)]
pub struct IrnUnitSpec {
    pub a: ConvSpec,    // k^3, C -> C/2
    pub b1: ConvSpec,   // 1^3, C -> C/2
    pub b2: ConvSpec,   // k^3, C/2 -> C/2
    pub fuse: ConvSpec, // 1^3, C -> C
}

pub const IRN_UNITS_PER_DFA: usize = 3;

#[derive(Debug, Clone)]
pub struct DfaSpec {
    pub units: Vec<IrnUnitSpec>,
}

#[derive(Debug, Clone)]
pub struct OolSpec {
    pub l1: ConvSpec, // k^3, C -> C
    pub l2: ConvSpec, // k^3, C -> C/2
    pub l3: ConvSpec, // 1^3, C/2 -> out
    pub sigmoid: bool,
}

#[derive(Debug, Clone)]
pub enum ArchPlan {
    OneStage {
        embed: ConvSpec, // k^3, c_in -> C
        dfa_lo: DfaSpec,
        up: ConvSpec, // 2^3, C -> C, up2
        dfa_hi: DfaSpec,
        ool: OolSpec,
    },
    Multistage {
        embed: ConvSpec,
        dfa_lo: DfaSpec,
        up: ConvSpec,
        stages: Vec<(DfaSpec, OolSpec)>,
    },
    SlneEncoder {
        embed: ConvSpec,
        dfa1: DfaSpec,
        down1: ConvSpec, // 2^3, C -> C, down2
        dfa2: DfaSpec,
        down2: ConvSpec,
        dfa3: DfaSpec,
        proj: ConvSpec, // 1^3, C -> c_lat
        log_b: ScalarBlock,
    },
    SlneDecoder {
        up: ConvSpec, // 2^3, c_lat -> C, up2
        dfa: DfaSpec,
    },
    Position {
        embed: ConvSpec,
        dfa: DfaSpec,
        ool: OolSpec, // offset mode: 3 channels, no sigmoid
    },
}

/// A complete parameterized network: flat parameter vector plus the layout
/// describing how blocks index into it.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchId,
    pub k: usize,
    pub c: usize,
    pub c_in: usize,
    pub c_lat: usize,
    pub plan: ArchPlan,
    pub params: Vec<f64>,
}

fn build_dfa(lb: &mut LayoutBuilder, k: usize, c: usize) -> DfaSpec {
    let units = (0..IRN_UNITS_PER_DFA)
        .map(|_| IrnUnitSpec {
            a: lb.conv(full_kernel(k), c, c / 2),
            b1: lb.conv(center_kernel(), c, c / 2),
            b2: lb.conv(full_kernel(k), c / 2, c / 2),
            fuse: lb.conv(center_kernel(), c, c),
        })
        .collect();
    DfaSpec { units }
}

fn build_ool(lb: &mut LayoutBuilder, k: usize, c: usize, out: usize, sigmoid: bool) -> OolSpec {
    OolSpec {
        l1: lb.conv(full_kernel(k), c, c),
        l2: lb.conv(full_kernel(k), c, c / 2),
        l3: lb.conv(center_kernel(), c / 2, out),
        sigmoid,
    }
}

impl Network {
    /// Builds a zero-initialized network. `c_in` is the input feature width
    /// (1 for geometry-only input); `c_lat` is the quantized latent width
    /// and only meaningful for the SLNE pair.
    pub fn new(arch: ArchId, k: usize, c: usize, c_in: usize, c_lat: usize) -> Result<Network> {
        if c % 2 != 0 {
            return Err(Error::Network("channel count C must be even".into()));
        }
        if k % 2 == 0 {
            return Err(Error::Network("kernel size k must be odd".into()));
        }
        let mut lb = LayoutBuilder::new();
        let plan = match arch {
            ArchId::OneStageSopa => ArchPlan::OneStage {
                embed: lb.conv(full_kernel(k), c_in, c),
                dfa_lo: build_dfa(&mut lb, k, c),
                up: lb.conv(child_kernel(), c, c),
                dfa_hi: build_dfa(&mut lb, k, c),
                ool: build_ool(&mut lb, k, c, 1, true),
            },
            ArchId::MultistageSopa3 | ArchId::MultistageSopa8 => {
                let n_stages = if arch == ArchId::MultistageSopa3 { 3 } else { 8 };
                ArchPlan::Multistage {
                    embed: lb.conv(full_kernel(k), c_in, c),
                    dfa_lo: build_dfa(&mut lb, k, c),
                    up: lb.conv(child_kernel(), c, c),
                    stages: (0..n_stages)
                        .map(|_| {
                            (
                                build_dfa(&mut lb, k, c),
                                build_ool(&mut lb, k, c, 1, true),
                            )
                        })
                        .collect(),
                }
            }
            ArchId::SlneEncoder => ArchPlan::SlneEncoder {
                embed: lb.conv(full_kernel(k), c_in, c),
                dfa1: build_dfa(&mut lb, k, c),
                down1: lb.conv(child_kernel(), c, c),
                dfa2: build_dfa(&mut lb, k, c),
                down2: lb.conv(child_kernel(), c, c),
                dfa3: build_dfa(&mut lb, k, c),
                proj: lb.conv(center_kernel(), c, c_lat),
                log_b: lb.scalars(c_lat),
            },
            ArchId::SlneDecoder => ArchPlan::SlneDecoder {
                up: lb.conv(child_kernel(), c_in, c),
                dfa: build_dfa(&mut lb, k, c),
            },
            ArchId::SopaPosition => ArchPlan::Position {
                embed: lb.conv(full_kernel(k), c_in, c),
                dfa: build_dfa(&mut lb, k, c),
                ool: build_ool(&mut lb, k, c, 3, false),
            },
        };
        Ok(Network {
            arch,
            k,
            c,
            c_in,
            c_lat,
            plan,
            params: vec![0.0; lb.total_len()],
        })
    }

    /// He-uniform initialization of all convolutions; Laplace log-scales
    /// start at 0 (b = 1).
    pub fn init(&mut self, rng: &mut impl Rng) {
        let specs = self.conv_specs();
        for spec in specs {
            init_conv(&mut self.params, &spec, rng);
        }
        if let ArchPlan::SlneEncoder { log_b, proj, .. } = &self.plan {
            for i in 0..log_b.len {
                self.params[log_b.base + i] = 0.0;
            }
            // The latent projection starts at zero so the pipeline behaves
            // like the plain model until the encoder finds embeddings worth
            // their rate; random initial latents derail the occupancy head.
            for i in proj.base..proj.base + proj.param_len() {
                self.params[i] = 0.0;
            }
        }
    }

    /// All convolution specs in declaration order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        let dfa = |d: &DfaSpec, out: &mut Vec<ConvSpec>| {
            for u in &d.units {
                out.extend([u.a.clone(), u.b1.clone(), u.b2.clone(), u.fuse.clone()]);
            }
        };
        let ool = |o: &OolSpec, out: &mut Vec<ConvSpec>| {
            out.extend([o.l1.clone(), o.l2.clone(), o.l3.clone()]);
        };
        match &self.plan {
            ArchPlan::OneStage {
                embed,
                dfa_lo,
                up,
                dfa_hi,
                ool: o,
            } => {
                out.push(embed.clone());
                dfa(dfa_lo, &mut out);
                out.push(up.clone());
                dfa(dfa_hi, &mut out);
                ool(o, &mut out);
            }
            ArchPlan::Multistage {
                embed,
                dfa_lo,
                up,
                stages,
            } => {
                out.push(embed.clone());
                dfa(dfa_lo, &mut out);
                out.push(up.clone());
                for (d, o) in stages {
                    dfa(d, &mut out);
                    ool(o, &mut out);
                }
            }
            ArchPlan::SlneEncoder {
                embed,
                dfa1,
                down1,
                dfa2,
                down2,
                dfa3,
                proj,
                ..
            } => {
                out.push(embed.clone());
                dfa(dfa1, &mut out);
                out.push(down1.clone());
                dfa(dfa2, &mut out);
                out.push(down2.clone());
                dfa(dfa3, &mut out);
                out.push(proj.clone());
            }
            ArchPlan::SlneDecoder { up, dfa: d } => {
                out.push(up.clone());
                dfa(d, &mut out);
            }
            ArchPlan::Position { embed, dfa: d, ool: o } => {
                out.push(embed.clone());
                dfa(d, &mut out);
                ool(o, &mut out);
            }
        }
        out
    }

    /// 64-bit checksum over the little-endian weight bytes; identifies the
    /// exact parameter state for encoder/decoder model verification.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for &p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        fnv1a64(&bytes)
    }
}

/// Runs a DFA block (stack of IRN units) at fixed resolution.
pub fn forward_dfa(
    tape: &mut Tape,
    params: &[f64],
    x: NodeId,
    dfa: &DfaSpec,
    nb: &NeighborMap,
) -> NodeId {
    let rows = tape.shape(x).0;
    let mut x = x;
    for unit in &dfa.units {
        let a = tape.conv(params, x, &unit.a, nb.full.clone(), rows);
        let a = tape.relu(a);
        let b = tape.conv(params, x, &unit.b1, nb.center.clone(), rows);
        let b = tape.relu(b);
        let b = tape.conv(params, b, &unit.b2, nb.full.clone(), rows);
        let cat = tape.concat(a, b);
        let fused = tape.conv(params, cat, &unit.fuse, nb.center.clone(), rows);
        x = tape.add(x, fused);
    }
    x
}

/// Runs an OOL block; returns per-voxel probabilities (sigmoid head) or
/// raw offset vectors.
pub fn forward_ool(
    tape: &mut Tape,
    params: &[f64],
    x: NodeId,
    ool: &OolSpec,
    nb: &NeighborMap,
) -> NodeId {
    let rows = tape.shape(x).0;
    let h = tape.conv(params, x, &ool.l1, nb.full.clone(), rows);
    let h = tape.relu(h);
    let h = tape.conv(params, h, &ool.l2, nb.full.clone(), rows);
    let h = tape.relu(h);
    let h = tape.conv(params, h, &ool.l3, nb.center.clone(), rows);
    if ool.sigmoid {
        tape.sigmoid(h)
    } else {
        h
    }
}

/// Embedding conv + DFA at the input resolution.
pub fn forward_embed_dfa(
    tape: &mut Tape,
    params: &[f64],
    x: NodeId,
    embed: &ConvSpec,
    dfa: &DfaSpec,
    nb: &NeighborMap,
) -> NodeId {
    let rows = tape.shape(x).0;
    let e = tape.conv(params, x, embed, nb.full.clone(), rows);
    forward_dfa(tape, params, e, dfa, nb)
}

/// Generative transposed 2^3 upscale: 8 output rows per input row, aligned
/// with `up2_coords` of the input coordinate list.
pub fn forward_up2(
    tape: &mut Tape,
    params: &[f64],
    x: NodeId,
    up: &ConvSpec,
    pairs: Rc<[Pair]>,
) -> NodeId {
    let rows = tape.shape(x).0 * 8;
    tape.conv(params, x, up, pairs, rows)
}
