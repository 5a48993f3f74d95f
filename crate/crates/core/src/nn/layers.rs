//! Convolution parameter layout and neighbor-pair construction.
//!
//! All network parameters live in one flat `Vec<f64>` per network; a
//! `ConvSpec` describes one convolution's slice of it. Weights are stored
//! per kernel offset as a row-major `c_in x c_out` matrix, followed by the
//! bias vector.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::tensor::{ChildOffset, Coord3};

/// One (output row, kernel offset index, input row) contribution.
#[derive(Debug, Clone, Copy)]
pub struct Pair {
    pub out: u32,
    pub k: u16,
    pub inp: u32,
}

#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub offsets: Vec<[i32; 3]>,
    pub c_in: usize,
    pub c_out: usize,
    pub base: usize,
}

impl ConvSpec {
    pub fn weight_base(&self, k: usize) -> usize {
        self.base + k * self.c_in * self.c_out
    }

    pub fn bias_base(&self) -> usize {
        self.base + self.offsets.len() * self.c_in * self.c_out
    }

    pub fn param_len(&self) -> usize {
        self.offsets.len() * self.c_in * self.c_out + self.c_out
    }
}

/// A run of standalone scalar parameters (e.g. Laplace log-scales).
#[derive(Debug, Clone, Copy)]
pub struct ScalarBlock {
    pub base: usize,
    pub len: usize,
}

/// All offsets of a k^3 kernel (k odd), x-major, deterministic order.
pub fn full_kernel(k: usize) -> Vec<[i32; 3]> {
    let r = (k / 2) as i32;
    let mut offsets = Vec::with_capacity(k * k * k);
    for x in -r..=r {
        for y in -r..=r {
            for z in -r..=r {
                offsets.push([x, y, z]);
            }
        }
    }
    offsets
}

/// The 1^3 kernel: center offset only.
pub fn center_kernel() -> Vec<[i32; 3]> {
    vec![[0, 0, 0]]
}

/// The 2^3 stride kernel: the 8 child offsets in Morton order.
pub fn child_kernel() -> Vec<[i32; 3]> {
    ChildOffset::all()
        .iter()
        .map(|o| [o.0[0] as i32, o.0[1] as i32, o.0[2] as i32])
        .collect()
}

/// Allocates ConvSpecs and scalar blocks sequentially in one flat vector.
#[derive(Default)]
pub struct LayoutBuilder {
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn conv(&mut self, offsets: Vec<[i32; 3]>, c_in: usize, c_out: usize) -> ConvSpec {
        let spec = ConvSpec {
            offsets,
            c_in,
            c_out,
            base: self.len,
        };
        self.len += spec.param_len();
        spec
    }

    pub fn scalars(&mut self, len: usize) -> ScalarBlock {
        let block = ScalarBlock {
            base: self.len,
            len,
        };
        self.len += len;
        block
    }

    pub fn total_len(&self) -> usize {
        self.len
    }
}

/// He-uniform init scaled by fan-in; biases stay zero.
pub fn init_conv(params: &mut [f64], spec: &ConvSpec, rng: &mut impl Rng) {
    let fan_in = spec.c_in * spec.offsets.len();
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = spec.offsets.len() * spec.c_in * spec.c_out;
    for i in 0..n {
        params[spec.base + i] = rng.gen_range(-limit..limit);
    }
    for i in 0..spec.c_out {
        params[spec.bias_base() + i] = 0.0;
    }
}

/// Precomputed contribution lists for one coordinate set.
pub struct NeighborMap {
    /// k^3 kernel pairs (submanifold: output coords equal input coords).
    pub full: Rc<[Pair]>,
    /// 1^3 kernel pairs (identity mapping).
    pub center: Rc<[Pair]>,
}

impl NeighborMap {
    pub fn build(coords: &[Coord3], k: usize) -> Self {
        let index: HashMap<Coord3, usize> =
            coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self::build_with_index(coords, &index, k)
    }

    pub fn build_with_index(coords: &[Coord3], index: &HashMap<Coord3, usize>, k: usize) -> Self {
        let offsets = full_kernel(k);
        let mut full = Vec::new();
        for (u, &c) in coords.iter().enumerate() {
            for (ki, &off) in offsets.iter().enumerate() {
                if let Some(&row) = index.get(&c.offset_by(off)) {
                    full.push(Pair {
                        out: u as u32,
                        k: ki as u16,
                        inp: row as u32,
                    });
                }
            }
        }
        let center: Vec<Pair> = (0..coords.len())
            .map(|r| Pair {
                out: r as u32,
                k: 0,
                inp: r as u32,
            })
            .collect();
        NeighborMap {
            full: full.into(),
            center: center.into(),
        }
    }
}

/// Pairs for a strided 2^3 downscale: output rows follow `parents` (unique,
/// Morton-sorted); contributions come from occupied children `2v + o`.
pub fn down2_pairs(
    parents: &[Coord3],
    child_index: &HashMap<Coord3, usize>,
) -> Rc<[Pair]> {
    let offsets = ChildOffset::all();
    let mut pairs = Vec::new();
    for (v, &p) in parents.iter().enumerate() {
        for (ki, &o) in offsets.iter().enumerate() {
            if let Some(&row) = child_index.get(&p.child(o)) {
                pairs.push(Pair {
                    out: v as u32,
                    k: ki as u16,
                    inp: row as u32,
                });
            }
        }
    }
    pairs.into()
}

/// Pairs for a generative transposed 2^3 upscale: every input coordinate
/// produces its 8 children; output row `8 i + morton_rank(o)`. When the
/// inputs are Morton-sorted the output rows are too.
pub fn up2_pairs(n_in: usize) -> Rc<[Pair]> {
    let mut pairs = Vec::with_capacity(n_in * 8);
    for i in 0..n_in {
        for k in 0..8 {
            pairs.push(Pair {
                out: (i * 8 + k) as u32,
                k: k as u16,
                inp: i as u32,
            });
        }
    }
    pairs.into()
}

/// Child coordinates aligned with `up2_pairs` output rows.
pub fn up2_coords(parents: &[Coord3]) -> Vec<Coord3> {
    let mut out = Vec::with_capacity(parents.len() * 8);
    for &p in parents {
        for o in ChildOffset::all() {
            out.push(p.child(o));
        }
    }
    out
}
