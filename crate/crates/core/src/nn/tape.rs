//! Reverse-mode tape over per-voxel feature matrices.
//!
//! Every operation appends a node holding its value (rows x cols, row-major)
//! and enough structure to push gradients back to its inputs and to the flat
//! parameter vector. Forward evaluation is deterministic: contributions are
//! accumulated in pair-list order.

use std::rc::Rc;

use super::layers::{ConvSpec, Pair, ScalarBlock};
use crate::entropy::{clamp_prob, laplace_mass, laplace_mass_grad};

pub type NodeId = usize;

const LN2: f64 = std::f64::consts::LN_2;
const MIN_MASS: f64 = 1e-12;

enum Op {
    Input,
    Conv {
        input: NodeId,
        spec: ConvSpec,
        pairs: Rc<[Pair]>,
        pool: usize,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Gather {
        sources: Vec<(NodeId, u32)>,
    },
    /// Value differs from the input by an additive constant per element
    /// (quantization noise or rounding); gradients pass through unchanged.
    Shift {
        input: NodeId,
    },
    Bce {
        probs: NodeId,
        symbols: Vec<f64>,
    },
    LaplaceRate {
        q: NodeId,
        log_b: ScalarBlock,
        pool: usize,
    },
    Mse {
        pred: NodeId,
        target: Vec<f64>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter pool subsequent parameterized nodes index into; relevant
    /// only when several networks share one tape.
    current_pool: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Selects the parameter pool for the nodes recorded next. Single-network
    /// tapes never need this (pool 0 is the default).
    pub fn set_pool(&mut self, pool: usize) {
        self.current_pool = pool;
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Input)
    }

    /// Sparse convolution: out[r] = bias + sum over pairs W_k . in[i].
    /// `out_rows` must cover every pair's `out` index.
    pub fn conv(
        &mut self,
        params: &[f64],
        input: NodeId,
        spec: &ConvSpec,
        pairs: Rc<[Pair]>,
        out_rows: usize,
    ) -> NodeId {
        debug_assert_eq!(self.nodes[input].cols, spec.c_in);
        let (c_in, c_out) = (spec.c_in, spec.c_out);
        let bias = &params[spec.bias_base()..spec.bias_base() + c_out];
        let mut value = Vec::with_capacity(out_rows * c_out);
        for _ in 0..out_rows {
            value.extend_from_slice(bias);
        }
        let in_val = &self.nodes[input].value;
        for p in pairs.iter() {
            let w = &params[spec.weight_base(p.k as usize)..];
            let fi = &in_val[p.inp as usize * c_in..(p.inp as usize + 1) * c_in];
            let fo = &mut value[p.out as usize * c_out..(p.out as usize + 1) * c_out];
            for (ci, &x) in fi.iter().enumerate() {
                let wrow = &w[ci * c_out..(ci + 1) * c_out];
                for (co, o) in fo.iter_mut().enumerate() {
                    *o += x * wrow[co];
                }
            }
        }
        self.push(
            out_rows,
            c_out,
            value,
            Op::Conv {
                input,
                spec: spec.clone(),
                pairs,
                pool: self.current_pool,
            },
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let (rows, cols) = self.shape(input);
        let value = self.nodes[input].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(rows, cols, value, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let (rows, cols) = self.shape(input);
        let value = self.nodes[input]
            .value
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(rows, cols, value, Op::Sigmoid { input })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        debug_assert_eq!(self.shape(b), (rows, cols));
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(rows, cols, value, Op::Add { a, b })
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, ca) = self.shape(a);
        let (rows_b, cb) = self.shape(b);
        debug_assert_eq!(rows, rows_b);
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            value.extend_from_slice(&self.nodes[a].value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&self.nodes[b].value[r * cb..(r + 1) * cb]);
        }
        self.push(rows, ca + cb, value, Op::Concat { a, b })
    }

    /// Row-wise assembly: output row i copies row `sources[i].1` of node
    /// `sources[i].0`. All sources must share a column count.
    pub fn gather(&mut self, sources: Vec<(NodeId, u32)>) -> NodeId {
        let cols = self.nodes[sources[0].0].cols;
        let mut value = Vec::with_capacity(sources.len() * cols);
        for &(node, row) in &sources {
            debug_assert_eq!(self.nodes[node].cols, cols);
            let r = row as usize;
            value.extend_from_slice(&self.nodes[node].value[r * cols..(r + 1) * cols]);
        }
        self.push(sources.len(), cols, value, Op::Gather { sources })
    }

    /// Like `gather`, but tolerates an empty source list (`cols` disambiguates
    /// the empty shape).
    pub fn gather_or_empty(&mut self, sources: Vec<(NodeId, u32)>, cols: usize) -> NodeId {
        if sources.is_empty() {
            return self.input(0, cols, Vec::new());
        }
        debug_assert_eq!(self.nodes[sources[0].0].cols, cols);
        self.gather(sources)
    }

    /// Element-wise additive shift with straight-through gradient.
    pub fn shift(&mut self, input: NodeId, deltas: &[f64]) -> NodeId {
        let (rows, cols) = self.shape(input);
        debug_assert_eq!(deltas.len(), rows * cols);
        let value = self.nodes[input]
            .value
            .iter()
            .zip(deltas)
            .map(|(&v, &d)| v + d)
            .collect();
        self.push(rows, cols, value, Op::Shift { input })
    }

    /// Element-wise round-half-away-from-zero, straight-through gradient.
    pub fn round(&mut self, input: NodeId) -> NodeId {
        let (rows, cols) = self.shape(input);
        let value = self.nodes[input].value.iter().map(|&v| v.round()).collect();
        self.push(rows, cols, value, Op::Shift { input })
    }

    /// Binary cross-entropy in bits, summed over all elements; `probs` holds
    /// the probability of symbol 1 and is clamped before the log.
    pub fn bce(&mut self, probs: NodeId, symbols: &[bool]) -> NodeId {
        debug_assert_eq!(self.nodes[probs].value.len(), symbols.len());
        let mut total = 0.0;
        for (&p, &s) in self.nodes[probs].value.iter().zip(symbols) {
            let p = clamp_prob(p);
            total -= if s { p.log2() } else { (1.0 - p).log2() };
        }
        self.push(
            1,
            1,
            vec![total],
            Op::Bce {
                probs,
                symbols: symbols.iter().map(|&s| s as u8 as f64).collect(),
            },
        )
    }

    /// Feature rate in bits: sum of -log2(laplace bin mass) over all elements
    /// of `q`, with per-column scale b_c = exp(params[log_b.base + c]).
    pub fn laplace_rate(&mut self, params: &[f64], q: NodeId, log_b: ScalarBlock) -> NodeId {
        let cols = self.nodes[q].cols;
        debug_assert_eq!(cols, log_b.len);
        let mut total = 0.0;
        for (i, &v) in self.nodes[q].value.iter().enumerate() {
            let b = params[log_b.base + i % cols].exp();
            total -= laplace_mass(v, b).max(MIN_MASS).log2();
        }
        self.push(
            1,
            1,
            vec![total],
            Op::LaplaceRate {
                q,
                log_b,
                pool: self.current_pool,
            },
        )
    }

    /// Mean squared error over rows: (1/rows) * sum of squared differences.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> NodeId {
        let (rows, _) = self.shape(pred);
        debug_assert_eq!(self.nodes[pred].value.len(), target.len());
        let sum: f64 = self.nodes[pred]
            .value
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        self.push(
            1,
            1,
            vec![sum / rows as f64],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        )
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let total = terms.iter().map(|&(n, w)| self.scalar(n) * w).sum();
        self.push(1, 1, vec![total], Op::WeightedSum { terms })
    }

    /// Reverse pass from a scalar loss node. Parameter gradients accumulate
    /// into `param_grads`; returns per-node value gradients.
    pub fn backward(&self, params: &[f64], loss: NodeId, param_grads: &mut [f64]) -> Vec<Vec<f64>> {
        self.backward_pools(&[params], loss, &mut [param_grads])
    }

    /// Multi-network reverse pass: each node charges the pool it was recorded
    /// under (see `set_pool`).
    pub fn backward_pools(
        &self,
        pools: &[&[f64]],
        loss: NodeId,
        pool_grads: &mut [&mut [f64]],
    ) -> Vec<Vec<f64>> {
        assert_eq!(pools.len(), pool_grads.len());
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss][0] = 1.0;
        for id in (0..=loss).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&x| x == 0.0) {
                grads[id] = g;
                continue;
            }
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Conv {
                    input,
                    spec,
                    pairs,
                    pool,
                } => {
                    let (c_in, c_out) = (spec.c_in, spec.c_out);
                    let params = pools[*pool];
                    let param_grads = &mut *pool_grads[*pool];
                    let in_val = &self.nodes[*input].value;
                    let gin = &mut grads[*input];
                    for p in pairs.iter() {
                        let go = &g[p.out as usize * c_out..(p.out as usize + 1) * c_out];
                        let fi = &in_val[p.inp as usize * c_in..(p.inp as usize + 1) * c_in];
                        let wb = spec.weight_base(p.k as usize);
                        let gi = &mut gin[p.inp as usize * c_in..(p.inp as usize + 1) * c_in];
                        for ci in 0..c_in {
                            let wrow = &params[wb + ci * c_out..wb + (ci + 1) * c_out];
                            let gw = &mut param_grads[wb + ci * c_out..wb + (ci + 1) * c_out];
                            let x = fi[ci];
                            let mut acc = 0.0;
                            for co in 0..c_out {
                                acc += go[co] * wrow[co];
                                gw[co] += x * go[co];
                            }
                            gi[ci] += acc;
                        }
                    }
                    let gb = &mut param_grads[spec.bias_base()..spec.bias_base() + c_out];
                    for r in 0..self.nodes[id].rows {
                        for co in 0..c_out {
                            gb[co] += g[r * c_out + co];
                        }
                    }
                }
                Op::Relu { input } => {
                    let in_val = &self.nodes[*input].value;
                    for (i, &gi) in g.iter().enumerate() {
                        if in_val[i] > 0.0 {
                            grads[*input][i] += gi;
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let out_val = &self.nodes[id].value;
                    for (i, &gi) in g.iter().enumerate() {
                        let s = out_val[i];
                        grads[*input][i] += gi * s * (1.0 - s);
                    }
                }
                Op::Add { a, b } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += gi;
                    }
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*b][i] += gi;
                    }
                }
                Op::Concat { a, b } => {
                    let ca = self.nodes[*a].cols;
                    let cb = self.nodes[*b].cols;
                    let rows = self.nodes[id].rows;
                    for r in 0..rows {
                        for c in 0..ca {
                            grads[*a][r * ca + c] += g[r * (ca + cb) + c];
                        }
                        for c in 0..cb {
                            grads[*b][r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
                Op::Gather { sources } => {
                    let cols = self.nodes[id].cols;
                    for (i, &(node, row)) in sources.iter().enumerate() {
                        let r = row as usize;
                        for c in 0..cols {
                            grads[node][r * cols + c] += g[i * cols + c];
                        }
                    }
                }
                Op::Shift { input } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*input][i] += gi;
                    }
                }
                Op::Bce { probs, symbols } => {
                    let gl = g[0];
                    let p_val = &self.nodes[*probs].value;
                    for (i, &o) in symbols.iter().enumerate() {
                        let p = clamp_prob(p_val[i]);
                        grads[*probs][i] += gl * (-(o / p) + (1.0 - o) / (1.0 - p)) / LN2;
                    }
                }
                Op::LaplaceRate { q, log_b, pool } => {
                    let gl = g[0];
                    let params = pools[*pool];
                    let param_grads = &mut *pool_grads[*pool];
                    let cols = self.nodes[*q].cols;
                    for (i, &v) in self.nodes[*q].value.iter().enumerate() {
                        let lb = params[log_b.base + i % cols];
                        let b = lb.exp();
                        let mass = laplace_mass(v, b);
                        if mass <= MIN_MASS {
                            continue;
                        }
                        let (dq, db) = laplace_mass_grad(v, b);
                        let scale = -gl / (mass * LN2);
                        grads[*q][i] += scale * dq;
                        param_grads[log_b.base + i % cols] += scale * db * b;
                    }
                }
                Op::Mse { pred, target } => {
                    let gl = g[0];
                    let rows = self.nodes[*pred].rows as f64;
                    for (i, (&p, &t)) in self.nodes[*pred].value.iter().zip(target).enumerate() {
                        grads[*pred][i] += gl * 2.0 * (p - t) / rows;
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(node, w) in terms {
                        grads[node][0] += g[0] * w;
                    }
                }
            }
            grads[id] = g;
        }
        grads
    }
}
