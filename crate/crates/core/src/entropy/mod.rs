//! Bit-exact entropy coding: a binary range coder driven by externally
//! supplied probabilities, and a factorized integer coder for quantized
//! feature attributes.

mod factorized;
mod range_coder;

pub use factorized::{
    factorized_decode, factorized_encode, factorized_encode_tracked, laplace_mass,
    laplace_mass_grad, FactorizedModel,
};
pub use range_coder::{RangeDecoder, RangeEncoder, PROB_ONE_HALF};

use crate::error::{Error, Result};

/// Lower clamp for coded probabilities; prevents infinite code lengths
/// from saturated sigmoids.
pub const PROB_CLAMP: f64 = 1e-6;

/// Clamps a probability into [PROB_CLAMP, 1 - PROB_CLAMP].
pub fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_CLAMP).min(1.0 - PROB_CLAMP)
}

/// Quantizes a probability of the `1` symbol to 16 bits. Encoder and decoder
/// must call this with identical inputs to stay in sync.
pub fn quantize_prob(p: f64) -> u16 {
    let p = clamp_prob(p);
    let q = (p * 65536.0).round() as u32;
    q.clamp(1, 65535) as u16
}

/// Occupancy symbols with aligned probabilities of the `1` symbol.
#[derive(Debug, Clone, Default)]
pub struct BinarySymbolStream {
    pub symbols: Vec<bool>,
    pub probs: Vec<f64>,
}

impl BinarySymbolStream {
    pub fn push(&mut self, symbol: bool, prob: f64) {
        self.symbols.push(symbol);
        self.probs.push(prob);
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Ideal code length in bits: sum of -log2 q over clamped probabilities.
    pub fn ideal_bits(&self) -> f64 {
        ideal_bits(&self.symbols, &self.probs)
    }
}

pub fn ideal_bits(symbols: &[bool], probs: &[f64]) -> f64 {
    symbols
        .iter()
        .zip(probs)
        .map(|(&s, &p)| {
            let p = clamp_prob(p);
            let q = if s { p } else { 1.0 - p };
            -q.log2()
        })
        .sum()
}

/// Codes a symbol stream into a self-terminated payload.
pub fn ac_encode(stream: &BinarySymbolStream) -> Result<Vec<u8>> {
    if stream.symbols.len() != stream.probs.len() {
        return Err(Error::Entropy("symbols/probs length mismatch".into()));
    }
    let mut enc = RangeEncoder::new();
    for (&sym, &p) in stream.symbols.iter().zip(&stream.probs) {
        if !(p.is_finite() && p > 0.0 && p < 1.0) && !(0.0..=1.0).contains(&p) {
            return Err(Error::Entropy(format!("probability {} outside (0,1)", p)));
        }
        enc.encode_bit(quantize_prob(p), sym);
    }
    Ok(enc.finish())
}

/// Decodes `n` symbols, pulling the probability for each from `probs`, which
/// must replay the encoder's sequence exactly.
pub fn ac_decode<F>(payload: &[u8], n: usize, mut probs: F) -> Result<Vec<bool>>
where
    F: FnMut(usize) -> f64,
{
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        out.push(dec.decode_bit(quantize_prob(probs(j)))?);
    }
    Ok(out)
}
