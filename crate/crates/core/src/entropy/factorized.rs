//! Factorized entropy model for quantized feature attributes: independent
//! per-channel zero-mean Laplace densities with learned scales, integrated
//! over unit bins. Outliers beyond the integer support are coded through an
//! escape symbol followed by sign and a Rice-coded magnitude.

use super::range_coder::{RangeDecoder, RangeEncoder, PROB_ONE_HALF};
use crate::error::{Error, Result};

const PROB_TOTAL: u32 = 1 << 16;
const RICE_SHIFT: u32 = 2;

/// Laplace CDF with scale `b`.
fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

/// Probability mass of the unit bin [q - 0.5, q + 0.5] under Laplace(0, b).
/// `q` may be non-integer (noisy training surrogate).
pub fn laplace_mass(q: f64, b: f64) -> f64 {
    laplace_cdf(q + 0.5, b) - laplace_cdf(q - 0.5, b)
}

/// (d mass / d q, d mass / d b).
pub fn laplace_mass_grad(q: f64, b: f64) -> (f64, f64) {
    let pdf = |x: f64| (-x.abs() / b).exp() / (2.0 * b);
    let dq = pdf(q + 0.5) - pdf(q - 0.5);
    // dF/db = -x * exp(-|x|/b) / (2 b^2) for either sign of x
    let dfdb = |x: f64| -x * (-x.abs() / b).exp() / (2.0 * b * b);
    let db = dfdb(q + 0.5) - dfdb(q - 0.5);
    (dq, db)
}

/// Per-channel factorized model. Symbols in [-support, support] are coded
/// against the quantized Laplace CDF; anything outside goes through escape.
#[derive(Debug, Clone)]
pub struct FactorizedModel {
    scales: Vec<f64>,
    support: i64,
}

impl FactorizedModel {
    pub fn new(scales: Vec<f64>, support: i64) -> Result<Self> {
        if scales.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
            return Err(Error::Entropy("Laplace scale must be positive".into()));
        }
        if support < 1 {
            return Err(Error::Entropy("support bound must be >= 1".into()));
        }
        Ok(FactorizedModel { scales, support })
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    pub fn scale(&self, channel: usize) -> f64 {
        self.scales[channel]
    }

    pub fn support(&self) -> i64 {
        self.support
    }

    /// Code length of symbol `q` in bits under the ideal (unquantized) model.
    pub fn rate_bits(&self, q: i64, channel: usize) -> f64 {
        let b = self.scales[channel];
        let m = laplace_mass(q as f64, b).max(1e-300);
        -m.log2()
    }

    /// Code length of symbol `q` in bits as the coder actually realizes it:
    /// the quantized CDF mass for in-support symbols, and escape + sign +
    /// Rice magnitude for outliers. Use this to account for payload sizes;
    /// `rate_bits` is the smooth model the optimizer sees.
    pub fn coded_bits(&self, q: i64, channel: usize) -> f64 {
        let cdf = self.quantized_cdf(channel);
        let l = self.support;
        let freq_bits = |sym: usize| -(((cdf[sym + 1] - cdf[sym]) as f64) / PROB_TOTAL as f64).log2();
        if q.abs() <= l {
            freq_bits((q + l) as usize)
        } else {
            let mag = (q.abs() - l - 1) as u64;
            let quot = (mag >> RICE_SHIFT) as f64;
            // escape + sign + unary quotient with terminator + remainder
            freq_bits((2 * l + 1) as usize) + 1.0 + quot + 1.0 + RICE_SHIFT as f64
        }
    }

    /// Quantized CDF over [-L..L] plus a trailing escape symbol.
    /// Index mapping: symbol i in 0..2L+1 represents q = i - L; index 2L+1
    /// is the escape. cdf has len 2L+3 with cdf[0] = 0, last = 65536.
    fn quantized_cdf(&self, channel: usize) -> Vec<u32> {
        let b = self.scales[channel];
        let l = self.support;
        let n = (2 * l + 2) as u32; // symbols incl. escape
        let mut masses = Vec::with_capacity(n as usize);
        let mut covered = 0.0;
        for q in -l..=l {
            let m = laplace_mass(q as f64, b);
            covered += m;
            masses.push(m);
        }
        masses.push((1.0 - covered).max(0.0)); // escape mass
        let budget = PROB_TOTAL - n;
        let mut cdf = Vec::with_capacity(n as usize + 1);
        cdf.push(0u32);
        let mut acc = 0u32;
        for (i, &m) in masses.iter().enumerate() {
            let f = 1 + (m * budget as f64).floor() as u32;
            acc += f;
            if i + 1 == n as usize {
                cdf.push(PROB_TOTAL);
            } else {
                cdf.push(acc.min(PROB_TOTAL - (n - 1 - i as u32)));
            }
        }
        cdf
    }
}

/// Codes a vector of integers; `channel_of(j)` selects the per-channel scale.
pub fn factorized_encode<F>(values: &[i64], model: &FactorizedModel, channel_of: F) -> Vec<u8>
where
    F: Fn(usize) -> usize,
{
    factorized_encode_tracked(values, model, channel_of).0
}

/// Like `factorized_encode`, but also returns the coded bits by the range
/// coder's own accounting (payload length minus termination).
pub fn factorized_encode_tracked<F>(
    values: &[i64],
    model: &FactorizedModel,
    channel_of: F,
) -> (Vec<u8>, f64)
where
    F: Fn(usize) -> usize,
{
    let cdfs: Vec<Vec<u32>> = (0..model.channels())
        .map(|c| model.quantized_cdf(c))
        .collect();
    let l = model.support();
    let escape = (2 * l + 1) as usize;
    let mut enc = RangeEncoder::new();
    for (j, &q) in values.iter().enumerate() {
        let cdf = &cdfs[channel_of(j)];
        if q.abs() <= l {
            let sym = (q + l) as usize;
            enc.encode_interval(cdf[sym], cdf[sym + 1] - cdf[sym]);
        } else {
            enc.encode_interval(cdf[escape], cdf[escape + 1] - cdf[escape]);
            enc.encode_bit(PROB_ONE_HALF, q < 0);
            let mag = (q.abs() - l - 1) as u64;
            // Rice code: unary quotient, fixed remainder bits.
            let quot = mag >> RICE_SHIFT;
            for _ in 0..quot {
                enc.encode_bit(PROB_ONE_HALF, true);
            }
            enc.encode_bit(PROB_ONE_HALF, false);
            for bit in (0..RICE_SHIFT).rev() {
                enc.encode_bit(PROB_ONE_HALF, (mag >> bit) & 1 == 1);
            }
        }
    }
    let cost = enc.cost_bits();
    (enc.finish(), cost)
}

pub fn factorized_decode<F>(
    payload: &[u8],
    n: usize,
    model: &FactorizedModel,
    channel_of: F,
) -> Result<Vec<i64>>
where
    F: Fn(usize) -> usize,
{
    let cdfs: Vec<Vec<u32>> = (0..model.channels())
        .map(|c| model.quantized_cdf(c))
        .collect();
    let l = model.support();
    let escape = (2 * l + 1) as usize;
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let cdf = &cdfs[channel_of(j)];
        let sym = dec.decode_symbol(cdf)?;
        if sym == escape {
            let neg = dec.decode_bit(PROB_ONE_HALF)?;
            let mut quot: u64 = 0;
            while dec.decode_bit(PROB_ONE_HALF)? {
                quot += 1;
            }
            let mut rem = 0u64;
            for _ in 0..RICE_SHIFT {
                rem = (rem << 1) | dec.decode_bit(PROB_ONE_HALF)? as u64;
            }
            let mag = (quot << RICE_SHIFT) | rem;
            let q = (mag as i64) + l + 1;
            out.push(if neg { -q } else { q });
        } else {
            out.push(sym as i64 - l);
        }
    }
    Ok(out)
}
