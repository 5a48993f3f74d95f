//! 32-bit range coder with carry propagation and 16-bit probability
//! quantization. Integer-only state keeps encoder and decoder bit-exact
//! across platforms.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const PROB_BITS: u32 = 16;
const PROB_TOTAL: u32 = 1 << PROB_BITS;

/// 16-bit representation of p = 0.5.
pub const PROB_ONE_HALF: u16 = (PROB_TOTAL / 2) as u16;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    cost: f64,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            cost: 0.0,
        }
    }

    /// Bits spent so far by the coder's own accounting: the log of the range
    /// reduction per coded interval. The finished payload exceeds this sum
    /// only by termination, so it is the exact per-symbol cost including the
    /// coder's probability quantization.
    pub fn cost_bits(&self) -> f64 {
        self.cost
    }

    /// Codes an interval [cum_lo, cum_lo + freq) out of PROB_TOTAL.
    pub fn encode_interval(&mut self, cum_lo: u32, freq: u32) {
        debug_assert!(freq > 0 && cum_lo + freq <= PROB_TOTAL);
        let before = self.range as f64;
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * cum_lo as u64;
        if cum_lo + freq == PROB_TOTAL {
            // Top interval absorbs the quantization remainder of the range.
            self.range -= r * cum_lo;
        } else {
            self.range = r * freq;
        }
        self.cost += (before / self.range as f64).log2();
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Codes one binary symbol; `p16` is the 16-bit probability of `true`.
    pub fn encode_bit(&mut self, p16: u16, bit: bool) {
        let p = p16 as u32;
        debug_assert!(p >= 1 && p <= PROB_TOTAL - 1);
        if bit {
            self.encode_interval(0, p);
        } else {
            self.encode_interval(p, PROB_TOTAL - p);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low > u32::MAX as u64 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & u32::MAX as u64;
    }

    /// Flushes the coder state and returns the payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut dec = RangeDecoder {
            code: 0,
            range: u32::MAX,
            buf,
            pos: 0,
        };
        // The first byte is the encoder's initial cache flush and carries no
        // information.
        for _ in 0..5 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | b as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .buf
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Entropy("truncated payload".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the scaled code value in [0, PROB_TOTAL); the caller locates
    /// the symbol whose interval contains it, then calls `consume_interval`.
    pub fn interval_target(&self) -> u32 {
        let r = self.range >> PROB_BITS;
        ((self.code / r).min(PROB_TOTAL - 1)) as u32
    }

    pub fn consume_interval(&mut self, cum_lo: u32, freq: u32) -> Result<()> {
        let r = self.range >> PROB_BITS;
        self.code -= r * cum_lo;
        if cum_lo + freq == PROB_TOTAL {
            self.range -= r * cum_lo;
        } else {
            self.range = r * freq;
        }
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self, p16: u16) -> Result<bool> {
        let p = p16 as u32;
        let bit = self.interval_target() < p;
        if bit {
            self.consume_interval(0, p)?;
        } else {
            self.consume_interval(p, PROB_TOTAL - p)?;
        }
        Ok(bit)
    }

    /// Decodes one symbol against a cumulative table `cdf` with
    /// `cdf[0] = 0` and `cdf[n] = PROB_TOTAL`; returns the symbol index.
    pub fn decode_symbol(&mut self, cdf: &[u32]) -> Result<usize> {
        let target = self.interval_target();
        // cdf is monotone; partition_point finds the containing interval.
        let sym = cdf.partition_point(|&c| c <= target) - 1;
        let sym = sym.min(cdf.len() - 2);
        self.consume_interval(cdf[sym], cdf[sym + 1] - cdf[sym])?;
        Ok(sym)
    }
}
