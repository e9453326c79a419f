//! Binary range coder with 16-bit probabilities.
//!
//! 32-bit range, 64-bit low register with a one-byte cache for carry
//! propagation, byte-wise renormalization below 2^24. The stream omits the
//! leading cache byte (always zero) and ends with a four-byte flush, so the
//! decoder consumes exactly the bytes the encoder produced.

use crate::error::{Error, Result};

/// Fixed-point precision of probabilities.
pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// `P(bit = 1)` as a 16-bit fixed-point value clamped to `[1, 2^16 - 1]`.
pub fn quantize(p_one: f64) -> u32 {
    if p_one.is_nan() {
        return PROB_ONE / 2;
    }
    let q = (p_one * f64::from(PROB_ONE)).round();
    q.clamp(1.0, f64::from(PROB_ONE - 1)) as u32
}

/// Ideal code length in bits of `bit` under a quantized probability.
pub fn quantized_cost(bit: u8, q: u32) -> f64 {
    let p = f64::from(q) / f64::from(PROB_ONE);
    if bit == 1 {
        -p.log2()
    } else {
        -(1.0 - p).log2()
    }
}

fn split(range: u32, q: u32) -> u32 {
    ((u64::from(range) * u64::from(q)) >> PROB_BITS) as u32
}

#[derive(Debug, Clone)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            first: true,
            out: Vec::new(),
        }
    }

    /// Codes one bit with `P(1) = q / 2^16`; `q` must lie in `[1, 2^16 - 1]`.
    pub fn encode(&mut self, bit: u8, q: u32) {
        debug_assert!((1..PROB_ONE).contains(&q));
        let bound = split(self.range, q);
        if bit != 0 {
            self.range = bound;
        } else {
            self.low += u64::from(bound);
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn emit(&mut self, byte: u8) {
        if std::mem::take(&mut self.first) {
            debug_assert_eq!(byte, 0);
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.cache_size > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Decode("arithmetic-coded segment is truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, q: u32) -> Result<u8> {
        let bound = split(self.range, q);
        let bit = if self.code < bound {
            self.range = bound;
            1
        } else {
            self.code -= bound;
            self.range -= bound;
            0
        };
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
        }
        Ok(bit)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Codes a whole sequence; `probs` are `P(1)` values before quantization.
pub fn encode_bits(bits: &[u8], probs: &[f64]) -> Result<Vec<u8>> {
    if bits.len() != probs.len() {
        return Err(Error::Usage(format!(
            "{} bits but {} probabilities",
            bits.len(),
            probs.len()
        )));
    }
    let mut enc = Encoder::new();
    for (&b, &p) in bits.iter().zip(probs) {
        enc.encode(b, quantize(p));
    }
    Ok(enc.finish())
}

pub fn decode_bits(data: &[u8], probs: &[f64]) -> Result<Vec<u8>> {
    let mut dec = Decoder::new(data)?;
    probs.iter().map(|&p| dec.decode(quantize(p))).collect()
}
