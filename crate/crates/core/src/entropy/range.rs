//! 32-bit renormalizing range coder over 16-bit frequency tables.
//!
//! The encoder keeps a 33-bit `low` with a one-byte cache for carry
//! propagation and emits bytes most significant first. A stream holds one
//! byte per renormalization plus five flush bytes, and the decoder consumes
//! exactly that many, so any length mismatch is a detectable error.

use crate::error::{Error, Result};

use super::CdfTable;

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;
const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
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
            pending: 1,
            out: Vec::new(),
        }
    }

    /// Narrows the interval to `[start, start + freq) / TOTAL`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> TOTAL_BITS;
        self.low += start as u64 * r as u64;
        self.range = freq * r;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = ((self.low as u32) << 8) as u64;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or_else(|| {
            Error::coder(format!("stream truncated after {} bytes", self.input.len()))
        })?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative-frequency position of the next symbol.
    pub fn target(&self) -> Result<u32> {
        let t = self.code / (self.range >> TOTAL_BITS);
        if t >= TOTAL {
            return Err(Error::coder("decoder desynchronized (code outside range)"));
        }
        Ok(t)
    }

    pub fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        let r = self.range >> TOTAL_BITS;
        self.code -= start * r;
        self.range = freq * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let t = self.target()?;
        let idx = table.index_of(t);
        let (start, freq) = table.interval(idx);
        self.consume(start, freq)?;
        Ok(table.min_symbol() + idx as i32)
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }

    /// Succeeds only if the whole input was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.input.len() {
            return Err(Error::coder(format!(
                "{} trailing byte(s) after the last symbol",
                self.input.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Codes `symbols[i]` with `tables[i]`.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::invalid(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (i, (&s, t)) in symbols.iter().zip(tables).enumerate() {
        let (start, freq) = t
            .symbol_interval(s)
            .ok_or_else(|| Error::coder(format!("symbol {s} at {i} outside alphabet {:?}", t.alphabet())))?;
        enc.encode(start, freq);
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let symbols = tables.iter().map(|t| dec.decode(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(symbols)
}
