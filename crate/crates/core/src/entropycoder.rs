//! Range coder over integer symbols with quantized Gaussian models.
//!
//! # Models
//!
//! Symbols live in `[-128, 127]`. A [`GaussianModel`] is quantized into a
//! 257-entry cumulative table with 16 fractional bits:
//!
//! ```text
//! cdf[0]   = 0
//! cdf[256] = 65536
//! cdf[i]   = round(65536 * Phi((-128 + i - 0.5 - mu) / sigma))   for 1 <= i <= 255
//! ```
//!
//! followed by a forward pass `cdf[i] = max(cdf[i], cdf[i-1] + 1)` and a
//! backward pass `cdf[i] = min(cdf[i], cdf[i+1] - 1)`, so every symbol has a
//! count of at least one and both tails fold into the boundary bins. `Phi`
//! is evaluated through `libm::erfc`; for `|z| > 8.5` the rounded value is
//! exactly 0 or 65536 and is used directly.
//!
//! # Segment layout
//!
//! The coder is the carry-propagating byte-oriented range coder known from
//! LZMA, generalized to 16-bit frequency tables.
//!
//! Encoder state: `low: u64` (33 significant bits), `range: u32`, a one-byte
//! `cache` and a `pending` count of deferred `0xFF` bytes. Initially
//! `low = 0`, `range = 0xFFFF_FFFF`, `cache = 0`, `pending = 1`.
//!
//! Coding `(start, freq)`: `r = range >> 16; low += r * start; range = r * freq`,
//! then while `range < 2^24`: `range <<= 8` and shift `low`.
//!
//! Shifting `low`: if `low < 0xFF00_0000` or `low >= 2^32`, emit
//! `cache + carry` followed by `pending - 1` bytes of `0xFF + carry`
//! (`carry = low >> 32`), set `cache = (low >> 24) & 0xFF` and `pending = 0`.
//! In every case `pending += 1` and `low = (low & 0x00FF_FFFF) << 8`.
//!
//! Flush: shift `low` five times. A segment of `n` renormalizations is exactly
//! `n + 5` bytes and always starts with `0x00`.
//!
//! Decoder: `range = 0xFFFF_FFFF`, `code` is the first five bytes shifted into
//! a `u32` (the leading zero byte falls off). Decoding computes
//! `r = range >> 16`, `v = min(code / r, 65535)`, finds the symbol whose bin
//! holds `v`, then `code -= r * cdf[s]`, `range = r * freq` and renormalizes
//! with `code = (code << 8) | next_byte`.
//!
//! # Truncation
//!
//! Every decoded symbol depends only on bytes already consumed, so decoding a
//! byte-prefix of a segment reproduces the full decode up to the first
//! renormalization that would read past the end. Decoding stops there and
//! reports how many symbols are exact.

use thiserror::Error;

pub const SUPPORT_MIN: i32 = -128;
pub const SUPPORT_MAX: i32 = 127;
pub const NUM_SYMBOLS: usize = (SUPPORT_MAX - SUPPORT_MIN + 1) as usize;
pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
pub const SIGMA_MIN: f64 = 0.11;

const TOP: u32 = 1 << 24;
const TAIL_Z: f64 = 8.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoderError {
    #[error("symbol {symbol} at position {index} is outside [-128, 127]")]
    SymbolOutOfSupport { index: usize, symbol: i32 },
    #[error("{symbols} symbols but {models} models")]
    LengthMismatch { symbols: usize, models: usize },
}

/// Discretized Gaussian over the coder support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianModel {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianModel {
    /// Clamps `sigma` to at least [`SIGMA_MIN`]; a non-finite `mu` becomes 0.
    pub fn new(mu: f64, sigma: f64) -> Self {
        let mu = if mu.is_finite() { mu } else { 0.0 };
        let sigma = if sigma.is_nan() {
            SIGMA_MIN
        } else {
            sigma.max(SIGMA_MIN)
        };
        Self { mu, sigma }
    }

    pub fn cdf(&self) -> CdfTable {
        quantize_cdf(self)
    }
}

pub fn in_support(symbol: i32) -> bool {
    (SUPPORT_MIN..=SUPPORT_MAX).contains(&symbol)
}

pub fn clip_to_support(x: i64) -> i32 {
    x.clamp(SUPPORT_MIN as i64, SUPPORT_MAX as i64) as i32
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Quantized cumulative table; entry `i` is the lower bound of symbol
/// `SUPPORT_MIN + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable(pub [u32; NUM_SYMBOLS + 1]);

impl CdfTable {
    fn slot(symbol: i32) -> usize {
        (symbol - SUPPORT_MIN) as usize
    }

    /// `(start, freq)` of an in-support symbol.
    pub fn interval(&self, symbol: i32) -> (u32, u32) {
        let i = Self::slot(symbol);
        (self.0[i], self.0[i + 1] - self.0[i])
    }

    pub fn freq(&self, symbol: i32) -> u32 {
        self.interval(symbol).1
    }

    pub fn probability(&self, symbol: i32) -> f64 {
        f64::from(self.freq(symbol)) / f64::from(TOTAL)
    }

    /// Symbol whose bin contains `v < TOTAL`.
    pub fn lookup(&self, v: u32) -> i32 {
        let i = self.0[1..].partition_point(|&c| c <= v);
        SUPPORT_MIN + i as i32
    }
}

pub fn quantize_cdf(m: &GaussianModel) -> CdfTable {
    let m = GaussianModel::new(m.mu, m.sigma);
    let mut t = [0u32; NUM_SYMBOLS + 1];
    // Entries whose edge lies beyond TAIL_Z standard deviations are exact.
    let edge_of = |i: usize| f64::from(SUPPORT_MIN + i as i32) - 0.5;
    let first = ((m.mu - TAIL_Z * m.sigma + 0.5 - f64::from(SUPPORT_MIN))
        .floor()
        .max(1.0) as usize)
        .min(NUM_SYMBOLS);
    let last = ((m.mu + TAIL_Z * m.sigma + 0.5 - f64::from(SUPPORT_MIN))
        .ceil()
        .max(0.0) as usize)
        .min(NUM_SYMBOLS - 1);
    for (i, slot) in t.iter_mut().enumerate().take(last + 1).skip(first) {
        let z = (edge_of(i) - m.mu) / m.sigma;
        *slot = if z < -TAIL_Z {
            0
        } else if z > TAIL_Z {
            TOTAL
        } else {
            (f64::from(TOTAL) * std_normal_cdf(z)).round() as u32
        };
    }
    t[(last + 1).max(first)..].fill(TOTAL);
    let mut prev = 0;
    for v in t[1..NUM_SYMBOLS].iter_mut() {
        *v = (*v).max(prev + 1);
        prev = *v;
    }
    let mut next = TOTAL;
    for v in t[1..NUM_SYMBOLS].iter_mut().rev() {
        *v = (*v).min(next - 1);
        next = *v;
    }
    CdfTable(t)
}

#[derive(Debug, Clone)]
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
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
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
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[start, start + freq)` out of `TOTAL`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol(&mut self, symbol: i32, cdf: &CdfTable) {
        let (start, freq) = cdf.interval(symbol);
        self.encode(start, freq);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    starved: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            starved: false,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.starved = true;
                0
            }
        }
    }

    /// True once any read has run past the end of the data.
    pub fn starved(&self) -> bool {
        self.starved
    }

    /// Decodes one symbol, or `None` if the decoder is already starved.
    pub fn decode_symbol(&mut self, cdf: &CdfTable) -> Option<i32> {
        if self.starved {
            return None;
        }
        let r = self.range >> PRECISION;
        let v = (self.code / r).min(TOTAL - 1);
        let symbol = cdf.lookup(v);
        let (start, freq) = cdf.interval(symbol);
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte());
        }
        Some(symbol)
    }
}

fn check_lengths(symbols: usize, models: usize) -> Result<(), CoderError> {
    if symbols != models {
        return Err(CoderError::LengthMismatch { symbols, models });
    }
    Ok(())
}

fn check_support(symbols: &[i32]) -> Result<(), CoderError> {
    match symbols.iter().position(|&s| !in_support(s)) {
        Some(index) => Err(CoderError::SymbolOutOfSupport {
            index,
            symbol: symbols[index],
        }),
        None => Ok(()),
    }
}

pub fn encode_symbols(symbols: &[i32], models: &[GaussianModel]) -> Result<Vec<u8>, CoderError> {
    check_lengths(symbols.len(), models.len())?;
    check_support(symbols)?;
    let mut enc = RangeEncoder::new();
    for (&s, m) in symbols.iter().zip(models) {
        enc.encode_symbol(s, &quantize_cdf(m));
    }
    Ok(enc.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// The exactly decoded prefix; its length is the decoded count.
    pub symbols: Vec<i32>,
}

impl Decoded {
    pub fn decoded_count(&self) -> usize {
        self.symbols.len()
    }
}

/// Decodes up to `models.len()` symbols, stopping early if `segment` is a
/// truncated prefix.
pub fn decode_symbols(segment: &[u8], models: &[GaussianModel]) -> Decoded {
    let mut dec = RangeDecoder::new(segment);
    let mut symbols = Vec::with_capacity(models.len());
    for m in models {
        match dec.decode_symbol(&quantize_cdf(m)) {
            Some(s) => symbols.push(s),
            None => break,
        }
    }
    Decoded { symbols }
}

/// Information content in bits under the quantized tables the coder uses.
pub fn ideal_bits(symbols: &[i32], models: &[GaussianModel]) -> Result<f64, CoderError> {
    check_lengths(symbols.len(), models.len())?;
    check_support(symbols)?;
    Ok(symbols
        .iter()
        .zip(models)
        .map(|(&s, m)| -quantize_cdf(m).probability(s).log2())
        .sum())
}
