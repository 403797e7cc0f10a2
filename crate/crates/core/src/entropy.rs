//! Lossless range coding of quantized latent integers.
//!
//! Symbols are modeled per channel by a zero-mean discretized Laplacian (a
//! two-sided geometric) whose parameter comes from the channel's scale, plus
//! an escape bucket for |symbol| > 255. The coder is a 32-bit renormalizing
//! range coder with carry handling; identical inputs always produce identical
//! bytes.

use serde::{Deserialize, Serialize};

/// Symbols with |s| <= MAX_DIRECT are modeled directly; larger magnitudes go
/// through the escape bucket.
pub const MAX_DIRECT: i64 = 255;
/// Escape payload is a 24-bit offset value, so |symbol| < 2^23.
pub const MAX_SYMBOL: i64 = (1 << 23) - 1;

const ALPHABET: usize = 2 * MAX_DIRECT as usize + 2; // direct symbols + escape
const ESCAPE: usize = ALPHABET - 1;
const FREQ_TOTAL: u32 = 1 << 16;

const STREAM_MAGIC: u8 = 0xEC;
const STREAM_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EntropyError {
    #[error("symbol {0} outside representable alphabet (|s| < 2^23)")]
    SymbolOutOfRange(i64),
    #[error("channel {0} not present in scale table")]
    UnknownChannel(usize),
    #[error("bitstream header malformed: {0}")]
    BadHeader(String),
    #[error("bitstream truncated")]
    Truncated,
    #[error("scale table invalid: {0}")]
    InvalidTable(String),
}

/// Per-channel scale (symbol standard deviation) and quantizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    scales: Vec<f64>,
    quant_steps: Vec<f64>,
}

pub const SCALE_FLOOR: f64 = 1e-3;

impl ScaleTable {
    pub fn new(scales: Vec<f64>, quant_steps: Vec<f64>) -> Result<Self, EntropyError> {
        if scales.len() != quant_steps.len() {
            return Err(EntropyError::InvalidTable(
                "scale and step counts differ".into(),
            ));
        }
        if scales.iter().any(|&s| !(s > 0.0)) {
            return Err(EntropyError::InvalidTable("non-positive scale".into()));
        }
        if quant_steps.iter().any(|&s| !(s > 0.0)) {
            return Err(EntropyError::InvalidTable("non-positive step".into()));
        }
        Ok(ScaleTable {
            scales,
            quant_steps,
        })
    }

    /// Calibrates a table from per-channel pooled raw coefficients.
    ///
    /// The quantizer step is `quality` times the coefficient standard
    /// deviation; the stored scale is the standard deviation of the resulting
    /// quantized symbols. Both are floored at 1e-3.
    pub fn estimate(per_channel: &[Vec<f64>], quality: f64) -> Result<Self, EntropyError> {
        if per_channel.is_empty() || per_channel.iter().any(|c| c.is_empty()) {
            return Err(EntropyError::InvalidTable("empty calibration corpus".into()));
        }
        if !(quality > 0.0) {
            return Err(EntropyError::InvalidTable("quality must be > 0".into()));
        }
        let mut scales = Vec::with_capacity(per_channel.len());
        let mut steps = Vec::with_capacity(per_channel.len());
        for coeffs in per_channel {
            let step = (quality * std_dev(coeffs.iter().copied())).max(SCALE_FLOOR);
            let symbols = coeffs.iter().map(|&c| (c / step).round_ties_even());
            scales.push(std_dev(symbols).max(SCALE_FLOOR));
            steps.push(step);
        }
        ScaleTable::new(scales, steps)
    }

    pub fn channel_count(&self) -> usize {
        self.scales.len()
    }

    pub fn scale(&self, channel: usize) -> Result<f64, EntropyError> {
        self.scales
            .get(channel)
            .copied()
            .ok_or(EntropyError::UnknownChannel(channel))
    }

    pub fn quant_step(&self, channel: usize) -> Result<f64, EntropyError> {
        self.quant_steps
            .get(channel)
            .copied()
            .ok_or(EntropyError::UnknownChannel(channel))
    }

    /// Side-information accounting: bits charged for shipping this table's
    /// scales for `channels` latent channels.
    pub fn side_info_bits(channels: usize) -> u64 {
        16 * channels as u64
    }
}

/// Two-pass population standard deviation.
fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut mean = 0.0;
    for v in values.clone() {
        mean += v;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    mean /= n as f64;
    let var: f64 = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt()
}

/// Probability model for one channel: discretized Laplacian over [-255, 255]
/// plus a uniform escape bucket.
#[derive(Debug, Clone)]
pub struct SymbolModel {
    // cum[i]..cum[i+1] is symbol i's frequency span; cum[ALPHABET] = FREQ_TOTAL.
    cum: Vec<u32>,
}

impl SymbolModel {
    pub fn from_scale(scale: f64) -> SymbolModel {
        // Match the two-sided geometric p(k) = (1-a)/(1+a) * a^|k| to the
        // scale by its variance 2a/(1-a)^2.
        let var = (scale * scale).max(1e-12);
        let a = ((var + 1.0 - (2.0 * var + 1.0).sqrt()) / var).clamp(1e-12, 1.0 - 1e-12);
        let p0 = (1.0 - a) / (1.0 + a);

        let mut probs = vec![0.0f64; ALPHABET];
        for k in -MAX_DIRECT..=MAX_DIRECT {
            probs[(k + MAX_DIRECT) as usize] = p0 * a.powi(k.unsigned_abs() as i32);
        }
        // Tail mass beyond the direct range.
        probs[ESCAPE] = 2.0 * a.powi(MAX_DIRECT as i32 + 1) / (1.0 + a);

        let mut freqs = vec![0u32; ALPHABET];
        let mut total = 0u64;
        for i in 0..ALPHABET {
            let f = ((probs[i] * FREQ_TOTAL as f64).round() as u32).max(1);
            freqs[i] = f;
            total += f as u64;
        }
        // Deterministic fix-up: adjust the most probable bucket to hit the
        // exact total, never dropping any bucket below 1.
        let mut max_i = 0;
        for i in 1..ALPHABET {
            if freqs[i] > freqs[max_i] {
                max_i = i;
            }
        }
        if total > FREQ_TOTAL as u64 {
            let excess = (total - FREQ_TOTAL as u64) as u32;
            debug_assert!(freqs[max_i] > excess);
            freqs[max_i] -= excess;
        } else {
            freqs[max_i] += (FREQ_TOTAL as u64 - total) as u32;
        }

        let mut cum = Vec::with_capacity(ALPHABET + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, FREQ_TOTAL);
        SymbolModel { cum }
    }

    fn span(&self, index: usize) -> (u32, u32) {
        (self.cum[index], self.cum[index + 1] - self.cum[index])
    }

    /// Finds the symbol whose cumulative span contains `target`.
    fn lookup(&self, target: u32) -> usize {
        // cum is strictly... non-decreasing with positive spans everywhere.
        let mut lo = 0usize;
        let mut hi = ALPHABET;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Ideal code length in bits for a symbol under this model, escape
    /// included. Used by tests as the cross-entropy reference.
    pub fn ideal_bits(&self, symbol: i64) -> f64 {
        if symbol.unsigned_abs() <= MAX_DIRECT as u64 {
            let (_, f) = self.span((symbol + MAX_DIRECT) as usize);
            -(f as f64 / FREQ_TOTAL as f64).log2()
        } else {
            let (_, f) = self.span(ESCAPE);
            -(f as f64 / FREQ_TOTAL as f64).log2() + 24.0
        }
    }
}

/// Encoded stream: decodable prefix-free bytes plus a recoverable count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub symbol_count: u32,
}

impl Bitstream {
    /// Wire layout: magic 0xEC, version u8, symbol_count u32 LE, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes.len() + 6);
        out.push(STREAM_MAGIC);
        out.push(STREAM_VERSION);
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Bitstream, EntropyError> {
        if data.len() < 6 {
            return Err(EntropyError::BadHeader("shorter than header".into()));
        }
        if data[0] != STREAM_MAGIC {
            return Err(EntropyError::BadHeader(format!(
                "bad magic 0x{:02X}",
                data[0]
            )));
        }
        if data[1] != STREAM_VERSION {
            return Err(EntropyError::BadHeader(format!("bad version {}", data[1])));
        }
        let symbol_count = u32::from_le_bytes([data[2], data[3], data[4], data[5]]);
        Ok(Bitstream {
            bytes: data[6..].to_vec(),
            symbol_count,
        })
    }

    /// Total wire size in bits, header included.
    pub fn wire_bits(&self) -> u64 {
        8 * (6 + self.bytes.len() as u64)
    }
}

const RC_TOP: u32 = 1 << 24;

/// Carry-handling byte-oriented range encoder.
struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, cum_low: u32, freq: u32, total: u32) {
        let r = self.range / total;
        self.low += r as u64 * cum_low as u64;
        self.range = r * freq;
        while self.range < RC_TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
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
        // Keep 32 bits: the byte shifted out lives in cache / pending 0xFFs.
        self.low = ((self.low as u32) << 8) as u64;
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

/// Matching range decoder. Reads never run past the payload.
struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self, EntropyError> {
        let mut dec = RangeDecoder {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 0,
        };
        for _ in 0..5 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        let b = *self.bytes.get(self.pos).ok_or(EntropyError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn decode_target(&mut self, total: u32) -> u32 {
        let r = self.range / total;
        (self.code / r).min(total - 1)
    }

    fn consume(&mut self, cum_low: u32, freq: u32, total: u32) -> Result<(), EntropyError> {
        let r = self.range / total;
        self.code -= r * cum_low;
        self.range = r * freq;
        while self.range < RC_TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }
}

/// Streaming encoder able to pack several channels into one bitstream.
pub struct SymbolEncoder<'t> {
    table: &'t ScaleTable,
    models: Vec<Option<SymbolModel>>,
    rc: RangeEncoder,
    count: u32,
}

impl<'t> SymbolEncoder<'t> {
    pub fn new(table: &'t ScaleTable) -> Self {
        SymbolEncoder {
            models: vec![None; table.channel_count()],
            table,
            rc: RangeEncoder::new(),
            count: 0,
        }
    }

    pub fn encode_channel(&mut self, symbols: &[i64], channel: usize) -> Result<(), EntropyError> {
        let scale = self.table.scale(channel)?;
        if self.models[channel].is_none() {
            self.models[channel] = Some(SymbolModel::from_scale(scale));
        }
        let model = self.models[channel].as_ref().unwrap();
        for &s in symbols {
            if s.unsigned_abs() > MAX_SYMBOL as u64 {
                return Err(EntropyError::SymbolOutOfRange(s));
            }
            if s.unsigned_abs() <= MAX_DIRECT as u64 {
                let (lo, f) = model.span((s + MAX_DIRECT) as usize);
                self.rc.encode(lo, f, FREQ_TOTAL);
            } else {
                let (lo, f) = model.span(ESCAPE);
                self.rc.encode(lo, f, FREQ_TOTAL);
                // 24-bit offset value, three uniform bytes, high byte first.
                let v = (s + (1 << 23)) as u32;
                for shift in [16u32, 8, 0] {
                    let byte = (v >> shift) & 0xFF;
                    self.rc.encode(byte, 1, 256);
                }
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Bitstream {
        Bitstream {
            bytes: self.rc.finish(),
            symbol_count: self.count,
        }
    }
}

/// Streaming decoder, mirror of [`SymbolEncoder`].
pub struct SymbolDecoder<'a, 't> {
    table: &'t ScaleTable,
    models: Vec<Option<SymbolModel>>,
    rc: RangeDecoder<'a>,
    remaining: u32,
}

impl<'a, 't> SymbolDecoder<'a, 't> {
    pub fn new(stream: &'a Bitstream, table: &'t ScaleTable) -> Result<Self, EntropyError> {
        // An encoder-produced stream always carries the 5 flush bytes; a
        // header-only empty stream is tolerated as well.
        static EMPTY_PAYLOAD: [u8; 5] = [0; 5];
        let payload: &[u8] = if stream.symbol_count == 0 && stream.bytes.len() < 5 {
            &EMPTY_PAYLOAD
        } else if stream.bytes.len() < 5 {
            return Err(EntropyError::Truncated);
        } else {
            &stream.bytes
        };
        Ok(SymbolDecoder {
            models: vec![None; table.channel_count()],
            table,
            rc: RangeDecoder::new(payload)?,
            remaining: stream.symbol_count,
        })
    }

    pub fn decode_channel(
        &mut self,
        count: usize,
        channel: usize,
    ) -> Result<Vec<i64>, EntropyError> {
        if count as u64 > self.remaining as u64 {
            return Err(EntropyError::BadHeader(format!(
                "requested {count} symbols but only {} remain",
                self.remaining
            )));
        }
        let scale = self.table.scale(channel)?;
        if self.models[channel].is_none() {
            self.models[channel] = Some(SymbolModel::from_scale(scale));
        }
        let model = self.models[channel].clone().unwrap();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let target = self.rc.decode_target(FREQ_TOTAL);
            let index = model.lookup(target);
            let (lo, f) = model.span(index);
            self.rc.consume(lo, f, FREQ_TOTAL)?;
            if index == ESCAPE {
                let mut v = 0u32;
                for _ in 0..3 {
                    let byte = self.rc.decode_target(256);
                    self.rc.consume(byte, 1, 256)?;
                    v = (v << 8) | byte;
                }
                out.push(v as i64 - (1 << 23));
            } else {
                out.push(index as i64 - MAX_DIRECT);
            }
            self.remaining -= 1;
        }
        Ok(out)
    }
}

/// Encodes one channel's symbols into a standalone bitstream.
pub fn encode_symbols(
    symbols: &[i64],
    channel: usize,
    table: &ScaleTable,
) -> Result<Bitstream, EntropyError> {
    let mut enc = SymbolEncoder::new(table);
    enc.encode_channel(symbols, channel)?;
    Ok(enc.finish())
}

/// Exact inverse of [`encode_symbols`] for the same channel and table.
pub fn decode_symbols(
    stream: &Bitstream,
    channel: usize,
    table: &ScaleTable,
) -> Result<Vec<i64>, EntropyError> {
    let mut dec = SymbolDecoder::new(stream, table)?;
    dec.decode_channel(stream.symbol_count as usize, channel)
}
