//! Progressive channelized codec: an orthonormal blockwise transform feeds
//! importance-ordered channel masking, uniform quantization and packetized
//! range coding; the receiver zero-fills whatever has not arrived yet.
//!
//! The transform is an 8x8 (configurable) DCT-II per color plane with
//! mid-gray centering, so a b-pixel block turns into C = 3*b^2 maskable
//! coefficient planes of size (W/b) x (H/b).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{Bitstream, EntropyError, ScaleTable, SymbolDecoder, SymbolEncoder};
use crate::imageio::ImageBuffer;

pub const DEFAULT_BLOCK: usize = 8;
/// Global quality knob: quantizer step = quality * channel scale.
pub const DEFAULT_QUALITY: f64 = 0.5;
const PACKET_MAGIC: u8 = 0x50; // 'P'
const CENTER: f64 = 128.0;

#[derive(Debug, thiserror::Error)]
pub enum MaskingError {
    #[error("image {0}x{1} has a zero dimension")]
    EmptyImage(usize, usize),
    #[error("block size must be >= 1")]
    BadBlock,
    #[error("ranking invalid: {0}")]
    BadRanking(String),
    #[error("packet belongs to image {got}, receiver is assembling image {expected}")]
    CrossImagePacket { expected: u32, got: u32 },
    #[error("packet malformed: {0}")]
    BadPacket(String),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ranking file parse error: {0}")]
    RankingParse(#[from] serde_json::Error),
}

/// Image geometry as seen by the transform: original size plus block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub width: usize,
    pub height: usize,
    pub block: usize,
}

impl LatentGeometry {
    pub fn grid_w(&self) -> usize {
        self.width.div_ceil(self.block)
    }

    pub fn grid_h(&self) -> usize {
        self.height.div_ceil(self.block)
    }

    pub fn cells(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    pub fn channels(&self) -> usize {
        3 * self.block * self.block
    }
}

/// C coefficient planes of (W/b) x (H/b) reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelizedLatent {
    pub geometry: LatentGeometry,
    /// `channels()` planes, each `cells()` long, row-major over blocks.
    pub planes: Vec<Vec<f64>>,
}

impl ChannelizedLatent {
    pub fn zeros(geometry: LatentGeometry) -> Self {
        ChannelizedLatent {
            planes: vec![vec![0.0; geometry.cells()]; geometry.channels()],
            geometry,
        }
    }

    /// Sum of squared coefficients in one channel.
    pub fn channel_energy(&self, channel: usize) -> f64 {
        self.planes[channel].iter().map(|v| v * v).sum()
    }
}

/// Integer symbol planes produced by the uniform quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    pub geometry: LatentGeometry,
    pub planes: Vec<Vec<i64>>,
}

/// Orthonormal DCT-II basis: basis[u][i] = alpha(u) cos((2i+1) u pi / (2b)).
fn dct_basis(b: usize) -> Vec<Vec<f64>> {
    let mut basis = vec![vec![0.0; b]; b];
    let norm0 = (1.0 / b as f64).sqrt();
    let norm = (2.0 / b as f64).sqrt();
    for (u, row) in basis.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let angle = std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * b) as f64;
            *v = if u == 0 { norm0 } else { norm * angle.cos() };
        }
    }
    basis
}

fn padded_sample(img: &ImageBuffer, plane: usize, x: usize, y: usize) -> f64 {
    let sx = x.min(img.width - 1);
    let sy = y.min(img.height - 1);
    img.planes[plane][sy * img.width + sx] as f64
}

/// Forward transform. Dimensions not divisible by the block size are
/// right/bottom edge-replicated first.
pub fn analyze(image: &ImageBuffer, block: usize) -> Result<ChannelizedLatent, MaskingError> {
    if block == 0 {
        return Err(MaskingError::BadBlock);
    }
    if image.width == 0 || image.height == 0 {
        return Err(MaskingError::EmptyImage(image.width, image.height));
    }
    let geometry = LatentGeometry {
        width: image.width,
        height: image.height,
        block,
    };
    let basis = dct_basis(block);
    let (gw, gh) = (geometry.grid_w(), geometry.grid_h());
    let mut latent = ChannelizedLatent::zeros(geometry);
    let mut pixels = vec![0.0; block * block];
    let mut tmp = vec![0.0; block * block];
    let mut coeffs = vec![0.0; block * block];
    for p in 0..3 {
        for by in 0..gh {
            for bx in 0..gw {
                for i in 0..block {
                    for j in 0..block {
                        pixels[i * block + j] =
                            padded_sample(image, p, bx * block + j, by * block + i) - CENTER;
                    }
                }
                // tmp = B * x, coeffs = tmp * B^T
                for u in 0..block {
                    for j in 0..block {
                        let mut acc = 0.0;
                        for i in 0..block {
                            acc += basis[u][i] * pixels[i * block + j];
                        }
                        tmp[u * block + j] = acc;
                    }
                }
                for u in 0..block {
                    for v in 0..block {
                        let mut acc = 0.0;
                        for j in 0..block {
                            acc += tmp[u * block + j] * basis[v][j];
                        }
                        coeffs[u * block + v] = acc;
                    }
                }
                let cell = by * gw + bx;
                for u in 0..block {
                    for v in 0..block {
                        let channel = p * block * block + u * block + v;
                        latent.planes[channel][cell] = coeffs[u * block + v];
                    }
                }
            }
        }
    }
    Ok(latent)
}

/// Inverse transform to floating-point pixel planes, neither clamped nor
/// rounded, cropped to the original dimensions.
pub fn synthesize_f64(latent: &ChannelizedLatent) -> Vec<Vec<f64>> {
    let g = latent.geometry;
    let block = g.block;
    let basis = dct_basis(block);
    let (gw, gh) = (g.grid_w(), g.grid_h());
    let mut planes = vec![vec![0.0; g.width * g.height]; 3];
    let mut coeffs = vec![0.0; block * block];
    let mut tmp = vec![0.0; block * block];
    for p in 0..3 {
        for by in 0..gh {
            for bx in 0..gw {
                let cell = by * gw + bx;
                for u in 0..block {
                    for v in 0..block {
                        coeffs[u * block + v] =
                            latent.planes[p * block * block + u * block + v][cell];
                    }
                }
                // tmp = B^T * X, pixels = tmp * B
                for i in 0..block {
                    for v in 0..block {
                        let mut acc = 0.0;
                        for u in 0..block {
                            acc += basis[u][i] * coeffs[u * block + v];
                        }
                        tmp[i * block + v] = acc;
                    }
                }
                for i in 0..block {
                    let y = by * block + i;
                    if y >= g.height {
                        break;
                    }
                    for j in 0..block {
                        let x = bx * block + j;
                        if x >= g.width {
                            continue;
                        }
                        let mut acc = 0.0;
                        for v in 0..block {
                            acc += tmp[i * block + v] * basis[v][j];
                        }
                        planes[p][y * g.width + x] = acc + CENTER;
                    }
                }
            }
        }
    }
    planes
}

/// Inverse transform to an 8-bit image, samples clamped to [0, 255].
pub fn synthesize(latent: &ChannelizedLatent) -> ImageBuffer {
    let g = latent.geometry;
    let planes = synthesize_f64(latent);
    let mut img = ImageBuffer::new(g.width, g.height);
    for p in 0..3 {
        for (dst, &src) in img.planes[p].iter_mut().zip(planes[p].iter()) {
            *dst = src.round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Channel order by average reconstruction-MSE degradation, most important
/// first, with the per-channel scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ImportanceRanking {
    /// Builds a ranking from per-channel scores; descending score, ties broken
    /// by lower channel index.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self, MaskingError> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(MaskingError::BadRanking(
                "scores must be finite and non-negative".into(),
            ));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        Ok(ImportanceRanking { order, scores })
    }

    /// Identity ranking, useful as an unsorted baseline.
    pub fn identity(channels: usize) -> Self {
        ImportanceRanking {
            order: (0..channels).collect(),
            scores: vec![0.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<(), MaskingError> {
        if self.order.len() != channels || self.scores.len() != channels {
            return Err(MaskingError::BadRanking(format!(
                "ranking covers {} channels, latent has {channels}",
                self.order.len()
            )));
        }
        let mut seen = vec![false; channels];
        for &c in &self.order {
            if c >= channels || seen[c] {
                return Err(MaskingError::BadRanking("order is not a permutation".into()));
            }
            seen[c] = true;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<(), MaskingError> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|source| MaskingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, MaskingError> {
        let text = fs::read_to_string(path).map_err(|source| MaskingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ranking: ImportanceRanking = serde_json::from_str(&text)?;
        Ok(ranking)
    }
}

/// Keeps the `keep` most important channels, zeroes the rest.
pub fn mask_channels(
    latent: &ChannelizedLatent,
    ranking: &ImportanceRanking,
    keep: usize,
) -> ChannelizedLatent {
    let mut out = ChannelizedLatent::zeros(latent.geometry);
    for &c in ranking.order.iter().take(keep) {
        out.planes[c] = latent.planes[c].clone();
    }
    out
}

/// symbol = round(coeff / step), ties to even.
pub fn quantize(latent: &ChannelizedLatent, table: &ScaleTable) -> QuantizedLatent {
    let planes = latent
        .planes
        .iter()
        .enumerate()
        .map(|(c, plane)| {
            let step = table.quant_step(c).expect("table covers all channels");
            plane
                .iter()
                .map(|&v| (v / step).round_ties_even() as i64)
                .collect()
        })
        .collect();
    QuantizedLatent {
        geometry: latent.geometry,
        planes,
    }
}

/// dequantized = symbol * step.
pub fn dequantize(quantized: &QuantizedLatent, table: &ScaleTable) -> ChannelizedLatent {
    let planes = quantized
        .planes
        .iter()
        .enumerate()
        .map(|(c, plane)| {
            let step = table.quant_step(c).expect("table covers all channels");
            plane.iter().map(|&s| s as f64 * step).collect()
        })
        .collect();
    ChannelizedLatent {
        geometry: quantized.geometry,
        planes,
    }
}

/// One independently decodable group of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPacket {
    pub image_id: u32,
    pub packet_index: u16,
    pub channel_ids: Vec<u16>,
    pub stream: Bitstream,
}

impl MaskedPacket {
    /// Bits spent on framing: packet header plus the bitstream header.
    pub fn header_bits(&self) -> u64 {
        8 * (1 + 4 + 2 + 2 + 2 * self.channel_ids.len() as u64 + 6)
    }

    /// Total wire size in bits.
    pub fn wire_bits(&self) -> u64 {
        self.header_bits() + 8 * self.stream.bytes.len() as u64
    }

    /// Layout: magic 0x50, image_id u32 LE, packet_index u16 LE,
    /// channel_count u16 LE, channel ids u16 LE each, then the bitstream.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(PACKET_MAGIC);
        out.extend_from_slice(&self.image_id.to_le_bytes());
        out.extend_from_slice(&self.packet_index.to_le_bytes());
        out.extend_from_slice(&(self.channel_ids.len() as u16).to_le_bytes());
        for &c in &self.channel_ids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.stream.to_bytes());
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, MaskingError> {
        if data.len() < 9 {
            return Err(MaskingError::BadPacket("shorter than header".into()));
        }
        if data[0] != PACKET_MAGIC {
            return Err(MaskingError::BadPacket(format!("bad magic 0x{:02X}", data[0])));
        }
        let image_id = u32::from_le_bytes([data[1], data[2], data[3], data[4]]);
        let packet_index = u16::from_le_bytes([data[5], data[6]]);
        let count = u16::from_le_bytes([data[7], data[8]]) as usize;
        let ids_end = 9 + 2 * count;
        if data.len() < ids_end {
            return Err(MaskingError::BadPacket("truncated channel ids".into()));
        }
        let channel_ids = (0..count)
            .map(|i| u16::from_le_bytes([data[9 + 2 * i], data[10 + 2 * i]]))
            .collect();
        let stream = Bitstream::from_bytes(&data[ids_end..])?;
        Ok(MaskedPacket {
            image_id,
            packet_index,
            channel_ids,
            stream,
        })
    }
}

/// Splits the quantized latent into packets of `group_size` channels in
/// importance order. Each packet decodes on its own.
pub fn encode_packets(
    quantized: &QuantizedLatent,
    ranking: &ImportanceRanking,
    group_size: usize,
    table: &ScaleTable,
    image_id: u32,
) -> Result<Vec<MaskedPacket>, MaskingError> {
    let total = quantized.geometry.channels().div_ceil(group_size.max(1));
    encode_packet_prefix(quantized, ranking, group_size, total, table, image_id)
}

/// First `n_packets` packets of the importance-ordered grouping; cheaper than
/// [`encode_packets`] when only a prefix will ever ship.
pub fn encode_packet_prefix(
    quantized: &QuantizedLatent,
    ranking: &ImportanceRanking,
    group_size: usize,
    n_packets: usize,
    table: &ScaleTable,
    image_id: u32,
) -> Result<Vec<MaskedPacket>, MaskingError> {
    assert!(group_size >= 1, "group_size must be >= 1");
    ranking.validate(quantized.geometry.channels())?;
    let mut packets = Vec::new();
    for (packet_index, group) in ranking.order.chunks(group_size).take(n_packets).enumerate() {
        let mut enc = SymbolEncoder::new(table);
        for &c in group {
            enc.encode_channel(&quantized.planes[c], c)?;
        }
        packets.push(MaskedPacket {
            image_id,
            packet_index: packet_index as u16,
            channel_ids: group.iter().map(|&c| c as u16).collect(),
            stream: enc.finish(),
        });
    }
    Ok(packets)
}

/// Receiver side: accumulates decoded channel planes and zero-fills the rest.
#[derive(Debug, Clone)]
pub struct ReceiverState {
    image_id: u32,
    geometry: LatentGeometry,
    received: BTreeMap<usize, Vec<i64>>,
}

impl ReceiverState {
    pub fn new(image_id: u32, geometry: LatentGeometry) -> Self {
        ReceiverState {
            image_id,
            geometry,
            received: BTreeMap::new(),
        }
    }

    pub fn received_channels(&self) -> usize {
        self.received.len()
    }

    /// Integrates one packet. Duplicates are idempotent; packets from another
    /// image are rejected.
    pub fn receiver_update(
        &mut self,
        packet: &MaskedPacket,
        table: &ScaleTable,
    ) -> Result<(), MaskingError> {
        if packet.image_id != self.image_id {
            return Err(MaskingError::CrossImagePacket {
                expected: self.image_id,
                got: packet.image_id,
            });
        }
        let cells = self.geometry.cells();
        let mut dec = SymbolDecoder::new(&packet.stream, table)?;
        for &c in &packet.channel_ids {
            let symbols = dec.decode_channel(cells, c as usize)?;
            self.received.entry(c as usize).or_insert(symbols);
        }
        Ok(())
    }

    /// Current latent: received channels dequantized, the rest zero.
    pub fn current_latent(&self, table: &ScaleTable) -> ChannelizedLatent {
        let mut latent = ChannelizedLatent::zeros(self.geometry);
        for (&c, symbols) in &self.received {
            let step = table.quant_step(c).expect("table covers all channels");
            latent.planes[c] = symbols.iter().map(|&s| s as f64 * step).collect();
        }
        latent
    }

    pub fn decode_current(&self, table: &ScaleTable) -> ImageBuffer {
        synthesize(&self.current_latent(table))
    }

    pub fn decode_current_f64(&self, table: &ScaleTable) -> Vec<Vec<f64>> {
        synthesize_f64(&self.current_latent(table))
    }
}

/// Pools raw coefficients per channel across a corpus, for scale calibration.
pub fn pool_channels(latents: &[ChannelizedLatent]) -> Vec<Vec<f64>> {
    assert!(!latents.is_empty(), "corpus must be non-empty");
    let channels = latents[0].geometry.channels();
    let mut pooled = vec![Vec::new(); channels];
    for latent in latents {
        assert_eq!(latent.geometry.channels(), channels, "mixed block sizes");
        for (c, plane) in latent.planes.iter().enumerate() {
            pooled[c].extend_from_slice(plane);
        }
    }
    pooled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_image;

    fn table_for(latent: &ChannelizedLatent, quality: f64) -> ScaleTable {
        ScaleTable::estimate(&pool_channels(std::slice::from_ref(latent)), quality).unwrap()
    }

    #[test]
    fn constant_image_concentrates_in_dc() {
        let img = ImageBuffer::filled(16, 16, 100);
        let latent = analyze(&img, 8).unwrap();
        for c in 0..latent.geometry.channels() {
            let energy = latent.channel_energy(c);
            if c % 64 == 0 {
                assert!(energy > 1.0, "DC channel {c} should be nonzero");
            } else {
                assert!(energy < 1e-18, "AC channel {c} has energy {energy}");
            }
        }
        // Exactly mid-gray centers to an all-zero latent.
        let mid = ImageBuffer::filled(16, 16, 128);
        let latent = analyze(&mid, 8).unwrap();
        for c in 0..latent.geometry.channels() {
            assert!(latent.channel_energy(c) < 1e-18);
        }
    }

    #[test]
    fn analyze_synthesize_round_trip() {
        let img = generate_image(10, 32, 24);
        let latent = analyze(&img, 8).unwrap();
        let planes = synthesize_f64(&latent);
        for p in 0..3 {
            for (i, &v) in planes[p].iter().enumerate() {
                let orig = img.planes[p][i] as f64;
                assert!((v - orig).abs() < 1e-9, "plane {p} sample {i}: {v} vs {orig}");
            }
        }
        assert_eq!(synthesize(&latent), img);
    }

    #[test]
    fn round_trip_with_edge_padding() {
        let img = generate_image(11, 30, 21);
        let latent = analyze(&img, 8).unwrap();
        assert_eq!(latent.geometry.grid_w(), 4);
        assert_eq!(latent.geometry.grid_h(), 3);
        assert_eq!(synthesize(&latent), img);
    }

    #[test]
    fn parseval_energy_is_preserved() {
        let img = generate_image(12, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let pixel_energy: f64 = (0..3)
            .map(|p| {
                img.planes[p]
                    .iter()
                    .map(|&v| (v as f64 - CENTER) * (v as f64 - CENTER))
                    .sum::<f64>()
            })
            .sum();
        let coeff_energy: f64 = (0..latent.geometry.channels())
            .map(|c| latent.channel_energy(c))
            .sum();
        assert!(
            (pixel_energy - coeff_energy).abs() / pixel_energy < 1e-6,
            "{pixel_energy} vs {coeff_energy}"
        );
    }

    #[test]
    fn zero_latent_synthesizes_mid_gray() {
        let g = LatentGeometry {
            width: 16,
            height: 16,
            block: 8,
        };
        let img = synthesize(&ChannelizedLatent::zeros(g));
        assert_eq!(img, ImageBuffer::filled(16, 16, 128));
    }

    #[test]
    fn mask_keep_extremes() {
        let img = generate_image(13, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let c = latent.geometry.channels();
        let ranking = ImportanceRanking::identity(c);
        let all = mask_channels(&latent, &ranking, c);
        assert_eq!(all, latent);
        let none = mask_channels(&latent, &ranking, 0);
        assert!(none.planes.iter().all(|p| p.iter().all(|&v| v == 0.0)));
        let one = mask_channels(&latent, &ranking, 1);
        for ch in 0..c {
            if ch == ranking.order[0] {
                assert_eq!(one.planes[ch], latent.planes[ch]);
            } else {
                assert!(one.planes[ch].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn quantizer_rounding_and_bound() {
        let g = LatentGeometry {
            width: 8,
            height: 8,
            block: 8,
        };
        let mut latent = ChannelizedLatent::zeros(g);
        latent.planes[0][0] = 0.4;
        latent.planes[1][0] = 3.0;
        let mut steps = vec![1.0; g.channels()];
        steps[1] = 2.0;
        let table = ScaleTable::new(vec![1.0; g.channels()], steps).unwrap();
        let q = quantize(&latent, &table);
        assert_eq!(q.planes[0][0], 0); // 0.4 rounds to 0
        assert_eq!(q.planes[1][0], 2); // 3.0/2 = 1.5 rounds half-to-even to 2
        let back = dequantize(&q, &table);
        assert_eq!(back.planes[1][0], 4.0);
        assert!((latent.planes[1][0] - back.planes[1][0]).abs() <= 1.0);

        // Random plane: |coeff - dequant| <= step/2 everywhere.
        let img = generate_image(14, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, 0.5);
        let q = quantize(&latent, &table);
        let back = dequantize(&q, &table);
        for ch in 0..latent.geometry.channels() {
            let step = table.quant_step(ch).unwrap();
            for (a, b) in latent.planes[ch].iter().zip(back.planes[ch].iter()) {
                assert!((a - b).abs() <= step / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn packet_count_matches_grouping() {
        let img = generate_image(15, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let c = latent.geometry.channels();
        assert_eq!(c, 192);
        let table = table_for(&latent, 0.5);
        let ranking = ImportanceRanking::identity(c);
        let q = quantize(&latent, &table);
        let packets = encode_packets(&q, &ranking, 8, &table, 7).unwrap();
        assert_eq!(packets.len(), 24);
        let single = encode_packets(&q, &ranking, c, &table, 7).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].channel_ids.len(), c);
    }

    #[test]
    fn packet_prefix_matches_full_encoding() {
        let img = generate_image(22, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, 0.5);
        let ranking = ImportanceRanking::identity(latent.geometry.channels());
        let q = quantize(&latent, &table);
        let full = encode_packets(&q, &ranking, 8, &table, 9).unwrap();
        let prefix = encode_packet_prefix(&q, &ranking, 8, 3, &table, 9).unwrap();
        assert_eq!(prefix, full[..3]);
    }

    #[test]
    fn packet_wire_round_trip() {
        let img = generate_image(16, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, 0.5);
        let ranking = ImportanceRanking::identity(latent.geometry.channels());
        let q = quantize(&latent, &table);
        let packets = encode_packets(&q, &ranking, 8, &table, 42).unwrap();
        for p in &packets {
            let wire = p.to_bytes();
            assert_eq!(wire.len() as u64 * 8, p.wire_bits());
            let back = MaskedPacket::from_bytes(&wire).unwrap();
            assert_eq!(&back, p);
        }
        assert!(MaskedPacket::from_bytes(&[0x51, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn progressive_prefix_equals_mask_then_code_path() {
        let img = generate_image(17, 24, 16);
        let latent = analyze(&img, 8).unwrap();
        let c = latent.geometry.channels();
        let table = table_for(&latent, 0.5);
        let scores: Vec<f64> = (0..c).map(|ch| latent.channel_energy(ch)).collect();
        let ranking = ImportanceRanking::from_scores(scores).unwrap();
        let q = quantize(&latent, &table);
        let group = 8;
        let packets = encode_packets(&q, &ranking, group, &table, 1).unwrap();

        for prefix in [1usize, 3, 7, packets.len()] {
            let mut rx = ReceiverState::new(1, latent.geometry);
            for p in &packets[..prefix] {
                rx.receiver_update(p, &table).unwrap();
            }
            let progressive = rx.decode_current(&table);
            // Independent path: mask, quantize, dequantize, synthesize.
            let keep = (prefix * group).min(c);
            let masked = mask_channels(&latent, &ranking, keep);
            let reference = synthesize(&dequantize(&quantize(&masked, &table), &table));
            assert_eq!(progressive, reference, "prefix {prefix}");
        }
    }

    #[test]
    fn receiver_is_idempotent_and_rejects_cross_image() {
        let img = generate_image(18, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, 0.5);
        let ranking = ImportanceRanking::identity(latent.geometry.channels());
        let q = quantize(&latent, &table);
        let packets = encode_packets(&q, &ranking, 16, &table, 5).unwrap();

        let mut rx = ReceiverState::new(5, latent.geometry);
        assert_eq!(rx.decode_current(&table), ImageBuffer::filled(16, 16, 128));
        rx.receiver_update(&packets[0], &table).unwrap();
        let once = rx.decode_current(&table);
        rx.receiver_update(&packets[0], &table).unwrap();
        assert_eq!(rx.decode_current(&table), once);

        let mut foreign = packets[1].clone();
        foreign.image_id = 6;
        assert!(matches!(
            rx.receiver_update(&foreign, &table),
            Err(MaskingError::CrossImagePacket { expected: 5, got: 6 })
        ));
    }

    #[test]
    fn full_prefix_equals_one_shot_decode() {
        let img = generate_image(19, 32, 32);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, 0.5);
        let ranking = ImportanceRanking::identity(latent.geometry.channels());
        let q = quantize(&latent, &table);
        let packets = encode_packets(&q, &ranking, 8, &table, 2).unwrap();
        let mut rx = ReceiverState::new(2, latent.geometry);
        for p in &packets {
            rx.receiver_update(p, &table).unwrap();
        }
        let one_shot = synthesize(&dequantize(&q, &table));
        assert_eq!(rx.decode_current(&table), one_shot);
    }

    #[test]
    fn prefix_mse_is_non_increasing() {
        let img = generate_image(20, 32, 32);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, DEFAULT_QUALITY);
        let scores: Vec<f64> = (0..latent.geometry.channels())
            .map(|c| latent.channel_energy(c))
            .collect();
        let ranking = ImportanceRanking::from_scores(scores).unwrap();
        let q = quantize(&latent, &table);
        let packets = encode_packets(&q, &ranking, 8, &table, 3).unwrap();
        let mut rx = ReceiverState::new(3, latent.geometry);
        let mut prev = f64::INFINITY;
        for p in &packets {
            rx.receiver_update(p, &table).unwrap();
            let recon = rx.decode_current_f64(&table);
            let mse = crate::metrics::mse_f64(&img, &recon).unwrap();
            assert!(
                mse <= prev + 1e-12,
                "MSE rose from {prev} to {mse} at packet {}",
                p.packet_index
            );
            prev = mse;
        }
    }

    #[test]
    fn every_channel_strictly_refines_at_default_quality() {
        // Quantization MSE below channel energy means receiving the channel
        // strictly reduces reconstruction error; at the default quality this
        // holds for every channel of every corpus image.
        let corpus: Vec<ImageBuffer> = (0..3).map(|i| generate_image(90 + i, 32, 32)).collect();
        let latents: Vec<_> = corpus.iter().map(|i| analyze(i, 8).unwrap()).collect();
        let table = ScaleTable::estimate(&pool_channels(&latents), DEFAULT_QUALITY).unwrap();
        for (idx, latent) in latents.iter().enumerate() {
            let back = dequantize(&quantize(latent, &table), &table);
            for c in 0..latent.geometry.channels() {
                let energy = latent.channel_energy(c);
                let quant_mse: f64 = latent.planes[c]
                    .iter()
                    .zip(back.planes[c].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(
                    quant_mse < energy,
                    "image {idx} channel {c}: quant error {quant_mse} >= energy {energy}"
                );
            }
        }
    }

    #[test]
    fn parseval_error_decomposition() {
        // Total squared reconstruction error equals received channels'
        // quantization error plus missing channels' energy.
        let img = generate_image(21, 16, 16);
        let latent = analyze(&img, 8).unwrap();
        let table = table_for(&latent, 0.5);
        let ranking = ImportanceRanking::identity(latent.geometry.channels());
        let keep = 40;
        let masked = mask_channels(&latent, &ranking, keep);
        let recon = synthesize_f64(&dequantize(&quantize(&masked, &table), &table));

        let mut total_err = 0.0;
        for p in 0..3 {
            for (i, &r) in recon[p].iter().enumerate() {
                let d = img.planes[p][i] as f64 - r;
                total_err += d * d;
            }
        }
        let q = quantize(&latent, &table);
        let back = dequantize(&q, &table);
        let mut expected = 0.0;
        for c in 0..latent.geometry.channels() {
            if ranking.order[..keep].contains(&c) {
                expected += latent.planes[c]
                    .iter()
                    .zip(back.planes[c].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            } else {
                expected += latent.channel_energy(c);
            }
        }
        assert!(
            (total_err - expected).abs() / expected.max(1e-12) < 1e-6,
            "{total_err} vs {expected}"
        );
    }

    #[test]
    fn ranking_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranking.json");
        let ranking = ImportanceRanking::from_scores(vec![0.5, 2.0, 1.0]).unwrap();
        assert_eq!(ranking.order, vec![1, 2, 0]);
        ranking.save_json(&path).unwrap();
        let back = ImportanceRanking::load_json(&path).unwrap();
        assert_eq!(back, ranking);
    }

    #[test]
    fn ranking_ties_break_by_lower_index() {
        let ranking = ImportanceRanking::from_scores(vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        assert_eq!(ranking.order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        let img = ImageBuffer::new(0, 8);
        assert!(analyze(&img, 8).is_err());
        let ok = ImageBuffer::new(8, 8);
        assert!(analyze(&ok, 0).is_err());
    }
}
