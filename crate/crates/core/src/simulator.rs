//! Monte-Carlo experiment harness: SNR grid x methods x images x channel
//! realizations, producing per-record timelines, Table-style aggregates and
//! snapshot traces.
//!
//! Reproducibility contract: the per-realization seed mixes (base_seed, snr
//! index, realization index) only, methods share the realization's trace, and
//! results reduce in (snr, method, image, realization) order, so worker count
//! never changes any output byte.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_fading, slot_budgets, FadingConfig, RateModel};
use crate::entropy::ScaleTable;
use crate::imageio::ImageBuffer;
use crate::masking::{
    analyze, encode_packet_prefix, quantize, ImportanceRanking, MaskedPacket, MaskingError,
    QuantizedLatent, ReceiverState,
};
use crate::metrics::{self, DeliveryOutcome, WaitSample};
use crate::rvq::{RvqCodec, TokenPacket};
use crate::scheduler::{plan_image, Policy, TransmissionPlan};

#[derive(Debug, thiserror::Error)]
pub enum SimulatorError {
    #[error("experiment config invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Rvq(#[from] crate::rvq::RvqError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

/// Channel knobs shared by every realization; the average SNR and seed are
/// filled in per grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FadingTemplate {
    pub doppler_hz: f64,
    pub slot_s: f64,
    pub bandwidth_hz: f64,
    pub num_sinusoids: usize,
}

impl Default for FadingTemplate {
    fn default() -> Self {
        FadingTemplate {
            doppler_hz: 10.0,
            slot_s: 1e-3,
            bandwidth_hz: 100_000.0,
            num_sinusoids: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodConfig {
    ProgressiveMasking { group_size: usize, n_max: usize },
    ProgressiveRvq { m_max: usize },
    AdaptiveBaseline { quality_keeps: Vec<usize> },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::ProgressiveMasking { .. } => "progressive-masking",
            MethodConfig::ProgressiveRvq { .. } => "progressive-rvq",
            MethodConfig::AdaptiveBaseline { .. } => "adaptive-baseline",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub snr_grid_db: Vec<f64>,
    pub n_realizations: usize,
    /// Abandonment deadline per image, in slots.
    pub horizon_slots: usize,
    pub base_seed: u64,
    pub fading: FadingTemplate,
    pub rate_model: RateModel,
    pub methods: Vec<MethodConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.snr_grid_db.is_empty() {
            return Err(SimulatorError::InvalidConfig("empty SNR grid".into()));
        }
        if self.n_realizations < 1 {
            return Err(SimulatorError::InvalidConfig(
                "n_realizations must be >= 1".into(),
            ));
        }
        if self.horizon_slots < 1 {
            return Err(SimulatorError::InvalidConfig(
                "horizon_slots must be >= 1".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(SimulatorError::InvalidConfig("no methods".into()));
        }
        for (i, method) in self.methods.iter().enumerate() {
            if self.methods[..i].iter().any(|m| m.name() == method.name()) {
                return Err(SimulatorError::InvalidConfig(format!(
                    "duplicate method {}",
                    method.name()
                )));
            }
        }
        for m in &self.methods {
            if let MethodConfig::AdaptiveBaseline { quality_keeps } = m {
                if quality_keeps.is_empty() {
                    return Err(SimulatorError::InvalidConfig(
                        "baseline needs at least one quality level".into(),
                    ));
                }
                if quality_keeps.contains(&0)
                    || quality_keeps.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(SimulatorError::InvalidConfig(format!(
                        "baseline quality_keeps must be strictly increasing and positive: {quality_keeps:?}"
                    )));
                }
            }
        }
        if let RateModel::FiniteBlocklength { epsilon } = self.rate_model {
            if !(epsilon > 0.0 && epsilon <= 0.5) {
                return Err(SimulatorError::InvalidConfig(format!(
                    "finite-blocklength epsilon {epsilon} outside (0, 0.5]"
                )));
            }
        }
        Ok(())
    }
}

/// Trained artifacts the methods draw on.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub block: usize,
    pub ranking: ImportanceRanking,
    pub scales: ScaleTable,
    pub rvq: RvqCodec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Slot relative to the image's start.
    pub slot: u64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image, per-realization timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub snr_db: f64,
    pub method: String,
    pub image: String,
    pub realization: u32,
    pub start_slot: u64,
    pub first_decode_slot: Option<u64>,
    pub completion_slot: Option<u64>,
    pub bits_sent: u64,
    pub pixels: u64,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub snr_db: f64,
    pub method: String,
    pub throughput_mpps: f64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub t_avg_ms: Option<f64>,
    pub t_p999_ms: Option<f64>,
    pub incomplete_fraction: f64,
}

/// Wall-clock compression/decompression cost, reported separately from the
/// simulated slot clock and excluded from the deterministic outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub encode_ms_mean: f64,
    pub decode_ms_mean: f64,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub records: Vec<TransmissionRecord>,
    /// Waiting-time columns measure the first decode event.
    pub aggregates: Vec<AggregateRow>,
    /// Waiting-time columns measure full payload delivery.
    pub aggregates_full: Vec<AggregateRow>,
    pub timings: Vec<MethodTiming>,
}

/// splitmix64 step.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable per-realization seed from (base, snr index, realization index).
pub fn derive_seed(base_seed: u64, snr_index: usize, realization: usize) -> u64 {
    mix64(mix64(base_seed ^ mix64(snr_index as u64 + 1)) ^ (realization as u64 + 1))
}

struct ImagePrecompute {
    name: String,
    pixels: u64,
    /// Ordered unit sizes in bits (packets/stages/levels).
    unit_bits: Vec<u64>,
    /// Quality after each unit prefix (progressive) or per level (baseline).
    quality: Vec<(f64, f64)>,
}

struct MethodPrecompute {
    name: String,
    policy: Policy,
    images: Vec<ImagePrecompute>,
    timing: MethodTiming,
}

fn quality_of(recon: &[Vec<f64>], image: &ImageBuffer) -> Result<(f64, f64), SimulatorError> {
    let mse = metrics::mse_f64(image, recon)?;
    let clamped: Vec<Vec<f64>> = recon
        .iter()
        .map(|p| p.iter().map(|&v| v.clamp(0.0, 255.0)).collect())
        .collect();
    let ssim = metrics::ssim_f64(image, &clamped)?;
    Ok((metrics::psnr_from_mse(mse), ssim))
}

fn masking_prefix_quality(
    image: &ImageBuffer,
    quantized: &QuantizedLatent,
    packets: &[MaskedPacket],
    scales: &ScaleTable,
    decode_ms: &mut Vec<f64>,
) -> Result<Vec<(f64, f64)>, SimulatorError> {
    let mut rx = ReceiverState::new(0, quantized.geometry);
    let mut out = Vec::with_capacity(packets.len());
    for packet in packets {
        let t0 = Instant::now();
        rx.receiver_update(packet, scales)?;
        let recon = rx.decode_current_f64(scales);
        decode_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        out.push(quality_of(&recon, image)?);
    }
    Ok(out)
}

fn precompute_method(
    method: &MethodConfig,
    images: &[(String, ImageBuffer)],
    artifacts: &Artifacts,
) -> Result<MethodPrecompute, SimulatorError> {
    let mut encode_ms = Vec::new();
    let mut decode_ms = Vec::new();
    let mut pre_images = Vec::with_capacity(images.len());
    for (name, image) in images {
        let pixels = (image.width * image.height) as u64;
        let pre = match method {
            MethodConfig::ProgressiveMasking { group_size, n_max } => {
                let t0 = Instant::now();
                let latent = analyze(image, artifacts.block)?;
                let channels = latent.geometry.channels();
                let planned = (*n_max).min(channels);
                let quantized = quantize(&latent, &artifacts.scales);
                let n_packets = planned.div_ceil(*group_size);
                let packets = encode_packet_prefix(
                    &quantized,
                    &artifacts.ranking,
                    *group_size,
                    n_packets,
                    &artifacts.scales,
                    0,
                )?;
                encode_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                let mut unit_bits: Vec<u64> = packets.iter().map(|p| p.wire_bits()).collect();
                unit_bits[0] += ScaleTable::side_info_bits(planned);
                let quality = masking_prefix_quality(
                    image,
                    &quantized,
                    &packets,
                    &artifacts.scales,
                    &mut decode_ms,
                )?;
                ImagePrecompute {
                    name: name.clone(),
                    pixels,
                    unit_bits,
                    quality,
                }
            }
            MethodConfig::ProgressiveRvq { m_max } => {
                let t0 = Instant::now();
                let tokens = artifacts.rvq.encode_image(image);
                encode_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                let m = (*m_max).min(tokens.stages.len());
                let cells = tokens.cells() as u64;
                let stage_bits =
                    TokenPacket::header_bits() + TokenPacket::payload_bits(cells, tokens.bpi);
                let mut quality = Vec::with_capacity(m);
                for prefix in 1..=m {
                    let t0 = Instant::now();
                    let recon =
                        artifacts
                            .rvq
                            .decode_prefix_f64(&tokens, prefix, image.width, image.height)?;
                    decode_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                    quality.push(quality_of(&recon, image)?);
                }
                ImagePrecompute {
                    name: name.clone(),
                    pixels,
                    unit_bits: vec![stage_bits; m],
                    quality,
                }
            }
            MethodConfig::AdaptiveBaseline { quality_keeps } => {
                let t0 = Instant::now();
                let latent = analyze(image, artifacts.block)?;
                let channels = latent.geometry.channels();
                if let Some(&bad) = quality_keeps.iter().find(|&&k| k == 0 || k > channels) {
                    return Err(SimulatorError::InvalidConfig(format!(
                        "baseline keep {bad} outside 1..={channels} for image {name}"
                    )));
                }
                let quantized = quantize(&latent, &artifacts.scales);
                let mut unit_bits = Vec::with_capacity(quality_keeps.len());
                let mut quality = Vec::with_capacity(quality_keeps.len());
                for &keep in quality_keeps {
                    let packets = encode_packet_prefix(
                        &quantized,
                        &artifacts.ranking,
                        keep,
                        1,
                        &artifacts.scales,
                        0,
                    )?;
                    let level_packet = packets.into_iter().next().expect("at least one packet");
                    unit_bits.push(level_packet.wire_bits() + ScaleTable::side_info_bits(keep));
                    let td = Instant::now();
                    let mut rx = ReceiverState::new(0, quantized.geometry);
                    rx.receiver_update(&level_packet, &artifacts.scales)?;
                    let recon = rx.decode_current_f64(&artifacts.scales);
                    decode_ms.push(td.elapsed().as_secs_f64() * 1e3);
                    quality.push(quality_of(&recon, image)?);
                }
                encode_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                if unit_bits.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(SimulatorError::InvalidConfig(format!(
                        "baseline level sizes not strictly increasing for image {name}: {unit_bits:?}"
                    )));
                }
                ImagePrecompute {
                    name: name.clone(),
                    pixels,
                    unit_bits,
                    quality,
                }
            }
        };
        pre_images.push(pre);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let policy = match method {
        MethodConfig::ProgressiveMasking { group_size, n_max } => Policy::ProgressiveMasking {
            group_size: *group_size,
            n_max: *n_max,
        },
        MethodConfig::ProgressiveRvq { m_max } => Policy::ProgressiveRvq {
            bpi: artifacts.rvq.stack.bpi(),
            m_max: *m_max,
        },
        MethodConfig::AdaptiveBaseline { quality_keeps } => Policy::NonProgressive {
            quality_keeps: quality_keeps.clone(),
        },
    };
    Ok(MethodPrecompute {
        name: method.name().to_string(),
        policy,
        images: pre_images,
        timing: MethodTiming {
            method: method.name().to_string(),
            encode_ms_mean: mean(&encode_ms),
            decode_ms_mean: mean(&decode_ms),
        },
    })
}

fn trajectory_from_plan(
    plan: &TransmissionPlan,
    policy: &Policy,
    pre: &ImagePrecompute,
) -> Vec<TrajectoryPoint> {
    match policy {
        Policy::NonProgressive { .. } => match (plan.first_decode_slot(), plan.level_delivered) {
            (Some(slot), Some(level)) => vec![TrajectoryPoint {
                slot: slot as u64,
                psnr_db: pre.quality[level].0,
                ssim: pre.quality[level].1,
            }],
            _ => Vec::new(),
        },
        _ => plan
            .decode_events()
            .into_iter()
            .map(|(slot, cum_units)| TrajectoryPoint {
                slot: slot as u64,
                psnr_db: pre.quality[cum_units - 1].0,
                ssim: pre.quality[cum_units - 1].1,
            })
            .collect(),
    }
}

/// Runs one realization of one grid point for every method and image over a
/// shared fading trace. Returns records in (method, image) order.
fn run_realization(
    config: &ExperimentConfig,
    methods: &[MethodPrecompute],
    snr_index: usize,
    realization: usize,
) -> Vec<TransmissionRecord> {
    let n_images = methods[0].images.len();
    let seed = derive_seed(config.base_seed, snr_index, realization);
    let fading = FadingConfig {
        doppler_hz: config.fading.doppler_hz,
        slot_s: config.fading.slot_s,
        bandwidth_hz: config.fading.bandwidth_hz,
        avg_snr_db: config.snr_grid_db[snr_index],
        num_sinusoids: config.fading.num_sinusoids,
        seed,
    };
    let trace = generate_fading(&fading, n_images * config.horizon_slots);
    let budgets = slot_budgets(&trace, &fading, config.rate_model);

    let mut records = Vec::with_capacity(methods.len() * n_images);
    for method in methods {
        let mut start = 0usize;
        for pre in &method.images {
            let slice = &budgets[start..(start + config.horizon_slots).min(budgets.len())];
            let plan = plan_image(&method.policy, &pre.unit_bits, slice);
            let trajectory = trajectory_from_plan(&plan, &method.policy, pre);
            let completion = plan.completion_slot();
            records.push(TransmissionRecord {
                snr_db: config.snr_grid_db[snr_index],
                method: method.name.clone(),
                image: pre.name.clone(),
                realization: realization as u32,
                start_slot: start as u64,
                first_decode_slot: plan.first_decode_slot().map(|s| s as u64),
                completion_slot: completion.map(|s| s as u64),
                bits_sent: plan.bits_sent,
                pixels: pre.pixels,
                trajectory,
            });
            // Next image starts the slot after completion or abandonment.
            start += completion.map_or(config.horizon_slots, |c| c + 1);
        }
    }
    records
}

fn aggregate(
    config: &ExperimentConfig,
    records: &[TransmissionRecord],
    full_delivery: bool,
) -> Vec<AggregateRow> {
    let slot_ms = config.fading.slot_s * 1e3;
    let mut rows = Vec::new();
    for &snr in &config.snr_grid_db {
        for method in &config.methods {
            let subset: Vec<&TransmissionRecord> = records
                .iter()
                .filter(|r| r.snr_db == snr && r.method == method.name())
                .collect();
            if subset.is_empty() {
                continue;
            }
            // Observed time: each realization runs until its last image
            // completes or is abandoned.
            let mut per_realization_slots: std::collections::BTreeMap<u32, u64> =
                std::collections::BTreeMap::new();
            for r in &subset {
                let end = r.start_slot
                    + r.completion_slot
                        .map_or(config.horizon_slots as u64, |c| c + 1);
                let e = per_realization_slots.entry(r.realization).or_insert(0);
                *e = (*e).max(end);
            }
            let horizon_s: f64 = per_realization_slots
                .values()
                .map(|&slots| slots as f64 * config.fading.slot_s)
                .sum();

            let outcomes: Vec<DeliveryOutcome> = subset
                .iter()
                .map(|r| DeliveryOutcome {
                    pixels: r.pixels,
                    first_decoded: r.first_decode_slot.is_some(),
                })
                .collect();
            let throughput = metrics::throughput_mpps(&outcomes, horizon_s.max(f64::MIN_POSITIVE));

            let waits: Vec<WaitSample> = subset
                .iter()
                .map(|r| {
                    let slot = if full_delivery {
                        r.completion_slot
                    } else {
                        r.first_decode_slot
                    };
                    match slot {
                        Some(s) => WaitSample::CompletedMs((s + 1) as f64 * slot_ms),
                        None => WaitSample::Incomplete,
                    }
                })
                .collect();
            let stats = metrics::wait_stats(&waits).expect("non-empty subset");

            let finals: Vec<&TrajectoryPoint> = subset
                .iter()
                .filter_map(|r| r.trajectory.last())
                .collect();
            let (psnr_db, ssim) = if finals.is_empty() {
                (None, None)
            } else {
                let n = finals.len() as f64;
                (
                    Some(finals.iter().map(|p| p.psnr_db).sum::<f64>() / n),
                    Some(finals.iter().map(|p| p.ssim).sum::<f64>() / n),
                )
            };
            rows.push(AggregateRow {
                snr_db: snr,
                method: method.name().to_string(),
                throughput_mpps: throughput,
                psnr_db,
                ssim,
                t_avg_ms: if stats.t_avg_ms.is_nan() {
                    None
                } else {
                    Some(stats.t_avg_ms)
                },
                t_p999_ms: if stats.t_p999_ms.is_nan() {
                    None
                } else {
                    Some(stats.t_p999_ms)
                },
                incomplete_fraction: stats.incomplete_fraction,
            });
        }
    }
    rows
}

/// Full sweep. Deterministic for a given config regardless of the rayon pool
/// executing it.
pub fn run_experiment(
    config: &ExperimentConfig,
    images: &[(String, ImageBuffer)],
    artifacts: &Artifacts,
) -> Result<ExperimentOutput, SimulatorError> {
    config.validate()?;
    if images.is_empty() {
        return Err(SimulatorError::InvalidConfig("no images".into()));
    }
    let methods: Vec<MethodPrecompute> = config
        .methods
        .iter()
        .map(|m| precompute_method(m, images, artifacts))
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, usize)> = (0..config.snr_grid_db.len())
        .flat_map(|s| (0..config.n_realizations).map(move |r| (s, r)))
        .collect();
    let mut chunks: Vec<Vec<TransmissionRecord>> = jobs
        .par_iter()
        .map(|&(s, r)| run_realization(config, &methods, s, r))
        .collect();

    // Reduce in (snr, method, image, realization) order.
    let mut records: Vec<TransmissionRecord> = Vec::new();
    for chunk in chunks.drain(..) {
        records.extend(chunk);
    }
    let method_index = |name: &str| {
        config
            .methods
            .iter()
            .position(|m| m.name() == name)
            .unwrap_or(usize::MAX)
    };
    let snr_index = |snr: f64| {
        config
            .snr_grid_db
            .iter()
            .position(|&s| s == snr)
            .unwrap_or(usize::MAX)
    };
    let image_index = |name: &str| {
        images
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or(usize::MAX)
    };
    records.sort_by_key(|r| {
        (
            snr_index(r.snr_db),
            method_index(&r.method),
            image_index(&r.image),
            r.realization,
        )
    });

    let aggregates = aggregate(config, &records, false);
    let aggregates_full = aggregate(config, &records, true);
    Ok(ExperimentOutput {
        records,
        aggregates,
        aggregates_full,
        timings: methods.into_iter().map(|m| m.timing).collect(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    }
}

/// Results table CSV, one row per (snr, method).
pub fn aggregates_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "snr_db,method,throughput_mpps,psnr_db,ssim,t_avg_ms,t_p999_ms,incomplete_fraction\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{},{:.6}\n",
            r.snr_db,
            r.method,
            r.throughput_mpps,
            fmt_opt(r.psnr_db),
            fmt_opt(r.ssim),
            fmt_opt(r.t_avg_ms),
            fmt_opt(r.t_p999_ms),
            r.incomplete_fraction
        ));
    }
    out
}

pub fn records_to_jsonl(records: &[TransmissionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn timings_to_csv(timings: &[MethodTiming]) -> String {
    let mut out = String::from("method,encode_ms_mean,decode_ms_mean\n");
    for t in timings {
        out.push_str(&format!(
            "{},{:.3},{:.3}\n",
            t.method, t.encode_ms_mean, t.decode_ms_mean
        ));
    }
    out
}

/// One row of the snapshot series.
#[derive(Debug, Clone, Serialize)]
pub struct SnapshotRow {
    pub slot: usize,
    pub h_abs: f64,
    /// Last decoded PSNR per method, None before any decode.
    pub psnr_db: Vec<Option<f64>>,
    /// Elapsed waiting time of the in-flight image per method, ms.
    pub wait_ms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SnapshotSeries {
    pub method_names: Vec<String>,
    pub rows: Vec<SnapshotRow>,
    /// (method, absolute slot, 1-based event ordinal within its image).
    pub events: Vec<(String, usize, usize)>,
}

/// A short per-slot series (|h|, per-method PSNR and waiting time) suitable
/// for external plotting. Images cycle back-to-back over the window.
pub fn snapshot_trace(
    config: &ExperimentConfig,
    images: &[(String, ImageBuffer)],
    artifacts: &Artifacts,
    snr_index: usize,
    realization: usize,
    window_ms: f64,
) -> Result<SnapshotSeries, SimulatorError> {
    config.validate()?;
    if snr_index >= config.snr_grid_db.len() {
        return Err(SimulatorError::InvalidConfig("snr index out of grid".into()));
    }
    let window_slots = (window_ms / (config.fading.slot_s * 1e3)).round() as usize;
    if window_slots == 0 || window_slots > images.len() * config.horizon_slots {
        return Err(SimulatorError::InvalidConfig(
            "window must be positive and within the horizon".into(),
        ));
    }
    let methods: Vec<MethodPrecompute> = config
        .methods
        .iter()
        .map(|m| precompute_method(m, images, artifacts))
        .collect::<Result<_, _>>()?;
    let seed = derive_seed(config.base_seed, snr_index, realization);
    let fading = FadingConfig {
        doppler_hz: config.fading.doppler_hz,
        slot_s: config.fading.slot_s,
        bandwidth_hz: config.fading.bandwidth_hz,
        avg_snr_db: config.snr_grid_db[snr_index],
        num_sinusoids: config.fading.num_sinusoids,
        seed,
    };
    let trace = generate_fading(&fading, window_slots);
    let budgets = slot_budgets(&trace, &fading, config.rate_model);

    let slot_ms = config.fading.slot_s * 1e3;
    let mut psnr_series: Vec<Vec<Option<f64>>> = vec![Vec::new(); methods.len()];
    let mut wait_series: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    let mut events = Vec::new();
    for (m_idx, method) in methods.iter().enumerate() {
        let mut start = 0usize;
        let mut image_cycle = 0usize;
        let mut last_psnr: Option<f64> = None;
        while start < window_slots {
            let pre = &method.images[image_cycle % method.images.len()];
            let slice = &budgets[start..(start + config.horizon_slots).min(budgets.len())];
            let plan = plan_image(&method.policy, &pre.unit_bits, slice);
            let trajectory = trajectory_from_plan(&plan, &method.policy, pre);
            let completion = plan.completion_slot();
            let span = completion
                .map_or(config.horizon_slots, |c| c + 1)
                .min(window_slots - start);
            let mut traj_iter = trajectory.iter().enumerate().peekable();
            for rel in 0..span {
                while let Some((ordinal, p)) = traj_iter.peek() {
                    if p.slot as usize <= rel {
                        last_psnr = Some(p.psnr_db);
                        events.push((method.name.clone(), start + p.slot as usize, ordinal + 1));
                        traj_iter.next();
                    } else {
                        break;
                    }
                }
                psnr_series[m_idx].push(last_psnr);
                wait_series[m_idx].push((rel + 1) as f64 * slot_ms);
            }
            start += span;
            image_cycle += 1;
        }
    }

    let rows = (0..window_slots)
        .map(|slot| SnapshotRow {
            slot,
            h_abs: trace.gain_power(slot).sqrt(),
            psnr_db: psnr_series.iter().map(|s| s[slot]).collect(),
            wait_ms: wait_series.iter().map(|s| s[slot]).collect(),
        })
        .collect();
    Ok(SnapshotSeries {
        method_names: methods.iter().map(|m| m.name.clone()).collect(),
        rows,
        events,
    })
}

pub fn snapshot_to_csv(series: &SnapshotSeries) -> String {
    let mut header = String::from("slot,h_abs");
    for name in &series.method_names {
        header.push_str(&format!(",{name}_psnr_db,{name}_wait_ms"));
    }
    header.push('\n');
    let mut out = header;
    for row in &series.rows {
        out.push_str(&format!("{},{:.6}", row.slot, row.h_abs));
        for (psnr, wait) in row.psnr_db.iter().zip(row.wait_ms.iter()) {
            match psnr {
                Some(p) => out.push_str(&format!(",{p:.4},{wait:.3}")),
                None => out.push_str(&format!(",-,{wait:.3}")),
            }
        }
        out.push('\n');
    }
    out
}
