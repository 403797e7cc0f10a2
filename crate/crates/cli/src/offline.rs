//! Offline single-image encode/decode paths, mainly for debugging the codecs
//! outside the simulator.
//!
//! Container layouts (little-endian):
//!   masking: "PTXM", width u32, height u32, block u16, packet_count u16,
//!            then per packet a u32 byte length and the packet bytes.
//!   rvq:     "PTXR", width u32, height u32, patch u16, packet_count u16,
//!            then per packet a u32 byte length and the token packet bytes.

use std::path::Path;

use anyhow::{anyhow, Context, Result};

use progtx_core::imageio::{load_ppm, save_ppm};
use progtx_core::masking::{
    analyze, encode_packets, quantize, LatentGeometry, MaskedPacket, ReceiverState,
};
use progtx_core::rvq::{TokenMap, TokenPacket};

use crate::Env;

const MASKING_MAGIC: &[u8; 4] = b"PTXM";
const RVQ_MAGIC: &[u8; 4] = b"PTXR";

pub fn cmd_encode(
    env: &Env,
    codec: &str,
    image_path: &Path,
    out: &Path,
    keep: Option<usize>,
    stages: Option<usize>,
) -> Result<()> {
    let image = load_ppm(image_path)?;
    let artifacts = env.load_artifacts()?;
    let bytes = match codec {
        "masking" => {
            let keep = keep.ok_or_else(|| anyhow!("--keep is required for the masking codec"))?;
            let latent = analyze(&image, env.config.block)?;
            let channels = latent.geometry.channels();
            if keep > channels {
                return Err(anyhow!("--keep {keep} exceeds {channels} channels"));
            }
            let quantized = quantize(&latent, &artifacts.scales);
            let packets = if keep == 0 {
                Vec::new()
            } else {
                // One packet carrying the top-keep channels.
                encode_packets(&quantized, &artifacts.ranking, keep, &artifacts.scales, 0)?
                    .into_iter()
                    .take(1)
                    .collect()
            };
            let mut out_bytes = Vec::new();
            out_bytes.extend_from_slice(MASKING_MAGIC);
            out_bytes.extend_from_slice(&(image.width as u32).to_le_bytes());
            out_bytes.extend_from_slice(&(image.height as u32).to_le_bytes());
            out_bytes.extend_from_slice(&(env.config.block as u16).to_le_bytes());
            out_bytes.extend_from_slice(&(packets.len() as u16).to_le_bytes());
            for p in &packets {
                let wire = p.to_bytes();
                out_bytes.extend_from_slice(&(wire.len() as u32).to_le_bytes());
                out_bytes.extend_from_slice(&wire);
            }
            out_bytes
        }
        "rvq" => {
            let m = stages.ok_or_else(|| anyhow!("--stages is required for the rvq codec"))?;
            let m_max = artifacts.rvq.stack.m_max();
            if m == 0 || m > m_max {
                return Err(anyhow!("--stages must be in 1..={m_max}"));
            }
            let tokens = artifacts.rvq.encode_image(&image);
            let mut out_bytes = Vec::new();
            out_bytes.extend_from_slice(RVQ_MAGIC);
            out_bytes.extend_from_slice(&(image.width as u32).to_le_bytes());
            out_bytes.extend_from_slice(&(image.height as u32).to_le_bytes());
            out_bytes.extend_from_slice(&(env.config.patch as u16).to_le_bytes());
            out_bytes.extend_from_slice(&(m as u16).to_le_bytes());
            for stage in 0..m {
                let packet = TokenPacket {
                    image_id: 0,
                    stage: stage as u8,
                    bpi: tokens.bpi,
                    indices: tokens.stages[stage].clone(),
                };
                let wire = packet.to_bytes();
                out_bytes.extend_from_slice(&(wire.len() as u32).to_le_bytes());
                out_bytes.extend_from_slice(&wire);
            }
            out_bytes
        }
        other => return Err(anyhow!("unknown codec {other:?} (expected masking or rvq)")),
    };
    std::fs::write(out, bytes).with_context(|| format!("cannot write {}", out.display()))?;
    println!("encoded {} -> {}", image_path.display(), out.display());
    Ok(())
}

pub fn cmd_decode(env: &Env, input: &Path, out: &Path) -> Result<()> {
    let data =
        std::fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    if data.len() < 16 {
        return Err(anyhow!("{} is too short to be a progtx container", input.display()));
    }
    let magic: [u8; 4] = data[0..4].try_into().unwrap();
    let width = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let unit = u16::from_le_bytes(data[12..14].try_into().unwrap()) as usize;
    let count = u16::from_le_bytes(data[14..16].try_into().unwrap()) as usize;
    let artifacts = env.load_artifacts()?;

    let mut pos = 16usize;
    let mut chunks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(
            data.get(pos..pos + 4)
                .ok_or_else(|| anyhow!("truncated container"))?
                .try_into()
                .unwrap(),
        ) as usize;
        pos += 4;
        chunks.push(
            data.get(pos..pos + len)
                .ok_or_else(|| anyhow!("truncated container"))?,
        );
        pos += len;
    }

    let image = match &magic {
        MASKING_MAGIC => {
            let geometry = LatentGeometry {
                width,
                height,
                block: unit,
            };
            let mut rx = ReceiverState::new(0, geometry);
            for chunk in chunks {
                let packet = MaskedPacket::from_bytes(chunk)?;
                rx.receiver_update(&packet, &artifacts.scales)?;
            }
            rx.decode_current(&artifacts.scales)
        }
        RVQ_MAGIC => {
            let packets: Vec<TokenPacket> = chunks
                .iter()
                .map(|c| TokenPacket::from_bytes(c))
                .collect::<Result<_, _>>()?;
            if packets.is_empty() {
                return Err(anyhow!("rvq container has no stages"));
            }
            let grid_w = width.div_ceil(unit);
            let grid_h = height.div_ceil(unit);
            let tokens = TokenMap {
                grid_w,
                grid_h,
                bpi: packets[0].bpi,
                stages: packets.iter().map(|p| p.indices.clone()).collect(),
            };
            artifacts
                .rvq
                .decode_prefix(&tokens, packets.len(), width, height)?
        }
        _ => return Err(anyhow!("{} has an unknown container magic", input.display())),
    };
    save_ppm(&image, out)?;
    println!("decoded {} -> {}", input.display(), out.display());
    Ok(())
}
