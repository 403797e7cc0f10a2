//! Deterministic synthetic photo-like test images.
//!
//! The lab ships no image assets; calibration and evaluation corpora are
//! generated on demand. Each image mixes smooth low-frequency gradients, a few
//! hard-edged shapes and a broadband texture floor so that every transform
//! channel carries energy. Samples stay inside [8, 247].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::imageio::{Corpus, CorpusEntry, ImageBuffer, Split};
use std::path::Path;

/// Hash-based value noise, uniform in [0, 1).
fn noise(seed: u64, x: u64, y: u64, plane: u64) -> f64 {
    let mut z = seed
        .wrapping_add(x.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(y.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(plane.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Generates one synthetic image. Identical `(seed, width, height)` always
/// produce identical pixels.
pub fn generate_image(seed: u64, width: usize, height: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = width as f64;
    let h = height as f64;

    // Low-frequency plane-correlated gradients.
    let n_waves = 3;
    let mut waves = Vec::new();
    for _ in 0..n_waves {
        let fx = rng.gen_range(0.5..2.0) / w;
        let fy = rng.gen_range(0.5..2.0) / h;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(15.0..40.0);
        let tint = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        waves.push((fx, fy, phase, amp, tint));
    }

    // A few hard-edged discs for sharp transitions.
    let n_discs = 2 + (rng.gen::<u32>() % 3) as usize;
    let mut discs = Vec::new();
    for _ in 0..n_discs {
        let cx = rng.gen_range(0.1..0.9) * w;
        let cy = rng.gen_range(0.1..0.9) * h;
        let r = rng.gen_range(0.05..0.25) * w.min(h);
        let delta = [
            rng.gen_range(-35.0..35.0),
            rng.gen_range(-35.0..35.0),
            rng.gen_range(-35.0..35.0),
        ];
        discs.push((cx, cy, r, delta));
    }

    let base: f64 = rng.gen_range(105.0..150.0);
    let texture_amp = 6.0;

    let mut img = ImageBuffer::new(width, height);
    for p in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = base;
                for (fx, fy, phase, amp, tint) in &waves {
                    v += amp
                        * tint[p]
                        * (std::f64::consts::TAU * (fx * xf + fy * yf) + phase).sin();
                }
                for (cx, cy, r, delta) in &discs {
                    if (xf - cx).powi(2) + (yf - cy).powi(2) <= r * r {
                        v += delta[p];
                    }
                }
                v += texture_amp * (noise(seed, x as u64, y as u64, p as u64) - 0.5) * 2.0;
                img.planes[p][y * width + x] = v.clamp(8.0, 247.0).round() as u8;
            }
        }
    }
    img
}

/// Writes `n_calibration + n_evaluation` images plus a `corpus.json` manifest
/// into `dir` and returns the corpus. Calibration and evaluation draw from
/// disjoint seed streams.
pub fn generate_corpus(
    dir: &Path,
    base_seed: u64,
    n_calibration: usize,
    n_evaluation: usize,
    width: usize,
    height: usize,
) -> Result<Corpus, crate::imageio::CorpusError> {
    generate_corpus_with_eval_size(
        dir,
        base_seed,
        n_calibration,
        n_evaluation,
        (width, height),
        (width, height),
    )
}

/// Like [`generate_corpus`] but with separately sized evaluation images.
pub fn generate_corpus_with_eval_size(
    dir: &Path,
    base_seed: u64,
    n_calibration: usize,
    n_evaluation: usize,
    cal_size: (usize, usize),
    eval_size: (usize, usize),
) -> Result<Corpus, crate::imageio::CorpusError> {
    let mut entries = Vec::new();
    for (split, count, tag, seed_salt) in [
        (Split::Calibration, n_calibration, "cal", 0x1000u64),
        (Split::Evaluation, n_evaluation, "eval", 0x2000u64),
    ] {
        for i in 0..count {
            let (width, height) = if split == Split::Calibration {
                cal_size
            } else {
                eval_size
            };
            let name = format!("{tag}{i:02}");
            let path = dir.join(format!("{name}.ppm"));
            let img = generate_image(base_seed ^ (seed_salt + i as u64), width, height);
            crate::imageio::save_ppm(&img, &path).map_err(|e| {
                crate::imageio::CorpusError::Io {
                    path: path.clone(),
                    source: std::io::Error::other(e.to_string()),
                }
            })?;
            entries.push(CorpusEntry { name, path, split });
        }
    }
    let corpus = Corpus::new(entries)?;
    corpus.save_manifest(&dir.join("corpus.json"))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_image(7, 48, 32);
        let b = generate_image(7, 48, 32);
        assert_eq!(a, b);
        let c = generate_image(8, 48, 32);
        assert_ne!(a, c);
    }

    #[test]
    fn samples_stay_in_safe_range() {
        let img = generate_image(3, 64, 64);
        for p in 0..3 {
            for &v in &img.planes[p] {
                assert!((8..=247).contains(&v));
            }
        }
    }
}
