//! Image quality (MSE/PSNR/SSIM) and transmission statistics.

use serde::{Deserialize, Serialize};

use crate::imageio::ImageBuffer;

pub const PEAK: f64 = 255.0;
/// SSIM stabilizers: C1 = (0.01 * 255)^2, C2 = (0.03 * 255)^2.
const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} smaller than the {2}x{2} SSIM window")]
    TooSmallForWindow(usize, usize, usize),
    #[error("no samples")]
    NoSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mse: f64,
    /// +infinity when the images are identical.
    pub psnr_db: f64,
    pub ssim: f64,
}

/// MSE over all three planes: (1 / (3*W*H)) * sum of squared differences.
pub fn mse(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64, MetricsError> {
    check_dims(reference, test)?;
    let mut acc = 0u64;
    for p in 0..3 {
        for (&a, &b) in reference.planes[p].iter().zip(test.planes[p].iter()) {
            let d = a as i64 - b as i64;
            acc += (d * d) as u64;
        }
    }
    Ok(acc as f64 / (3.0 * reference.pixel_count() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// PSNR between two 8-bit images; MSE = 0 reports the +infinity sentinel.
pub fn psnr(reference: &ImageBuffer, test: &ImageBuffer) -> Result<(f64, f64), MetricsError> {
    let m = mse(reference, test)?;
    Ok((m, psnr_from_mse(m)))
}

/// MSE between an 8-bit reference and a floating-point reconstruction
/// (planes of `W*H` samples each). Used for decode-event trajectories where
/// 8-bit rounding noise would mask small refinements.
pub fn mse_f64(reference: &ImageBuffer, recon: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if recon.len() != 3 || recon[0].len() != reference.pixel_count() {
        return Err(MetricsError::DimensionMismatch(
            reference.width,
            reference.height,
            recon.first().map_or(0, |p| p.len()),
            1,
        ));
    }
    let mut acc = 0.0;
    for p in 0..3 {
        for (&a, &b) in reference.planes[p].iter().zip(recon[p].iter()) {
            let d = a as f64 - b;
            acc += d * d;
        }
    }
    Ok(acc / (3.0 * reference.pixel_count() as f64))
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// ITU-R BT.601 luma.
fn luma_plane(img: &ImageBuffer) -> Vec<f64> {
    (0..img.pixel_count())
        .map(|i| {
            0.299 * img.planes[0][i] as f64
                + 0.587 * img.planes[1][i] as f64
                + 0.114 * img.planes[2][i] as f64
        })
        .collect()
}

fn luma_from_f64(planes: &[Vec<f64>], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.299 * planes[0][i] + 0.587 * planes[1][i] + 0.114 * planes[2][i])
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Horizontal-then-vertical valid convolution with the 11-tap Gaussian.
fn separable_blur(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let out_w = w - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; out_w * h];
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + x + k];
            }
            tmp[y * out_w + x] = acc;
        }
    }
    let out_h = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    (out, out_w, out_h)
}

fn ssim_luma(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<f64, MetricsError> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmallForWindow(w, h, SSIM_WINDOW));
    }
    let kernel = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();

    let (mu_x, ow, oh) = separable_blur(x, w, h, &kernel);
    let (mu_y, _, _) = separable_blur(y, w, h, &kernel);
    let (e_xx, _, _) = separable_blur(&xx, w, h, &kernel);
    let (e_yy, _, _) = separable_blur(&yy, w, h, &kernel);
    let (e_xy, _, _) = separable_blur(&xy, w, h, &kernel);

    let mut acc = 0.0;
    for i in 0..ow * oh {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
        acc += num / den;
    }
    Ok(acc / (ow * oh) as f64)
}

/// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5) on the
/// BT.601 luma plane.
pub fn ssim(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64, MetricsError> {
    check_dims(reference, test)?;
    ssim_luma(
        &luma_plane(reference),
        &luma_plane(test),
        reference.width,
        reference.height,
    )
}

/// SSIM against a floating-point reconstruction (samples expected in [0, 255]).
pub fn ssim_f64(reference: &ImageBuffer, recon: &[Vec<f64>]) -> Result<f64, MetricsError> {
    ssim_luma(
        &luma_plane(reference),
        &luma_from_f64(recon, reference.pixel_count()),
        reference.width,
        reference.height,
    )
}

pub fn quality_report(reference: &ImageBuffer, test: &ImageBuffer) -> Result<QualityReport, MetricsError> {
    let (mse, psnr_db) = psnr(reference, test)?;
    Ok(QualityReport {
        mse,
        psnr_db,
        ssim: ssim(reference, test)?,
    })
}

/// One image delivery outcome: pixels plus whether/when it first decoded.
#[derive(Debug, Clone, Copy)]
pub struct DeliveryOutcome {
    pub pixels: u64,
    pub first_decoded: bool,
}

/// Megapixels per second: each delivered image's pixels counted exactly once
/// at its first decode event; refinements and incomplete images add nothing.
pub fn throughput_mpps(outcomes: &[DeliveryOutcome], horizon_s: f64) -> f64 {
    assert!(horizon_s > 0.0, "horizon must be positive");
    let pixels: u64 = outcomes
        .iter()
        .filter(|o| o.first_decoded)
        .map(|o| o.pixels)
        .sum();
    pixels as f64 / 1e6 / horizon_s
}

/// Waiting-time sample: completed after some delay, or never completed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WaitSample {
    CompletedMs(f64),
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaitStats {
    /// Mean over completed samples; NaN sentinel when none completed.
    pub t_avg_ms: f64,
    /// Nearest-rank 99.9th percentile over completed samples; NaN when none.
    pub t_p999_ms: f64,
    pub incomplete_fraction: f64,
}

/// Nearest-rank percentile: 0-based index ceil(p*n) into the sorted samples,
/// clamped to the last element.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p * sorted.len() as f64).ceil() as usize).min(sorted.len() - 1);
    sorted[idx]
}

pub fn wait_stats(samples: &[WaitSample]) -> Result<WaitStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let mut completed: Vec<f64> = samples
        .iter()
        .filter_map(|s| match s {
            WaitSample::CompletedMs(ms) => Some(*ms),
            WaitSample::Incomplete => None,
        })
        .collect();
    let incomplete_fraction = 1.0 - completed.len() as f64 / samples.len() as f64;
    if completed.is_empty() {
        return Ok(WaitStats {
            t_avg_ms: f64::NAN,
            t_p999_ms: f64::NAN,
            incomplete_fraction: 1.0,
        });
    }
    completed.sort_by(|a, b| a.partial_cmp(b).expect("finite waiting times"));
    let t_avg_ms = completed.iter().sum::<f64>() / completed.len() as f64;
    Ok(WaitStats {
        t_avg_ms,
        t_p999_ms: nearest_rank(&completed, 0.999),
        incomplete_fraction,
    })
}
