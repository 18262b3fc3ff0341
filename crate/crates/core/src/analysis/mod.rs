//! Quantitative analysis: radially averaged power spectra, PSNR,
//! marching-cubes shape extraction, and the grid-artifact ablation.

pub mod ablation;
pub mod mesh;

pub use ablation::{artifact_ablation, AblationConfig, AblationReport};
pub use mesh::{extract_mesh, extract_mesh_from_field, mesh_is_watertight, write_obj, Mesh};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuf;

/// Radially averaged power spectrum of a square image.
///
/// `power[b]` collects `|X(u,v)|^2 / N_pixels` for non-DC frequencies whose
/// radial frequency falls in bin `b`; bin centers span `(0, 0.5]` cycles per
/// pixel and energy beyond 0.5 (the diagonal corners) folds into the last
/// bin. With this normalization the bins sum to `variance * N_pixels`
/// (Parseval). `high_band_ratio` is the non-DC energy above `cutoff` divided
/// by all non-DC energy, 0 for constant images.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub bin_centers: Vec<f64>,
    pub power: Vec<f64>,
    pub cutoff: f64,
    pub high_band_ratio: f64,
    pub total_non_dc: f64,
}

pub const DEFAULT_HIGH_BAND_CUTOFF: f64 = 0.25;

pub fn power_spectrum(image: &ImageBuf) -> Result<SpectrumReport> {
    power_spectrum_with_cutoff(image, DEFAULT_HIGH_BAND_CUTOFF)
}

pub fn power_spectrum_with_cutoff(image: &ImageBuf, cutoff: f64) -> Result<SpectrumReport> {
    if image.height != image.width {
        return Err(Error::invalid(format!(
            "power spectrum needs a square image, got {}x{}",
            image.height, image.width
        )));
    }
    if !(0.0..0.71).contains(&cutoff) {
        return Err(Error::invalid(format!("cutoff must be in [0, 0.71), got {cutoff}")));
    }
    let luma = image.to_luma()?;
    let n = luma.height;
    let n_px = (n * n) as f64;

    // 2D DFT: rows, then columns.
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex64> =
        luma.data.iter().map(|v| Complex64::new(*v as f64, 0.0)).collect();
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }

    let nbins = (n / 2).max(1);
    let mut power = vec![0.0f64; nbins];
    let freq = |k: usize| -> f64 {
        let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        signed / n as f64
    };
    let mut total = 0.0f64;
    let mut high = 0.0f64;
    for u in 0..n {
        for v in 0..n {
            if u == 0 && v == 0 {
                continue;
            }
            let p = buf[u * n + v].norm_sqr() / n_px;
            let r = (freq(u).powi(2) + freq(v).powi(2)).sqrt();
            let bin = (((r / 0.5) * nbins as f64) as usize).min(nbins - 1);
            power[bin] += p;
            total += p;
            if r > cutoff {
                high += p;
            }
        }
    }
    let bin_centers = (0..nbins).map(|b| (b as f64 + 0.5) * 0.5 / nbins as f64).collect();
    let high_band_ratio = if total > 0.0 { high / total } else { 0.0 };
    Ok(SpectrumReport { bin_centers, power, cutoff, high_band_ratio, total_non_dc: total })
}

/// Peak signal-to-noise ratio with peak 1.0, capped at 100 dB (the sentinel
/// for exact equality).
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}
