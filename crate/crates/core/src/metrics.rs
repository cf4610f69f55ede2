//! PSNR / SSIM per band, their means, and the truncated-SVD baseline.
//!
//! SSIM uses the Wang et al. constants: an 11×11 Gaussian window with
//! σ = 1.5 (normalized to unit sum), K1 = 0.01, K2 = 0.03, dynamic range
//! L = 1, averaged over every position where the window fits entirely inside
//! the image. Images smaller than the window fall back to global statistics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{self, Cube, ObservationMatrix};
use crate::lowrank::truncated_svd;

pub const PSNR_CAP_DB: f64 = 300.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB; identical inputs give [`PSNR_CAP_DB`].
pub fn psnr(reference: &[f64], test: &[f64], peak: f64) -> Result<f64> {
    if reference.len() != test.len() || reference.is_empty() {
        return Err(Error::Dimension(format!(
            "psnr needs equal non-empty images, got {} and {}",
            reference.len(),
            test.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - half;
        *t = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// True when the image is too small for the window and SSIM uses global
/// statistics instead.
pub fn ssim_uses_global_stats(rows: usize, cols: usize) -> bool {
    rows < SSIM_WINDOW || cols < SSIM_WINDOW
}

/// Mean structural similarity of two `rows × cols` row-major images.
pub fn ssim(reference: &[f64], test: &[f64], rows: usize, cols: usize) -> Result<f64> {
    if reference.len() != rows * cols || test.len() != rows * cols || rows * cols == 0 {
        return Err(Error::Dimension(format!(
            "ssim images must both be {rows}x{cols}, got {} and {} values",
            reference.len(),
            test.len()
        )));
    }
    if ssim_uses_global_stats(rows, cols) {
        return Ok(global_ssim(reference, test));
    }
    let taps = gaussian_taps();
    let products: Vec<f64> = reference.iter().zip(test).map(|(a, b)| a * b).collect();
    let sq_ref: Vec<f64> = reference.iter().map(|a| a * a).collect();
    let sq_test: Vec<f64> = test.iter().map(|b| b * b).collect();

    let mu_x = filter_valid(reference, rows, cols, &taps);
    let mu_y = filter_valid(test, rows, cols, &taps);
    let e_xx = filter_valid(&sq_ref, rows, cols, &taps);
    let e_yy = filter_valid(&sq_test, rows, cols, &taps);
    let e_xy = filter_valid(&products, rows, cols, &taps);

    let count = mu_x.len();
    let mut total = 0.0;
    for p in 0..count {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let vx = e_xx[p] - mx * mx;
        let vy = e_yy[p] - my * my;
        let cov = e_xy[p] - mx * my;
        total += ssim_formula(mx, my, vx, vy, cov);
    }
    Ok(total / count as f64)
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

fn global_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    ssim_formula(mx, my, vx, vy, cov)
}

/// Separable correlation keeping only positions where the window fits.
fn filter_valid(img: &[f64], rows: usize, cols: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_cols = cols - SSIM_WINDOW + 1;
    let out_rows = rows - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let line = &img[r * cols..(r + 1) * cols];
        for c in 0..out_cols {
            horiz[r * out_cols + c] = taps
                .iter()
                .zip(&line[c..c + SSIM_WINDOW])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for r in 0..out_rows {
        for c in 0..out_cols {
            out[r * out_cols + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * horiz[(r + k) * out_cols + c])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_per_band: Vec<f64>,
    pub ssim_per_band: Vec<f64>,
    pub mpsnr: f64,
    pub mssim: f64,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub mpsnr: f64,
    pub mssim: f64,
    pub seconds: f64,
}

impl QualityReport {
    /// `band,psnr,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,psnr,ssim\n");
        for (j, (p, s)) in self
            .psnr_per_band
            .iter()
            .zip(&self.ssim_per_band)
            .enumerate()
        {
            out.push_str(&format!("{j},{p},{s}\n"));
        }
        out
    }

    pub fn summary(&self) -> QualitySummary {
        QualitySummary {
            mpsnr: self.mpsnr,
            mssim: self.mssim,
            seconds: self.elapsed_seconds,
        }
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// Per-band PSNR (peak 1) and SSIM with their means. `elapsed_seconds` is
/// left at zero for the caller to fill with the method's run time.
pub fn evaluate(reference: &Cube, test: &Cube) -> Result<QualityReport> {
    if reference.shape() != test.shape() {
        return Err(Error::Dimension(format!(
            "reference is {:?}, test is {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    let (rows, cols, bands) = reference.shape();
    let mut psnr_per_band = Vec::with_capacity(bands);
    let mut ssim_per_band = Vec::with_capacity(bands);
    for j in 0..bands {
        let a = reference.band_f64(j);
        let b = test.band_f64(j);
        psnr_per_band.push(psnr(&a, &b, 1.0)?);
        ssim_per_band.push(ssim(&a, &b, rows, cols)?);
    }
    let mut warnings = Vec::new();
    if ssim_uses_global_stats(rows, cols) {
        warnings.push(format!(
            "{rows}x{cols} bands are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window; SSIM uses global statistics"
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(QualityReport {
        mpsnr: mean(&psnr_per_band),
        mssim: mean(&ssim_per_band),
        psnr_per_band,
        ssim_per_band,
        elapsed_seconds: 0.0,
        warnings,
    })
}

/// Best rank-`rank` approximation in Frobenius norm.
pub fn svd_baseline(y: &ObservationMatrix, rank: usize) -> Result<ObservationMatrix> {
    let (u, s, v) = truncated_svd(y.values(), rank)?;
    let approx: DMatrix<f64> = u * DMatrix::from_diagonal(&s) * v.transpose();
    ObservationMatrix::new(approx)
}

/// Rank-`rank` SVD restoration of a cube, clipped to [0, 1] like the
/// variational output so the two are scored on equal terms. The rank is
/// capped at min(pixels, bands).
pub fn svd_baseline_cube(cube: &Cube, rank: usize) -> Result<Cube> {
    let y = hsi::cube_to_matrix(cube);
    let rank = rank.min(y.n_pixels()).min(y.n_bands());
    let mut approx = svd_baseline(&y, rank)?.into_values();
    approx.apply(|v| *v = v.clamp(0.0, 1.0));
    hsi::dmatrix_to_cube(&approx, cube.rows(), cube.cols())
}
