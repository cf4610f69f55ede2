//! Seeded synthetic corruptions. Gaussian noise is either i.i.d. or set per
//! band by SNR; structured artifacts can be layered on a subset of bands.
//!
//! Every random choice is recorded in [`NoiseMetadata`], including the seed of
//! each band's Gaussian field, so [`apply_metadata`] rebuilds the noisy cube
//! bit for bit. Stripes and deadlines run along image columns.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::Cube;
use crate::metrics::PSNR_CAP_DB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCase {
    /// N(0, σ²) on every entry.
    Iid,
    /// Zero-mean Gaussian at a per-band SNR.
    NonIid,
    /// Non-i.i.d. Gaussian plus constant-offset stripes on a band subset.
    Stripe,
    /// Non-i.i.d. Gaussian plus zeroed columns on a band subset.
    Deadline,
    /// Non-i.i.d. Gaussian plus random-value impulses on a band subset.
    Impulse,
    /// Every band gets a random non-empty set of the kinds above.
    Mixture,
}

impl NoiseCase {
    pub const ALL: [NoiseCase; 6] = [
        NoiseCase::Iid,
        NoiseCase::NonIid,
        NoiseCase::Stripe,
        NoiseCase::Deadline,
        NoiseCase::Impulse,
        NoiseCase::Mixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseCase::Iid => "iid",
            NoiseCase::NonIid => "noniid",
            NoiseCase::Stripe => "stripe",
            NoiseCase::Deadline => "deadline",
            NoiseCase::Impulse => "impulse",
            NoiseCase::Mixture => "mixture",
        }
    }

    /// Component count used for this case: 1 for the purely Gaussian cases,
    /// 3 otherwise.
    pub fn default_components(self) -> usize {
        match self {
            NoiseCase::Iid | NoiseCase::NonIid => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for NoiseCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseCase::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown noise case {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Stripe,
    Deadline,
    Impulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub case: NoiseCase,
    pub sigma: f64,
    pub snr_range: (f64, f64),
    pub affected_band_fraction: f64,
    pub stripes_range: (usize, usize),
    pub deadlines_range: (usize, usize),
    pub impulse_fraction_range: (f64, f64),
    /// Stripe offsets are drawn from Uniform[−a, a].
    pub stripe_amplitude: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(case: NoiseCase, seed: u64) -> Self {
        Self {
            case,
            sigma: 0.05,
            snr_range: (5.0, 10.0),
            affected_band_fraction: 0.25,
            stripes_range: (20, 40),
            deadlines_range: (5, 15),
            impulse_fraction_range: (0.5, 0.7),
            stripe_amplitude: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} range [{lo}, {hi}] must be ordered and non-negative"
                )))
            }
        };
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        ordered("snr", self.snr_range.0, self.snr_range.1)?;
        ordered(
            "stripes",
            self.stripes_range.0 as f64,
            self.stripes_range.1 as f64,
        )?;
        ordered(
            "deadlines",
            self.deadlines_range.0 as f64,
            self.deadlines_range.1 as f64,
        )?;
        ordered(
            "impulse fraction",
            self.impulse_fraction_range.0,
            self.impulse_fraction_range.1,
        )?;
        if self.impulse_fraction_range.1 > 1.0 {
            return Err(Error::InvalidArgument(
                "impulse fraction must be at most 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.affected_band_fraction) {
            return Err(Error::InvalidArgument(
                "affected band fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.stripe_amplitude >= 0.0 && self.stripe_amplitude.is_finite()) {
            return Err(Error::InvalidArgument(
                "stripe amplitude must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDraw {
    pub std: f64,
    /// Target SNR in dB when the level came from an SNR draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    /// Seed of the band's standard-normal field.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub col: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseDraw {
    pub fraction: f64,
    /// Flat pixel indices `row * cols + col`, ascending.
    pub pixels: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCorruption {
    pub band: usize,
    pub kinds: Vec<NoiseKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<GaussianDraw>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stripes: Vec<Stripe>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deadlines: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impulse: Option<ImpulseDraw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMetadata {
    pub case: NoiseCase,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub bands: Vec<BandCorruption>,
}

impl NoiseMetadata {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Corrupts a clean cube according to `spec`; same spec and seed give a
/// bitwise-identical result.
pub fn corrupt(clean: &Cube, spec: &NoiseSpec) -> Result<(Cube, NoiseMetadata)> {
    spec.validate()?;
    let metadata = draw_metadata(clean, spec);
    let noisy = apply_metadata(clean, &metadata)?;
    Ok((noisy, metadata))
}

fn draw_metadata(clean: &Cube, spec: &NoiseSpec) -> NoiseMetadata {
    let bands = clean.bands();
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let affected = affected_bands(bands, spec.affected_band_fraction, &mut master);
    let band_seeds: Vec<u64> = (0..bands).map(|_| master.next_u64()).collect();

    let per_band = (0..bands)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(band_seeds[j]);
            let kinds = match spec.case {
                NoiseCase::Iid | NoiseCase::NonIid => vec![NoiseKind::Gaussian],
                NoiseCase::Stripe | NoiseCase::Deadline | NoiseCase::Impulse => {
                    let structured = match spec.case {
                        NoiseCase::Stripe => NoiseKind::Stripe,
                        NoiseCase::Deadline => NoiseKind::Deadline,
                        _ => NoiseKind::Impulse,
                    };
                    if affected[j] {
                        vec![NoiseKind::Gaussian, structured]
                    } else {
                        vec![NoiseKind::Gaussian]
                    }
                }
                NoiseCase::Mixture => mixture_kinds(&mut rng),
            };
            draw_band(clean, j, &kinds, spec, &mut rng)
        })
        .collect();

    NoiseMetadata {
        case: spec.case,
        seed: spec.seed,
        rows: clean.rows(),
        cols: clean.cols(),
        bands: per_band,
    }
}

fn affected_bands(bands: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut count = (fraction * bands as f64).round() as usize;
    if fraction > 0.0 {
        count = count.max(1);
    }
    let count = count.min(bands);
    let mut mask = vec![false; bands];
    for j in index::sample(rng, bands, count) {
        mask[j] = true;
    }
    mask
}

/// Each kind independently with probability ½, redrawn until non-empty.
fn mixture_kinds(rng: &mut ChaCha8Rng) -> Vec<NoiseKind> {
    let all = [
        NoiseKind::Gaussian,
        NoiseKind::Stripe,
        NoiseKind::Deadline,
        NoiseKind::Impulse,
    ];
    loop {
        let picked: Vec<NoiseKind> = all
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.5))
            .collect();
        if !picked.is_empty() {
            return picked;
        }
    }
}

fn draw_band(
    clean: &Cube,
    j: usize,
    kinds: &[NoiseKind],
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> BandCorruption {
    let (rows, cols) = (clean.rows(), clean.cols());
    let mut out = BandCorruption {
        band: j,
        kinds: kinds.to_vec(),
        gaussian: None,
        stripes: Vec::new(),
        deadlines: Vec::new(),
        impulse: None,
    };
    for kind in kinds {
        match kind {
            NoiseKind::Gaussian => {
                let seed = rng.next_u64();
                out.gaussian = Some(if spec.case == NoiseCase::Iid {
                    GaussianDraw {
                        std: spec.sigma,
                        snr_db: None,
                        seed,
                    }
                } else {
                    let snr = uniform(rng, spec.snr_range.0, spec.snr_range.1);
                    let var = band_variance(&clean.band_f64(j));
                    GaussianDraw {
                        std: (var / 10f64.powf(snr / 10.0)).sqrt(),
                        snr_db: Some(snr),
                        seed,
                    }
                });
            }
            NoiseKind::Stripe => {
                let count = rng
                    .random_range(spec.stripes_range.0..=spec.stripes_range.1)
                    .min(cols);
                let mut picked = index::sample(rng, cols, count).into_vec();
                picked.sort_unstable();
                out.stripes = picked
                    .into_iter()
                    .map(|col| Stripe {
                        col,
                        offset: uniform(rng, -spec.stripe_amplitude, spec.stripe_amplitude),
                    })
                    .collect();
            }
            NoiseKind::Deadline => {
                let count = rng
                    .random_range(spec.deadlines_range.0..=spec.deadlines_range.1)
                    .min(cols);
                let mut picked = index::sample(rng, cols, count).into_vec();
                picked.sort_unstable();
                out.deadlines = picked;
            }
            NoiseKind::Impulse => {
                let fraction = uniform(
                    rng,
                    spec.impulse_fraction_range.0,
                    spec.impulse_fraction_range.1,
                );
                let n = rows * cols;
                let count = ((fraction * n as f64).round() as usize).min(n);
                let mut pixels = index::sample(rng, n, count).into_vec();
                pixels.sort_unstable();
                let values = pixels.iter().map(|_| rng.random::<f32>()).collect();
                out.impulse = Some(ImpulseDraw {
                    fraction,
                    pixels,
                    values,
                });
            }
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Population variance.
pub fn band_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Applies recorded corruption to a clean cube: Gaussian field, then stripe
/// offsets, then deadlines, then impulses.
pub fn apply_metadata(clean: &Cube, metadata: &NoiseMetadata) -> Result<Cube> {
    let (rows, cols) = (clean.rows(), clean.cols());
    if metadata.rows != rows || metadata.cols != cols || metadata.bands.len() != clean.bands() {
        return Err(Error::Dimension(format!(
            "metadata describes {}x{}x{}, cube is {rows}x{cols}x{}",
            metadata.rows,
            metadata.cols,
            metadata.bands.len(),
            clean.bands()
        )));
    }
    let mut out = clean.clone();
    for bc in &metadata.bands {
        let mut band = clean.band_f64(bc.band);
        if let Some(g) = &bc.gaussian {
            let mut field = ChaCha8Rng::seed_from_u64(g.seed);
            for v in band.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut field);
                *v += g.std * z;
            }
        }
        for s in &bc.stripes {
            check_col(s.col, cols)?;
            for r in 0..rows {
                band[r * cols + s.col] += s.offset;
            }
        }
        for &col in &bc.deadlines {
            check_col(col, cols)?;
            for r in 0..rows {
                band[r * cols + col] = 0.0;
            }
        }
        let target = out.band_mut(bc.band);
        for (t, v) in target.iter_mut().zip(&band) {
            *t = *v as f32;
        }
        if let Some(imp) = &bc.impulse {
            for (&p, &v) in imp.pixels.iter().zip(&imp.values) {
                if p >= rows * cols {
                    return Err(Error::Dimension(format!("impulse pixel {p} outside band")));
                }
                target[p] = v;
            }
        }
    }
    Ok(out)
}

fn check_col(col: usize, cols: usize) -> Result<()> {
    if col < cols {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "column {col} outside {cols}-column band"
        )))
    }
}

/// 10·log10(var(clean band) / mean squared noise), capped at 300 dB.
pub fn realized_snr(clean: &Cube, noisy: &Cube, band: usize) -> Result<f64> {
    if clean.shape() != noisy.shape() {
        return Err(Error::Dimension(
            "clean and noisy cubes differ in shape".into(),
        ));
    }
    if band >= clean.bands() {
        return Err(Error::InvalidArgument(format!("band {band} out of range")));
    }
    let c = clean.band_f64(band);
    let var = band_variance(&c);
    if var == 0.0 {
        return Err(Error::UndefinedSnr { band });
    }
    let noise: f64 = c
        .iter()
        .zip(noisy.band(band))
        .map(|(a, &b)| (f64::from(b) - a).powi(2))
        .sum::<f64>()
        / c.len() as f64;
    if noise == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (var / noise).log10()).min(PSNR_CAP_DB))
}

/// Seeded clean test cube of exact rank `rank`: nonnegative uniform factors,
/// product scaled so the largest entry is 1.
pub fn planted_cube(
    rows: usize,
    cols: usize,
    bands: usize,
    rank: usize,
    seed: u64,
) -> Result<Cube> {
    if rank == 0 || rank > (rows * cols).min(bands) {
        return Err(Error::InvalidArgument(format!(
            "planted rank {rank} must lie in 1..={}",
            (rows * cols).min(bands)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;
    let u: Vec<f64> = (0..n * rank).map(|_| rng.random::<f64>()).collect();
    let v: Vec<f64> = (0..bands * rank).map(|_| rng.random::<f64>()).collect();
    let mut data = vec![0.0f64; n * bands];
    for j in 0..bands {
        for i in 0..n {
            data[j * n + i] = (0..rank).map(|l| u[i * rank + l] * v[j * rank + l]).sum();
        }
    }
    let max = data.iter().copied().fold(0.0, f64::max);
    Cube::new(
        rows,
        cols,
        bands,
        data.iter().map(|x| (x / max) as f32).collect(),
    )
}
