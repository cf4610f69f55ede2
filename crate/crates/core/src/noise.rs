//! Closed-form updates for the per-band mixture-of-Gaussians noise posteriors:
//! q(Z), q(π), q(μ, τ) and the shared rate q(d).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    BandMixturePosterior, GlobalScalePosterior, Hyperparams, NoiseLocation, Residuals,
    Responsibilities,
};
use crate::special::digamma;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const UNDERFLOW_SUM: f64 = 1e-300;
pub const D_FLOOR: f64 = 1e-12;

/// Per-cell expectations that enter the responsibility update.
struct CellExpectations {
    ln_pi: Vec<f64>,
    ln_tau: Vec<f64>,
    tau: Vec<f64>,
    inv_beta: Vec<f64>,
}

impl CellExpectations {
    fn new(mix: &BandMixturePosterior) -> Self {
        let n = mix.alpha.len();
        Self {
            ln_pi: mix.expected_ln_pi(),
            ln_tau: (0..n).map(|c| mix.expected_ln_tau(c)).collect(),
            tau: (0..n).map(|c| mix.expected_tau(c)).collect(),
            inv_beta: mix.beta.iter().map(|b| 1.0 / b).collect(),
        }
    }
}

/// q(Z): ln ρ_ijk = ⟨ln π_jk⟩ − ½ln 2π + ½⟨ln τ_jk⟩ − ½⟨τ_jk (Y_ij − μ_jk − u_i v_jᵀ)²⟩,
/// normalized over k with log-sum-exp.
pub fn update_responsibilities(
    residuals: &Residuals,
    mix: &BandMixturePosterior,
) -> Result<Responsibilities> {
    let (pixels, bands) = residuals.mean.shape();
    if bands != mix.bands {
        return Err(Error::Dimension(format!(
            "residuals have {bands} bands, mixture posterior has {}",
            mix.bands
        )));
    }
    let k = mix.components;
    let ex = CellExpectations::new(mix);
    let mut values = vec![0.0; pixels * bands * k];

    values
        .par_chunks_mut(bands * k)
        .enumerate()
        .try_for_each(|(i, pixel)| -> Result<()> {
            for j in 0..bands {
                let e = residuals.mean[(i, j)];
                let var = residuals.var[(i, j)];
                let cell = &mut pixel[j * k..(j + 1) * k];
                for (c, out) in cell.iter_mut().enumerate() {
                    let at = j * k + c;
                    let quad = ex.tau[at] * ((e - mix.m[at]).powi(2) + var) + ex.inv_beta[at];
                    *out = ex.ln_pi[at] - LN_SQRT_2PI + 0.5 * ex.ln_tau[at] - 0.5 * quad;
                }
                normalize_log_weights(cell).map_err(|reason| Error::Divergence {
                    iteration: 0,
                    reason: format!("responsibility cell ({i}, {j}): {reason}"),
                })?;
            }
            Ok(())
        })?;

    Responsibilities::new(pixels, bands, k, values)
}

/// Replaces log-weights with normalized probabilities in place.
pub(crate) fn normalize_log_weights(cell: &mut [f64]) -> std::result::Result<(), String> {
    let max = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if cell.iter().any(|v| v.is_nan()) || max == f64::INFINITY {
        return Err(format!("non-finite log-weight {max}"));
    }
    let uniform = 1.0 / cell.len() as f64;
    if max == f64::NEG_INFINITY {
        cell.fill(uniform);
        return Ok(());
    }
    let mut total = 0.0;
    for v in cell.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    if total < UNDERFLOW_SUM {
        cell.fill(uniform);
    } else {
        for v in cell.iter_mut() {
            *v /= total;
        }
    }
    Ok(())
}

/// q(π_j): α_jk = α₀ + Σ_i r_ijk.
pub fn update_mixing(resp: &Responsibilities, hyper: &Hyperparams) -> Vec<f64> {
    resp.band_totals()
        .into_iter()
        .map(|t| hyper.alpha0 + t)
        .collect()
}

/// q(μ_jk, τ_jk) as the Normal-Gamma posterior of the residuals weighted by
/// the responsibilities. With [`NoiseLocation::Free`] this is the conjugate
/// update; with [`NoiseLocation::Pinned`] the location stays at m₀ and the
/// rate is the optimum under that constraint, d = ⟨d⟩ + ½Σ r((e − m₀)² + var).
/// Returns the number of cells whose rate had to be floored at [`D_FLOOR`].
pub fn update_normal_gamma(
    mix: &mut BandMixturePosterior,
    residuals: &Residuals,
    resp: &Responsibilities,
    scale: &GlobalScalePosterior,
    hyper: &Hyperparams,
    location: NoiseLocation,
) -> usize {
    let (pixels, bands) = residuals.mean.shape();
    let k = resp.components();
    let cells = bands * k;
    let mut weight = vec![0.0; cells];
    let mut s1 = vec![0.0; cells];
    for i in 0..pixels {
        let pixel = &resp.values()[i * cells..(i + 1) * cells];
        for j in 0..bands {
            let e = residuals.mean[(i, j)];
            for c in 0..k {
                let at = j * k + c;
                weight[at] += pixel[at];
                s1[at] += pixel[at] * e;
            }
        }
    }
    for at in 0..cells {
        mix.beta[at] = hyper.beta0 + weight[at];
        mix.c[at] = hyper.c0 + 0.5 * weight[at];
        mix.m[at] = match location {
            NoiseLocation::Free => (hyper.beta0 * hyper.m0 + s1[at]) / mix.beta[at],
            NoiseLocation::Pinned => hyper.m0,
        };
    }

    // s2 + β₀m₀² − βm² rewritten as a sum of squares around the new mean.
    let mut spread = vec![0.0; cells];
    for i in 0..pixels {
        let pixel = &resp.values()[i * cells..(i + 1) * cells];
        for j in 0..bands {
            let e = residuals.mean[(i, j)];
            let var = residuals.var[(i, j)];
            for c in 0..k {
                let at = j * k + c;
                spread[at] += pixel[at] * ((e - mix.m[at]).powi(2) + var);
            }
        }
    }
    let d_mean = scale.mean();
    let mut clamped = 0;
    for at in 0..cells {
        let prior_term = hyper.beta0 * (mix.m[at] - hyper.m0).powi(2);
        let d = d_mean + 0.5 * (spread[at] + prior_term);
        if d > D_FLOOR && d.is_finite() {
            mix.d[at] = d;
        } else {
            mix.d[at] = D_FLOOR;
            clamped += 1;
        }
    }
    clamped
}

/// q(d): η = η₀ + c₀KB, λ = λ₀ + Σ_jk ⟨τ_jk⟩.
pub fn update_global_scale(
    mix: &BandMixturePosterior,
    hyper: &Hyperparams,
) -> GlobalScalePosterior {
    let cells = mix.alpha.len();
    let tau_sum: f64 = (0..cells).map(|c| mix.expected_tau(c)).sum();
    GlobalScalePosterior {
        eta: hyper.eta0 + hyper.c0 * cells as f64,
        lambda: hyper.lambda0 + tau_sum,
    }
}

/// ⟨ln π_jk⟩ for a single Dirichlet, exposed for diagnostics.
pub fn expected_ln_pi(alpha: &[f64]) -> Vec<f64> {
    let total = digamma(alpha.iter().sum());
    alpha.iter().map(|&a| digamma(a) - total).collect()
}
