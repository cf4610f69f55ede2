//! Coordinate-ascent driver: initialization, the update loop, convergence,
//! evidence-bound monitoring and reconstruction.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::elbo_terms;
use crate::error::{Error, Result};
use crate::hsi::{self, Cube, ObservationMatrix};
use crate::lowrank::{self, NoiseWeights, Side, DEFAULT_PRUNE_RATIO};
use crate::model::{
    ArdPosterior, BandMixturePosterior, FactorState, GlobalScalePosterior, Hyperparams,
    NoiseLocation, NoiseState, Residuals, Responsibilities,
};
use crate::noise;

/// First iteration at which rank pruning may run.
pub const PRUNE_START: usize = 5;
/// Relative slack allowed on per-iteration bound decreases.
pub const ELBO_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub hyper: Hyperparams,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub elbo_check: bool,
    pub prune_ratio: f64,
    /// Rescale each band onto [0, 1] before denoising.
    pub normalize: bool,
    pub noise_location: NoiseLocation,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            max_iters: 100,
            tol: 1e-4,
            seed: 0,
            elbo_check: true,
            prune_ratio: DEFAULT_PRUNE_RATIO,
            normalize: true,
            noise_location: NoiseLocation::Pinned,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if !(self.prune_ratio > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prune ratio must be positive, got {}",
                self.prune_ratio
            )));
        }
        Ok(())
    }
}

/// Posterior summary of one band's noise mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandNoiseSummary {
    pub band: usize,
    pub pi: Vec<f64>,
    pub m: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    #[serde(rename = "iterations")]
    pub iterations_run: usize,
    pub final_rank: usize,
    #[serde(rename = "elbo")]
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub seconds: f64,
    pub bands: Vec<BandNoiseSummary>,
    /// Active rank after each iteration.
    pub rank_trace: Vec<usize>,
    /// Worst |Σ_k r_ijk − 1| after each iteration.
    pub normalization_trace: Vec<f64>,
    /// Set when a non-finite state stopped the run; the returned state is
    /// the last finite one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl InferenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Largest relative decrease between consecutive bound values.
    pub fn worst_elbo_drop(&self) -> f64 {
        self.elbo_trace
            .windows(2)
            .map(|w| (w[0] - w[1]) / w[0].abs().max(1.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub factors: FactorState,
    pub ard: ArdPosterior,
    pub noise: NoiseState,
    pub report: InferenceReport,
}

impl InferenceOutput {
    /// E[U] E[V]ᵀ.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        self.factors.reconstruction()
    }
}

#[derive(Clone)]
struct State {
    factors: FactorState,
    ard: ArdPosterior,
    noise: NoiseState,
    residuals: Residuals,
}

/// Runs variational inference on an N × B observation matrix.
pub fn run(y: &ObservationMatrix, cfg: &InferenceConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    let (n, b) = (y.n_pixels(), y.n_bands());
    if n < 2 || b < 2 {
        return Err(Error::Dimension(format!(
            "need at least 2 pixels and 2 bands, got {n}x{b}"
        )));
    }
    let hyper = cfg.hyper;
    if hyper.rank > n.min(b) {
        return Err(Error::InvalidArgument(format!(
            "rank bound {} exceeds min(N, B) = {}",
            hyper.rank,
            n.min(b)
        )));
    }
    let started = Instant::now();
    let mut state = initialize(y, cfg)?;
    let mut report = InferenceReport {
        iterations_run: 0,
        final_rank: state.factors.active_rank(),
        elbo_trace: Vec::new(),
        converged: false,
        seconds: 0.0,
        bands: Vec::new(),
        rank_trace: Vec::new(),
        normalization_trace: Vec::new(),
        divergence: None,
        warnings: Vec::new(),
    };
    let mut previous = state.factors.reconstruction();

    for iteration in 1..=cfg.max_iters {
        let snapshot = state.clone();
        match step(y, cfg, &mut state, iteration, &mut report) {
            Ok(()) => {}
            Err(err) => {
                state = snapshot;
                report.divergence = Some(match err {
                    Error::Divergence { reason, .. } => format!("iteration {iteration}: {reason}"),
                    other => format!("iteration {iteration}: {other}"),
                });
                break;
            }
        }
        report.iterations_run = iteration;
        report.rank_trace.push(state.factors.active_rank());
        report
            .normalization_trace
            .push(state.noise.responsibilities.max_normalization_error());

        let current = state.factors.reconstruction();
        let change = (&current - &previous).norm() / previous.norm().max(f64::MIN_POSITIVE);
        previous = current;
        if change < cfg.tol {
            report.converged = true;
            break;
        }
    }

    report.final_rank = state.factors.active_rank();
    report.bands = summarize_bands(&state.noise.mixture);
    report.seconds = started.elapsed().as_secs_f64();
    Ok(InferenceOutput {
        factors: state.factors,
        ard: state.ard,
        noise: state.noise,
        report,
    })
}

fn initialize(y: &ObservationMatrix, cfg: &InferenceConfig) -> Result<State> {
    let hyper = &cfg.hyper;
    let factors = lowrank::svd_init(y, hyper.rank)?;
    let ard = lowrank::update_ard(&factors, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let responsibilities =
        Responsibilities::random(y.n_pixels(), y.n_bands(), hyper.components, &mut rng);
    let scale = GlobalScalePosterior::from_prior(hyper);
    let mut mixture = BandMixturePosterior::from_prior(y.n_bands(), hyper, scale.mean());
    let residuals = Residuals::new(y, &factors);
    mixture.alpha = noise::update_mixing(&responsibilities, hyper);
    noise::update_normal_gamma(
        &mut mixture,
        &residuals,
        &responsibilities,
        &scale,
        hyper,
        cfg.noise_location,
    );
    let scale = noise::update_global_scale(&mixture, hyper);
    Ok(State {
        factors,
        ard,
        noise: NoiseState {
            responsibilities,
            mixture,
            scale,
        },
        residuals,
    })
}

/// One sweep: q(Z), q(π), q(μ,τ), q(d), q(U), q(V), q(γ), then pruning.
fn step(
    y: &ObservationMatrix,
    cfg: &InferenceConfig,
    state: &mut State,
    iteration: usize,
    report: &mut InferenceReport,
) -> Result<()> {
    let hyper = &cfg.hyper;
    let tag = |e: Error| match e {
        Error::Divergence { reason, .. } => Error::Divergence { iteration, reason },
        other => other,
    };

    let noise_state = &mut state.noise;
    noise_state.responsibilities =
        noise::update_responsibilities(&state.residuals, &noise_state.mixture).map_err(tag)?;
    noise_state.mixture.alpha = noise::update_mixing(&noise_state.responsibilities, hyper);
    let clamped = noise::update_normal_gamma(
        &mut noise_state.mixture,
        &state.residuals,
        &noise_state.responsibilities,
        &noise_state.scale,
        hyper,
        cfg.noise_location,
    );
    if clamped > 0 {
        report.warnings.push(format!(
            "iteration {iteration}: {clamped} noise precision rates floored"
        ));
    }
    noise_state.scale = noise::update_global_scale(&noise_state.mixture, hyper);

    let weights = NoiseWeights::new(y, &noise_state.responsibilities, &noise_state.mixture);
    let mut jittered =
        lowrank::update_factor_rows(&mut state.factors, &weights, &state.ard, Side::U)
            .map_err(tag)?;
    jittered += lowrank::update_factor_rows(&mut state.factors, &weights, &state.ard, Side::V)
        .map_err(tag)?;
    if jittered > 0 {
        report.warnings.push(format!(
            "iteration {iteration}: {jittered} factor rows needed jitter"
        ));
    }
    state.ard = lowrank::update_ard(&state.factors, hyper);
    if iteration >= PRUNE_START {
        lowrank::prune_rank(&mut state.factors, &mut state.ard, cfg.prune_ratio);
    }

    state.residuals = Residuals::new(y, &state.factors);
    if state.residuals.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iteration,
            reason: "non-finite reconstruction".into(),
        });
    }

    if cfg.elbo_check {
        let value = elbo_terms(
            &state.residuals,
            &state.factors,
            &state.ard,
            &state.noise,
            hyper,
        )
        .map_err(tag)?
        .total();
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration,
                reason: format!("evidence bound is {value}"),
            });
        }
        if let Some(&last) = report.elbo_trace.last() {
            if value < last - ELBO_SLACK * last.abs() {
                report.warnings.push(format!(
                    "iteration {iteration}: evidence bound fell from {last} to {value}"
                ));
            }
        }
        report.elbo_trace.push(value);
    }
    Ok(())
}

fn summarize_bands(mix: &BandMixturePosterior) -> Vec<BandNoiseSummary> {
    let k = mix.components;
    let pi = mix.mean_pi();
    (0..mix.bands)
        .map(|j| BandNoiseSummary {
            band: j,
            pi: pi[j * k..(j + 1) * k].to_vec(),
            m: mix.m[j * k..(j + 1) * k].to_vec(),
            tau: (j * k..(j + 1) * k).map(|c| mix.expected_tau(c)).collect(),
        })
        .collect()
}

/// Factorizes the cube (rescaled first when configured) and returns
/// E[U]E[V]ᵀ on the input grid, clipped to [0, 1]. The rank bound is capped
/// at min(N, B).
pub fn denoise(cube: &Cube, cfg: &InferenceConfig) -> Result<(Cube, InferenceReport)> {
    let input = if cfg.normalize {
        hsi::normalize_bands(cube)
    } else {
        cube.clone()
    };
    let y = hsi::cube_to_matrix(&input);
    let mut cfg = cfg.clone();
    cfg.hyper.rank = cfg.hyper.rank.min(y.n_pixels()).min(y.n_bands());
    let out = run(&y, &cfg)?;
    let mut clean = out.reconstruction();
    clean.apply(|v| *v = v.clamp(0.0, 1.0));
    let cube = hsi::dmatrix_to_cube(&clean, cube.rows(), cube.cols())?;
    Ok((cube, out.report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::noise_sim::{corrupt, planted_cube, NoiseCase, NoiseSpec};
    use rand::Rng;

    fn planted_matrix(
        n: usize,
        b: usize,
        rank: usize,
        seed: u64,
    ) -> (ObservationMatrix, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(b, rank, |_, _| rng.random_range(-1.0..1.0));
        let l = u * v.transpose();
        (ObservationMatrix::new(l.clone()).unwrap(), l)
    }

    fn config(rank: usize, components: usize) -> InferenceConfig {
        let mut cfg = InferenceConfig {
            normalize: false,
            ..Default::default()
        };
        cfg.hyper.rank = rank;
        cfg.hyper.components = components;
        cfg
    }

    #[test]
    fn exact_rank_two_is_recovered() {
        let (y, l) = planted_matrix(40, 12, 2, 1);
        let out = run(&y, &config(5, 1)).unwrap();
        let err = (out.reconstruction() - &l).norm() / l.norm();
        assert!(err < 1e-3, "relative error {err}");
        assert_eq!(out.report.final_rank, 2);
        assert!(out.report.divergence.is_none());
    }

    #[test]
    fn exact_rank_three_prunes_from_eight() {
        let (y, _) = planted_matrix(50, 16, 3, 2);
        let out = run(&y, &config(8, 1)).unwrap();
        assert_eq!(out.report.final_rank, 3);
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let (_, l) = planted_matrix(30, 8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy =
            ObservationMatrix::new(l.map(|v| v + 0.05 * rng.random_range(-1.0..1.0))).unwrap();
        let cfg = InferenceConfig {
            seed: 9,
            ..config(4, 3)
        };
        let a = run(&noisy, &cfg).unwrap();
        let mut b = run(&noisy, &cfg).unwrap();
        b.report.seconds = a.report.seconds;
        assert_eq!(a.report, b.report);
        assert_eq!(a.factors, b.factors);
    }

    #[test]
    fn bound_never_falls_on_noisy_data() {
        let clean = planted_cube(12, 12, 8, 2, 5).unwrap();
        let (noisy, _) = corrupt(&clean, &NoiseSpec::new(NoiseCase::Mixture, 5)).unwrap();
        for location in [NoiseLocation::Pinned, NoiseLocation::Free] {
            let cfg = InferenceConfig {
                noise_location: location,
                max_iters: 40,
                tol: 1e-12,
                ..config(6, 3)
            };
            let out = run(&hsi::cube_to_matrix(&noisy), &cfg).unwrap();
            assert_eq!(out.report.elbo_trace.len(), 40);
            assert!(
                out.report.worst_elbo_drop() <= ELBO_SLACK,
                "{location:?}: {}",
                out.report.worst_elbo_drop()
            );
            assert!(out.report.rank_trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(out.report.normalization_trace.iter().all(|&e| e < 1e-10));
        }
    }

    #[test]
    fn tolerance_only_gates_termination() {
        let (_, l) = planted_matrix(20, 6, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = ObservationMatrix::new(l.map(|v| v + 0.1 * rng.random_range(-1.0..1.0))).unwrap();
        let loose = run(
            &y,
            &InferenceConfig {
                tol: 1e-2,
                ..config(4, 2)
            },
        )
        .unwrap();
        let tight = run(
            &y,
            &InferenceConfig {
                tol: 1e-9,
                ..config(4, 2)
            },
        )
        .unwrap();
        let n = loose.report.elbo_trace.len();
        assert!(n < tight.report.elbo_trace.len());
        assert_eq!(loose.report.elbo_trace[..], tight.report.elbo_trace[..n]);
    }

    #[test]
    fn bound_tracking_can_be_disabled() {
        let (y, _) = planted_matrix(10, 5, 1, 8);
        let cfg = InferenceConfig {
            elbo_check: false,
            ..config(2, 1)
        };
        let out = run(&y, &cfg).unwrap();
        assert!(out.report.elbo_trace.is_empty());
        assert!(out.report.iterations_run > 0);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let (y, _) = planted_matrix(6, 3, 1, 9);
        assert!(matches!(
            run(&y, &config(4, 1)),
            Err(Error::InvalidArgument(_))
        ));
        let thin = ObservationMatrix::new(DMatrix::from_element(1, 3, 0.5)).unwrap();
        assert!(matches!(
            run(&thin, &config(1, 1)),
            Err(Error::Dimension(_))
        ));
        assert!(run(
            &y,
            &InferenceConfig {
                max_iters: 0,
                ..config(2, 1)
            }
        )
        .is_err());
        assert!(run(
            &y,
            &InferenceConfig {
                tol: 0.0,
                ..config(2, 1)
            }
        )
        .is_err());
        assert!(run(
            &y,
            &InferenceConfig {
                prune_ratio: -1.0,
                ..config(2, 1)
            }
        )
        .is_err());
    }

    #[test]
    fn report_json_uses_external_field_names() {
        let (y, _) = planted_matrix(8, 4, 1, 10);
        let out = run(&y, &config(2, 2)).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&out.report.to_json().unwrap()).unwrap();
        for key in [
            "iterations",
            "final_rank",
            "elbo",
            "converged",
            "seconds",
            "bands",
        ] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(value["bands"].as_array().unwrap().len(), 4);
        assert_eq!(value["bands"][0]["pi"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn smallest_cube_denoises() {
        let cube = Cube::new(2, 2, 2, vec![0.1, 0.4, 0.3, 0.9, 0.2, 0.5, 0.7, 0.6]).unwrap();
        let (out, report) = denoise(&cube, &InferenceConfig::default()).unwrap();
        assert_eq!(out.shape(), cube.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(report.final_rank <= 2);
    }

    #[test]
    fn rank_one_cube_is_reproduced() {
        let (rows, cols, bands) = (10, 9, 6);
        let data: Vec<f32> = (0..bands)
            .flat_map(|j| {
                (0..rows * cols)
                    .map(move |i| (0.2 + 0.6 * (i as f32 / 90.0)) * (0.5 + 0.08 * j as f32))
            })
            .collect();
        let cube = Cube::new(rows, cols, bands, data).unwrap();
        let cfg = InferenceConfig {
            normalize: false,
            ..Default::default()
        };
        let (out, _) = denoise(&cube, &cfg).unwrap();
        let diff: f64 = cube
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum();
        let norm: f64 = cube.data().iter().map(|a| f64::from(*a).powi(2)).sum();
        assert!(
            (diff / norm).sqrt() < 1e-3,
            "relative error {}",
            (diff / norm).sqrt()
        );
    }

    #[test]
    fn gaussian_noise_is_reduced() {
        let clean = planted_cube(24, 24, 12, 3, 11).unwrap();
        let (noisy, _) = corrupt(&clean, &NoiseSpec::new(NoiseCase::Iid, 11)).unwrap();
        let cfg = InferenceConfig {
            normalize: false,
            ..config(12, 1)
        };
        let (out, _) = denoise(&noisy, &cfg).unwrap();
        let before = metrics::evaluate(&clean, &noisy).unwrap().mpsnr;
        let after = metrics::evaluate(&clean, &out).unwrap().mpsnr;
        assert!(
            after > before + 5.0,
            "noisy {before:.2} dB, denoised {after:.2} dB"
        );
    }

    #[test]
    fn normalization_rescales_input() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| 10.0 + (i % 7) as f32).collect();
        let cube = Cube::new(2, 3, 4, data).unwrap();
        let (out, _) = denoise(&cube, &InferenceConfig::default()).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
