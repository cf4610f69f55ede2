//! Evidence lower bound ⟨ln p(θ, Y)⟩ − ⟨ln q(θ)⟩ under the fully factorized
//! posterior. Used to monitor coordinate ascent; never to decide convergence.

use crate::error::{Error, Result};
use crate::hsi::ObservationMatrix;
use crate::model::{ArdPosterior, FactorState, Hyperparams, NoiseState, Residuals, RowGaussians};
use crate::special::{digamma, gamma_entropy, ln_gamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bound terms grouped by the factor they belong to.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    /// Likelihood, ⟨ln p(Z|π)⟩ and the entropy of q(Z).
    pub data: f64,
    pub mixing: f64,
    pub normal_gamma: f64,
    pub global_scale: f64,
    pub factors: f64,
    pub ard: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.data + self.mixing + self.normal_gamma + self.global_scale + self.factors + self.ard
    }
}

pub fn compute_elbo(
    y: &ObservationMatrix,
    factors: &FactorState,
    ard: &ArdPosterior,
    noise: &NoiseState,
    hyper: &Hyperparams,
) -> Result<f64> {
    let residuals = Residuals::new(y, factors);
    let total = elbo_terms(&residuals, factors, ard, noise, hyper)?.total();
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Divergence {
            iteration: 0,
            reason: format!("evidence bound is {total}"),
        })
    }
}

pub fn elbo_terms(
    residuals: &Residuals,
    factors: &FactorState,
    ard: &ArdPosterior,
    noise: &NoiseState,
    hyper: &Hyperparams,
) -> Result<ElboTerms> {
    let mix = &noise.mixture;
    let resp = &noise.responsibilities;
    let k = mix.components;
    let bands = mix.bands;
    let cells = bands * k;

    let ln_pi = mix.expected_ln_pi();
    let ln_tau: Vec<f64> = (0..cells).map(|c| mix.expected_ln_tau(c)).collect();
    let tau: Vec<f64> = (0..cells).map(|c| mix.expected_tau(c)).collect();
    let d_mean = noise.scale.mean();
    let d_ln = noise.scale.expected_ln();

    let mut data = 0.0;
    for i in 0..resp.pixels() {
        for j in 0..bands {
            let e = residuals.mean[(i, j)];
            let var = residuals.var[(i, j)];
            for (c, &r) in resp.cell(i, j).iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let at = j * k + c;
                let quad = tau[at] * ((e - mix.m[at]).powi(2) + var) + 1.0 / mix.beta[at];
                data += r * (ln_pi[at] + 0.5 * ln_tau[at] - 0.5 * LN_2PI - 0.5 * quad - r.ln());
            }
        }
    }

    let kf = k as f64;
    let mut mixing = 0.0;
    for j in 0..bands {
        let alpha = &mix.alpha[j * k..(j + 1) * k];
        let total: f64 = alpha.iter().sum();
        mixing += ln_gamma(kf * hyper.alpha0) - kf * ln_gamma(hyper.alpha0);
        mixing += (hyper.alpha0 - 1.0) * ln_pi[j * k..(j + 1) * k].iter().sum::<f64>();
        // Dirichlet entropy.
        mixing += alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(total)
            + (total - kf) * digamma(total)
            - alpha.iter().map(|&a| (a - 1.0) * digamma(a)).sum::<f64>();
    }

    let mut normal_gamma = 0.0;
    for at in 0..cells {
        let (m, beta, c, d) = (mix.m[at], mix.beta[at], mix.c[at], mix.d[at]);
        let prior = 0.5 * hyper.beta0.ln() + 0.5 * ln_tau[at]
            - 0.5 * hyper.beta0 * (tau[at] * (m - hyper.m0).powi(2) + 1.0 / beta)
            + hyper.c0 * d_ln
            - ln_gamma(hyper.c0)
            + (hyper.c0 - 1.0) * ln_tau[at]
            - d_mean * tau[at];
        let entropy = -0.5 * beta.ln() - 0.5 * ln_tau[at] + 0.5 - c * d.ln() + ln_gamma(c)
            - (c - 1.0) * ln_tau[at]
            + c;
        normal_gamma += prior + entropy;
    }

    let global_scale = hyper.eta0 * hyper.lambda0.ln() - ln_gamma(hyper.eta0)
        + (hyper.eta0 - 1.0) * d_ln
        - hyper.lambda0 * d_mean
        + gamma_entropy(noise.scale.eta, noise.scale.lambda);

    let gamma = ard.expected_gamma();
    let ln_gamma_l = ard.expected_ln_gamma();
    let factors_term = row_gaussian_terms(&factors.u, &gamma, &ln_gamma_l)?
        + row_gaussian_terms(&factors.v, &gamma, &ln_gamma_l)?;

    let mut ard_term = 0.0;
    for l in 0..gamma.len() {
        ard_term += hyper.xi0 * hyper.delta0.ln() - ln_gamma(hyper.xi0)
            + (hyper.xi0 - 1.0) * ln_gamma_l[l]
            - hyper.delta0 * gamma[l]
            + gamma_entropy(ard.xi[l], ard.delta[l]);
    }

    Ok(ElboTerms {
        data,
        mixing,
        normal_gamma,
        global_scale,
        factors: factors_term,
        ard: ard_term,
    })
}

/// Σ_i ⟨ln N(x_i | 0, diag(γ)⁻¹)⟩ + H(q(x_i)); the ln 2π parts cancel.
fn row_gaussian_terms(side: &RowGaussians, gamma: &[f64], ln_gamma_l: &[f64]) -> Result<f64> {
    let r = side.rank();
    let mut total = 0.0;
    for i in 0..side.rows() {
        let cov = side.covariance(i);
        let chol = cov.clone().cholesky().ok_or_else(|| Error::Divergence {
            iteration: 0,
            reason: format!("row {i} covariance is not positive definite"),
        })?;
        let ln_det: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        for l in 0..r {
            let second = side.mean[(i, l)].powi(2) + cov[(l, l)];
            total += 0.5 * ln_gamma_l[l] - 0.5 * gamma[l] * second;
        }
        total += 0.5 * r as f64 + 0.5 * ln_det;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{self, NoiseWeights, Side};
    use crate::model::{
        BandMixturePosterior, GlobalScalePosterior, NoiseLocation, Responsibilities,
    };
    use crate::noise;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, StandardNormal};
    use statrs::distribution::{Continuous, Gamma as GammaPdf, Normal as NormalPdf};
    use statrs::function::gamma::ln_gamma as ref_ln_gamma;

    struct Fixture {
        y: ObservationMatrix,
        factors: FactorState,
        ard: ArdPosterior,
        noise: NoiseState,
        hyper: Hyperparams,
    }

    fn spd(r: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        let m = (&a * a.transpose() + DMatrix::identity(r, r) * 0.5) * scale;
        m.transpose().as_slice().to_vec()
    }

    fn rows(n: usize, r: usize, scale: f64, rng: &mut ChaCha8Rng) -> RowGaussians {
        let mean = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let cov = (0..n).flat_map(|_| spd(r, scale, rng)).collect();
        RowGaussians::new(mean, cov).unwrap()
    }

    fn fixture(n: usize, b: usize, k: usize, r: usize, hyper: Hyperparams, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = ObservationMatrix::new(DMatrix::from_fn(n, b, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap();
        let factors =
            FactorState::new(rows(n, r, 0.05, &mut rng), rows(b, r, 0.05, &mut rng)).unwrap();
        let cells = b * k;
        let mut draw = |lo: f64, hi: f64| {
            (0..cells)
                .map(|_| rng.random_range(lo..hi))
                .collect::<Vec<_>>()
        };
        let mixture = BandMixturePosterior {
            bands: b,
            components: k,
            alpha: draw(1.0, 4.0),
            m: draw(-0.3, 0.3),
            beta: draw(1.0, 4.0),
            c: draw(2.0, 6.0),
            d: draw(0.5, 2.0),
        };
        let responsibilities = Responsibilities::random(n, b, k, &mut rng);
        let scale = GlobalScalePosterior {
            eta: rng.random_range(2.0..5.0),
            lambda: rng.random_range(1.0..3.0),
        };
        let ard = ArdPosterior {
            xi: (0..r).map(|_| rng.random_range(2.0..6.0)).collect(),
            delta: (0..r).map(|_| rng.random_range(1.0..3.0)).collect(),
        };
        Fixture {
            y,
            factors,
            ard,
            noise: NoiseState {
                responsibilities,
                mixture,
                scale,
            },
            hyper,
        }
    }

    fn bound(f: &Fixture) -> f64 {
        compute_elbo(&f.y, &f.factors, &f.ard, &f.noise, &f.hyper).unwrap()
    }

    fn gamma_draw(shape: f64, rate: f64, rng: &mut ChaCha8Rng) -> f64 {
        Gamma::new(shape, 1.0 / rate).unwrap().sample(rng)
    }

    fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
        GammaPdf::new(shape, rate).unwrap().ln_pdf(x)
    }

    fn normal_ln_pdf(x: f64, mean: f64, precision: f64) -> f64 {
        NormalPdf::new(mean, precision.sqrt().recip())
            .unwrap()
            .ln_pdf(x)
    }

    fn dirichlet_ln_pdf(p: &[f64], alpha: &[f64]) -> f64 {
        ref_ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ref_ln_gamma(a)).sum::<f64>()
            + p.iter()
                .zip(alpha)
                .map(|(x, a)| (a - 1.0) * x.ln())
                .sum::<f64>()
    }

    /// Draws x ~ N(mean, cov) and returns it with ln q(x).
    fn mvn_draw(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        rng: &mut ChaCha8Rng,
    ) -> (DVector<f64>, f64) {
        let r = mean.len();
        let chol = cov.cholesky().unwrap();
        let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &mean + chol.l() * &z;
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ln_q =
            -0.5 * (r as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + z.norm_squared());
        (x, ln_q)
    }

    /// One sample of ln p(Y, θ) − ln q(θ) with θ ~ q, written directly from
    /// the generative model.
    fn log_ratio_sample(f: &Fixture, rng: &mut ChaCha8Rng) -> f64 {
        let h = &f.hyper;
        let (n, b) = (f.y.n_pixels(), f.y.n_bands());
        let mix = &f.noise.mixture;
        let k = mix.components;
        let r = f.factors.active_rank();
        let mut lp = 0.0;
        let mut lq = 0.0;

        let gamma: Vec<f64> = (0..r)
            .map(|l| {
                let g = gamma_draw(f.ard.xi[l], f.ard.delta[l], rng);
                lp += gamma_ln_pdf(g, h.xi0, h.delta0);
                lq += gamma_ln_pdf(g, f.ard.xi[l], f.ard.delta[l]);
                g
            })
            .collect();
        let mut side = |s: &RowGaussians| -> Vec<DVector<f64>> {
            (0..s.rows())
                .map(|i| {
                    let (x, ln_q) = mvn_draw(s.mean.row(i).transpose(), s.covariance(i), rng);
                    lq += ln_q;
                    lp += (0..r)
                        .map(|l| normal_ln_pdf(x[l], 0.0, gamma[l]))
                        .sum::<f64>();
                    x
                })
                .collect()
        };
        let u = side(&f.factors.u);
        let v = side(&f.factors.v);

        let scale = &f.noise.scale;
        let d = gamma_draw(scale.eta, scale.lambda, rng);
        lp += gamma_ln_pdf(d, h.eta0, h.lambda0);
        lq += gamma_ln_pdf(d, scale.eta, scale.lambda);

        let mut tau = vec![0.0; b * k];
        let mut mu = vec![0.0; b * k];
        for at in 0..b * k {
            tau[at] = gamma_draw(mix.c[at], mix.d[at], rng);
            let prec = mix.beta[at] * tau[at];
            mu[at] = mix.m[at] + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
            lp += gamma_ln_pdf(tau[at], h.c0, d) + normal_ln_pdf(mu[at], h.m0, h.beta0 * tau[at]);
            lq += gamma_ln_pdf(tau[at], mix.c[at], mix.d[at])
                + normal_ln_pdf(mu[at], mix.m[at], prec);
        }

        let mut pi = vec![0.0; b * k];
        for j in 0..b {
            let alpha = &mix.alpha[j * k..(j + 1) * k];
            let g: Vec<f64> = alpha.iter().map(|&a| gamma_draw(a, 1.0, rng)).collect();
            let total: f64 = g.iter().sum();
            for c in 0..k {
                pi[j * k + c] = g[c] / total;
            }
            lp += dirichlet_ln_pdf(&pi[j * k..(j + 1) * k], &vec![h.alpha0; k]);
            lq += dirichlet_ln_pdf(&pi[j * k..(j + 1) * k], alpha);
        }

        let resp = &f.noise.responsibilities;
        for i in 0..n {
            for j in 0..b {
                let cell = resp.cell(i, j);
                let mut pick = rng.random::<f64>();
                let mut z = k - 1;
                for (c, &p) in cell.iter().enumerate() {
                    if pick < p {
                        z = c;
                        break;
                    }
                    pick -= p;
                }
                let at = j * k + z;
                let fit = u[i].dot(&v[j]);
                lq += cell[z].ln();
                lp += pi[at].ln() + normal_ln_pdf(f.y.values()[(i, j)], fit + mu[at], tau[at]);
            }
        }
        lp - lq
    }

    #[test]
    fn bound_matches_monte_carlo_oracle() {
        let hyper = Hyperparams {
            m0: 0.1,
            beta0: 0.7,
            c0: 2.0,
            eta0: 3.0,
            lambda0: 1.5,
            xi0: 2.5,
            delta0: 1.2,
            alpha0: 1.5,
            components: 2,
            rank: 2,
        };
        let f = fixture(2, 2, 2, 2, hyper, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 400_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let s = log_ratio_sample(&f, &mut rng);
            sum += s;
            sum_sq += s * s;
        }
        let mean = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let exact = bound(&f);
        assert!(
            (mean - exact).abs() < 4.0 * se,
            "closed form {exact}, monte carlo {mean} ± {se}"
        );
    }

    #[test]
    fn zero_data_prior_state_matches_monte_carlo() {
        let hyper = Hyperparams {
            beta0: 2.0,
            c0: 3.0,
            eta0: 4.0,
            lambda0: 2.0,
            xi0: 3.0,
            delta0: 2.0,
            alpha0: 2.0,
            components: 2,
            rank: 1,
            ..Default::default()
        };
        let mut f = fixture(2, 2, 2, 1, hyper, 21);
        f.y = ObservationMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        let mix = &mut f.noise.mixture;
        mix.alpha.fill(hyper.alpha0);
        mix.m.fill(hyper.m0);
        mix.beta.fill(hyper.beta0);
        mix.c.fill(hyper.c0);
        f.noise.scale = GlobalScalePosterior::from_prior(&hyper);
        mix.d.fill(f.noise.scale.mean());
        f.ard = ArdPosterior {
            xi: vec![hyper.xi0],
            delta: vec![hyper.delta0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let draws = 400_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let s = log_ratio_sample(&f, &mut rng);
            sum += s;
            sum_sq += s * s;
        }
        let mean = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let exact = bound(&f);
        assert!(
            (mean - exact).abs() < 4.0 * se,
            "closed form {exact}, monte carlo {mean} ± {se}"
        );
    }

    fn assert_no_drop(before: f64, after: f64, what: &str) {
        assert!(
            after >= before - 1e-10 * before.abs().max(1.0),
            "{what} lowered the bound from {before} to {after}"
        );
    }

    #[test]
    fn every_update_raises_the_bound() {
        for (seed, location) in [
            (1, NoiseLocation::Free),
            (2, NoiseLocation::Pinned),
            (3, NoiseLocation::Free),
        ] {
            let mut f = fixture(
                9,
                5,
                3,
                3,
                Hyperparams {
                    components: 3,
                    rank: 3,
                    ..Default::default()
                },
                seed,
            );
            for _ in 0..4 {
                let res = Residuals::new(&f.y, &f.factors);
                let before = bound(&f);
                f.noise.responsibilities =
                    noise::update_responsibilities(&res, &f.noise.mixture).unwrap();
                let after = bound(&f);
                assert_no_drop(before, after, "q(Z)");

                f.noise.mixture.alpha = noise::update_mixing(&f.noise.responsibilities, &f.hyper);
                let next = bound(&f);
                assert_no_drop(after, next, "q(pi)");

                let n = &mut f.noise;
                noise::update_normal_gamma(
                    &mut n.mixture,
                    &res,
                    &n.responsibilities,
                    &n.scale,
                    &f.hyper,
                    location,
                );
                let after = bound(&f);
                assert_no_drop(next, after, "q(mu, tau)");

                f.noise.scale = noise::update_global_scale(&f.noise.mixture, &f.hyper);
                let next = bound(&f);
                assert_no_drop(after, next, "q(d)");

                let w = NoiseWeights::new(&f.y, &f.noise.responsibilities, &f.noise.mixture);
                lowrank::update_factor_rows(&mut f.factors, &w, &f.ard, Side::U).unwrap();
                let after = bound(&f);
                assert_no_drop(next, after, "q(U)");
                lowrank::update_factor_rows(&mut f.factors, &w, &f.ard, Side::V).unwrap();
                let next = bound(&f);
                assert_no_drop(after, next, "q(V)");

                f.ard = lowrank::update_ard(&f.factors, &f.hyper);
                assert_no_drop(next, bound(&f), "q(gamma)");
            }
        }
    }

    #[test]
    fn ard_update_is_stationary() {
        // 12 pixels from a 3 x 4 image and 5 bands.
        let mut f = fixture(
            12,
            5,
            2,
            2,
            Hyperparams {
                components: 2,
                rank: 2,
                ..Default::default()
            },
            8,
        );
        f.ard = lowrank::update_ard(&f.factors, &f.hyper);
        let best = bound(&f);
        for l in 0..2 {
            for step in [1e-3, -1e-3] {
                let mut g = f.ard.clone();
                g.xi[l] += step;
                let shifted = compute_elbo(&f.y, &f.factors, &g, &f.noise, &f.hyper).unwrap();
                assert!(shifted < best, "xi[{l}] {step:+}: {shifted} vs {best}");
                let mut g = f.ard.clone();
                g.delta[l] *= 1.0 + step;
                let shifted = compute_elbo(&f.y, &f.factors, &g, &f.noise, &f.hyper).unwrap();
                assert!(shifted < best, "delta[{l}] {step:+}: {shifted} vs {best}");
            }
        }
        // Shape from the spatial sides (3 + 4) / 2 instead of (N + B) / 2.
        let mut spatial = f.ard.clone();
        spatial.xi.fill(f.hyper.xi0 + 3.5);
        assert!(compute_elbo(&f.y, &f.factors, &spatial, &f.noise, &f.hyper).unwrap() < best - 1.0);
    }

    #[test]
    fn terms_sum_to_total() {
        let f = fixture(
            4,
            3,
            2,
            2,
            Hyperparams {
                components: 2,
                rank: 2,
                ..Default::default()
            },
            5,
        );
        let res = Residuals::new(&f.y, &f.factors);
        let t = elbo_terms(&res, &f.factors, &f.ard, &f.noise, &f.hyper).unwrap();
        let sum = t.data + t.mixing + t.normal_gamma + t.global_scale + t.factors + t.ard;
        assert_eq!(sum, t.total());
        assert_eq!(t.total(), bound(&f));
    }

    #[test]
    fn indefinite_covariance_is_divergence() {
        let mut f = fixture(
            3,
            3,
            1,
            2,
            Hyperparams {
                components: 1,
                rank: 2,
                ..Default::default()
            },
            4,
        );
        f.factors.u.cov[0] = -1.0;
        let res = Residuals::new(&f.y, &f.factors);
        assert!(matches!(
            elbo_terms(&res, &f.factors, &f.ard, &f.noise, &f.hyper),
            Err(Error::Divergence { .. })
        ));
    }
}
