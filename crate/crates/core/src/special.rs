//! Special-function helpers for the bound and the expected-log updates.
//! ψ and lnΓ come from `statrs`; the tests pin them against high-precision
//! references down to the `1e-3` concentrations produced by the priors.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// ⟨ln π⟩ of a Dirichlet with the given concentrations.
pub fn dirichlet_expected_log(alpha: &[f64]) -> Vec<f64> {
    let total: f64 = alpha.iter().sum();
    let psi_total = digamma(total);
    alpha.iter().map(|&a| digamma(a) - psi_total).collect()
}

/// Entropy of Gamma(shape, rate).
pub fn gamma_entropy(shape: f64, rate: f64) -> f64 {
    shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape)
}
