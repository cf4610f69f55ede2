//! Row-wise Gaussian updates for q(U), q(V), the ARD precisions q(γ), and
//! rank pruning.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hsi::ObservationMatrix;
use crate::model::{
    ArdPosterior, BandMixturePosterior, FactorState, Hyperparams, Responsibilities, RowGaussians,
};

pub const DEFAULT_PRUNE_RATIO: f64 = 1e4;
const INIT_COV_SCALE: f64 = 1e-2;
const JITTER_SCALE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    U,
    V,
}

/// Noise-weighted data seen by the factor updates:
/// `precision[i,j] = Σ_k r_ijk⟨τ_jk⟩` and
/// `target[i,j] = Σ_k r_ijk⟨τ_jk⟩(Y_ij − ⟨μ_jk⟩)`.
#[derive(Debug, Clone)]
pub struct NoiseWeights {
    pub precision: DMatrix<f64>,
    pub target: DMatrix<f64>,
}

impl NoiseWeights {
    pub fn new(y: &ObservationMatrix, resp: &Responsibilities, mix: &BandMixturePosterior) -> Self {
        let (n, b) = y.values().shape();
        let k = resp.components();
        let tau: Vec<f64> = (0..b * k).map(|c| mix.expected_tau(c)).collect();
        let mut precision = DMatrix::zeros(n, b);
        let mut target = DMatrix::zeros(n, b);
        for i in 0..n {
            for j in 0..b {
                let cell = resp.cell(i, j);
                let yij = y.values()[(i, j)];
                let (mut w, mut t) = (0.0, 0.0);
                for c in 0..k {
                    let rt = cell[c] * tau[j * k + c];
                    w += rt;
                    t += rt * (yij - mix.m[j * k + c]);
                }
                precision[(i, j)] = w;
                target[(i, j)] = t;
            }
        }
        Self { precision, target }
    }
}

/// Rank-R truncated SVD warm start: U = U_r S^{1/2}, V = V_r S^{1/2},
/// covariances 1e-2·I.
pub fn svd_init(y: &ObservationMatrix, rank: usize) -> Result<FactorState> {
    let (u, s, v) = truncated_svd(y.values(), rank)?;
    let root = DMatrix::from_diagonal(&s.map(f64::sqrt));
    FactorState::new(
        RowGaussians::isotropic(u * &root, INIT_COV_SCALE),
        RowGaussians::isotropic(v * root, INIT_COV_SCALE),
    )
}

/// Leading `rank` singular triplets `(U_r, s_r, V_r)` with `s` descending.
pub fn truncated_svd(
    m: &DMatrix<f64>,
    rank: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let full = m.nrows().min(m.ncols());
    if rank == 0 || rank > full {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside 1..={full}"
        )));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(rank);
    let s = DVector::from_iterator(rank, order.iter().map(|&i| svd.singular_values[i]));
    let u_r = u.select_columns(&order);
    let v_r = v_t.select_rows(&order).transpose();
    Ok((u_r, s, v_r))
}

/// Replaces one side's row posteriors given the opposite side and the noise
/// weights. Returns how many rows needed diagonal jitter.
pub fn update_factor_rows(
    factors: &mut FactorState,
    weights: &NoiseWeights,
    ard: &ArdPosterior,
    side: Side,
) -> Result<usize> {
    let (precision, target, opposite) = match side {
        Side::U => (
            weights.precision.clone(),
            weights.target.clone(),
            &factors.v,
        ),
        Side::V => (
            weights.precision.transpose(),
            weights.target.transpose(),
            &factors.u,
        ),
    };
    let r = opposite.rank();
    let r2 = r * r;
    let gamma = ard.expected_gamma();
    if gamma.len() != r {
        return Err(Error::Dimension(format!(
            "ARD has {} columns, factors have {r}",
            gamma.len()
        )));
    }

    // Row j of `moments` is vec(⟨x_jᵀ x_j⟩) for the opposite side.
    let moments = DMatrix::from_fn(opposite.rows(), r2, |j, c| {
        opposite.mean[(j, c / r)] * opposite.mean[(j, c % r)] + opposite.cov_block(j)[c]
    });
    let system = &precision * moments;
    let rhs = &target * &opposite.mean;

    let rows = precision.nrows();
    let solved: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let mut p = DMatrix::from_fn(r, r, |a, b| {
                0.5 * (system[(i, a * r + b)] + system[(i, b * r + a)])
            });
            for l in 0..r {
                p[(l, l)] += gamma[l];
            }
            let h = rhs.row(i).transpose();
            solve_row(p, h).ok_or_else(|| Error::Divergence {
                iteration: 0,
                reason: format!("{side:?}-side row {i} system is not positive definite"),
            })
        })
        .collect::<Result<_>>()?;

    let mut mean = DMatrix::zeros(rows, r);
    let mut cov = Vec::with_capacity(rows * r2);
    let mut jittered = 0;
    for (i, (m, c, j)) in solved.into_iter().enumerate() {
        for l in 0..r {
            mean[(i, l)] = m[l];
        }
        cov.extend(c);
        jittered += usize::from(j);
    }
    let updated = RowGaussians { mean, cov };
    match side {
        Side::U => factors.u = updated,
        Side::V => factors.v = updated,
    }
    Ok(jittered)
}

/// Σ = P⁻¹ and μ = Σh via Cholesky, with one jittered retry.
fn solve_row(p: DMatrix<f64>, h: DVector<f64>) -> Option<(Vec<f64>, Vec<f64>, bool)> {
    let r = p.nrows();
    let (chol, jittered) = match p.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let bump = JITTER_SCALE * p.trace().abs().max(f64::MIN_POSITIVE) / r as f64;
            let mut q = p;
            for l in 0..r {
                q[(l, l)] += bump;
            }
            (q.cholesky()?, true)
        }
    };
    let mean = chol.solve(&h);
    let inv = chol.inverse();
    let mut cov = Vec::with_capacity(r * r);
    for a in 0..r {
        for b in 0..r {
            cov.push(0.5 * (inv[(a, b)] + inv[(b, a)]));
        }
    }
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    Some((mean.iter().copied().collect(), cov, jittered))
}

/// q(γ_l): ξ_l = ξ₀ + (N + B)/2, δ_l = δ₀ + ½Σ_i⟨u_il²⟩ + ½Σ_j⟨v_jl²⟩.
pub fn update_ard(factors: &FactorState, hyper: &Hyperparams) -> ArdPosterior {
    let shape = hyper.xi0 + 0.5 * (factors.u.rows() + factors.v.rows()) as f64;
    let su = factors.u.column_second_moments();
    let sv = factors.v.column_second_moments();
    let r = factors.active_rank();
    ArdPosterior {
        xi: vec![shape; r],
        delta: (0..r)
            .map(|l| hyper.delta0 + 0.5 * su[l] + 0.5 * sv[l])
            .collect(),
    }
}

/// Drops every column whose ⟨γ_l⟩ exceeds `ratio · min_l ⟨γ_l⟩`, always
/// keeping the smallest. Returns the removed column indices.
pub fn prune_rank(factors: &mut FactorState, ard: &mut ArdPosterior, ratio: f64) -> Vec<usize> {
    let gamma = ard.expected_gamma();
    let Some((best, &min)) = gamma.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else {
        return Vec::new();
    };
    let keep: Vec<usize> = (0..gamma.len())
        .filter(|&l| l == best || gamma[l] <= ratio * min)
        .collect();
    if keep.len() == gamma.len() {
        return Vec::new();
    }
    let removed = (0..gamma.len()).filter(|l| !keep.contains(l)).collect();
    factors.u = factors.u.keep_columns(&keep);
    factors.v = factors.v.keep_columns(&keep);
    ard.xi = keep.iter().map(|&l| ard.xi[l]).collect();
    ard.delta = keep.iter().map(|&l| ard.delta[l]).collect();
    removed
}
