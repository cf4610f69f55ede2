//! Variational posterior state shared by the noise and low-rank updates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::ObservationMatrix;

/// Fixed prior constants plus the component count K and rank bound R.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub m0: f64,
    pub beta0: f64,
    pub c0: f64,
    pub eta0: f64,
    pub lambda0: f64,
    pub xi0: f64,
    pub delta0: f64,
    pub alpha0: f64,
    pub components: usize,
    pub rank: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            m0: 0.0,
            beta0: 1e-3,
            c0: 1e-3,
            eta0: 1e-3,
            lambda0: 1e-3,
            xi0: 1e-3,
            delta0: 1e-3,
            alpha0: 1e-3,
            components: 3,
            rank: 20,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta0", self.beta0),
            ("c0", self.c0),
            ("eta0", self.eta0),
            ("lambda0", self.lambda0),
            ("xi0", self.xi0),
            ("delta0", self.delta0),
            ("alpha0", self.alpha0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !self.m0.is_finite() {
            return Err(Error::InvalidArgument("m0 must be finite".into()));
        }
        if self.components == 0 {
            return Err(Error::InvalidArgument(
                "component count K must be at least 1".into(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::InvalidArgument(
                "rank bound R must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// How q(μ_jk | τ_jk) places its location.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLocation {
    /// Location held at m₀; the noise stays centred and every band offset
    /// remains in the low-rank part.
    #[default]
    Pinned,
    /// Full conjugate update of the location. A shared band offset can then
    /// migrate from UVᵀ into the noise means.
    Free,
}

/// ⟨z_ijk⟩ stored as `[(i * bands + j) * components + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub(crate) pixels: usize,
    pub(crate) bands: usize,
    pub(crate) components: usize,
    pub(crate) values: Vec<f64>,
}

impl Responsibilities {
    pub fn new(pixels: usize, bands: usize, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != pixels * bands * components {
            return Err(Error::Dimension(format!(
                "responsibilities need {} values, got {}",
                pixels * bands * components,
                values.len()
            )));
        }
        Ok(Self {
            pixels,
            bands,
            components,
            values,
        })
    }

    /// Independent symmetric Dirichlet(1) draws for every cell.
    pub fn random<R: Rng + ?Sized>(
        pixels: usize,
        bands: usize,
        components: usize,
        rng: &mut R,
    ) -> Self {
        let mut values = Vec::with_capacity(pixels * bands * components);
        for _ in 0..pixels * bands {
            let start = values.len();
            let mut total = 0.0;
            for _ in 0..components {
                let e: f64 = Exp1.sample(rng);
                total += e;
                values.push(e);
            }
            for v in &mut values[start..] {
                *v /= total;
            }
        }
        Self {
            pixels,
            bands,
            components,
            values,
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.bands + j) * self.components;
        &self.values[at..at + self.components]
    }

    /// Largest |Σ_k r_ijk − 1| over all cells.
    pub fn max_normalization_error(&self) -> f64 {
        self.values
            .chunks_exact(self.components)
            .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Σ_i r_ijk, laid out `[j * components + k]`.
    pub fn band_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.bands * self.components];
        for pixel in self.values.chunks_exact(self.bands * self.components) {
            for (t, r) in totals.iter_mut().zip(pixel) {
                *t += r;
            }
        }
        totals
    }

    #[cfg(test)]
    pub(crate) fn permute_components(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (dst, src) in out
            .values
            .chunks_exact_mut(self.components)
            .zip(self.values.chunks_exact(self.components))
        {
            for (k, &p) in perm.iter().enumerate() {
                dst[k] = src[p];
            }
        }
        out
    }
}

/// Per-band mixture posteriors, each array laid out `[j * components + k]`:
/// Dirichlet concentrations `alpha` and Normal-Gamma `(m, beta, c, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMixturePosterior {
    pub bands: usize,
    pub components: usize,
    pub alpha: Vec<f64>,
    pub m: Vec<f64>,
    pub beta: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl BandMixturePosterior {
    /// All cells at the prior, with `d` set to the given rate.
    pub fn from_prior(bands: usize, hyper: &Hyperparams, d: f64) -> Self {
        let n = bands * hyper.components;
        Self {
            bands,
            components: hyper.components,
            alpha: vec![hyper.alpha0; n],
            m: vec![hyper.m0; n],
            beta: vec![hyper.beta0; n],
            c: vec![hyper.c0; n],
            d: vec![d; n],
        }
    }

    pub fn expected_tau(&self, cell: usize) -> f64 {
        self.c[cell] / self.d[cell]
    }

    pub fn expected_ln_tau(&self, cell: usize) -> f64 {
        crate::special::digamma(self.c[cell]) - self.d[cell].ln()
    }

    /// ⟨ln π_jk⟩ for every cell.
    pub fn expected_ln_pi(&self) -> Vec<f64> {
        self.alpha
            .chunks_exact(self.components)
            .flat_map(crate::special::dirichlet_expected_log)
            .collect()
    }

    /// Posterior mean mixing weights α_jk / Σ_k α_jk.
    pub fn mean_pi(&self) -> Vec<f64> {
        self.alpha
            .chunks_exact(self.components)
            .flat_map(|a| {
                let total: f64 = a.iter().sum();
                a.iter().map(move |v| v / total)
            })
            .collect()
    }
}

/// Gamma(eta, lambda) posterior of the shared rate d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalScalePosterior {
    pub eta: f64,
    pub lambda: f64,
}

impl GlobalScalePosterior {
    pub fn from_prior(hyper: &Hyperparams) -> Self {
        Self {
            eta: hyper.eta0,
            lambda: hyper.lambda0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.eta / self.lambda
    }

    pub fn expected_ln(&self) -> f64 {
        crate::special::digamma(self.eta) - self.lambda.ln()
    }
}

#[derive(Debug, Clone)]
pub struct NoiseState {
    pub responsibilities: Responsibilities,
    pub mixture: BandMixturePosterior,
    pub scale: GlobalScalePosterior,
}

/// Independent Gaussian posteriors over the rows of one factor matrix.
///
/// `cov` stores one R×R covariance per row, contiguous and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGaussians {
    pub mean: DMatrix<f64>,
    pub cov: Vec<f64>,
}

impl RowGaussians {
    pub fn new(mean: DMatrix<f64>, cov: Vec<f64>) -> Result<Self> {
        let r = mean.ncols();
        if cov.len() != mean.nrows() * r * r {
            return Err(Error::Dimension(format!(
                "{} rows of rank {r} need {} covariance entries, got {}",
                mean.nrows(),
                mean.nrows() * r * r,
                cov.len()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Means with isotropic covariance `scale * I` on every row.
    pub fn isotropic(mean: DMatrix<f64>, scale: f64) -> Self {
        let r = mean.ncols();
        let mut block = vec![0.0; r * r];
        for l in 0..r {
            block[l * r + l] = scale;
        }
        let cov = block.repeat(mean.nrows());
        Self { mean, cov }
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn rank(&self) -> usize {
        self.mean.ncols()
    }

    pub fn cov_block(&self, i: usize) -> &[f64] {
        let r2 = self.rank() * self.rank();
        &self.cov[i * r2..(i + 1) * r2]
    }

    pub fn covariance(&self, i: usize) -> DMatrix<f64> {
        let r = self.rank();
        DMatrix::from_row_slice(r, r, self.cov_block(i))
    }

    /// ⟨x_iᵀ x_i⟩ = μ_iᵀμ_i + Σ_i.
    pub fn second_moment(&self, i: usize) -> DMatrix<f64> {
        let row = self.mean.row(i);
        row.transpose() * row + self.covariance(i)
    }

    /// Σ_i ⟨x_il²⟩ for every column l.
    pub fn column_second_moments(&self) -> DVector<f64> {
        let r = self.rank();
        DVector::from_fn(r, |l, _| {
            (0..self.rows())
                .map(|i| self.mean[(i, l)].powi(2) + self.cov_block(i)[l * r + l])
                .sum()
        })
    }

    pub(crate) fn keep_columns(&self, keep: &[usize]) -> Self {
        let r = self.rank();
        let nr = keep.len();
        let mean = self.mean.select_columns(keep);
        let mut cov = Vec::with_capacity(self.rows() * nr * nr);
        for i in 0..self.rows() {
            let block = self.cov_block(i);
            for &a in keep {
                for &b in keep {
                    cov.push(block[a * r + b]);
                }
            }
        }
        Self { mean, cov }
    }
}

/// Posteriors over U (N×R) and V (B×R).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub u: RowGaussians,
    pub v: RowGaussians,
}

impl FactorState {
    pub fn new(u: RowGaussians, v: RowGaussians) -> Result<Self> {
        if u.rank() != v.rank() {
            return Err(Error::Dimension(format!(
                "U rank {} differs from V rank {}",
                u.rank(),
                v.rank()
            )));
        }
        Ok(Self { u, v })
    }

    pub fn active_rank(&self) -> usize {
        self.u.rank()
    }

    /// E[U] E[V]ᵀ.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.u.mean * self.v.mean.transpose()
    }
}

/// Gamma(xi_l, delta_l) posteriors of the ARD precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdPosterior {
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
}

impl ArdPosterior {
    pub fn expected_gamma(&self) -> Vec<f64> {
        self.xi
            .iter()
            .zip(&self.delta)
            .map(|(x, d)| x / d)
            .collect()
    }

    pub fn expected_ln_gamma(&self) -> Vec<f64> {
        self.xi
            .iter()
            .zip(&self.delta)
            .map(|(x, d)| crate::special::digamma(*x) - d.ln())
            .collect()
    }
}

/// First and second moments of the residual Y − u_i·v_jᵀ under q(U)q(V).
///
/// `mean[i,j] = Y_ij − ⟨u_i⟩⟨v_j⟩ᵀ`; `var[i,j] = Var[u_i v_jᵀ]`, so that
/// ⟨(Y_ij − u_i v_jᵀ)²⟩ = mean² + var.
#[derive(Debug, Clone)]
pub struct Residuals {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

impl Residuals {
    pub fn new(y: &ObservationMatrix, factors: &FactorState) -> Self {
        let mean = y.values() - factors.reconstruction();
        let var = product_variance(&factors.u, &factors.v);
        Self { mean, var }
    }

    pub fn second_moment(&self, i: usize, j: usize) -> f64 {
        self.mean[(i, j)].powi(2) + self.var[(i, j)]
    }
}

/// Var[u_i v_jᵀ] = ⟨u_i⟩Σ_v⟨u_i⟩ᵀ + ⟨v_j⟩Σ_u⟨v_j⟩ᵀ + tr(Σ_u Σ_v), as one
/// matrix product over flattened R×R blocks.
fn product_variance(u: &RowGaussians, v: &RowGaussians) -> DMatrix<f64> {
    let r = u.rank();
    let r2 = r * r;
    let left = DMatrix::from_fn(u.rows(), 2 * r2, |i, c| {
        if c < r2 {
            u.mean[(i, c / r)] * u.mean[(i, c % r)]
        } else {
            u.cov_block(i)[c - r2]
        }
    });
    let right = DMatrix::from_fn(2 * r2, v.rows(), |c, j| {
        if c < r2 {
            v.cov_block(j)[c]
        } else {
            let (a, b) = ((c - r2) / r, (c - r2) % r);
            v.mean[(j, a)] * v.mean[(j, b)] + v.cov_block(j)[c - r2]
        }
    });
    let mut var = left * right;
    var.apply(|x| *x = x.max(0.0));
    var
}
