//! Ground-truth MoLR-MoG distribution: `K` orthonormal bases `A_k`, each
//! carrying a latent Gaussian mixture with low-rank covariances `U Uᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::Coefficients;

const ORTHONORMAL_TOL: f64 = 1e-10;
const WEIGHT_TOL: f64 = 1e-12;

/// Default inflation for [`MolrMogModel::support_radius`]: at least three
/// standard deviations.
pub const SUPPORT_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MogComponent {
    pub pi: f64,
    pub mu: DVector<f64>,
    /// Covariance factor; the component covariance is `u uᵀ`.
    pub u: DMatrix<f64>,
}

impl MogComponent {
    pub fn new(pi: f64, mu: DVector<f64>, u: DMatrix<f64>) -> Self {
        Self { pi, mu, u }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.u * self.u.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    /// `D × d` basis with orthonormal columns.
    pub basis: DMatrix<f64>,
    pub components: Vec<MogComponent>,
}

impl Subspace {
    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.pi).collect()
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch(format!(
                "ambient vector has length {}, basis has {} rows",
                x.len(),
                self.ambient_dim()
            )));
        }
        Ok(self.basis.tr_mul(x))
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "latent vector has length {}, basis has {} columns",
                z.len(),
                self.latent_dim()
            )));
        }
        Ok(&self.basis * z)
    }

    /// Mean and covariance of the single Gaussian matching the first two
    /// moments of the noised latent mixture at coefficients `coef`.
    pub fn moment_match(&self, coef: Coefficients) -> EquivalentGaussian {
        let d = self.latent_dim();
        let s = coef.s;
        let mut mean = DVector::zeros(d);
        for c in &self.components {
            mean.axpy(c.pi * s, &c.mu, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        for c in &self.components {
            let dev = &c.mu * s - &mean;
            cov += (c.covariance() * (s * s) + &dev * dev.transpose()) * c.pi;
        }
        for i in 0..d {
            cov[(i, i)] += coef.gamma2();
        }
        EquivalentGaussian { mean, cov }
    }

    fn validate(&self, index: usize, ambient_dim: usize) -> Result<()> {
        let d = self.latent_dim();
        if self.ambient_dim() != ambient_dim {
            return Err(Error::DimensionMismatch(format!(
                "subspace {index}: basis has {} rows, model dimension is {ambient_dim}",
                self.ambient_dim()
            )));
        }
        if d == 0 || d > ambient_dim {
            return Err(Error::DimensionMismatch(format!(
                "subspace {index}: latent dimension {d} not in 1..={ambient_dim}"
            )));
        }
        let gram = self.basis.tr_mul(&self.basis);
        let deviation = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if !(deviation <= ORTHONORMAL_TOL) {
            return Err(Error::NonOrthonormalBasis {
                subspace: index,
                deviation,
            });
        }
        if self.components.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "subspace {index} has no components"
            )));
        }
        for (l, c) in self.components.iter().enumerate() {
            if c.mu.len() != d || c.u.nrows() != d || c.u.ncols() > d {
                return Err(Error::DimensionMismatch(format!(
                    "subspace {index} component {l}: mean length {}, factor {}x{}, latent dimension {d}",
                    c.mu.len(),
                    c.u.nrows(),
                    c.u.ncols()
                )));
            }
            if !(c.pi > 0.0) {
                return Err(Error::WeightsNotNormalized {
                    subspace: index,
                    sum: f64::NAN,
                });
            }
        }
        let sum: f64 = self.components.iter().map(|c| c.pi).sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::WeightsNotNormalized {
                subspace: index,
                sum,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl EquivalentGaussian {
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .expect("moment-matched covariance is positive definite for gamma > 0");
        let diff = x - &self.mean;
        let sol = chol.solve(&diff);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (diff.dot(&sol) + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: DVector<f64>,
    pub latent: DVector<f64>,
    pub k: usize,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolrMogModel {
    pub ambient_dim: usize,
    pub subspaces: Vec<Subspace>,
}

impl MolrMogModel {
    pub fn new(ambient_dim: usize, subspaces: Vec<Subspace>) -> Result<Self> {
        let model = Self {
            ambient_dim,
            subspaces,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subspaces.is_empty() {
            return Err(Error::DimensionMismatch("model needs at least one subspace".into()));
        }
        for (k, sub) in self.subspaces.iter().enumerate() {
            sub.validate(k, self.ambient_dim)?;
        }
        Ok(())
    }

    pub fn num_subspaces(&self) -> usize {
        self.subspaces.len()
    }

    /// Draws `n` noiseless labeled samples. Component `(k, l)` is chosen with
    /// probability `π_{k,l} / K`.
    pub fn sample_data(&self, n: usize, seed: u64) -> Vec<LabeledSample> {
        let k_count = self.subspaces.len();
        rng::par_shards(n, seed, |range, rng| {
            range.map(|_| self.draw_one(k_count, rng)).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }

    fn draw_one(&self, k_count: usize, rng: &mut Rng) -> LabeledSample {
        let k = rng.random_range(0..k_count);
        let sub = &self.subspaces[k];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut l = sub.components.len() - 1;
        for (i, c) in sub.components.iter().enumerate() {
            acc += c.pi;
            if u < acc {
                l = i;
                break;
            }
        }
        let c = &sub.components[l];
        let z = DVector::from_iterator(c.u.ncols(), (0..c.u.ncols()).map(|_| rng.sample(StandardNormal)));
        let latent = &c.mu + &c.u * z;
        let x = &sub.basis * &latent;
        LabeledSample { x, latent, k, l }
    }

    /// Radius `R` with `Pr(‖x‖ ≤ R) ≥ mass` under the noiseless data law.
    ///
    /// Each component is covered by `‖A μ‖ + z · σ_max(U)` where `z` is the
    /// chi quantile of the factor rank at `mass`, floored at
    /// [`SUPPORT_SIGMAS`]; covering every component covers the mixture.
    pub fn support_radius(&self, mass: f64) -> Result<f64> {
        if !(mass > 0.0 && mass < 1.0) {
            return Err(Error::InvalidArgument(format!("mass {mass} not in (0, 1)")));
        }
        let mut radius = 0.0f64;
        for sub in &self.subspaces {
            for c in &sub.components {
                let center = (&sub.basis * &c.mu).norm();
                let spread = crate::linalg::spectral_norm(&c.u);
                let z = if c.u.ncols() == 0 || spread == 0.0 {
                    0.0
                } else {
                    let chi2 = ChiSquared::new(c.u.ncols() as f64).expect("positive dof");
                    chi2.inverse_cdf(mass).sqrt().max(SUPPORT_SIGMAS)
                };
                radius = radius.max(center + z * spread);
            }
        }
        Ok(radius)
    }
}

/// Noises `x0` to time-`t` coefficients: `s x0 + γ z`. With `zero_noise` the
/// mean `s x0` is returned.
pub fn forward_noise(x0: &DVector<f64>, coef: Coefficients, rng: &mut Rng, zero_noise: bool) -> DVector<f64> {
    if zero_noise {
        return x0 * coef.s;
    }
    DVector::from_iterator(
        x0.len(),
        x0.iter()
            .map(|&v| coef.s * v + coef.gamma * rng.sample::<f64, _>(StandardNormal)),
    )
}

/// Noises a batch of points with per-shard streams.
pub fn forward_noise_batch(xs: &[DVector<f64>], coef: Coefficients, seed: u64) -> Vec<DVector<f64>> {
    rng::par_shards(xs.len(), seed, |range, rng| {
        range
            .map(|i| forward_noise(&xs[i], coef, rng, false))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Random `D × d` orthonormal basis from a seeded Gaussian matrix.
pub fn random_basis(ambient_dim: usize, latent_dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, 0);
    let g = DMatrix::from_fn(ambient_dim, latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    // Gram-Schmidt refinement pass pulls AᵀA to machine precision.
    let mut basis = q;
    for j in 0..latent_dim {
        for i in 0..j {
            let proj = basis.column(i).dot(&basis.column(j));
            let ci = basis.column(i).into_owned();
            basis.column_mut(j).axpy(-proj, &ci, 1.0);
        }
        let n = basis.column(j).norm();
        basis.column_mut(j).scale_mut(1.0 / n);
    }
    basis
}

/// `D × d` basis embedding the latent coordinates into the first `d` axes.
pub fn axis_basis(ambient_dim: usize, latent_dim: usize) -> DMatrix<f64> {
    DMatrix::identity(ambient_dim, latent_dim)
}

// ---- configuration ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub pi: f64,
    pub mu: Vec<f64>,
    /// Rows of the factor `U`; omitted or empty means a point mass.
    #[serde(rename = "U", default)]
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisSpec {
    Explicit {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
    },
    Seeded {
        #[serde(rename = "A_seed")]
        a_seed: u64,
    },
    Axes {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSpec {
    pub d: usize,
    #[serde(flatten)]
    pub basis: BasisSpec,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "D")]
    pub ambient_dim: usize,
    pub subspaces: Vec<SubspaceSpec>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<MolrMogModel> {
        let big_d = self.ambient_dim;
        let mut subspaces = Vec::with_capacity(self.subspaces.len());
        for (k, spec) in self.subspaces.iter().enumerate() {
            let d = spec.d;
            if d == 0 || d > big_d {
                return Err(Error::DimensionMismatch(format!(
                    "subspace {k}: latent dimension {d} not in 1..={big_d}"
                )));
            }
            let basis = match &spec.basis {
                BasisSpec::Explicit { a } => matrix_from_rows(a, big_d, d, &format!("subspace {k} basis"))?,
                BasisSpec::Seeded { a_seed } => random_basis(big_d, d, *a_seed),
                BasisSpec::Axes {} => axis_basis(big_d, d),
            };
            let mut components = Vec::with_capacity(spec.components.len());
            for (l, c) in spec.components.iter().enumerate() {
                if c.mu.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "subspace {k} component {l}: mean has length {}, expected {d}",
                        c.mu.len()
                    )));
                }
                let u = if c.u.is_empty() {
                    DMatrix::zeros(d, 0)
                } else {
                    let cols = c.u[0].len();
                    matrix_from_rows(&c.u, d, cols, &format!("subspace {k} component {l} factor"))?
                };
                components.push(MogComponent::new(c.pi, DVector::from_vec(c.mu.clone()), u));
            }
            subspaces.push(Subspace { basis, components });
        }
        MolrMogModel::new(big_d, subspaces)
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {nrows}x{ncols} rows"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
