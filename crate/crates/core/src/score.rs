//! Exact score functions of noised low-rank Gaussian mixtures.
//!
//! A noised component has mean `s μ` and covariance `Σ = s² U Uᵀ + γ² I`.
//! Everything is evaluated through the `r × r` capacitance matrix
//! `C = γ² I + s² UᵀU`:
//!
//! ```text
//! Σ⁻¹ v      = (v − s² U C⁻¹ Uᵀ v) / γ²
//! log det Σ  = 2 (d − r) log γ + log det C
//! ```
//!
//! so no `d × d` inverse is ever formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::Coefficients;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log Σ exp(v)` with the max shift.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized weights `exp(v_i) / Σ exp(v_j)`. Entries more than ~745 below
/// the max underflow to exactly zero.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::SingularNoise(gamma))
    }
}

/// One Gaussian component at a fixed noise level.
#[derive(Debug, Clone)]
pub struct NoisedComponent {
    pub s: f64,
    pub gamma: f64,
    /// Noised mean `s μ`.
    pub mean: DVector<f64>,
    pub u: DMatrix<f64>,
    capacitance: Option<Cholesky<f64, Dyn>>,
    log_det: f64,
}

impl NoisedComponent {
    pub fn new(coef: Coefficients, mu: &DVector<f64>, u: &DMatrix<f64>) -> Result<Self> {
        check_gamma(coef.gamma)?;
        if u.nrows() != mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "factor has {} rows, mean has length {}",
                u.nrows(),
                mu.len()
            )));
        }
        let d = mu.len();
        let r = u.ncols();
        let g2 = coef.gamma2();
        let (capacitance, log_det_c) = if r == 0 {
            (None, 0.0)
        } else {
            let mut c = u.tr_mul(u) * (coef.s * coef.s);
            for i in 0..r {
                c[(i, i)] += g2;
            }
            let chol = c
                .cholesky()
                .ok_or_else(|| Error::SingularNoise(coef.gamma))?;
            let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            (Some(chol), ld)
        };
        let log_det = (d as f64 - r as f64) * g2.ln() + log_det_c;
        Ok(Self {
            s: coef.s,
            gamma: coef.gamma,
            mean: mu * coef.s,
            u: u.clone(),
            capacitance,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Σ⁻¹ v`.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let g2 = self.gamma * self.gamma;
        match &self.capacitance {
            None => v / g2,
            Some(chol) => {
                let w = chol.solve(&self.u.tr_mul(v));
                (v - &self.u * w * (self.s * self.s)) / g2
            }
        }
    }

    /// Dense `Σ⁻¹`, for Jacobian assembly at small `d`.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let g2 = self.gamma * self.gamma;
        match &self.capacitance {
            None => DMatrix::identity(d, d) / g2,
            Some(chol) => {
                let w = chol.solve(&self.u.transpose());
                (DMatrix::identity(d, d) - &self.u * w * (self.s * self.s)) / g2
            }
        }
    }

    /// Dense `Σ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        &self.u * self.u.transpose() * (self.s * self.s) + DMatrix::identity(d, d) * (self.gamma * self.gamma)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let quad = diff.dot(&self.precision_apply(&diff));
        -0.5 * (quad + self.log_det + self.dim() as f64 * LN_2PI)
    }

    /// Whitened residual `γ² Σ⁻¹ (x − s μ)`.
    pub fn delta(&self, x: &DVector<f64>) -> DVector<f64> {
        self.precision_apply(&(x - &self.mean)) * (self.gamma * self.gamma)
    }

    /// Residual in the projection form
    /// `x − sμ − s²/(s²+γ²) U Uᵀ (x − sμ)`, exact only when `UᵀU = I`.
    pub fn delta_projection(&self, x: &DVector<f64>) -> DVector<f64> {
        let diff = x - &self.mean;
        let s2 = self.s * self.s;
        let shrink = s2 / (s2 + self.gamma * self.gamma);
        let proj = &self.u * self.u.tr_mul(&diff);
        diff - proj * shrink
    }

    /// One draw `sμ + sUz + γξ` with standard normal `z`, `ξ`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.u.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.u * z * self.s + xi * self.gamma
    }

    /// Component score `−Σ⁻¹ (x − s μ)`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.precision_apply(&(x - &self.mean))
    }
}

/// Weighted mixture of noised components.
#[derive(Debug, Clone)]
pub struct NoisedMixture {
    pub log_weights: Vec<f64>,
    pub components: Vec<NoisedComponent>,
}

/// Per-point mixture evaluation reused by scores and Jacobians.
#[derive(Debug, Clone)]
pub struct MixtureEval {
    pub log_density: f64,
    pub responsibilities: Vec<f64>,
    pub component_scores: Vec<DVector<f64>>,
    pub score: DVector<f64>,
}

impl NoisedMixture {
    pub fn new(weights: &[f64], components: Vec<NoisedComponent>) -> Self {
        Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            components,
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    fn log_joint(&self, x: &DVector<f64>) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(x))
            .collect()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        log_sum_exp(&self.log_joint(x))
    }

    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        softmax(&self.log_joint(x))
    }

    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        self.evaluate(x).score
    }

    pub fn evaluate(&self, x: &DVector<f64>) -> MixtureEval {
        let log_joint = self.log_joint(x);
        let log_density = log_sum_exp(&log_joint);
        let responsibilities = softmax(&log_joint);
        let component_scores: Vec<DVector<f64>> = self.components.iter().map(|c| c.score(x)).collect();
        let mut score = DVector::zeros(x.len());
        for (r, g) in responsibilities.iter().zip(&component_scores) {
            if *r != 0.0 {
                score.axpy(*r, g, 1.0);
            }
        }
        MixtureEval {
            log_density,
            responsibilities,
            component_scores,
            score,
        }
    }

    /// Draws `n` labelled points `(l, x)` with `x = sμ_l + sU_l z + γξ`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<(usize, DVector<f64>)> {
        let weights: Vec<f64> = self.log_weights.iter().map(|lw| lw.exp()).collect();
        let pick = WeightedIndex::new(&weights).expect("mixture weights are positive");
        crate::rng::par_shards(n, seed, |range, rng| {
            range
                .map(|_| {
                    let l = pick.sample(rng);
                    (l, self.components[l].draw(rng))
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }

    /// Mean and covariance of the whole mixture.
    pub fn moments(&self) -> crate::model::EquivalentGaussian {
        let d = self.dim();
        let weights: Vec<f64> = self.log_weights.iter().map(|lw| lw.exp()).collect();
        let mut mean = DVector::zeros(d);
        for (w, c) in weights.iter().zip(&self.components) {
            mean.axpy(*w, &c.mean, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (w, c) in weights.iter().zip(&self.components) {
            let dev = &c.mean - &mean;
            cov += (c.covariance() + &dev * dev.transpose()) * *w;
        }
        crate::model::EquivalentGaussian { mean, cov }
    }

    /// Index of the most responsible component.
    pub fn assign(&self, x: &DVector<f64>) -> usize {
        let lj = self.log_joint(x);
        lj.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Mean and factor of one latent component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentParams {
    pub mu: DVector<f64>,
    pub u: DMatrix<f64>,
}

/// Trainable parameters of one subspace expert.
///
/// Flattened order: every `μ_l` in component order, then every `U_l` in
/// component order, each `U_l` column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentParams {
    pub components: Vec<ComponentParams>,
}

impl LatentParams {
    pub fn new(components: Vec<ComponentParams>) -> Result<Self> {
        let p = Self { components };
        p.validate()?;
        Ok(p)
    }

    pub fn from_subspace(sub: &crate::model::Subspace) -> Self {
        Self {
            components: sub
                .components
                .iter()
                .map(|c| ComponentParams {
                    mu: c.mu.clone(),
                    u: c.u.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.components.first() else {
            return Err(Error::DimensionMismatch("no components".into()));
        };
        let d = first.mu.len();
        for c in &self.components {
            if c.mu.len() != d || c.u.nrows() != d {
                return Err(Error::DimensionMismatch(
                    "inconsistent component dimensions".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mu.len()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.mu.len() + c.u.len())
            .sum()
    }

    /// Offset of `μ_l` in the flat vector.
    pub fn mu_offset(&self, l: usize) -> usize {
        self.components[..l].iter().map(|c| c.mu.len()).sum()
    }

    /// Offset of `U_l` in the flat vector.
    pub fn u_offset(&self, l: usize) -> usize {
        let mu_total: usize = self.components.iter().map(|c| c.mu.len()).sum();
        mu_total + self.components[..l].iter().map(|c| c.u.len()).sum::<usize>()
    }

    /// Flat indices of all parameters of component `l`.
    pub fn component_indices(&self, l: usize) -> Vec<usize> {
        let c = &self.components[l];
        let mu0 = self.mu_offset(l);
        let u0 = self.u_offset(l);
        (mu0..mu0 + c.mu.len()).chain(u0..u0 + c.u.len()).collect()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for c in &self.components {
            out.extend(c.mu.iter().copied());
        }
        for c in &self.components {
            out.extend(c.u.as_slice().iter().copied());
        }
        DVector::from_vec(out)
    }

    pub fn unflatten(&self, v: &DVector<f64>) -> Self {
        assert_eq!(v.len(), self.n_params(), "flat parameter length");
        let mut pos = 0;
        let mut comps = self.components.clone();
        for c in comps.iter_mut() {
            let n = c.mu.len();
            c.mu.copy_from_slice(&v.as_slice()[pos..pos + n]);
            pos += n;
        }
        for c in comps.iter_mut() {
            let n = c.u.len();
            c.u.as_mut_slice().copy_from_slice(&v.as_slice()[pos..pos + n]);
            pos += n;
        }
        Self { components: comps }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.flatten() - other.flatten()).norm()
    }

    pub fn mixture(&self, weights: &[f64], coef: Coefficients) -> Result<NoisedMixture> {
        if weights.len() != self.components.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} components",
                weights.len(),
                self.components.len()
            )));
        }
        let comps = self
            .components
            .iter()
            .map(|c| NoisedComponent::new(coef, &c.mu, &c.u))
            .collect::<Result<Vec<_>>>()?;
        Ok(NoisedMixture::new(weights, comps))
    }
}

/// How the trainable parameters generate mixture components.
#[derive(Debug, Clone, PartialEq)]
pub enum Tying {
    /// One free `(μ_l, U_l)` per component with fixed weights `π_l`.
    Free(Vec<f64>),
    /// A single `(μ, U)` generating the pair `±μ` with shared `U` and weights ½.
    Symmetric,
}

/// A subspace score model: parameters plus the way they generate the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentExpert {
    pub tying: Tying,
    pub params: LatentParams,
}

impl LatentExpert {
    pub fn free(weights: Vec<f64>, params: LatentParams) -> Result<Self> {
        if weights.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} components",
                weights.len(),
                params.len()
            )));
        }
        Ok(Self {
            tying: Tying::Free(weights),
            params,
        })
    }

    pub fn symmetric(mu: DVector<f64>, u: DMatrix<f64>) -> Result<Self> {
        let params = LatentParams::new(vec![ComponentParams { mu, u }])?;
        Ok(Self {
            tying: Tying::Symmetric,
            params,
        })
    }

    pub fn from_subspace(sub: &crate::model::Subspace) -> Self {
        Self {
            tying: Tying::Free(sub.weights()),
            params: LatentParams::from_subspace(sub),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn flatten(&self) -> DVector<f64> {
        self.params.flatten()
    }

    pub fn with_flat(&self, v: &DVector<f64>) -> Self {
        Self {
            tying: self.tying.clone(),
            params: self.params.unflatten(v),
        }
    }

    /// Mixture weights of the generated components.
    pub fn weights(&self) -> Vec<f64> {
        match &self.tying {
            Tying::Free(w) => w.clone(),
            Tying::Symmetric => vec![0.5, 0.5],
        }
    }

    /// Generated components, in mixture order.
    pub fn expanded(&self) -> LatentParams {
        match self.tying {
            Tying::Free(_) => self.params.clone(),
            Tying::Symmetric => {
                let c = &self.params.components[0];
                LatentParams {
                    components: vec![
                        c.clone(),
                        ComponentParams {
                            mu: -&c.mu,
                            u: c.u.clone(),
                        },
                    ],
                }
            }
        }
    }

    pub fn mixture(&self, coef: Coefficients) -> Result<NoisedMixture> {
        self.expanded().mixture(&self.weights(), coef)
    }

    pub fn score(&self, coef: Coefficients, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.mixture(coef)?.score(x))
    }
}

// ---- operation-level entry points ----

pub fn log_density(coef: Coefficients, mu: &DVector<f64>, u: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    Ok(NoisedComponent::new(coef, mu, u)?.log_density(x))
}

pub fn delta_vec(coef: Coefficients, mu: &DVector<f64>, u: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(NoisedComponent::new(coef, mu, u)?.delta(x))
}

pub fn responsibilities(params: &LatentParams, weights: &[f64], coef: Coefficients, x: &DVector<f64>) -> Result<Vec<f64>> {
    Ok(params.mixture(weights, coef)?.responsibilities(x))
}

/// `−(1/γ²) Σ_l r_l(x) δ_l(x)`.
pub fn latent_score(params: &LatentParams, weights: &[f64], coef: Coefficients, x: &DVector<f64>) -> Result<DVector<f64>> {
    let mix = params.mixture(weights, coef)?;
    let r = mix.responsibilities(x);
    let mut acc = DVector::zeros(x.len());
    for (rl, c) in r.iter().zip(&mix.components) {
        if *rl != 0.0 {
            acc.axpy(*rl, &c.delta(x), 1.0);
        }
    }
    Ok(acc / -coef.gamma2())
}

/// Score of `½ N(sμ, Σ) + ½ N(−sμ, Σ)` with shared `Σ = s² U Uᵀ + γ² I`.
pub fn symmetric_score(mu: &DVector<f64>, u: &DMatrix<f64>, coef: Coefficients, x: &DVector<f64>) -> Result<DVector<f64>> {
    let plus = NoisedComponent::new(coef, mu, u)?;
    let minus = NoisedComponent::new(coef, &-mu, u)?;
    // residuals at the + and − peaks
    let eps = plus.delta(x);
    let delta_prime = minus.delta(x);
    let g2 = coef.gamma2();
    // a = log N₊(x) − log N₋(x); the log-determinants cancel
    let a = 0.5 * ((x - &minus.mean).dot(&delta_prime) - (x - &plus.mean).dot(&eps)) / g2;
    // logistic form keeps r₊(−x) = r₋(x) exactly
    let r_plus = 1.0 / (1.0 + (-a).exp());
    let r_minus = 1.0 / (1.0 + a.exp());
    Ok((eps * r_plus + delta_prime * r_minus) / -g2)
}

/// `∇ log p_t(x)` of the full ambient mixture.
pub fn ambient_score(model: &crate::model::MolrMogModel, coef: Coefficients, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.ambient_dim {
        return Err(Error::DimensionMismatch(format!(
            "ambient vector has length {}, model dimension is {}",
            x.len(),
            model.ambient_dim
        )));
    }
    Ok(ambient_mixture(model, coef)?.score(x))
}

/// The ambient mixture `Σ_k (1/K) Σ_l π N(s A μ, s² (AU)(AU)ᵀ + γ² I)`.
pub fn ambient_mixture(model: &crate::model::MolrMogModel, coef: Coefficients) -> Result<NoisedMixture> {
    let k_count = model.subspaces.len() as f64;
    let mut weights = Vec::new();
    let mut comps = Vec::new();
    for sub in &model.subspaces {
        for c in &sub.components {
            weights.push(c.pi / k_count);
            let mu = &sub.basis * &c.mu;
            let u = &sub.basis * &c.u;
            comps.push(NoisedComponent::new(coef, &mu, &u)?);
        }
    }
    Ok(NoisedMixture::new(&weights, comps))
}

/// `∇ log p_t(x_t | x_0) = −(x_t − s x_0) / γ²`.
pub fn conditional_score(x_t: &DVector<f64>, x0: &DVector<f64>, coef: Coefficients) -> Result<DVector<f64>> {
    check_gamma(coef.gamma)?;
    Ok((x_t - x0 * coef.s) / -coef.gamma2())
}

/// Gaussian transition log-density `log N(x_t; s x_0, γ² I)`.
pub fn transition_log_density(x_t: &DVector<f64>, x0: &DVector<f64>, coef: Coefficients) -> Result<f64> {
    check_gamma(coef.gamma)?;
    let d = x_t.len() as f64;
    let diff = x_t - x0 * coef.s;
    Ok(-0.5 * (diff.norm_squared() / coef.gamma2() + d * coef.gamma2().ln() + d * LN_2PI))
}
