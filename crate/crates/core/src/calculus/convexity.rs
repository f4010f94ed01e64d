//! Closed-form strong-convexity constants.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::schedule::Coefficients;
use crate::score::LatentParams;

/// Spectrum of `M Mᵀ` for `M = (aᵀb) I + b aᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MmtopSpectrum {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `(aᵀb)²`, with multiplicity `n − 2`.
    pub bulk: f64,
    /// All `n` eigenvalues in ascending order.
    pub spectrum: Vec<f64>,
}

/// Closed-form spectrum of `M Mᵀ`.
///
/// On `span{a, b}` the two eigenvalues are
/// `μ₁,₂ = [4c² + m² ± m √(8c² + m²)] / 2` with `c = aᵀb`, `m = ‖a‖‖b‖`;
/// every direction orthogonal to both gives `c²`. Since `μ₁μ₂ = 4c⁴` the
/// smaller root is evaluated as `4c⁴/μ₁`.
pub fn mmtop_eigs(a: &DVector<f64>, b: &DVector<f64>) -> Result<MmtopSpectrum> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::DimensionMismatch(format!("a has length {n}, b has length {}", b.len())));
    }
    if n < 2 {
        return Err(Error::DimensionMismatch(format!("need length at least 2, got {n}")));
    }
    let c = a.dot(b);
    let c2 = c * c;
    let m = a.norm() * b.norm();
    let mu1 = (4.0 * c2 + m * m + m * (8.0 * c2 + m * m).sqrt()) / 2.0;
    let mu2 = if mu1 > 0.0 { 4.0 * c2 * c2 / mu1 } else { 0.0 };
    let mut spectrum = vec![c2; n - 2];
    spectrum.push(mu1);
    spectrum.push(mu2);
    spectrum.sort_by(f64::total_cmp);
    Ok(MmtopSpectrum {
        lambda_min: mu2,
        lambda_max: mu1,
        bulk: c2,
        spectrum,
    })
}

/// `M = (aᵀb) I + b aᵀ`, for dense cross-checks.
pub fn mmtop_matrix(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::identity(a.len(), a.len()) * a.dot(b) + b * a.transpose()
}

/// `s²/(s²+γ²)²`, the curvature of the mean block.
pub fn mean_curvature(coef: Coefficients) -> f64 {
    let s2 = coef.s * coef.s;
    s2 / (s2 + coef.gamma2()).powi(2)
}

/// Local strong-convexity constant of the symmetric two-mode loss:
/// `min{ s²/(s²+γ²)², λ_min(M Mᵀ) }` with `M` built from `(u, μ)`.
pub fn alpha_symmetric(mu: &DVector<f64>, u: &DMatrix<f64>, coef: Coefficients) -> Result<f64> {
    if u.ncols() != 1 {
        return Err(Error::RankNotOne(u.ncols()));
    }
    if !(coef.gamma > 0.0) {
        return Err(Error::SingularNoise(coef.gamma));
    }
    let spec = mmtop_eigs(&u.column(0).into_owned(), mu)?;
    Ok(mean_curvature(coef).min(spec.lambda_min))
}

/// The two arguments of the asymmetric constant `α′ = min{λ₁, λ₂}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymmetricAlpha {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

/// Strong-convexity constant of one subspace's mixture, weighting every
/// component block by its mixing weight:
/// `λ₁ = min_l π_l s²/(s²+γ²)²`, `λ₂ = min_l π_l λ_min(M_l M_lᵀ)`.
pub fn alpha_asymmetric(params: &LatentParams, pis: &[f64], coef: Coefficients) -> Result<AsymmetricAlpha> {
    if pis.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} components",
            pis.len(),
            params.len()
        )));
    }
    if !(coef.gamma > 0.0) {
        return Err(Error::SingularNoise(coef.gamma));
    }
    let base = mean_curvature(coef);
    let mut lambda1 = f64::INFINITY;
    let mut lambda2 = f64::INFINITY;
    for (c, &pi) in params.components.iter().zip(pis) {
        if c.u.ncols() != 1 {
            return Err(Error::RankNotOne(c.u.ncols()));
        }
        lambda1 = lambda1.min(pi * base);
        lambda2 = lambda2.min(pi * mmtop_eigs(&c.u.column(0).into_owned(), &c.mu)?.lambda_min);
    }
    Ok(AsymmetricAlpha {
        lambda1,
        lambda2,
        alpha: lambda1.min(lambda2),
    })
}
