//! Monte Carlo assembly of `H = E[Jᵀ J]` with standard-error tracking.
//!
//! `J(x)` is the `d × p` Jacobian of the score, so `H` is `p × p` over the
//! flattened parameters. The loss Hessian is `2H`; reports carry that factor
//! as an explicit flag.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::convexity::{alpha_asymmetric, alpha_symmetric, mean_curvature};
use super::jacobian::{jacobian_fd, jacobian_simplified_sym, jacobian_terms_with};
use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_psd, spectral_norm, sym_eigenvalues, symmetrize};
use crate::rng;
use crate::schedule::Coefficients;
use crate::score::{LatentExpert, NoisedMixture, Tying};

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianMode {
    Fd,
    Simplified,
    Exact,
}

/// A named rectangular view of `H`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianBlock {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
    pub fro_norm: f64,
    /// Root-sum-square of the entrywise standard errors.
    pub stderr: f64,
    /// Smallest eigenvalue, for diagonal blocks only.
    pub lambda_min: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HessianReport {
    pub h: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub n_mc: usize,
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub blocks: Vec<HessianBlock>,
    /// Closed-form constant for the model's tying, when rank one.
    pub alpha_formula: Option<f64>,
    /// `s²/(s²+γ²)²`, the unweighted mean-block curvature.
    pub alpha_mean_block: f64,
    /// Largest canonical correlation between the mean and factor blocks.
    pub corr_r: f64,
    /// The loss Hessian equals `2H`.
    pub factor2: bool,
}

impl HessianReport {
    pub fn block(&self, name: &str) -> Option<&HessianBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_matrix(&self, b: &HessianBlock) -> DMatrix<f64> {
        self.h.view((b.row, b.col), (b.rows, b.cols)).into_owned()
    }

    /// Smallest eigenvalue of the loss Hessian `2H`.
    pub fn loss_lambda_min(&self) -> f64 {
        if self.factor2 { 2.0 * self.lambda_min } else { self.lambda_min }
    }
}

/// Running first and second moments of `JᵀJ`.
#[derive(Debug, Clone)]
pub(crate) struct OuterMoments {
    pub sum: DMatrix<f64>,
    pub sum_sq: DMatrix<f64>,
    pub n: usize,
}

impl OuterMoments {
    pub fn new(p: usize) -> Self {
        Self {
            sum: DMatrix::zeros(p, p),
            sum_sq: DMatrix::zeros(p, p),
            n: 0,
        }
    }

    pub fn push(&mut self, j: &DMatrix<f64>) {
        let outer = j.tr_mul(j);
        self.sum_sq += outer.component_mul(&outer);
        self.sum += outer;
        self.n += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
        self.n += other.n;
    }

    /// Mean and entrywise standard error of the mean.
    pub fn finish(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n as f64;
        let mean = &self.sum / n;
        let se = if self.n > 1 {
            (&self.sum_sq / n - mean.component_mul(&mean))
                .map(|v| (v.max(0.0) * n / (n - 1.0) / n).sqrt())
        } else {
            DMatrix::zeros(mean.nrows(), mean.ncols())
        };
        (symmetrize(&mean), se)
    }
}

fn jacobian_at(
    expert: &LatentExpert,
    mix: &NoisedMixture,
    coef: Coefficients,
    x: &DVector<f64>,
    mode: JacobianMode,
) -> Result<DMatrix<f64>> {
    match mode {
        JacobianMode::Exact => Ok(jacobian_terms_with(expert, mix, coef, x).exact()),
        JacobianMode::Fd => jacobian_fd(expert, coef, x, FD_STEP),
        JacobianMode::Simplified => match expert.tying {
            Tying::Symmetric => {
                let c = &expert.params.components[0];
                Ok(jacobian_simplified_sym(&c.mu, &c.u, coef, x)?.to_matrix())
            }
            Tying::Free(_) => Err(Error::InvalidArgument(
                "the simplified Jacobian is defined for the symmetric model only".into(),
            )),
        },
    }
}

/// `H = E[JᵀJ]` over the given samples.
pub fn hessian_from_samples(
    expert: &LatentExpert,
    coef: Coefficients,
    samples: &[DVector<f64>],
    mode: JacobianMode,
) -> Result<HessianReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mix = expert.mixture(coef)?;
    let p = expert.n_params();
    let partial = rng::par_chunks(samples, |chunk| -> Result<OuterMoments> {
        let mut acc = OuterMoments::new(p);
        for x in chunk {
            acc.push(&jacobian_at(expert, &mix, coef, x, mode)?);
        }
        Ok(acc)
    });
    let mut total = OuterMoments::new(p);
    for part in partial {
        total.merge(&part?);
    }
    let (h, se) = total.finish();
    build_report(expert, coef, h, se, samples.len())
}

/// Monte Carlo `H` with `n_mc` draws from the expert's own noised mixture.
pub fn hessian_empirical(
    expert: &LatentExpert,
    coef: Coefficients,
    n_mc: usize,
    seed: u64,
    mode: JacobianMode,
) -> Result<HessianReport> {
    let samples: Vec<DVector<f64>> = expert
        .mixture(coef)?
        .sample(n_mc, seed)
        .into_iter()
        .map(|(_, x)| x)
        .collect();
    hessian_from_samples(expert, coef, &samples, mode)
}

/// Index ranges of every component's mean and factor in flat order.
fn parameter_groups(expert: &LatentExpert) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let params = &expert.params;
    let mu = (0..params.len())
        .map(|l| (params.mu_offset(l), params.components[l].mu.len()))
        .collect();
    let u = (0..params.len())
        .map(|l| (params.u_offset(l), params.components[l].u.len()))
        .collect();
    (mu, u)
}

fn make_block(name: String, h: &DMatrix<f64>, se: &DMatrix<f64>, r: (usize, usize), c: (usize, usize)) -> HessianBlock {
    let view = h.view((r.0, c.0), (r.1, c.1)).into_owned();
    let se_view = se.view((r.0, c.0), (r.1, c.1));
    let lambda_min = if r == c && r.1 > 0 {
        sym_eigenvalues(&view).first().copied()
    } else {
        None
    };
    HessianBlock {
        name,
        row: r.0,
        col: c.0,
        rows: r.1,
        cols: c.1,
        fro_norm: view.norm(),
        stderr: se_view.norm(),
        lambda_min,
    }
}

fn build_report(
    expert: &LatentExpert,
    coef: Coefficients,
    h: DMatrix<f64>,
    se: DMatrix<f64>,
    n_mc: usize,
) -> Result<HessianReport> {
    let (mu_groups, u_groups) = parameter_groups(expert);
    let n = mu_groups.len();
    let mut blocks = Vec::new();
    let n_mu: usize = mu_groups.iter().map(|g| g.1).sum();
    let n_u: usize = u_groups.iter().map(|g| g.1).sum();
    blocks.push(make_block("mumu".into(), &h, &se, (0, n_mu), (0, n_mu)));
    blocks.push(make_block("UU".into(), &h, &se, (n_mu, n_u), (n_mu, n_u)));
    blocks.push(make_block("muU".into(), &h, &se, (0, n_mu), (n_mu, n_u)));
    if n > 1 {
        for l in 0..n {
            for m in 0..n {
                if l <= m {
                    blocks.push(make_block(format!("mumu[{l},{m}]"), &h, &se, mu_groups[l], mu_groups[m]));
                    blocks.push(make_block(format!("UU[{l},{m}]"), &h, &se, u_groups[l], u_groups[m]));
                }
                blocks.push(make_block(format!("muU[{l},{m}]"), &h, &se, mu_groups[l], u_groups[m]));
            }
        }
    }

    let corr_r = if n_u == 0 {
        0.0
    } else {
        let h_mm = h.view((0, 0), (n_mu, n_mu)).into_owned();
        let h_uu = h.view((n_mu, n_mu), (n_u, n_u)).into_owned();
        let h_mu = h.view((0, n_mu), (n_mu, n_u)).into_owned();
        let floor = 1e-12 * spectral_norm(&h).max(1e-300);
        spectral_norm(&(inv_sqrt_psd(&h_mm, floor) * h_mu * inv_sqrt_psd(&h_uu, floor)))
    };

    let rank_one = expert.params.components.iter().all(|c| c.u.ncols() == 1);
    let alpha_formula = match &expert.tying {
        Tying::Symmetric if rank_one => {
            let c = &expert.params.components[0];
            alpha_symmetric(&c.mu, &c.u, coef).ok()
        }
        Tying::Free(w) if rank_one => alpha_asymmetric(&expert.params, w, coef).ok().map(|a| a.alpha),
        _ => None,
    };

    let eigenvalues = sym_eigenvalues(&h);
    Ok(HessianReport {
        lambda_min: eigenvalues[0],
        lambda_max: *eigenvalues.last().unwrap(),
        eigenvalues,
        h,
        stderr: se,
        n_mc,
        blocks,
        alpha_formula,
        alpha_mean_block: mean_curvature(coef),
        corr_r,
        factor2: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{ComponentParams, LatentParams};

    #[test]
    fn single_gaussian_zero_factor_gives_identity_mean_block() {
        let params = LatentParams::new(vec![ComponentParams {
            mu: DVector::zeros(2),
            u: DMatrix::zeros(2, 1),
        }])
        .unwrap();
        let e = LatentExpert::free(vec![1.0], params).unwrap();
        let coef = Coefficients::new(1.0, 1.0);
        let rep = hessian_empirical(&e, coef, 4096, 3, JacobianMode::Exact).unwrap();
        let mm = rep.block_matrix(rep.block("mumu").unwrap());
        assert!((mm - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        assert_eq!(rep.block("mumu").unwrap().lambda_min, Some(1.0));
        assert!((rep.alpha_mean_block - 0.25).abs() < 1e-15);
        assert!(rep.factor2);
    }

    #[test]
    fn separated_symmetric_model_curvature() {
        let e = LatentExpert::symmetric(
            DVector::from_vec(vec![4.0, 3.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let coef = Coefficients::new(1.0, 1.0);
        let rep = hessian_empirical(&e, coef, 20_000, 11, JacobianMode::Exact).unwrap();
        assert_eq!(rep.h, rep.h.transpose());
        let scale = rep.lambda_max;
        assert!(rep.lambda_min >= -1e-8 * scale);
        let lmm = rep.block("mumu").unwrap().lambda_min.unwrap();
        assert!((lmm - 0.25).abs() < 0.05 * 0.25, "{lmm}");
        let cross = rep.block("muU").unwrap();
        assert!(cross.fro_norm <= 4.0 * cross.stderr, "{} vs {}", cross.fro_norm, cross.stderr);
        assert!(rep.lambda_min >= 0.8 * rep.alpha_formula.unwrap());
    }

    #[test]
    fn modes_agree_when_separated() {
        let e = LatentExpert::symmetric(
            DVector::from_vec(vec![4.0, 3.0]),
            DMatrix::from_column_slice(2, 1, &[0.6, 0.8]),
        )
        .unwrap();
        let coef = Coefficients::new(1.0, 1.0);
        let a = hessian_empirical(&e, coef, 2000, 5, JacobianMode::Exact).unwrap();
        let b = hessian_empirical(&e, coef, 2000, 5, JacobianMode::Simplified).unwrap();
        let c = hessian_empirical(&e, coef, 2000, 5, JacobianMode::Fd).unwrap();
        // samples falling between the peaks keep a small Term-B share
        assert!((&a.h - &b.h).amax() < 1e-2 * a.lambda_max);
        assert!((&a.h - &c.h).amax() < 1e-6 * a.lambda_max);
    }

    #[test]
    fn deterministic_across_pool_sizes() {
        let e = LatentExpert::symmetric(DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let coef = Coefficients::new(1.0, 1.0);
        let run = || hessian_empirical(&e, coef, 10_000, 1, JacobianMode::Exact).unwrap().h;
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(run);
        assert_eq!(a, b);
    }
}
