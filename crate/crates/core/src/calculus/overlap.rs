//! Overlap diagnostics and perturbation bounds on the curvature.
//!
//! Pointwise overlap is `ξ_ij(x) = r_i(x) r_j(x)`. The Hessian is split as
//! `H = H_diag + ΔH`, where `H_diag` ignores cross-talk between components,
//! and Weyl's inequality `λ_min(H) ≥ λ_min(H_diag) − ‖ΔH‖₂` is checked on the
//! computed matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::convexity::{mean_curvature, mmtop_eigs};
use super::hessian::OuterMoments;
use super::jacobian::jacobian_terms_with;
use crate::error::{Error, Result};
use crate::linalg::{lambda_min, spectral_norm};
use crate::model::Subspace;
use crate::rng;
use crate::schedule::Coefficients;
use crate::score::{LatentExpert, LatentParams, Tying};

/// Overlaps smaller than this carry no usable Term-B ratio.
const XI_FLOOR: f64 = 1e-200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// `ε = sup_x max_{i<j} ξ_ij(x)` with `λ_base = (1 − 4ε) min_l b_l`.
    TwoModeSup,
    /// `ε_l = Σ_{j≠l} E[ξ_jl]` with `λ_base = min_l (π_l − ε_l) b_l`.
    MultiModeExpect,
}

/// Perturbation constants of the curvature bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationConstants {
    pub s_mu: f64,
    pub s_u: f64,
    /// Measured `max_x ‖TermB_μ(x)‖ / ξ(x)`.
    pub c1: f64,
    /// Measured `max_x ‖TermB_U(x)‖ / ξ(x)`.
    pub c2: f64,
    /// `2 (S_μ + S_U)(C₁ + C₂)`.
    pub c_prime: f64,
    /// `2 (S_μ C₁ + S_U C₂)`.
    pub c_tilde: f64,
}

impl PerturbationConstants {
    pub fn new(coef: Coefficients, radius: f64, c1: f64, c2: f64) -> Self {
        let s_mu = coef.s / coef.gamma2();
        let s_u = coef.s * radius * radius / coef.gamma2();
        Self {
            s_mu,
            s_u,
            c1,
            c2,
            c_prime: 2.0 * (s_mu + s_u) * (c1 + c2),
            c_tilde: 2.0 * (s_mu * c1 + s_u * c2),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    pub mode: OverlapMode,
    pub n_samples: usize,
    /// Largest pairwise overlap over the sample, in `[0, 1/4]`.
    pub xi_max: f64,
    /// Per component `Σ_{j≠l} E[ξ_jl]`.
    pub eps_total: Vec<f64>,
    /// The mode's aggregate overlap.
    pub eps_overlap: f64,
    /// Per-component unweighted curvature `min{s²/(s²+γ²)², λ_min(M Mᵀ)}`.
    pub block_curvature: Vec<f64>,
    pub lambda_base: f64,
    pub constants: PerturbationConstants,
    /// `C′` for the two-mode bound, `C̃` for the multi-mode bound.
    pub c_used: f64,
    pub alpha_eff: f64,
    pub lambda_min_h: f64,
    pub lambda_min_h_diag: f64,
    pub delta_h_norm: f64,
    pub weyl_gap: f64,
    pub h_norm: f64,
}

/// Everything one pass over the sample produces.
struct OverlapStats {
    n: usize,
    xi_max: f64,
    pair_sums: DMatrix<f64>,
    c1: f64,
    c2: f64,
    h: DMatrix<f64>,
    h_diag: DMatrix<f64>,
}

struct Partial {
    xi_max: f64,
    pair_sums: DMatrix<f64>,
    c1: f64,
    c2: f64,
    exact: OuterMoments,
    term_a: OuterMoments,
}

fn collect_stats(expert: &LatentExpert, coef: Coefficients, samples: &[DVector<f64>]) -> Result<OverlapStats> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mix = expert.mixture(coef)?;
    let n_comp = mix.len();
    let p = expert.n_params();
    let n_mu: usize = expert.params.components.iter().map(|c| c.mu.len()).sum();
    let parts = rng::par_chunks(samples, |chunk| {
        let mut part = Partial {
            xi_max: 0.0,
            pair_sums: DMatrix::zeros(n_comp, n_comp),
            c1: 0.0,
            c2: 0.0,
            exact: OuterMoments::new(p),
            term_a: OuterMoments::new(p),
        };
        for x in chunk {
            let r = mix.responsibilities(x);
            let mut xi = 0.0;
            for i in 0..n_comp {
                for j in 0..n_comp {
                    if i != j {
                        let prod = r[i] * r[j];
                        part.pair_sums[(i, j)] += prod;
                        if i < j {
                            xi += prod;
                            part.xi_max = part.xi_max.max(prod);
                        }
                    }
                }
            }
            let terms = jacobian_terms_with(expert, &mix, coef, x);
            if xi > XI_FLOOR {
                let b_mu = terms.term_b.columns(0, n_mu).norm();
                let b_u = terms.term_b.columns(n_mu, p - n_mu).norm();
                part.c1 = part.c1.max(b_mu / xi);
                part.c2 = part.c2.max(b_u / xi);
            }
            part.exact.push(&terms.exact());
            part.term_a.push(&terms.term_a);
        }
        part
    });
    let mut xi_max = 0.0f64;
    let mut pair_sums = DMatrix::zeros(n_comp, n_comp);
    let (mut c1, mut c2) = (0.0f64, 0.0f64);
    let mut exact = OuterMoments::new(p);
    let mut term_a = OuterMoments::new(p);
    for part in parts {
        xi_max = xi_max.max(part.xi_max);
        pair_sums += part.pair_sums;
        c1 = c1.max(part.c1);
        c2 = c2.max(part.c2);
        exact.merge(&part.exact);
        term_a.merge(&part.term_a);
    }
    let (h, _) = exact.finish();
    let h_diag = match expert.tying {
        Tying::Free(_) => zero_cross_blocks(&expert.params, &h),
        Tying::Symmetric => term_a.finish().0,
    };
    Ok(OverlapStats {
        n: samples.len(),
        xi_max,
        pair_sums,
        c1,
        c2,
        h,
        h_diag,
    })
}

/// Copy of `h` with every entry coupling two different components set to 0.
pub fn zero_cross_blocks(params: &LatentParams, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut owner = vec![0usize; params.n_params()];
    for l in 0..params.len() {
        for i in params.component_indices(l) {
            owner[i] = l;
        }
    }
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| if owner[i] == owner[j] { h[(i, j)] } else { 0.0 })
}

/// `λ_min(H) − (λ_min(H_diag) − ‖H − H_diag‖₂)`, non-negative by Weyl.
pub fn weyl_gap(h: &DMatrix<f64>, h_diag: &DMatrix<f64>) -> f64 {
    lambda_min(h) - (lambda_min(h_diag) - spectral_norm(&(h - h_diag)))
}

fn block_curvatures(expert: &LatentExpert, coef: Coefficients) -> Result<Vec<f64>> {
    let base = mean_curvature(coef);
    expert
        .expanded()
        .components
        .iter()
        .map(|c| {
            if c.u.ncols() == 1 && c.mu.len() >= 2 {
                Ok(base.min(mmtop_eigs(&c.u.column(0).into_owned(), &c.mu)?.lambda_min))
            } else {
                Ok(base)
            }
        })
        .collect()
}

fn report(
    stats: &OverlapStats,
    expert: &LatentExpert,
    coef: Coefficients,
    radius: f64,
    mode: OverlapMode,
) -> Result<OverlapReport> {
    let n = stats.n as f64;
    let weights = expert.weights();
    let eps_total: Vec<f64> = (0..weights.len())
        .map(|l| stats.pair_sums.row(l).sum() / n)
        .collect();
    let block_curvature = block_curvatures(expert, coef)?;
    let min_block = block_curvature.iter().copied().fold(f64::INFINITY, f64::min);
    let constants = PerturbationConstants::new(coef, radius, stats.c1, stats.c2);
    let (eps_overlap, lambda_base, c_used) = match mode {
        OverlapMode::TwoModeSup => (stats.xi_max, (1.0 - 4.0 * stats.xi_max) * min_block, constants.c_prime),
        OverlapMode::MultiModeExpect => {
            let eps = eps_total.iter().copied().fold(0.0, f64::max);
            let base = (0..weights.len())
                .map(|l| (weights[l] - eps_total[l]) * block_curvature[l])
                .fold(f64::INFINITY, f64::min);
            (eps, base, constants.c_tilde)
        }
    };
    let lambda_min_h = lambda_min(&stats.h);
    let lambda_min_h_diag = lambda_min(&stats.h_diag);
    let delta_h_norm = spectral_norm(&(&stats.h - &stats.h_diag));
    Ok(OverlapReport {
        mode,
        n_samples: stats.n,
        xi_max: stats.xi_max,
        eps_total,
        eps_overlap,
        block_curvature,
        lambda_base,
        constants,
        c_used,
        alpha_eff: lambda_base - c_used * eps_overlap,
        lambda_min_h,
        lambda_min_h_diag,
        delta_h_norm,
        weyl_gap: lambda_min_h - (lambda_min_h_diag - delta_h_norm),
        h_norm: spectral_norm(&stats.h),
    })
}

/// Overlap statistics, curvature floor and Weyl check for one mode.
pub fn overlap_analysis(
    expert: &LatentExpert,
    coef: Coefficients,
    samples: &[DVector<f64>],
    mode: OverlapMode,
    radius: f64,
) -> Result<OverlapReport> {
    let stats = collect_stats(expert, coef, samples)?;
    report(&stats, expert, coef, radius, mode)
}

/// Both overlap definitions from a single pass over the sample.
pub fn overlap_analysis_both(
    expert: &LatentExpert,
    coef: Coefficients,
    samples: &[DVector<f64>],
    radius: f64,
) -> Result<[OverlapReport; 2]> {
    let stats = collect_stats(expert, coef, samples)?;
    Ok([
        report(&stats, expert, coef, radius, OverlapMode::TwoModeSup)?,
        report(&stats, expert, coef, radius, OverlapMode::MultiModeExpect)?,
    ])
}

/// `S_μ`, `S_U`, measured Term-B coefficients and the composite constants.
pub fn constants_cprime_ctilde(
    expert: &LatentExpert,
    coef: Coefficients,
    samples: &[DVector<f64>],
    radius: f64,
) -> Result<PerturbationConstants> {
    let stats = collect_stats(expert, coef, samples)?;
    Ok(PerturbationConstants::new(coef, radius, stats.c1, stats.c2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalentGaussianError {
    /// Largest pairwise `‖U_i − U_j‖_F`.
    pub eps: f64,
    /// Largest pairwise `‖μ_i − μ_j‖`.
    pub delta: f64,
    /// `max_{‖x − μ̄‖ ≤ Δ} |log p(x) − log p̄(x)|`.
    pub err_max: f64,
}

const PROBE_SEED: u64 = 0x6571_6761;
const PROBE_POINTS: usize = 4096;

/// Worst log-density gap between a subspace's noised mixture and its
/// moment-matched Gaussian over the ball of radius `probe_radius` around the
/// matched mean. The maximum is located by a fixed random probe set followed
/// by a shrinking pattern search projected onto the ball.
pub fn equivalent_gaussian_error(sub: &Subspace, coef: Coefficients, probe_radius: f64) -> Result<EquivalentGaussianError> {
    let n = sub.components.len();
    if n < 2 {
        return Err(Error::SingleComponent);
    }
    if !(probe_radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("probe radius {probe_radius} must be non-negative")));
    }
    let mut eps = 0.0f64;
    let mut delta = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&sub.components[i], &sub.components[j]);
            if a.u.shape() == b.u.shape() {
                eps = eps.max((&a.u - &b.u).norm());
            } else {
                eps = eps.max((a.covariance() - b.covariance()).norm().sqrt());
            }
            delta = delta.max((&a.mu - &b.mu).norm());
        }
    }
    let mix = LatentParams::from_subspace(sub).mixture(&sub.weights(), coef)?;
    let eq = sub.moment_match(coef);
    let d = eq.mean.len();
    let gap = |x: &DVector<f64>| (mix.log_density(x) - eq.log_density(x)).abs();
    let project = |x: DVector<f64>| {
        let off = &x - &eq.mean;
        let r = off.norm();
        if r > probe_radius {
            &eq.mean + off * (probe_radius / r)
        } else {
            x
        }
    };

    let mut rng = rng::stream(PROBE_SEED, 0);
    let mut probes = vec![eq.mean.clone()];
    for i in 0..PROBE_POINTS {
        let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = dir.norm().max(1e-300);
        // half on the sphere, half spread through the ball
        let radius = if i % 2 == 0 {
            probe_radius
        } else {
            probe_radius * rng.random::<f64>().powf(1.0 / d as f64)
        };
        probes.push(&eq.mean + dir * (radius / norm));
    }
    let mut scored: Vec<(f64, DVector<f64>)> = probes.into_iter().map(|x| (gap(&x), x)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = scored[0].0;
    for (mut val, mut x) in scored.into_iter().take(8) {
        let mut step = probe_radius / 8.0;
        while step > probe_radius * 1e-9 && step > 0.0 {
            let mut improved = false;
            for k in 0..d {
                for sign in [1.0, -1.0] {
                    let mut cand = x.clone();
                    cand[k] += sign * step;
                    let cand = project(cand);
                    let v = gap(&cand);
                    if v > val {
                        val = v;
                        x = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.max(val);
    }
    Ok(EquivalentGaussianError { eps, delta, err_max: best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MogComponent;
    use crate::score::ComponentParams;

    fn scalar_pair(m: f64) -> LatentExpert {
        LatentExpert::symmetric(DVector::from_vec(vec![m]), DMatrix::from_element(1, 1, 0.0)).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let coef = Coefficients::new(1.0, 1.0);
        let e = scalar_pair(1.0);
        let rep = overlap_analysis(&e, coef, &[DVector::from_vec(vec![1.0])], OverlapMode::TwoModeSup, 1.0).unwrap();
        // r⁺ = σ(2) at x = 1
        let rp = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((rep.xi_max - rp * (1.0 - rp)).abs() < 1e-12);
        assert!((rep.xi_max - 0.1050).abs() < 1e-4);
        let mid = overlap_analysis(&e, coef, &[DVector::zeros(1)], OverlapMode::TwoModeSup, 1.0).unwrap();
        assert!((mid.xi_max - 0.25).abs() < 1e-15);
        assert!(matches!(
            overlap_analysis(&e, coef, &[], OverlapMode::TwoModeSup, 1.0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn weyl_example() {
        let hd = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        let lm = lambda_min(&h);
        assert!((lm - (1.5 - (0.25f64 + 0.01).sqrt())).abs() < 1e-12);
        assert!((weyl_gap(&h, &hd) - (lm - 0.9)).abs() < 1e-12);
        assert!((weyl_gap(&h, &hd) - 0.0901).abs() < 1e-4);
    }

    #[test]
    fn constants_without_overlap() {
        let coef = Coefficients::new(1.0, 1.0);
        let e = scalar_pair(50.0);
        let samples = vec![DVector::from_vec(vec![50.0]), DVector::from_vec(vec![-50.0])];
        let c = constants_cprime_ctilde(&e, coef, &samples, 1.0).unwrap();
        assert_eq!((c.s_mu, c.s_u), (1.0, 1.0));
        assert_eq!((c.c1, c.c2, c.c_prime), (0.0, 0.0, 0.0));
        let rep = overlap_analysis(&e, coef, &samples, OverlapMode::MultiModeExpect, 1.0).unwrap();
        assert_eq!(rep.alpha_eff, rep.lambda_base);
    }

    #[test]
    fn weyl_holds_and_overlap_grows_as_means_merge() {
        let coef = Coefficients::new(1.0, 1.0);
        let mut last_eps = [-1.0, -1.0];
        for gap in [6.0, 4.0, 2.0, 1.0] {
            let params = LatentParams::new(vec![
                ComponentParams { mu: DVector::from_vec(vec![gap / 2.0, 0.0]), u: DMatrix::from_column_slice(2, 1, &[0.5, 0.5]) },
                ComponentParams { mu: DVector::from_vec(vec![-gap / 2.0, 0.0]), u: DMatrix::from_column_slice(2, 1, &[0.5, -0.5]) },
            ])
            .unwrap();
            let e = LatentExpert::free(vec![0.5, 0.5], params).unwrap();
            let samples: Vec<_> = e.mixture(coef).unwrap().sample(4000, 9).into_iter().map(|(_, x)| x).collect();
            let reps = overlap_analysis_both(&e, coef, &samples, 3.0).unwrap();
            for (i, rep) in reps.iter().enumerate() {
                assert!(rep.weyl_gap >= -1e-10 * rep.h_norm);
                assert!(rep.xi_max <= 0.25);
                assert!(rep.eps_overlap > last_eps[i]);
                last_eps[i] = rep.eps_overlap;
                assert!(rep.c_used.is_finite());
            }
        }
    }

    fn two_component(mu_gap: f64, u_gap: f64) -> Subspace {
        Subspace {
            basis: DMatrix::identity(2, 2),
            components: vec![
                MogComponent::new(0.5, DVector::from_vec(vec![mu_gap / 2.0, 0.0]), DMatrix::from_column_slice(2, 1, &[1.0 + u_gap / 2.0, 0.0])),
                MogComponent::new(0.5, DVector::from_vec(vec![-mu_gap / 2.0, 0.0]), DMatrix::from_column_slice(2, 1, &[1.0 - u_gap / 2.0, 0.0])),
            ],
        }
    }

    #[test]
    fn identical_components_match_exactly() {
        let sub = two_component(0.0, 0.0);
        let r = equivalent_gaussian_error(&sub, Coefficients::new(1.0, 1.0), 2.0).unwrap();
        assert_eq!((r.eps, r.delta), (0.0, 0.0));
        assert!(r.err_max <= 1e-12);
        let single = Subspace { basis: sub.basis.clone(), components: vec![MogComponent::new(1.0, DVector::zeros(2), DMatrix::zeros(2, 1))] };
        assert!(matches!(equivalent_gaussian_error(&single, Coefficients::new(1.0, 1.0), 1.0), Err(Error::SingleComponent)));
    }

    #[test]
    fn error_grows_with_mean_gap() {
        let coef = Coefficients::new(1.0, 1.0);
        let small = equivalent_gaussian_error(&two_component(0.1, 0.01), coef, 2.0).unwrap();
        let large = equivalent_gaussian_error(&two_component(0.2, 0.01), coef, 2.0).unwrap();
        let ratio = small.err_max / large.err_max;
        assert!((0.3..=0.7).contains(&ratio), "{ratio}");
    }
}
