//! Jacobians of the latent score with respect to the flattened parameters.
//!
//! For a mixture score `s(x) = Σ_l r_l(x) g_l(x)` with component scores
//! `g_l = −Σ_l⁻¹(x − sμ_l)`, the derivative in the parameters `θ_l` of one
//! component splits into
//!
//! ```text
//! ∂s/∂θ_l = r_l ∂g_l/∂θ_l                          (term A, self-cluster)
//!         + r_l (g_l − s(x)) ∇_{θ_l} log N_l(x)ᵀ     (term B, responsibility flow)
//! ```
//!
//! Term B carries the factor `g_l − s(x) = Σ_{j≠l} r_j (g_l − g_j)` and so
//! vanishes with the pairwise overlaps `r_l r_j`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::schedule::Coefficients;
use crate::score::{LatentExpert, LatentParams, NoisedMixture, Tying};

/// Jacobian blocks in parameter order: `mu[l]` is `d × d`, `u[l]` is
/// `d × (d·d′_l)` with columns ordered column-major over the entries of `U_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianPair {
    pub mu: Vec<DMatrix<f64>>,
    pub u: Vec<DMatrix<f64>>,
}

impl JacobianPair {
    /// Splits a `d × p` matrix in flat parameter order.
    pub fn from_matrix(params: &LatentParams, m: &DMatrix<f64>) -> Self {
        let mu = (0..params.len())
            .map(|l| m.columns(params.mu_offset(l), params.components[l].mu.len()).into_owned())
            .collect();
        let u = (0..params.len())
            .map(|l| m.columns(params.u_offset(l), params.components[l].u.len()).into_owned())
            .collect();
        Self { mu, u }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let d = self.mu.first().map(|m| m.nrows()).unwrap_or(0);
        let blocks: Vec<&DMatrix<f64>> = self.mu.iter().chain(&self.u).collect();
        let p: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut out = DMatrix::zeros(d, p);
        let mut col = 0;
        for b in blocks {
            out.columns_mut(col, b.ncols()).copy_from(b);
            col += b.ncols();
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.to_matrix().norm()
    }
}

/// Exact Jacobian split into the self-cluster term and the responsibility term.
#[derive(Debug, Clone)]
pub struct JacobianTerms {
    pub term_a: DMatrix<f64>,
    pub term_b: DMatrix<f64>,
}

impl JacobianTerms {
    pub fn exact(&self) -> DMatrix<f64> {
        &self.term_a + &self.term_b
    }
}

/// Term A / term B of every component of an expanded (untied) mixture, in the
/// flat order of `expanded`. Also returns the responsibilities at `x`.
fn expanded_terms(
    expanded: &LatentParams,
    mix: &NoisedMixture,
    coef: Coefficients,
    x: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let d = x.len();
    let p = expanded.n_params();
    let s = coef.s;
    let s2 = s * s;
    let eval = mix.evaluate(x);
    let mut term_a = DMatrix::zeros(d, p);
    let mut term_b = DMatrix::zeros(d, p);
    for (l, comp) in mix.components.iter().enumerate() {
        let r = eval.responsibilities[l];
        if r == 0.0 {
            continue;
        }
        let prec = comp.precision_dense();
        let w = &prec * (x - &comp.mean);
        let flow = (&eval.component_scores[l] - &eval.score) * r;
        let flow_active = flow.amax() != 0.0;

        let mu0 = expanded.mu_offset(l);
        term_a.columns_mut(mu0, d).copy_from(&(&prec * (r * s)));
        if flow_active {
            term_b.columns_mut(mu0, d).copy_from(&(&flow * w.transpose() * s));
        }

        let u = &expanded.components[l].u;
        let ut_w = u.tr_mul(&w);
        let prec_u = &prec * u;
        let u0 = expanded.u_offset(l);
        for j in 0..u.ncols() {
            let prec_uj = prec_u.column(j);
            for i in 0..d {
                let col = u0 + j * d + i;
                // ∂g/∂U_ij = s² Σ⁻¹ (e_i (Uᵀw)_j + U_{:,j} w_i)
                let mut dg = prec.column(i) * ut_w[j];
                dg.axpy(w[i], &prec_uj, 1.0);
                term_a.column_mut(col).copy_from(&(dg * (r * s2)));
                if flow_active {
                    // ∂ log N/∂U_ij = s² (w_i (Uᵀw)_j − (Σ⁻¹U)_ij)
                    let glog = s2 * (w[i] * ut_w[j] - prec_u[(i, j)]);
                    term_b.column_mut(col).copy_from(&(&flow * glog));
                }
            }
        }
    }
    (term_a, term_b, eval.responsibilities)
}

/// Maps an expanded-parameter Jacobian back to the expert's own parameters.
fn tie(expert: &LatentExpert, expanded: &LatentParams, m: DMatrix<f64>) -> DMatrix<f64> {
    match expert.tying {
        Tying::Free(_) => m,
        Tying::Symmetric => {
            let d = m.nrows();
            let c = &expert.params.components[0];
            let mut out = DMatrix::zeros(d, expert.n_params());
            let (mp, mm) = (expanded.mu_offset(0), expanded.mu_offset(1));
            let (up, um) = (expanded.u_offset(0), expanded.u_offset(1));
            let nmu = c.mu.len();
            let nu = c.u.len();
            out.columns_mut(0, nmu)
                .copy_from(&(m.columns(mp, nmu) - m.columns(mm, nmu)));
            out.columns_mut(nmu, nu)
                .copy_from(&(m.columns(up, nu) + m.columns(um, nu)));
            out
        }
    }
}

/// Analytic Jacobian `∂s_θ(x)/∂θ` split into terms A and B.
pub fn jacobian_terms(expert: &LatentExpert, coef: Coefficients, x: &DVector<f64>) -> Result<JacobianTerms> {
    let mix = expert.mixture(coef)?;
    Ok(jacobian_terms_with(expert, &mix, coef, x))
}

/// As [`jacobian_terms`], reusing a prebuilt mixture for the expert.
pub fn jacobian_terms_with(
    expert: &LatentExpert,
    mix: &NoisedMixture,
    coef: Coefficients,
    x: &DVector<f64>,
) -> JacobianTerms {
    let expanded = expert.expanded();
    let (a, b, _) = expanded_terms(&expanded, mix, coef, x);
    JacobianTerms {
        term_a: tie(expert, &expanded, a),
        term_b: tie(expert, &expanded, b),
    }
}

/// Exact analytic Jacobian.
pub fn jacobian_exact(expert: &LatentExpert, coef: Coefficients, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(jacobian_terms(expert, coef, x)?.exact())
}

/// Term A and term B for the symmetric pair `(μ, U)`.
pub fn jacobian_exact_terms(
    mu: &DVector<f64>,
    u: &DMatrix<f64>,
    coef: Coefficients,
    x: &DVector<f64>,
) -> Result<(JacobianPair, JacobianPair)> {
    let expert = LatentExpert::symmetric(mu.clone(), u.clone())?;
    let t = jacobian_terms(&expert, coef, x)?;
    Ok((
        JacobianPair::from_matrix(&expert.params, &t.term_a),
        JacobianPair::from_matrix(&expert.params, &t.term_b),
    ))
}

/// Central-difference Jacobian of the expert's score, used as the oracle for
/// every analytic Jacobian.
pub fn jacobian_fd(expert: &LatentExpert, coef: Coefficients, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let theta = expert.flatten();
    let mut out = DMatrix::zeros(x.len(), theta.len());
    for k in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[k] += h;
        minus[k] -= h;
        let sp = expert.with_flat(&plus).score(coef, x)?;
        let sm = expert.with_flat(&minus).score(coef, x)?;
        out.column_mut(k).copy_from(&((sp - sm) / (2.0 * h)));
    }
    Ok(out)
}

/// Self-cluster Jacobian of the symmetric pair in rank-one projection form:
///
/// ```text
/// J^μ = (s/γ²)(r⁺ − r⁻)(I − α u uᵀ)
/// J^U = s² Σ⁻¹ Σ_± r_± ((uᵀw_±) I + u w_±ᵀ),   w_± = Σ⁻¹(x ∓ sμ)
/// ```
///
/// with `α = s²/(γ² + s²‖u‖²)`, which reduces to `s²/(s²+γ²)` for unit `u`.
pub fn jacobian_simplified_sym(
    mu: &DVector<f64>,
    u: &DMatrix<f64>,
    coef: Coefficients,
    x: &DVector<f64>,
) -> Result<JacobianPair> {
    if u.ncols() != 1 {
        return Err(Error::RankNotOne(u.ncols()));
    }
    if !(coef.gamma > 0.0) {
        return Err(Error::SingularNoise(coef.gamma));
    }
    let d = mu.len();
    let s = coef.s;
    let g2 = coef.gamma2();
    let uvec = u.column(0).into_owned();
    let alpha = s * s / (g2 + s * s * uvec.norm_squared());
    let prec = (DMatrix::identity(d, d) - &uvec * uvec.transpose() * alpha) / g2;
    let r = crate::score::LatentExpert::symmetric(mu.clone(), u.clone())?
        .mixture(coef)?
        .responsibilities(x);
    let (r_plus, r_minus) = (r[0], r[1]);
    let j_mu = &prec * (s * (r_plus - r_minus));
    let mut j_u = DMatrix::zeros(d, d);
    for (resp, sign) in [(r_plus, 1.0), (r_minus, -1.0)] {
        if resp == 0.0 {
            continue;
        }
        let w = &prec * (x - mu * (sign * s));
        let inner = DMatrix::identity(d, d) * uvec.dot(&w) + &uvec * w.transpose();
        j_u += &prec * inner * (resp * s * s);
    }
    Ok(JacobianPair {
        mu: vec![j_mu],
        u: vec![j_u],
    })
}

/// Declared accuracy of the self-cluster approximation at separation `Δ`.
pub fn simplified_tolerance(separation: f64, gamma: f64) -> f64 {
    10.0 * (-separation * separation / (8.0 * gamma * gamma)).exp() + 1e-3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::score::ComponentParams;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn randv(rng: &mut rng::Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn single_component_mu_jacobian_is_identity() {
        let e = LatentExpert::free(vec![1.0], LatentParams::new(vec![ComponentParams { mu: DVector::zeros(2), u: DMatrix::zeros(2, 1) }]).unwrap()).unwrap();
        let coef = Coefficients::new(1.0, 1.0);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let fd = jacobian_fd(&e, coef, &x, 1e-5).unwrap();
        let pair = JacobianPair::from_matrix(&e.params, &fd);
        assert!((&pair.mu[0] - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
        // δ(sμ) = 0 kills the first-order U sensitivity at the mean
        let fd0 = jacobian_fd(&e, coef, &DVector::zeros(2), 1e-5).unwrap();
        assert!(JacobianPair::from_matrix(&e.params, &fd0).u[0].amax() < 1e-8);
        let exact = jacobian_exact(&e, coef, &x).unwrap();
        assert!(rel(&exact, &fd) < 1e-8);
    }

    #[test]
    fn fd_error_decays_second_order() {
        let mut rng = rng::stream(4, 0);
        let params = LatentParams::new(vec![
            ComponentParams { mu: randv(&mut rng, 2), u: DMatrix::from_fn(2, 1, |_, _| rng.sample(StandardNormal)) },
            ComponentParams { mu: randv(&mut rng, 2), u: DMatrix::from_fn(2, 1, |_, _| rng.sample(StandardNormal)) },
        ])
        .unwrap();
        let e = LatentExpert::free(vec![0.4, 0.6], params).unwrap();
        let coef = Coefficients::new(0.9, 0.8);
        let x = randv(&mut rng, 2);
        let exact = jacobian_exact(&e, coef, &x).unwrap();
        let e1 = (jacobian_fd(&e, coef, &x, 1e-2).unwrap() - &exact).norm();
        let e2 = (jacobian_fd(&e, coef, &x, 5e-3).unwrap() - &exact).norm();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.5, "Richardson ratio {ratio}");
    }

    #[test]
    fn exact_matches_fd_on_random_instances() {
        let mut rng = rng::stream(6, 0);
        for trial in 0..100 {
            let d = 1 + trial % 4;
            let n = 1 + trial % 3;
            let r = 1 + trial % d.max(1);
            let comps = (0..n)
                .map(|_| ComponentParams {
                    mu: randv(&mut rng, d),
                    u: DMatrix::from_fn(d, r, |_, _| 0.7 * rng.sample::<f64, _>(StandardNormal)),
                })
                .collect();
            let mut w: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
            let tot: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= tot);
            let expert = if trial % 5 == 0 {
                LatentExpert::symmetric(randv(&mut rng, d), DMatrix::from_fn(d, 1, |_, _| rng.sample(StandardNormal))).unwrap()
            } else {
                LatentExpert::free(w, LatentParams::new(comps).unwrap()).unwrap()
            };
            let coef = Coefficients::new(0.5 + rng.random::<f64>(), 0.5 + rng.random::<f64>());
            let x = randv(&mut rng, d);
            let exact = jacobian_exact(&expert, coef, &x).unwrap();
            let fd = jacobian_fd(&expert, coef, &x, 1e-5).unwrap();
            assert!(rel(&exact, &fd) < 1e-6, "trial {trial}: {}", rel(&exact, &fd));
        }
    }

    #[test]
    fn simplified_examples() {
        let coef = Coefficients::new(1.0, 1.0);
        let mu = DVector::from_vec(vec![6.0, 0.0]);
        let u0 = DMatrix::zeros(2, 1);
        let deep = jacobian_simplified_sym(&mu, &u0, coef, &DVector::from_vec(vec![6.0, 0.5])).unwrap();
        assert!((&deep.mu[0] - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        let u = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let mid = jacobian_simplified_sym(&mu, &u, coef, &DVector::zeros(2)).unwrap();
        assert!(mid.mu[0].amax() < 1e-15);
        assert!(matches!(
            jacobian_simplified_sym(&mu, &DMatrix::zeros(2, 2), coef, &DVector::zeros(2)),
            Err(Error::RankNotOne(2))
        ));
    }

    #[test]
    fn simplified_matches_term_a_and_fd_when_separated() {
        let coef = Coefficients::new(1.0, 1.0);
        let mu = DVector::from_vec(vec![5.0, 0.0]);
        let u = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let expert = LatentExpert::symmetric(mu.clone(), u.clone()).unwrap();
        let mut rng = rng::stream(2, 0);
        for _ in 0..20 {
            let x = &mu * coef.s + randv(&mut rng, 2);
            let simp = jacobian_simplified_sym(&mu, &u, coef, &x).unwrap().to_matrix();
            let terms = jacobian_terms(&expert, coef, &x).unwrap();
            assert!(rel(&simp, &terms.term_a) < 1e-12);
            let fd = jacobian_fd(&expert, coef, &x, 1e-5).unwrap();
            assert!(rel(&simp, &fd) <= simplified_tolerance(10.0, 1.0));
        }
    }

    #[test]
    fn term_b_vanishes_deep_in_a_peak() {
        let coef = Coefficients::new(1.0, 1.0);
        let mu = DVector::from_vec(vec![20.0]);
        let u = DMatrix::from_element(1, 1, 1.0);
        let (a, b) = jacobian_exact_terms(&mu, &u, coef, &DVector::from_vec(vec![20.0])).unwrap();
        assert!(b.norm() <= 1e-12 * a.norm());
    }
}
