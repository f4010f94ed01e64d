//! Dense brute-force references for the structured score algebra.
//!
//! Every density here forms its covariance explicitly and factors it with a
//! Cholesky decomposition, and gradients are central differences. They are
//! slow and exist only to validate the Woodbury-based scores.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MolrMogModel;
use crate::rng;
use crate::schedule::{Coefficients, DiffusionSchedule};
use crate::score::{ambient_score, conditional_score, latent_score, log_sum_exp, symmetric_score, LatentParams};

pub fn gaussian_log_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    let diff = x - mean;
    let quad = diff.dot(&chol.solve(&diff));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (quad + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// `log Σ_l w_l N(x; m_l, C_l)` with dense covariances.
pub fn mixture_log_density(weights: &[f64], comps: &[(DVector<f64>, DMatrix<f64>)], x: &DVector<f64>) -> Result<f64> {
    let terms = weights
        .iter()
        .zip(comps)
        .map(|(w, (m, c))| Ok(w.ln() + gaussian_log_density(m, c, x)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&terms))
}

fn noised(coef: Coefficients, mu: &DVector<f64>, factor: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = mu.len();
    let cov = factor * factor.transpose() * (coef.s * coef.s) + DMatrix::identity(d, d) * coef.gamma2();
    (mu * coef.s, cov)
}

pub fn latent_log_density(params: &LatentParams, weights: &[f64], coef: Coefficients, x: &DVector<f64>) -> Result<f64> {
    let comps: Vec<_> = params.components.iter().map(|c| noised(coef, &c.mu, &c.u)).collect();
    mixture_log_density(weights, &comps, x)
}

pub fn symmetric_log_density(mu: &DVector<f64>, u: &DMatrix<f64>, coef: Coefficients, x: &DVector<f64>) -> Result<f64> {
    let comps = vec![noised(coef, mu, u), noised(coef, &-mu, u)];
    mixture_log_density(&[0.5, 0.5], &comps, x)
}

pub fn ambient_log_density(model: &MolrMogModel, coef: Coefficients, x: &DVector<f64>) -> Result<f64> {
    let k = model.num_subspaces() as f64;
    let mut weights = Vec::new();
    let mut comps = Vec::new();
    for sub in &model.subspaces {
        for c in &sub.components {
            weights.push(c.pi / k);
            comps.push(noised(coef, &(&sub.basis * &c.mu), &(&sub.basis * &c.u)));
        }
    }
    mixture_log_density(&weights, &comps, x)
}

/// `log N(x_t; s x₀, γ² I)`.
pub fn transition_log_density(xt: &DVector<f64>, x0: &DVector<f64>, coef: Coefficients) -> Result<f64> {
    let d = xt.len();
    gaussian_log_density(&(x0 * coef.s), &(DMatrix::identity(d, d) * coef.gamma2()), xt)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        g[i] = (f(&p)? - f(&m)?) / (2.0 * h);
    }
    Ok(g)
}

pub fn relative_error(analytic: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (analytic - reference).norm() / reference.norm().max(analytic.norm()).max(1e-300)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Latent,
    Symmetric,
    Ambient,
    Conditional,
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Latent => "latent",
            Self::Symmetric => "symmetric",
            Self::Ambient => "ambient",
            Self::Conditional => "conditional",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreCheckRow {
    pub trial: usize,
    pub kind: ScoreKind,
    pub dim: usize,
    pub t: f64,
    pub rel_err: f64,
}

/// Compares every analytic score of `model` with central differences of its
/// dense log-density at `trials` random `(t, x)`, with `x` drawn from the
/// noised model.
pub fn score_fd_check(model: &MolrMogModel, sched: &DiffusionSchedule, trials: usize, h: f64, seed: u64) -> Result<Vec<ScoreCheckRow>> {
    let mut rng = rng::stream(seed, 0);
    let mut rows = Vec::with_capacity(4 * trials);
    for trial in 0..trials {
        let t = sched.t_min + (sched.t_max - sched.t_min) * rng.random::<f64>();
        let coef = sched.coefficients(t)?;
        let sample = &model.sample_data(1, rng.random())[0];
        let noise = |rng: &mut rng::Rng, d: usize| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));

        let sub = &model.subspaces[sample.k];
        let params = LatentParams::from_subspace(sub);
        let weights = sub.weights();
        let z = &sample.latent * coef.s + noise(&mut rng, sub.latent_dim()) * coef.gamma;
        let analytic = latent_score(&params, &weights, coef, &z)?;
        let fd = fd_gradient(|v| latent_log_density(&params, &weights, coef, v), &z, h)?;
        rows.push(ScoreCheckRow { trial, kind: ScoreKind::Latent, dim: z.len(), t, rel_err: relative_error(&analytic, &fd) });

        let c = &sub.components[sample.l];
        let analytic = symmetric_score(&c.mu, &c.u, coef, &z)?;
        let fd = fd_gradient(|v| symmetric_log_density(&c.mu, &c.u, coef, v), &z, h)?;
        rows.push(ScoreCheckRow { trial, kind: ScoreKind::Symmetric, dim: z.len(), t, rel_err: relative_error(&analytic, &fd) });

        let x = &sample.x * coef.s + noise(&mut rng, model.ambient_dim) * coef.gamma;
        let analytic = ambient_score(model, coef, &x)?;
        let fd = fd_gradient(|v| ambient_log_density(model, coef, v), &x, h)?;
        rows.push(ScoreCheckRow { trial, kind: ScoreKind::Ambient, dim: x.len(), t, rel_err: relative_error(&analytic, &fd) });

        let analytic = conditional_score(&x, &sample.x, coef)?;
        let fd = fd_gradient(|v| transition_log_density(v, &sample.x, coef), &x, h)?;
        rows.push(ScoreCheckRow { trial, kind: ScoreKind::Conditional, dim: x.len(), t, rel_err: relative_error(&analytic, &fd) });
    }
    Ok(rows)
}
