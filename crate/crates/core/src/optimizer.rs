//! Full-batch gradient descent on the empirical SM loss.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calculus::jacobian_terms_with;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, symmetrize};
use crate::rng;
use crate::schedule::Coefficients;
use crate::score::LatentExpert;

/// Empirical loss and its gradient `(2/n) Σ Jᵀ (s_θ − s*)`.
pub fn loss_and_grad(
    theta: &LatentExpert,
    truth: &LatentExpert,
    coef: Coefficients,
    data: &[DVector<f64>],
) -> Result<(f64, DVector<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mix = theta.mixture(coef)?;
    let target = truth.mixture(coef)?;
    let p = theta.n_params();
    let parts = rng::par_chunks(data, |chunk| {
        let mut loss = 0.0;
        let mut grad = DVector::zeros(p);
        for x in chunk {
            let resid = mix.score(x) - target.score(x);
            let sq = resid.norm_squared();
            if sq == 0.0 {
                continue;
            }
            loss += sq;
            let j = jacobian_terms_with(theta, &mix, coef, x).exact();
            grad += j.tr_mul(&resid);
        }
        (loss, grad)
    });
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = DVector::zeros(p);
    for (l, g) in parts {
        loss += l;
        grad += g;
    }
    Ok((loss / n, grad * (2.0 / n)))
}

pub fn grad_empirical(
    theta: &LatentExpert,
    truth: &LatentExpert,
    coef: Coefficients,
    data: &[DVector<f64>],
) -> Result<DVector<f64>> {
    Ok(loss_and_grad(theta, truth, coef, data)?.1)
}

/// `θ* + radius · u` with `u` uniform on the unit sphere of the flat space.
pub fn init_near(truth: &LatentExpert, radius: f64, seed: u64) -> Result<LatentExpert> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("init radius {radius} must be non-negative")));
    }
    let base = truth.flatten();
    if radius == 0.0 {
        return Ok(truth.clone());
    }
    let mut rng = rng::stream(seed, 0);
    let dir: DVector<f64> = DVector::from_fn(base.len(), |_, _| StandardNormal.sample(&mut rng));
    let dir = &dir / dir.norm();
    Ok(truth.with_flat(&(base + dir * radius)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRule {
    pub eta: f64,
    pub kappa: f64,
    pub rho: f64,
}

/// `η = 2/(α + L′)`, `κ = L′/α`, `ρ = (κ − 1)/(κ + 1)`.
pub fn theoretical_step(alpha: f64, l_prime: f64) -> Result<StepRule> {
    if !(alpha > 0.0) {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    if !(l_prime >= alpha) {
        return Err(Error::LSmallerThanAlpha { alpha, l_prime });
    }
    let kappa = l_prime / alpha;
    Ok(StepRule {
        eta: 2.0 / (alpha + l_prime),
        kappa,
        rho: (kappa - 1.0) / (kappa + 1.0),
    })
}

/// Extreme curvatures of the loss at a point, from a finite-difference
/// Hessian of the analytic gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalConstants {
    pub alpha_hat: f64,
    pub l_hat: f64,
    pub eigenvalues: Vec<f64>,
}

pub fn estimate_local_constants(
    at: &LatentExpert,
    truth: &LatentExpert,
    coef: Coefficients,
    data: &[DVector<f64>],
    h: f64,
) -> Result<LocalConstants> {
    let base = at.flatten();
    let p = base.len();
    let mut hess = DMatrix::zeros(p, p);
    for k in 0..p {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[k] += h;
        minus[k] -= h;
        let gp = grad_empirical(&at.with_flat(&plus), truth, coef, data)?;
        let gm = grad_empirical(&at.with_flat(&minus), truth, coef, data)?;
        hess.column_mut(k).copy_from(&((gp - gm) / (2.0 * h)));
    }
    let eigenvalues = sym_eigenvalues(&symmetrize(&hess));
    Ok(LocalConstants {
        alpha_hat: eigenvalues[0],
        l_hat: *eigenvalues.last().unwrap(),
        eigenvalues,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// Fixed `η`.
    Fixed(f64),
    /// `η = 2/(α̂ + L̂)` from the finite-difference Hessian at `θ*`.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdConfig {
    pub eta: StepSize,
    pub m_max: usize,
    pub tol: f64,
    pub init_radius: f64,
    /// Distances below `floor_rel × initial` are treated as converged noise
    /// and excluded from contraction checks.
    #[serde(default = "default_floor")]
    pub floor_rel: f64,
}

fn default_floor() -> f64 {
    1e-10
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            eta: StepSize::Auto,
            m_max: 500,
            tol: 1e-12,
            init_radius: 0.1,
            floor_rel: default_floor(),
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::InvalidArgument(format!("step size {eta} must be positive")));
            }
        }
        if !(self.init_radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("init radius {} must be non-negative", self.init_radius)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub m: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub dist: f64,
    /// `dist_m / dist_{m−1}`; undefined at `m = 0`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub eta: f64,
    pub kappa: f64,
    pub rho_bound: f64,
    pub converged: bool,
    pub initial_dist: f64,
    pub floor: f64,
    #[serde(skip)]
    pub final_theta: Option<LatentExpert>,
}

/// Runs GD from `theta0` on a fixed dataset with the step rule `step`.
pub fn gd_train(
    theta0: &LatentExpert,
    truth: &LatentExpert,
    coef: Coefficients,
    data: &[DVector<f64>],
    cfg: &GdConfig,
    step: StepRule,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let target = truth.flatten();
    let mut theta = theta0.clone();
    let initial = (theta.flatten() - &target).norm();
    let floor = cfg.floor_rel * initial;
    let mut rows = Vec::new();
    let mut converged = false;
    let mut prev = f64::NAN;
    for m in 0..=cfg.m_max {
        let flat = theta.flatten();
        let dist = (&flat - &target).norm();
        if dist > 10.0 * initial && initial > 0.0 {
            return Err(Error::DivergenceDetected {
                iteration: m,
                dist,
                initial,
            });
        }
        let (loss, grad) = loss_and_grad(&theta, truth, coef, data)?;
        let grad_norm = grad.norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NaNDetected { step: m });
        }
        rows.push(TraceRow {
            m,
            loss,
            grad_norm,
            dist,
            ratio: if m == 0 { f64::NAN } else { dist / prev },
        });
        prev = dist;
        if grad_norm <= cfg.tol {
            converged = true;
            break;
        }
        if m == cfg.m_max {
            break;
        }
        theta = theta.with_flat(&(flat - grad * step.eta));
    }
    Ok(TrainTrace {
        rows,
        eta: step.eta,
        kappa: step.kappa,
        rho_bound: step.rho,
        converged,
        initial_dist: initial,
        floor,
        final_theta: Some(theta),
    })
}

/// Step rule for `cfg`: a fixed `η` reports no rate, `Auto` estimates the
/// local constants of the loss at the truth.
pub fn step_rule(
    cfg: &GdConfig,
    truth: &LatentExpert,
    coef: Coefficients,
    data: &[DVector<f64>],
) -> Result<(StepRule, Option<LocalConstants>)> {
    match cfg.eta {
        StepSize::Fixed(eta) => Ok((
            StepRule {
                eta,
                kappa: f64::NAN,
                rho: f64::NAN,
            },
            None,
        )),
        StepSize::Auto => {
            let local = estimate_local_constants(truth, truth, coef, data, 1e-4)?;
            Ok((theoretical_step(local.alpha_hat, local.l_hat)?, Some(local)))
        }
    }
}

pub const CONTRACTION_PASS_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub rho: f64,
    pub slack: f64,
    pub checked: usize,
    pub satisfied: usize,
    pub fraction: f64,
    pub first_violation: Option<usize>,
    /// Least-squares slope of `ln dist` per iteration over the checked rows.
    pub log_slope: f64,
    pub passed: bool,
}

/// Fraction of iterations, above the noise floor, whose contraction ratio is
/// at most `ρ + slack`.
pub fn contraction_check(trace: &TrainTrace, rho: f64, slack: f64) -> ContractionReport {
    let mut checked = 0;
    let mut satisfied = 0;
    let mut first_violation = None;
    let mut pts = Vec::new();
    for (i, row) in trace.rows.iter().enumerate() {
        if i == 0 {
            pts.push((0.0, row.dist.ln()));
            continue;
        }
        let prev = trace.rows[i - 1].dist;
        if !(prev > trace.floor) || !(row.dist > 0.0) {
            break;
        }
        checked += 1;
        pts.push((row.m as f64, row.dist.ln()));
        if row.ratio <= rho + slack {
            satisfied += 1;
        } else if first_violation.is_none() {
            first_violation = Some(row.m);
        }
    }
    let fraction = if checked == 0 { 1.0 } else { satisfied as f64 / checked as f64 };
    let log_slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    ContractionReport {
        rho,
        slack,
        checked,
        satisfied,
        fraction,
        first_violation,
        log_slope,
        passed: fraction >= CONTRACTION_PASS_FRACTION,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::empirical_loss;
    use crate::schedule::DiffusionSchedule;
    use crate::score::{ComponentParams, LatentParams};
    use rand::Rng as _;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::constant_drift(2f64.sqrt(), 0.01, 1.0).unwrap()
    }

    fn two_mode() -> LatentExpert {
        LatentExpert::free(
            vec![0.4, 0.6],
            LatentParams::new(vec![
                ComponentParams { mu: DVector::from_vec(vec![1.5, 0.5]), u: DMatrix::from_column_slice(2, 1, &[0.4, 0.2]) },
                ComponentParams { mu: DVector::from_vec(vec![-1.0, 0.2]), u: DMatrix::from_column_slice(2, 1, &[0.1, 0.6]) },
            ])
            .unwrap(),
        )
        .unwrap()
    }

    fn data(e: &LatentExpert, n: usize) -> Vec<DVector<f64>> {
        e.mixture(Coefficients::new(1.0, 1.0)).unwrap().sample(n, 4).into_iter().map(|p| p.1).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let truth = two_mode();
        let xs = data(&truth, 500);
        let sched = sched();
        let cfg = crate::objective::LossConfig::fixed(0.5);
        let coef = sched.coefficients(0.5).unwrap();
        let mut rng = rng::stream(9, 0);
        for trial in 0..5 {
            let theta = init_near(&truth, 0.5, trial).unwrap();
            let g = grad_empirical(&theta, &truth, coef, &xs).unwrap();
            let base = theta.flatten();
            let h = 1e-6;
            let mut fd = DVector::zeros(base.len());
            for k in 0..base.len() {
                let mut p = base.clone();
                let mut m = base.clone();
                p[k] += h;
                m[k] -= h;
                fd[k] = (empirical_loss(&theta.with_flat(&p), &truth, &sched, &cfg, &xs).unwrap()
                    - empirical_loss(&theta.with_flat(&m), &truth, &sched, &cfg, &xs).unwrap())
                    / (2.0 * h);
            }
            assert!(g.dot(&fd) / (g.norm() * fd.norm()) >= 1.0 - 1e-8);
            for _ in 0..20 {
                let k = rng.random_range(0..base.len());
                assert!((g[k] - fd[k]).abs() <= 1e-5 * g.amax(), "coordinate {k}: {} vs {}", g[k], fd[k]);
            }
        }
        assert_eq!(grad_empirical(&truth, &truth, coef, &xs).unwrap().amax(), 0.0);
    }

    #[test]
    fn descent_direction_on_scalar_model() {
        let mk = |m: f64| {
            LatentExpert::free(vec![1.0], LatentParams::new(vec![ComponentParams { mu: DVector::from_vec(vec![m]), u: DMatrix::zeros(1, 1) }]).unwrap()).unwrap()
        };
        let coef = Coefficients::new(1.0, 1.0);
        let truth = mk(0.0);
        let theta = mk(0.3);
        let xs = data(&truth, 100);
        let (l0, g) = loss_and_grad(&theta, &truth, coef, &xs).unwrap();
        assert!(g[0] > 0.0);
        let stepped = theta.with_flat(&(theta.flatten() - g * 0.1));
        assert!(loss_and_grad(&stepped, &truth, coef, &xs).unwrap().0 < l0);
    }

    #[test]
    fn init_near_distances() {
        let truth = two_mode();
        assert_eq!(init_near(&truth, 0.0, 1).unwrap(), truth);
        for seed in 0..100 {
            let d = (init_near(&truth, 0.1, seed).unwrap().flatten() - truth.flatten()).norm();
            assert!((d - 0.1).abs() < 1e-12);
        }
        assert_ne!(init_near(&truth, 0.1, 1).unwrap(), init_near(&truth, 0.1, 2).unwrap());
    }

    #[test]
    fn step_rule_arithmetic() {
        let r = theoretical_step(1.0, 3.0).unwrap();
        assert_eq!((r.eta, r.kappa, r.rho), (0.5, 3.0, 0.5));
        assert_eq!(theoretical_step(1.0, 1.0).unwrap().rho, 0.0);
        assert!(matches!(theoretical_step(0.0, 1.0), Err(Error::NonPositiveAlpha(_))));
        assert!(matches!(theoretical_step(2.0, 1.0), Err(Error::LSmallerThanAlpha { .. })));
    }

    #[test]
    fn quadratic_instance_contracts_at_rate() {
        let mk = |m: f64| {
            LatentExpert::free(vec![1.0], LatentParams::new(vec![ComponentParams { mu: DVector::from_vec(vec![m, -m]), u: DMatrix::zeros(2, 1) }]).unwrap()).unwrap()
        };
        let coef = Coefficients::new(1.0, 1.0);
        let truth = mk(1.0);
        let xs = data(&truth, 2000);
        let cfg = GdConfig { init_radius: 0.3, ..GdConfig::default() };
        let (step, local) = step_rule(&cfg, &truth, coef, &xs).unwrap();
        assert!(local.unwrap().alpha_hat > 0.0);
        let theta0 = init_near(&truth, cfg.init_radius, 3).unwrap();
        let trace = gd_train(&theta0, &truth, coef, &xs, &cfg, step).unwrap();
        let rep = contraction_check(&trace, step.rho, 0.05);
        assert_eq!(rep.fraction, 1.0);
        assert!(trace.rows.windows(2).all(|w| w[1].loss <= w[0].loss || w[0].dist <= trace.floor));
    }

    #[test]
    fn starting_at_truth_stops_immediately() {
        let truth = two_mode();
        let xs = data(&truth, 100);
        let step = theoretical_step(1.0, 2.0).unwrap();
        let trace = gd_train(&truth, &truth, Coefficients::new(1.0, 1.0), &xs, &GdConfig::default(), step).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert!(trace.converged);
        assert_eq!((trace.rows[0].loss, trace.rows[0].dist), (0.0, 0.0));
    }

    #[test]
    fn oversized_step_diverges() {
        let truth = two_mode();
        let xs = data(&truth, 200);
        let theta0 = init_near(&truth, 0.1, 1).unwrap();
        let cfg = GdConfig { eta: StepSize::Fixed(50.0), ..GdConfig::default() };
        let step = StepRule { eta: 50.0, kappa: f64::NAN, rho: f64::NAN };
        let err = gd_train(&theta0, &truth, Coefficients::new(1.0, 1.0), &xs, &cfg, step).unwrap_err();
        assert!(err.is_numerical());
    }

    fn synthetic(ratios: &[f64]) -> TrainTrace {
        let mut dist = 1.0;
        let mut rows = vec![TraceRow { m: 0, loss: 1.0, grad_norm: 1.0, dist, ratio: f64::NAN }];
        for (i, r) in ratios.iter().enumerate() {
            dist *= r;
            rows.push(TraceRow { m: i + 1, loss: dist, grad_norm: dist, dist, ratio: *r });
        }
        TrainTrace { rows, eta: 1.0, kappa: 3.0, rho_bound: 0.5, converged: false, initial_dist: 1.0, floor: 0.0, final_theta: None }
    }

    #[test]
    fn contraction_report_examples() {
        let ok = contraction_check(&synthetic(&[0.4; 10]), 0.5, 0.0);
        assert!(ok.passed);
        assert_eq!(ok.fraction, 1.0);
        let mut r = vec![0.4; 10];
        r[6] = 0.9;
        let bad = contraction_check(&synthetic(&r), 0.5, 0.0);
        assert_eq!(bad.first_violation, Some(7));
        assert_eq!(bad.satisfied, 9);
    }
}
