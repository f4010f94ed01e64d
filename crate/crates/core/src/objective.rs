//! Score-matching objectives, Lipschitz constants and the estimation-gap
//! experiment.
//!
//! Losses are expert-wise: a latent sample labelled with subspace `k` is
//! scored only by the `k`-th expert, `ℓ(θ; x) = ‖s_{θ_k}(x) − s*_k(x)‖²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_noise_batch, MolrMogModel};
use crate::rng;
use crate::schedule::{Coefficients, DiffusionSchedule};
use crate::score::{conditional_score, LatentExpert, NoisedMixture};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    FixedT(f64),
    UniformGrid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub t_mode: TimeMode,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Seed of the forward noise drawn per grid time in `UniformGrid` mode.
    #[serde(default)]
    pub seed: u64,
}

fn default_n_mc() -> usize {
    1_000_000
}

impl LossConfig {
    pub fn fixed(t: f64) -> Self {
        Self {
            t_mode: TimeMode::FixedT(t),
            n_mc: default_n_mc(),
            seed: 0,
        }
    }

    /// Evaluation times with normalised trapezoid weights over `[t_min, t_max]`.
    pub fn times(&self, sched: &DiffusionSchedule) -> Result<Vec<(f64, f64)>> {
        match self.t_mode {
            TimeMode::FixedT(t) => {
                sched.coefficients(t)?;
                Ok(vec![(t, 1.0)])
            }
            TimeMode::UniformGrid(m) => {
                if m < 2 {
                    return Err(Error::InvalidArgument(format!("time grid needs at least 2 points, got {m}")));
                }
                let h = (sched.t_max - sched.t_min) / (m - 1) as f64;
                let w = 1.0 / (m - 1) as f64;
                Ok((0..m)
                    .map(|i| {
                        let t = if i == m - 1 { sched.t_max } else { sched.t_min + i as f64 * h };
                        let edge = i == 0 || i == m - 1;
                        (t, if edge { 0.5 * w } else { w })
                    })
                    .collect())
            }
        }
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl LossEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / nf).sqrt(),
            n,
        }
    }

    pub fn variance(&self) -> f64 {
        self.stderr * self.stderr * self.n as f64
    }
}

fn squared_gap(a: &NoisedMixture, b: &NoisedMixture, x: &DVector<f64>) -> f64 {
    (a.score(x) - b.score(x)).norm_squared()
}

/// `‖s_θ(x) − s*(x)‖²` at one latent point.
pub fn sm_pointwise(theta: &LatentExpert, truth: &LatentExpert, coef: Coefficients, x: &DVector<f64>) -> Result<f64> {
    Ok(squared_gap(&theta.mixture(coef)?, &truth.mixture(coef)?, x))
}

fn sm_values(theta: &LatentExpert, truth: &LatentExpert, coef: Coefficients, data: &[DVector<f64>]) -> Result<Vec<f64>> {
    let a = theta.mixture(coef)?;
    let b = truth.mixture(coef)?;
    Ok(rng::par_map(data, |x| squared_gap(&a, &b, x)))
}

/// Mean SM loss over `data` with its standard error.
///
/// With `FixedT`, `data` holds noised samples at that time. With a time grid
/// it holds clean samples, which are noised independently at every grid time
/// and combined with trapezoid weights.
pub fn empirical_loss_estimate(
    theta: &LatentExpert,
    truth: &LatentExpert,
    sched: &DiffusionSchedule,
    cfg: &LossConfig,
    data: &[DVector<f64>],
) -> Result<LossEstimate> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match cfg.t_mode {
        TimeMode::FixedT(t) => Ok(LossEstimate::from_values(&sm_values(theta, truth, sched.coefficients(t)?, data)?)),
        TimeMode::UniformGrid(_) => {
            let mut combined = vec![0.0; data.len()];
            for (i, (t, w)) in cfg.times(sched)?.into_iter().enumerate() {
                let coef = sched.coefficients(t)?;
                let noised = forward_noise_batch(data, coef, rng::derive_seed(cfg.seed, i as u64));
                for (c, v) in combined.iter_mut().zip(sm_values(theta, truth, coef, &noised)?) {
                    *c += w * v;
                }
            }
            Ok(LossEstimate::from_values(&combined))
        }
    }
}

pub fn empirical_loss(
    theta: &LatentExpert,
    truth: &LatentExpert,
    sched: &DiffusionSchedule,
    cfg: &LossConfig,
    data: &[DVector<f64>],
) -> Result<f64> {
    Ok(empirical_loss_estimate(theta, truth, sched, cfg, data)?.mean)
}

/// A clean sample, its noised version and the noise time.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmPair {
    pub x0: DVector<f64>,
    pub xt: DVector<f64>,
    pub t: f64,
}

/// Noises every clean sample at time `t`.
pub fn dsm_pairs(x0s: &[DVector<f64>], sched: &DiffusionSchedule, t: f64, seed: u64) -> Result<Vec<DsmPair>> {
    let coef = sched.coefficients(t)?;
    let xts = forward_noise_batch(x0s, coef, seed);
    Ok(x0s
        .iter()
        .zip(xts)
        .map(|(x0, xt)| DsmPair { x0: x0.clone(), xt, t })
        .collect())
}

fn dsm_values(theta: &LatentExpert, sched: &DiffusionSchedule, pairs: &[DsmPair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = pairs[0].t;
    let coef = sched.coefficients(t)?;
    if pairs.iter().all(|p| p.t == t) {
        let mix = theta.mixture(coef)?;
        let vals = rng::par_map(pairs, |p| {
            conditional_score(&p.xt, &p.x0, coef).map(|c| (c - mix.score(&p.xt)).norm_squared())
        });
        vals.into_iter().collect()
    } else {
        pairs
            .iter()
            .map(|p| {
                let coef = sched.coefficients(p.t)?;
                Ok((conditional_score(&p.xt, &p.x0, coef)? - theta.score(coef, &p.xt)?).norm_squared())
            })
            .collect()
    }
}

/// Mean of `‖∇ log p_t(x_t | x₀) − s_θ(x_t)‖²` over the pairs.
pub fn dsm_loss_estimate(theta: &LatentExpert, sched: &DiffusionSchedule, pairs: &[DsmPair]) -> Result<LossEstimate> {
    Ok(LossEstimate::from_values(&dsm_values(theta, sched, pairs)?))
}

pub fn dsm_loss(theta: &LatentExpert, sched: &DiffusionSchedule, pairs: &[DsmPair]) -> Result<f64> {
    Ok(dsm_loss_estimate(theta, sched, pairs)?.mean)
}

/// Paired comparison of the DSM and SM landscapes between two parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LandscapeProbe {
    pub dsm_diff: f64,
    pub sm_diff: f64,
    /// Mean of the per-sample `(DSM₁ − DSM₂) − (SM₁ − SM₂)`.
    pub mismatch: f64,
    pub stderr: f64,
}

impl LandscapeProbe {
    pub fn z_score(&self) -> f64 {
        if self.stderr > 0.0 { self.mismatch / self.stderr } else { 0.0 }
    }
}

/// DSM and SM differ by a `θ`-independent constant, so the per-sample
/// difference of differences has mean zero.
pub fn landscape_probe(
    theta1: &LatentExpert,
    theta2: &LatentExpert,
    truth: &LatentExpert,
    sched: &DiffusionSchedule,
    pairs: &[DsmPair],
) -> Result<LandscapeProbe> {
    let d1 = dsm_values(theta1, sched, pairs)?;
    let d2 = dsm_values(theta2, sched, pairs)?;
    let coef = sched.coefficients(pairs[0].t)?;
    if pairs.iter().any(|p| p.t != pairs[0].t) {
        return Err(Error::InvalidArgument("landscape probe needs pairs at a single time".into()));
    }
    let xts: Vec<DVector<f64>> = pairs.iter().map(|p| p.xt.clone()).collect();
    let s1 = sm_values(theta1, truth, coef, &xts)?;
    let s2 = sm_values(theta2, truth, coef, &xts)?;
    let diffs: Vec<f64> = (0..pairs.len()).map(|i| (d1[i] - d2[i]) - (s1[i] - s2[i])).collect();
    let est = LossEstimate::from_values(&diffs);
    let n = pairs.len() as f64;
    Ok(LandscapeProbe {
        dsm_diff: d1.iter().zip(&d2).map(|(a, b)| a - b).sum::<f64>() / n,
        sm_diff: s1.iter().zip(&s2).map(|(a, b)| a - b).sum::<f64>() / n,
        mismatch: est.mean,
        stderr: est.stderr,
    })
}

/// Box bounding the parameters, and the component counts `n_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDomain {
    pub b_mu: f64,
    pub b_u: f64,
    pub components_per_subspace: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub radius: f64,
    pub s: f64,
    pub gamma: f64,
    pub b_mu: f64,
    pub b_u: f64,
    pub c_w: f64,
    pub l_mu: f64,
    pub l_u: f64,
    pub l: f64,
    pub l_l: f64,
    pub l_prime: f64,
}

/// Lipschitz constants of the score in `θ` and of the loss in the score, with
/// the unspecified absolute constants taken as 1:
///
/// ```text
/// C_w = (R + s B_μ)³ s² / γ⁴,   L_μ = L_U = C_w / √2
/// L   = √(Σ_k n_k (L_μ² + L_U²)),   L_ℓ = 2 (R + s B_μ) / γ²,   L′ = L L_ℓ
/// ```
pub fn lipschitz_constants(domain: &ParamDomain, coef: Coefficients, radius: f64) -> Result<LipschitzReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be positive")));
    }
    if !(coef.gamma > 0.0) {
        return Err(Error::SingularNoise(coef.gamma));
    }
    let g2 = coef.gamma2();
    let reach = radius + coef.s * domain.b_mu;
    let c_w = reach.powi(3) * coef.s * coef.s / (g2 * g2);
    let l_mu = c_w / 2f64.sqrt();
    let l_u = l_mu;
    let n_total: usize = domain.components_per_subspace.iter().sum();
    let l = (n_total as f64 * (l_mu * l_mu + l_u * l_u)).sqrt();
    let l_l = 2.0 * reach / g2;
    Ok(LipschitzReport {
        radius,
        s: coef.s,
        gamma: coef.gamma,
        b_mu: domain.b_mu,
        b_u: domain.b_u,
        c_w,
        l_mu,
        l_u,
        l,
        l_l,
        l_prime: l * l_l,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzAudit {
    pub probes: usize,
    pub max_ratio: f64,
    pub bound: f64,
}

impl LipschitzAudit {
    pub fn holds(&self) -> bool {
        self.max_ratio <= self.bound
    }
}

fn random_in_ball(rng: &mut rng::Rng, d: usize, radius: f64) -> DVector<f64> {
    let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    let norm = dir.norm().max(1e-300);
    dir * (r / norm)
}

fn random_params(template: &LatentExpert, domain: &ParamDomain, rng: &mut rng::Rng) -> LatentExpert {
    let mut out = template.clone();
    for c in &mut out.params.components {
        c.mu = random_in_ball(rng, c.mu.len(), domain.b_mu);
        let (r, k) = c.u.shape();
        let flat = random_in_ball(rng, r * k, domain.b_u);
        c.u = DMatrix::from_column_slice(r, k, flat.as_slice());
    }
    out
}

/// Largest observed `‖s_θ(x) − s_θ′(x)‖ / ‖θ − θ′‖` over random `θ, θ′` in the
/// domain and `x` in the radius-`R` ball, against the reported `L`.
pub fn lipschitz_audit(
    report: &LipschitzReport,
    template: &LatentExpert,
    domain: &ParamDomain,
    coef: Coefficients,
    probes: usize,
    seed: u64,
) -> Result<LipschitzAudit> {
    let ratios = rng::par_shards(probes, seed, |range, rng| -> Result<f64> {
        let mut best = 0.0f64;
        for _ in range {
            let a = random_params(template, domain, rng);
            let b = random_params(template, domain, rng);
            let x = random_in_ball(rng, template.dim(), report.radius);
            let num = (a.score(coef, &x)? - b.score(coef, &x)?).norm();
            let den = (a.flatten() - b.flatten()).norm();
            if den > 0.0 {
                best = best.max(num / den);
            }
        }
        Ok(best)
    });
    let mut max_ratio = 0.0f64;
    for r in ratios {
        max_ratio = max_ratio.max(r?);
    }
    Ok(LipschitzAudit {
        probes,
        max_ratio,
        bound: report.l,
    })
}

/// Noised latent samples `(k, s x₀ + γ ξ)` with subspace labels.
pub fn noised_latent_data(model: &MolrMogModel, coef: Coefficients, n: usize, seed: u64) -> Vec<(usize, DVector<f64>)> {
    let clean = model.sample_data(n, seed);
    let latents: Vec<DVector<f64>> = clean.iter().map(|s| s.latent.clone()).collect();
    let noised = forward_noise_batch(&latents, coef, rng::derive_seed(seed, 0x6e6f_6973));
    clean.into_iter().zip(noised).map(|(s, x)| (s.k, x)).collect()
}

/// Score mixtures of one parameter point, one per subspace.
struct ExpertSet(Vec<NoisedMixture>);

impl ExpertSet {
    fn new(experts: &[LatentExpert], coef: Coefficients) -> Result<Self> {
        experts.iter().map(|e| e.mixture(coef)).collect::<Result<Vec<_>>>().map(Self)
    }

    fn loss(&self, truth_scores: &[DVector<f64>], data: &[(usize, DVector<f64>)]) -> Vec<f64> {
        data.iter()
            .zip(truth_scores)
            .map(|((k, x), s)| (self.0[*k].score(x) - s).norm_squared())
            .collect()
    }
}

/// Expert-wise SM loss of a full parameter set on labelled latent data.
pub fn model_loss(
    theta: &[LatentExpert],
    truth: &[LatentExpert],
    coef: Coefficients,
    data: &[(usize, DVector<f64>)],
) -> Result<LossEstimate> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = ExpertSet::new(truth, coef)?;
    let a = ExpertSet::new(theta, coef)?;
    let vals = rng::par_map(data, |(k, x)| (a.0[*k].score(x) - t.0[*k].score(x)).norm_squared());
    Ok(LossEstimate::from_values(&vals))
}

/// `count` points of a Halton sequence in `[0, 1)^dim`.
pub fn halton(count: usize, dim: usize) -> Vec<Vec<f64>> {
    let primes = first_primes(dim);
    (1..=count)
        .map(|i| {
            primes
                .iter()
                .map(|&b| {
                    let (mut f, mut r, mut n) = (1.0, 0.0, i);
                    while n > 0 {
                        f /= b as f64;
                        r += f * (n % b) as f64;
                        n /= b;
                    }
                    r
                })
                .collect()
        })
        .collect()
}

fn first_primes(n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2;
    while out.len() < n {
        if out.iter().all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Stratified grid of `count` parameter sets inside the box of half-width
/// `half_width` around `truth` (in every flattened coordinate).
pub fn theta_grid(truth: &[LatentExpert], half_width: f64, count: usize) -> Vec<Vec<LatentExpert>> {
    let sizes: Vec<usize> = truth.iter().map(|e| e.n_params()).collect();
    let dim: usize = sizes.iter().sum();
    halton(count, dim)
        .into_iter()
        .map(|h| {
            let mut offset = 0;
            truth
                .iter()
                .zip(&sizes)
                .map(|(e, &p)| {
                    let base = e.flatten();
                    let shifted = DVector::from_fn(p, |i, _| base[i] + half_width * (2.0 * h[offset + i] - 1.0));
                    offset += p;
                    e.with_flat(&shifted)
                })
                .collect()
        })
        .collect()
}

fn flat_all(theta: &[LatentExpert]) -> DVector<f64> {
    let parts: Vec<f64> = theta.iter().flat_map(|e| e.flatten().iter().copied().collect::<Vec<_>>()).collect();
    DVector::from_vec(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimationRow {
    pub n: usize,
    pub sup_gap: f64,
    pub stderr: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationReport {
    pub rows: Vec<EstimationRow>,
    pub slope: f64,
    /// Diameter of the parameter grid.
    pub c1: f64,
    /// Largest per-sample loss variance over the grid.
    pub sigma2: f64,
    /// `2 Σ_k n_k d_k`.
    pub p: usize,
    pub lipschitz: LipschitzReport,
    pub trials: usize,
    pub grid_size: usize,
    pub n_mc: usize,
    /// Confidence parameter of the bound.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n_schedule: Vec<usize>,
    pub trials: usize,
    pub n_mc: usize,
    pub t: f64,
    #[serde(default = "default_confidence")]
    pub delta: f64,
    #[serde(default = "default_support_mass")]
    pub support_mass: f64,
}

fn default_confidence() -> f64 {
    0.05
}

fn default_support_mass() -> f64 {
    0.999
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Sup over the grid of `|L(θ) − L̂_n(θ)|`, averaged over independent trials,
/// for every `n`. The population loss is a Monte Carlo estimate on `n_mc`
/// samples shared by all grid points.
pub fn estimation_gap_experiment(
    model: &MolrMogModel,
    grid: &[Vec<LatentExpert>],
    sched: &DiffusionSchedule,
    cfg: &EstimationConfig,
    seed: u64,
) -> Result<EstimationReport> {
    if grid.is_empty() {
        return Err(Error::GridEmpty);
    }
    if cfg.trials == 0 || cfg.n_schedule.is_empty() {
        return Err(Error::InvalidArgument("estimation needs at least one trial and one sample size".into()));
    }
    let coef = sched.coefficients(cfg.t)?;
    let truth: Vec<LatentExpert> = model.subspaces.iter().map(LatentExpert::from_subspace).collect();
    let truth_set = ExpertSet::new(&truth, coef)?;
    let truth_scores = |data: &[(usize, DVector<f64>)]| -> Vec<DVector<f64>> {
        rng::par_map(data, |(k, x)| truth_set.0[*k].score(x))
    };
    let grid_sets = grid.iter().map(|g| ExpertSet::new(g, coef)).collect::<Result<Vec<_>>>()?;

    let pop_data = noised_latent_data(model, coef, cfg.n_mc, rng::derive_seed(seed, u64::MAX));
    let pop_truth = truth_scores(&pop_data);
    let population: Vec<LossEstimate> = grid_sets
        .iter()
        .map(|set| {
            let vals = rng::par_chunks(&(0..pop_data.len()).collect::<Vec<_>>(), |idx| {
                let lo = idx[0];
                let hi = lo + idx.len();
                set.loss(&pop_truth[lo..hi], &pop_data[lo..hi])
            });
            LossEstimate::from_values(&vals.concat())
        })
        .collect();
    let sigma2 = population.iter().map(|e| e.variance()).fold(0.0, f64::max);

    let mut sorted = cfg.n_schedule.clone();
    sorted.sort_unstable();
    let jobs: Vec<(usize, usize)> = sorted
        .iter()
        .enumerate()
        .flat_map(|(i, _)| (0..cfg.trials).map(move |tr| (i, tr)))
        .collect();
    let gaps: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, tr)| {
            let n = sorted[i];
            let data = noised_latent_data(model, coef, n, rng::derive_seed(rng::derive_seed(seed, tr as u64), n as u64));
            let ts: Vec<DVector<f64>> = data.iter().map(|(k, x)| truth_set.0[*k].score(x)).collect();
            grid_sets
                .iter()
                .zip(&population)
                .map(|(set, pop)| {
                    let emp = set.loss(&ts, &data).iter().sum::<f64>() / n as f64;
                    (pop.mean - emp).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();

    let flats: Vec<DVector<f64>> = grid.iter().map(|g| flat_all(g)).collect();
    let mut c1 = 0.0f64;
    let mut b_mu = 0.0f64;
    let mut b_u = 0.0f64;
    for (i, f) in flats.iter().enumerate() {
        for g in &flats[i + 1..] {
            c1 = c1.max((f - g).norm());
        }
    }
    for g in grid {
        for e in g {
            for c in &e.params.components {
                b_mu = b_mu.max(c.mu.norm());
                b_u = b_u.max(c.u.norm());
            }
        }
    }
    let domain = ParamDomain {
        b_mu,
        b_u,
        components_per_subspace: model.subspaces.iter().map(|s| s.components.len()).collect(),
    };
    let radius = model.support_radius(cfg.support_mass)?;
    let lipschitz = lipschitz_constants(&domain, coef, radius)?;
    let p: usize = 2 * model.subspaces.iter().map(|s| s.components.len() * s.latent_dim()).sum::<usize>();
    let sigma = sigma2.sqrt();
    let complexity = (p / 2) as f64;

    let rows: Vec<EstimationRow> = sorted
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let per_trial = &gaps[i * cfg.trials..(i + 1) * cfg.trials];
            let est = LossEstimate::from_values(per_trial);
            let nf = n as f64;
            let bound = c1 * lipschitz.l * lipschitz.l_l * (complexity / nf).sqrt()
                + sigma * std::f64::consts::LN_2 * ((1.0 / cfg.delta).ln() / nf).sqrt();
            EstimationRow {
                n,
                sup_gap: est.mean,
                stderr: est.stderr,
                bound,
            }
        })
        .collect();
    let positive: Vec<&EstimationRow> = rows.iter().filter(|r| r.sup_gap > 0.0).collect();
    let slope = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = positive.iter().map(|r| r.sup_gap).collect();
        log_log_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(EstimationReport {
        rows,
        slope,
        c1,
        sigma2,
        p,
        lipschitz,
        trials: cfg.trials,
        grid_size: grid.len(),
        n_mc: cfg.n_mc,
        delta: cfg.delta,
    })
}
