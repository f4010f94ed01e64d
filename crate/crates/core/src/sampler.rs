//! Euler–Maruyama integration of the reverse-time SDE
//! `dy = [f(t) y − g(t)² ∇log p_t(y)] dt + g(t) dB̄`, from `t_max` down to
//! `t_min`, and diagnostics comparing samples with the known marginals.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_noise_batch, EquivalentGaussian, MolrMogModel};
use crate::rng::{self, SHARD_SIZE};
use crate::schedule::{Coefficients, DiffusionSchedule};
use crate::score::{ambient_mixture, LatentExpert, NoisedMixture};

/// A time-dependent score `∇ log p_t`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn score_batch(&self, t: f64, xs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>>;
    /// Gaussian used to start the reverse process at time `t`.
    fn prior(&self, t: f64) -> Result<EquivalentGaussian>;
}

type MixtureAt<'a> = Box<dyn Fn(Coefficients) -> Result<NoisedMixture> + Send + Sync + 'a>;

/// Score of a noised mixture whose parameters are fixed and whose noise
/// level follows a schedule.
pub struct MixtureField<'a> {
    sched: DiffusionSchedule,
    dim: usize,
    build: MixtureAt<'a>,
}

impl<'a> MixtureField<'a> {
    /// Exact ambient score of the ground-truth model.
    pub fn ambient(model: &'a MolrMogModel, sched: DiffusionSchedule) -> Self {
        Self {
            sched,
            dim: model.ambient_dim,
            build: Box::new(move |coef| ambient_mixture(model, coef)),
        }
    }

    /// Latent score of one expert.
    pub fn latent(expert: &'a LatentExpert, sched: DiffusionSchedule) -> Self {
        Self {
            sched,
            dim: expert.dim(),
            build: Box::new(move |coef| expert.mixture(coef)),
        }
    }

    fn mixture(&self, t: f64) -> Result<NoisedMixture> {
        (self.build)(self.sched.coefficients(t)?)
    }
}

impl ScoreField for MixtureField<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_batch(&self, t: f64, xs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mix = self.mixture(t)?;
        Ok(rng::par_map(xs, |x| mix.score(x)))
    }

    fn prior(&self, t: f64) -> Result<EquivalentGaussian> {
        Ok(self.mixture(t)?.moments())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn draw_gaussian(g: &EquivalentGaussian, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let chol = g
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("prior covariance is not positive definite".into()))?;
    let l = chol.l();
    let d = g.mean.len();
    Ok(rng::par_shards(n, seed, |range, rng| {
        range
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                &g.mean + &l * z
            })
            .collect::<Vec<_>>()
    })
    .concat())
}

/// Integrates `cfg.steps` uniform reverse steps over `[t_min, t_max]`.
/// Without `init`, trajectories start from the moment-matched Gaussian of the
/// field at `t_max`.
pub fn reverse_sample(
    field: &dyn ScoreField,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    init: Option<Vec<DVector<f64>>>,
) -> Result<Vec<DVector<f64>>> {
    let mut ys = match init {
        Some(v) => {
            if v.iter().any(|y| y.len() != field.dim()) {
                return Err(Error::DimensionMismatch("initial samples do not match the score dimension".into()));
            }
            v
        }
        None => draw_gaussian(&field.prior(sched.t_max)?, cfg.n, rng::derive_seed(cfg.seed, 0))?,
    };
    if cfg.steps == 0 {
        return Ok(ys);
    }
    let h = (sched.t_max - sched.t_min) / cfg.steps as f64;
    let sqrt_h = h.sqrt();
    let noise_seed = rng::derive_seed(cfg.seed, 1);
    let mut rngs: Vec<rng::Rng> = (0..ys.len().div_ceil(SHARD_SIZE))
        .map(|i| rng::stream(noise_seed, i as u64))
        .collect();
    for step in 0..cfg.steps {
        let t = sched.t_max - step as f64 * h;
        let f = sched.drift(t);
        let g = sched.diffusion(t);
        let scores = field.score_batch(t, &ys)?;
        ys.par_chunks_mut(SHARD_SIZE)
            .zip(scores.par_chunks(SHARD_SIZE))
            .zip(rngs.par_iter_mut())
            .for_each(|((chunk, sc), rng)| {
                for (y, s) in chunk.iter_mut().zip(sc) {
                    let z = DVector::from_fn(y.len(), |_, _| StandardNormal.sample(rng));
                    let drift = &*y * (-f) + s * (g * g);
                    *y += drift * h + z * (g * sqrt_h);
                }
            });
        if ys.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
            return Err(Error::NaNDetected { step });
        }
    }
    Ok(ys)
}

/// Direct draws from the noised ambient marginal at `t`.
pub fn direct_samples(model: &MolrMogModel, sched: &DiffusionSchedule, t: f64, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let coef = sched.coefficients(t)?;
    let clean: Vec<DVector<f64>> = model.sample_data(n, seed).into_iter().map(|s| s.x).collect();
    Ok(forward_noise_batch(&clean, coef, rng::derive_seed(seed, 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentQuality {
    pub k: usize,
    pub l: usize,
    pub count: usize,
    pub weight: f64,
    pub weight_target: f64,
    /// Largest coordinate error of the empirical mean.
    pub mean_err: f64,
    /// Largest mean error in units of its standard error.
    pub mean_z: f64,
    /// Largest entry error of the empirical covariance.
    pub cov_err: f64,
    /// Largest covariance error in units of its standard error.
    pub cov_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityReport {
    pub n: usize,
    pub t: f64,
    pub components: Vec<ComponentQuality>,
    pub max_weight_err: f64,
    pub max_mean_z: f64,
    pub max_cov_z: f64,
}

/// Per-component weights and moments of `samples` against the noised model
/// at time `t`, assigning each sample to its most responsible component.
pub fn sample_quality(samples: &[DVector<f64>], model: &MolrMogModel, sched: &DiffusionSchedule, t: f64) -> Result<QualityReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = model.ambient_dim;
    if samples.iter().any(|x| x.len() != d) {
        return Err(Error::DimensionMismatch(format!("samples must have length {d}")));
    }
    let mix = ambient_mixture(model, sched.coefficients(t)?)?;
    let labels = rng::par_map(samples, |x| mix.assign(x));
    let labels_kl: Vec<(usize, usize)> = model
        .subspaces
        .iter()
        .enumerate()
        .flat_map(|(k, s)| (0..s.components.len()).map(move |l| (k, l)))
        .collect();
    let n = samples.len() as f64;
    let mut components = Vec::new();
    for (c, comp) in mix.components.iter().enumerate() {
        let members: Vec<&DVector<f64>> = samples.iter().zip(&labels).filter(|(_, &a)| a == c).map(|(x, _)| x).collect();
        let count = members.len();
        let truth_cov = comp.covariance();
        let (mut mean_err, mut mean_z, mut cov_err, mut cov_z) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
        if count >= 2 {
            let m = count as f64;
            let mean = members.iter().fold(DVector::zeros(d), |acc, x| acc + *x) / m;
            let mut cov = DMatrix::zeros(d, d);
            for x in &members {
                let dev = *x - &mean;
                cov += &dev * dev.transpose();
            }
            cov /= m - 1.0;
            mean_err = 0.0;
            mean_z = 0.0;
            cov_err = 0.0;
            cov_z = 0.0;
            for i in 0..d {
                let e = (mean[i] - comp.mean[i]).abs();
                mean_err = mean_err.max(e);
                mean_z = mean_z.max(e / (truth_cov[(i, i)] / m).sqrt());
                for j in 0..d {
                    let e = (cov[(i, j)] - truth_cov[(i, j)]).abs();
                    let se = ((truth_cov[(i, i)] * truth_cov[(j, j)] + truth_cov[(i, j)].powi(2)) / m).sqrt();
                    cov_err = cov_err.max(e);
                    cov_z = cov_z.max(e / se);
                }
            }
        }
        components.push(ComponentQuality {
            k: labels_kl[c].0,
            l: labels_kl[c].1,
            count,
            weight: count as f64 / n,
            weight_target: mix.log_weights[c].exp(),
            mean_err,
            mean_z,
            cov_err,
            cov_z,
        });
    }
    let fold = |f: fn(&ComponentQuality) -> f64| components.iter().map(f).filter(|v| v.is_finite()).fold(0.0, f64::max);
    Ok(QualityReport {
        n: samples.len(),
        t,
        max_weight_err: fold(|c| (c.weight - c.weight_target).abs()),
        max_mean_z: fold(|c| c.mean_z),
        max_cov_z: fold(|c| c.cov_z),
        components,
    })
}
