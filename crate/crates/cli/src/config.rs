//! Experiment configuration, dot-path overrides and the config hash.

use std::path::{Path, PathBuf};

use molrmog_core::calculus::JacobianMode;
use molrmog_core::model::ModelSpec;
use molrmog_core::objective::{LossConfig, TimeMode};
use molrmog_core::optimizer::GdConfig;
use molrmog_core::sampler::SamplerConfig;
use molrmog_core::{DiffusionSchedule, LatentExpert, MolrMogModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threads {
    Count(usize),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for Threads {
    fn default() -> Self {
        Threads::Auto(AutoTag::Auto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TyingSpec {
    #[default]
    Free,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreCheckConfig {
    pub trials: usize,
    pub h: f64,
}

impl Default for ScoreCheckConfig {
    fn default() -> Self {
        Self { trials: 200, h: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationBlock {
    pub n_schedule: Vec<usize>,
    pub trials: usize,
    pub grid_size: usize,
    pub half_width: f64,
    pub delta: f64,
    pub support_mass: f64,
}

impl Default for EstimationBlock {
    fn default() -> Self {
        Self {
            n_schedule: (7..=13).map(|e| 1usize << e).collect(),
            trials: 20,
            grid_size: 64,
            half_width: 0.25,
            delta: 0.05,
            support_mass: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianBlock {
    pub subspace: usize,
    pub tying: TyingSpec,
    pub n_mc: usize,
    pub jac_mode: JacobianMode,
}

impl Default for HessianBlock {
    fn default() -> Self {
        Self {
            subspace: 0,
            tying: TyingSpec::Free,
            n_mc: 100_000,
            jac_mode: JacobianMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapBlock {
    pub subspace: usize,
    pub tying: TyingSpec,
    pub n_samples: usize,
    /// Factors applied to every component mean, one analysis per factor.
    pub mean_scales: Vec<f64>,
    pub support_mass: f64,
}

impl Default for OverlapBlock {
    fn default() -> Self {
        Self {
            subspace: 0,
            tying: TyingSpec::Free,
            n_samples: 20_000,
            mean_scales: vec![1.0],
            support_mass: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBlock {
    #[serde(flatten)]
    pub gd: GdConfig,
    #[serde(default)]
    pub subspace: usize,
    #[serde(default)]
    pub tying: TyingSpec,
    #[serde(default = "default_train_n")]
    pub n: usize,
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_train_n() -> usize {
    100_000
}

fn default_slack() -> f64 {
    0.05
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            gd: GdConfig::default(),
            subspace: 0,
            tying: TyingSpec::Free,
            n: default_train_n(),
            slack: default_slack(),
        }
    }
}

fn default_loss() -> LossConfig {
    LossConfig::fixed(0.5)
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig {
        steps: 500,
        n: 100_000,
        seed: 0,
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub threads: Threads,
    pub schedule: DiffusionSchedule,
    pub model: ModelSpec,
    #[serde(default = "default_loss")]
    pub loss: LossConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub score_check: ScoreCheckConfig,
    #[serde(default)]
    pub estimation: EstimationBlock,
    #[serde(default)]
    pub hessian: HessianBlock,
    #[serde(default)]
    pub overlap: OverlapBlock,
    #[serde(default)]
    pub gd: TrainBlock,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigParse(format!("{}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::ConfigParse(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| CliError::ConfigParse(e.to_string()))
    }

    /// Validates every block before any computation starts.
    pub fn validate(&self) -> CliResult<MolrMogModel> {
        self.schedule.validate()?;
        let model = self.model.build()?;
        if let TimeMode::FixedT(t) = self.loss.t_mode {
            self.schedule.coefficients(t)?;
        }
        self.gd.gd.validate()?;
        for (name, k) in [("hessian", self.hessian.subspace), ("overlap", self.overlap.subspace), ("gd", self.gd.subspace)] {
            if k >= model.num_subspaces() {
                return Err(CliError::Validation(format!("{name}.subspace {k} out of range")));
            }
        }
        Ok(model)
    }

    /// The single evaluation time used by fixed-time subcommands.
    pub fn fixed_time(&self) -> CliResult<f64> {
        match self.loss.t_mode {
            TimeMode::FixedT(t) => Ok(t),
            TimeMode::UniformGrid(_) => Err(CliError::Validation(
                "this subcommand needs loss.t_mode = {\"fixed_t\": t}".into(),
            )),
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring where and how the run
    /// executes (`out_dir`, `threads`).
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut value {
            map.remove("out_dir");
            map.remove("threads");
        }
        let canonical = serde_json::to_string(&value).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and kept
/// as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::ConfigParse(format!("override `{spec}` is not of the form key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::ConfigParse(format!("override path `{path}` has an empty segment")));
        }
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*key).to_string(), parsed);
                    return Ok(());
                }
                map.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| CliError::ConfigParse(format!("`{key}` in `{path}` is not an array index")))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::ConfigParse(format!("index {idx} out of range in `{path}`")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::ConfigParse(format!("`{path}` descends into a scalar"))),
        };
    }
    Ok(())
}

/// Builds the expert of subspace `k` under the requested tying. The
/// symmetric form requires the subspace to be the pair `±μ` with shared `U`
/// and equal weights.
pub fn expert_for(model: &MolrMogModel, k: usize, tying: TyingSpec) -> CliResult<LatentExpert> {
    let sub = &model.subspaces[k];
    match tying {
        TyingSpec::Free => Ok(LatentExpert::from_subspace(sub)),
        TyingSpec::Symmetric => {
            let c = &sub.components;
            let ok = c.len() == 2
                && (c[0].pi - 0.5).abs() < 1e-12
                && (&c[0].mu + &c[1].mu).amax() < 1e-12
                && c[0].u.shape() == c[1].u.shape()
                && (&c[0].u - &c[1].u).amax() < 1e-12;
            if !ok {
                return Err(CliError::Validation(format!(
                    "subspace {k} is not a symmetric pair (±μ, shared U, weights 1/2)"
                )));
            }
            Ok(LatentExpert::symmetric(c[0].mu.clone(), c[0].u.clone())?)
        }
    }
}
