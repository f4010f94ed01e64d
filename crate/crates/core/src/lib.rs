//! Numerical laboratory for mixture-of-low-rank-MoG (MoLR-MoG) diffusion
//! models: exact scores, score-matching losses, Jacobian and Hessian
//! analysis, gradient-descent training and reverse-SDE sampling.

pub mod calculus;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};
pub use model::{EquivalentGaussian, LabeledSample, MogComponent, MolrMogModel, Subspace};
pub use schedule::{Coefficients, DiffusionSchedule, ScheduleKind};
pub use score::{ComponentParams, LatentExpert, LatentParams, NoisedComponent, NoisedMixture, Tying};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
