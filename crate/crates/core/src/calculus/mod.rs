//! Parameter derivatives of the score and the curvature they induce.

mod convexity;
mod hessian;
mod jacobian;
mod overlap;

pub use convexity::*;
pub use hessian::*;
pub use jacobian::*;
pub use overlap::*;
