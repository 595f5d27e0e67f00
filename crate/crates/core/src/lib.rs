//! Numerical toolkit for chain control sets of control-affine systems:
//! set-oriented chain control set computation, hyperbolic splittings along
//! lifted trajectories, skew-product shadowing, fiber transport between
//! controls, and invariance entropy estimation.

pub mod chain;
pub mod cli;
pub mod control;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod hyperbolic;
pub mod metric;
pub mod shadow;
pub mod system;
mod util;

pub use control::{convex_combination, shrink_control_range, ControlFunction, ControlRange};
pub use error::{Error, Result};
pub use flow::{flow_point, flow_with_derivative, integrate, variational_flow, Trajectory};
pub use system::{ControlAffineSystem, Domain, VectorFields};
