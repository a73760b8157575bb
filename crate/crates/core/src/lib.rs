//! Constrained derivative-free trajectory optimization for multi-zone
//! roll-to-roll web transport.
//!
//! The toolkit is organized around an adaptive trajectory bundle method:
//! instead of linearizing the web dynamics, each outer iteration samples
//! candidate state-control pairs inside a trust region, evaluates the
//! dynamics, cost residuals, and constraints at every sample, and solves a
//! convex subproblem over simplex interpolation weights. Trust region and
//! exact-penalty weights adapt from the observed constraint violations.
//!
//! Crate layout:
//! - [`plant`]: tension/velocity dynamics, deterministic propagation, the
//!   stochastic simulation stepper, and equilibrium reference generation;
//! - [`bundle`]: trust-region sampling stencil and bundle matrix assembly;
//! - [`subproblem`]: the convex QP over simplex weights and slack blocks;
//! - [`adapt`]: violation metrics, trust-region and penalty schedules;
//! - [`certificate`]: penalized objective, Lipschitz estimates, complexity
//!   bounds, and per-iteration inequality monitors;
//! - [`problem`]: the web-transport tracking problem and LQR baseline;
//! - [`orchestrator`]: the outer loop and receding-horizon driver;
//! - [`io`]: scenario configs, CSV traces, metrics, and plot emission;
//! - [`verify`]: brute-force oracles and the randomized property campaign.

// Validation predicates are written as `!(v > 0.0)` on purpose: the
// negated form rejects NaN, which `v <= 0.0` would accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod bundle;
pub mod certificate;
pub mod error;
pub mod io;
pub mod orchestrator;
pub mod plant;
pub mod problem;
pub mod subproblem;
pub mod verify;

pub use adapt::{AdaptConfig, AdaptState, Violations};
pub use bundle::{BundleSet, ProblemDims, ProblemFunctions, Trajectory};
pub use certificate::{BoundReport, LipschitzEstimates, MonitorRecord};
pub use error::Error;
pub use io::{MetricsReport, ScenarioConfig};
pub use orchestrator::{ClosedLoopTrace, ControllerKind, ScenarioRuntime, SolveTrace, TbmStatus};
pub use plant::PlantParams;
pub use problem::{Bounds, R2RProblem, SoftBand, Weights};
pub use subproblem::{SolveSettings, SubproblemSolution};
