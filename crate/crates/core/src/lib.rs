//! Implicit (Newmark, Newton-GMRES) and explicit Material Point Method time
//! stepping for hyperelastic solids, with trace-based evaluation metrics.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constitutive;
pub mod error;
pub mod fill;
pub mod implicit;
pub mod metrics;
pub mod model;
pub mod shape;
pub mod solver;
pub mod stepper;
pub mod trace;
pub mod transfers;

pub use error::{Error, Result};
pub use model::{
    Aabb, BoundaryCondition, ForcingMode, GridState, Mat3, MaterialModel, MaterialParams,
    NewmarkParams, NodeClass, ParticleSet, ParticleSource, SimConfig, SolverParams, TimeConfig,
    Vec3,
};
pub use stepper::{run_simulation, Method, Simulation, StepSchedule};
pub use trace::{read_trace, write_trace, ClampMask, SubstepRecord, Trace, TraceMeta};
