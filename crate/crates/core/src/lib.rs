//! Desk-scale laboratory for exact controllability of stochastic transport
//! equations: forward and backward solvers on a binomial scenario tree,
//! Carleman-weight diagnostics, Gramian-based control synthesis and
//! demonstrations of the obstructions to controllability.

pub mod backward;
pub mod carleman;
pub mod coefficients;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod hum;
pub mod negative;
pub mod par;
pub mod scheme;
pub mod tree;

pub use backward::{
    adjoint_from_forward, backward_solve, duality_pairing_check, hidden_regularity_trace,
    BackwardCoefficientSet, BackwardPath, DualityReport,
};
pub use coefficients::{rng_for, Coef, CoefBounds, CoefficientSet, RandomCoefSpec};
pub use error::{Result, StcError};
pub use forward::{
    energy_report, expectation_field, forward_solve, forward_step_matrices, ControlPair,
    EnergyReport, StatePath, StepMatrices,
};
pub use geometry::{
    weighted_inflow_norm, BoundaryFace, BoundaryTrace, Domain, Geometry, GeometrySpec,
};
pub use scheme::{Discretization, SubstepRule, TimeGrid, TransportStencil};
pub use tree::{AdaptedField, AdaptedScalar, ScenarioTree};
