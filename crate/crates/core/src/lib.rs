//! Numerical laboratory for heat flow and entropy flow on Carnot groups.
//!
//! The crate discretises a stratified Lie group on a box lattice in
//! exponential coordinates and provides: the sub-Laplacian heat semigroup,
//! entropy / Fisher-information functionals, Wasserstein distances between
//! grid measures (exact and entropic solvers), the minimizing-movement (JKO)
//! scheme, and probes for the Bakry-Emery gradient inequality. Everything is
//! generic over the floating-point scalar; `f64` aliases are exported at the
//! crate root.

pub mod curvature;
pub mod distance;
pub mod error;
pub mod flow;
pub mod functionals;
pub mod group;
pub mod heat;
pub mod lattice;
pub mod poly;
pub mod scalar;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use group::{BoxNormParams, BracketCoeff, GroupPoint, StratifiedAlgebra};

/// f64 aliases for the main domain types.
pub type Group64 = group::StratifiedAlgebra<f64>;
pub type Point64 = group::GroupPoint<f64>;
pub type BoxNorm64 = group::BoxNormParams<f64>;
pub type Lattice64 = lattice::Lattice<f64>;
pub type GridMeasure64 = lattice::GridMeasure<f64>;
pub type FlowTrace64 = lattice::FlowTrace<f64>;
pub type SubLaplacian64 = heat::SubLaplacian<f64>;
pub type DiscreteMeasure64 = transport::DiscreteMeasure<f64>;
pub type TransportPlan64 = transport::TransportPlan<f64>;

/// f32 aliases (desk-scale experiments run in f64; these exist for
/// lower-precision work).
pub type Group32 = group::StratifiedAlgebra<f32>;
pub type Lattice32 = lattice::Lattice<f32>;
pub type GridMeasure32 = lattice::GridMeasure<f32>;
