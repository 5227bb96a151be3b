//! Discrete verification of twistor, Killing and parallel forms on
//! Riemannian products of flat tori and round 2-spheres.

pub mod exchange;
pub mod expr;
pub mod fixtures;
pub mod forms;
pub mod geometry;
pub mod kernels;
pub mod modes;
pub mod multiindex;
pub mod operators;
pub mod oracle;
pub mod stencil;
pub mod suites;

pub use forms::{BidegreeIndex, DiscreteForm, FormError, VectorField};
pub use geometry::{FactorKind, FactorSpec, FrameDirection, GeometryError, ProductGeometry};
pub use kernels::{KernelReport, Relation, SubspaceRelation, TolerancePolicy};
pub use suites::{SuiteError, SuiteOptions, SuiteReport};
