//! Shared geometries and tolerance policies for the criterion benches.

use std::sync::Arc;

use twistor_core::kernels::TolerancePolicy;
use twistor_core::oracle::calibrate;
use twistor_core::{FactorSpec, ProductGeometry};

/// `S² × T¹` with the sphere at `n_theta × 2 n_theta`.
pub fn sphere_circle(n_theta: usize, n_circle: usize) -> Arc<ProductGeometry> {
    ProductGeometry::build(
        &[
            FactorSpec::sphere(1.0, n_theta, 2 * n_theta),
            FactorSpec::unit_torus(1, n_circle),
        ],
        None,
    )
    .expect("valid grid")
}

/// Flat `T² × T¹` with `n` points per circle.
pub fn flat_three_torus(n: usize) -> Arc<ProductGeometry> {
    ProductGeometry::build(&[FactorSpec::unit_torus(2, n), FactorSpec::unit_torus(1, n)], None).expect("valid grid")
}

/// Policy calibrated against the built-in analytic oracle.
pub fn calibrated_policy(g: &Arc<ProductGeometry>) -> TolerancePolicy {
    if g.is_flat() {
        return TolerancePolicy::exact(g);
    }
    let cal = calibrate(g).expect("oracle fields assemble");
    TolerancePolicy::new(g, cal.constant)
}
