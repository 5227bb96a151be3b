//! Numerical kernels of assembled operators in weighted L² norms.
//!
//! Operators are block-diagonalized exactly by a discrete Fourier transform
//! along the geometry's invariant axes. Each block couples the base points
//! of one mode; its singular values are screened through the sparse Gram
//! matrix and refined by a dense SVD wherever they come close to zero.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::forms::{l2_inner, DiscreteForm, FormError};
use crate::geometry::ProductGeometry;
use crate::operators::{OperatorHandle, SpaceKind};

pub const DEFAULT_MIN_GAP: f64 = 50.0;
pub const DEFAULT_RELATIVE_FLOOR: f64 = 1e-10;
pub const DEFAULT_ANGLE_TOL: f64 = 1e-3;
pub const DENSE_LIMIT: usize = 6000;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("ambiguous rank for {}: gap {:.3e} below {:.1}", .0.operator_name, .0.gap, .0.min_gap)]
    AmbiguousRank(Box<KernelReport>),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("bases live on different geometries or degrees")]
    GeometryMismatch,
    #[error(transparent)]
    Form(#[from] FormError),
}

/// Rank-detection tolerances: `τ(h) = C·h⁴`, floored at
/// `relative_floor · σ_max`.
#[derive(Clone, Debug, Serialize)]
pub struct TolerancePolicy {
    pub calibration: f64,
    pub mesh_size: f64,
    pub min_gap: f64,
    pub relative_floor: f64,
    pub angle_tol: f64,
    pub dense_limit: usize,
}

impl TolerancePolicy {
    pub fn new(geometry: &ProductGeometry, calibration: f64) -> Self {
        TolerancePolicy {
            calibration,
            mesh_size: geometry.mesh_size(),
            min_gap: DEFAULT_MIN_GAP,
            relative_floor: DEFAULT_RELATIVE_FLOOR,
            angle_tol: DEFAULT_ANGLE_TOL,
            dense_limit: DENSE_LIMIT,
        }
    }

    /// Flat policy: only the relative floor applies.
    pub fn exact(geometry: &ProductGeometry) -> Self {
        Self::new(geometry, 0.0)
    }

    pub fn tau(&self) -> f64 {
        self.calibration * self.mesh_size.powi(4)
    }

    pub fn effective_tau(&self, sigma_max: f64) -> f64 {
        self.tau().max(self.relative_floor * sigma_max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelReport {
    pub operator_name: String,
    pub unknowns: usize,
    pub method: String,
    pub blocks: usize,
    /// Smallest singular values, ascending, divided by `sigma_max`.
    pub singular_values: Vec<f64>,
    pub sigma_max: f64,
    pub dimension: usize,
    pub gap: f64,
    pub min_gap: f64,
    pub tau: f64,
    pub tau_effective: f64,
    pub calibration: f64,
    pub mesh_size: f64,
    pub residuals: Vec<f64>,
    pub residuals_within_tolerance: bool,
    #[serde(skip)]
    pub basis: Vec<DiscreteForm>,
}

impl KernelReport {
    pub fn is_ambiguous(&self) -> bool {
        self.gap < self.min_gap
    }
}

/// Number of reported leading singular values.
const REPORTED_VALUES: usize = 32;

struct Mode {
    q: Vec<usize>,
    multiplicity: usize,
}

fn modes(lens: &[usize]) -> Vec<Mode> {
    let total: usize = lens.iter().product();
    let mut out = Vec::new();
    for flat in 0..total {
        let mut q = vec![0; lens.len()];
        let mut rest = flat;
        for k in (0..lens.len()).rev() {
            q[k] = rest % lens[k];
            rest /= lens[k];
        }
        let neg: Vec<usize> = q.iter().zip(lens).map(|(&a, &n)| (n - a) % n).collect();
        if q == neg {
            out.push(Mode { q, multiplicity: 1 });
        } else if q < neg {
            out.push(Mode { q, multiplicity: 2 });
        }
    }
    out
}

struct BlockLayout {
    rows: usize,
    cols: usize,
    row_weight: Vec<f64>,
    col_weight: Vec<f64>,
}

fn layout(op: &OperatorHandle) -> BlockLayout {
    let g = op.geometry();
    let n = g.total_dim();
    let cw = op.codomain().component_weights(n);
    let (cd, cc) = (op.domain_components(), op.codomain_components());
    let base = g.base_count();
    let mut row_weight = Vec::with_capacity(base * cc);
    let mut col_weight = Vec::with_capacity(base * cd);
    for b in 0..base {
        let w = g.weights()[g.base_point(b)];
        row_weight.extend(cw.iter().map(|k| (w * k).sqrt()));
        col_weight.extend(std::iter::repeat(1.0 / w.sqrt()).take(cd));
    }
    BlockLayout {
        rows: base * cc,
        cols: base * cd,
        row_weight,
        col_weight,
    }
}

/// Sparse weighted rows of the block for mode `q`.
fn block_rows(op: &OperatorHandle, lay: &BlockLayout, q: &[usize]) -> Vec<Vec<(usize, Complex64)>> {
    let g = op.geometry();
    let lens: Vec<usize> = g.invariant_axes().iter().map(|&a| g.axes()[a].axis.len).collect();
    let phases: Vec<Complex64> = op
        .shifts()
        .iter()
        .map(|s| {
            let t: f64 = s
                .iter()
                .zip(q)
                .zip(&lens)
                .map(|((&s, &q), &n)| (s as f64) * (q as f64) / n as f64)
                .sum();
            Complex64::from_polar(1.0, 2.0 * PI * t)
        })
        .collect();
    let (cd, cc) = (op.domain_components(), op.codomain_components());
    let mut rows = Vec::with_capacity(lay.rows);
    for b in 0..g.base_count() {
        for comp in 0..cc {
            let r = b * cc + comp;
            let mut row: Vec<(usize, Complex64)> = Vec::new();
            for e in op.row(b, comp) {
                let c = e.col_base as usize * cd + e.col_comp as usize;
                let v = phases[e.shift as usize] * (e.value * lay.row_weight[r] * lay.col_weight[c]);
                match row.iter_mut().find(|(k, _)| *k == c) {
                    Some(slot) => slot.1 += v,
                    None => row.push((c, v)),
                }
            }
            rows.push(row);
        }
    }
    rows
}

fn dense_block(lay: &BlockLayout, rows: &[Vec<(usize, Complex64)>]) -> DMatrix<Complex64> {
    let m = lay.rows.max(lay.cols);
    let mut a = DMatrix::<Complex64>::zeros(m, lay.cols);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            a[(r, c)] = v;
        }
    }
    a
}

fn gram_sigmas(lay: &BlockLayout, rows: &[Vec<(usize, Complex64)>]) -> Vec<f64> {
    let mut gm = DMatrix::<Complex64>::zeros(lay.cols, lay.cols);
    for row in rows {
        for &(i, a) in row {
            for &(j, b) in row {
                gm[(i, j)] += a.conj() * b;
            }
        }
    }
    let eig = SymmetricEigen::new(gm);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(f64::total_cmp);
    s
}

fn svd_sigmas(a: DMatrix<Complex64>) -> Result<Vec<f64>, KernelError> {
    let svd = a
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| KernelError::SolverFailure("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Right singular vectors with singular value at most `cut`.
fn null_vectors(a: DMatrix<Complex64>, cut: f64) -> Result<Vec<Vec<Complex64>>, KernelError> {
    let svd = a
        .try_svd(false, true, f64::EPSILON, 0)
        .ok_or_else(|| KernelError::SolverFailure("SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("requested");
    Ok(svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cut)
        .map(|(k, _)| v_t.row(k).iter().map(|z| z.conj()).collect())
        .collect())
}

struct BlockSpectrum {
    mode: usize,
    sigmas: Vec<f64>,
}

/// Computes the kernel of `op` under `policy`.
pub fn kernel_basis(op: &OperatorHandle, policy: &TolerancePolicy) -> Result<KernelReport, KernelError> {
    let g = op.geometry().clone();
    let degree = match op.domain() {
        SpaceKind::Form(p) => *p,
        SpaceKind::VectorField => 1,
        other => return Err(KernelError::SolverFailure(format!("unsupported domain {other}"))),
    };
    let lay = layout(op);
    let invariant = g.invariant_axes();
    let method = if invariant.is_empty() {
        if lay.cols > policy.dense_limit {
            return Err(KernelError::SolverFailure(format!(
                "{} unknowns exceed the dense limit {} and no invariant axis is available",
                lay.cols, policy.dense_limit
            )));
        }
        "dense"
    } else {
        "fourier-blocks"
    };
    let lens: Vec<usize> = invariant.iter().map(|&a| g.axes()[a].axis.len).collect();
    let modes = modes(&lens);

    // Screening pass through the Gram matrix of each block.
    let mut spectra: Vec<BlockSpectrum> = modes
        .par_iter()
        .enumerate()
        .map(|(mi, m)| {
            let rows = block_rows(op, &lay, &m.q);
            BlockSpectrum {
                mode: mi,
                sigmas: gram_sigmas(&lay, &rows),
            }
        })
        .collect();
    let sigma_max = spectra
        .iter()
        .flat_map(|s| s.sigmas.last().copied())
        .fold(0.0, f64::max);
    let screen = (1e-5 * sigma_max).max(1e3 * policy.tau());
    let refine: Vec<usize> = spectra
        .iter()
        .filter(|s| s.sigmas.first().is_some_and(|&x| x < screen))
        .map(|s| s.mode)
        .collect();
    let refined: Vec<(usize, Vec<f64>)> = refine
        .par_iter()
        .map(|&mi| {
            let rows = block_rows(op, &lay, &modes[mi].q);
            svd_sigmas(dense_block(&lay, &rows)).map(|mut s| {
                // padded rows of a wide block contribute exact zeros
                s.truncate(lay.cols);
                (mi, s)
            })
        })
        .collect::<Result<_, _>>()?;
    for (mi, s) in refined {
        spectra[mi].sigmas = s;
    }

    let tau_eff = policy.effective_tau(sigma_max);
    let mut all: Vec<f64> = Vec::with_capacity(lay.cols * modes.len() * 2);
    for s in &spectra {
        for &x in &s.sigmas {
            for _ in 0..modes[s.mode].multiplicity {
                all.push(x);
            }
        }
    }
    all.sort_by(f64::total_cmp);
    let dimension = all.iter().take_while(|&&s| s <= tau_eff).count();
    let floor = 1e-16 * sigma_max;
    let gap = if dimension == 0 {
        all.first().map_or(f64::INFINITY, |&s| s / tau_eff.max(floor))
    } else if dimension == all.len() {
        f64::INFINITY
    } else {
        all[dimension] / all[dimension - 1].max(floor)
    };
    let norm = if sigma_max > 0.0 { sigma_max } else { 1.0 };
    let mut report = KernelReport {
        operator_name: op.name().to_string(),
        unknowns: op.n_cols(),
        method: method.to_string(),
        blocks: modes.len(),
        singular_values: all.iter().take(REPORTED_VALUES).map(|s| s / norm).collect(),
        sigma_max,
        dimension,
        gap,
        min_gap: policy.min_gap,
        tau: policy.tau(),
        tau_effective: tau_eff,
        calibration: policy.calibration,
        mesh_size: policy.mesh_size,
        residuals: Vec::new(),
        residuals_within_tolerance: true,
        basis: Vec::new(),
    };
    if report.is_ambiguous() {
        return Err(KernelError::AmbiguousRank(Box::new(report)));
    }

    // Kernel vectors from every block holding a singular value below τ.
    let holders: Vec<usize> = spectra
        .iter()
        .filter(|s| s.sigmas.first().is_some_and(|&x| x <= tau_eff))
        .map(|s| s.mode)
        .collect();
    let mut candidates: Vec<DiscreteForm> = Vec::new();
    for mi in holders {
        let q = &modes[mi].q;
        let rows = block_rows(op, &lay, q);
        for v in null_vectors(dense_block(&lay, &rows), tau_eff)? {
            let (re, im) = expand_mode(&g, degree, &lay, q, &lens, &v)?;
            candidates.push(re);
            candidates.push(im);
        }
    }
    report.basis = orthonormal_top(&candidates, dimension)?;
    report.residuals = report
        .basis
        .iter()
        .map(|u| {
            let y = op.apply_raw(u.coefficients()).expect("domain shape");
            op.codomain_norm(&y)
        })
        .collect();
    report.residuals_within_tolerance = report.residuals.iter().all(|&r| r <= tau_eff);
    Ok(report)
}

/// Real and imaginary parts of `v(base) · e^{2πi q·x/N}` in unweighted
/// coordinates.
fn expand_mode(
    g: &Arc<ProductGeometry>,
    degree: usize,
    lay: &BlockLayout,
    q: &[usize],
    lens: &[usize],
    v: &[Complex64],
) -> Result<(DiscreteForm, DiscreteForm), KernelError> {
    let cd = lay.cols / g.base_count();
    let mut inv = vec![0usize; lens.len()];
    let mut re = vec![0.0; g.n_points() * cd];
    let mut im = vec![0.0; g.n_points() * cd];
    for pt in 0..g.n_points() {
        let b = g.split_point(pt, &mut inv);
        let t: f64 = inv
            .iter()
            .zip(q)
            .zip(lens)
            .map(|((&x, &q), &n)| (x * q % n) as f64 / n as f64)
            .sum();
        let phase = Complex64::from_polar(1.0, 2.0 * PI * t);
        for c in 0..cd {
            let z = v[b * cd + c] * lay.col_weight[b * cd + c] * phase;
            re[pt * cd + c] = z.re;
            im[pt * cd + c] = z.im;
        }
    }
    Ok((
        DiscreteForm::from_coefficients(g, degree, re)?,
        DiscreteForm::from_coefficients(g, degree, im)?,
    ))
}

fn gram(vs: &[DiscreteForm]) -> Result<DMatrix<f64>, KernelError> {
    let k = vs.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| l2_inner(&vs[i], &vs[j]))
        .collect::<Result<_, _>>()?;
    let mut m = DMatrix::zeros(k, k);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Ok(m)
}

fn combine(vs: &[DiscreteForm], coef: &[f64]) -> DiscreteForm {
    let mut out = vs[0].scale(0.0);
    for (v, &c) in vs.iter().zip(coef) {
        if c != 0.0 {
            out = out.axpy(c, v).expect("shared shape");
        }
    }
    out
}

/// Orthonormal basis of the dominant `r`-dimensional part of a span.
fn orthonormal_top(vs: &[DiscreteForm], r: usize) -> Result<Vec<DiscreteForm>, KernelError> {
    if r == 0 || vs.is_empty() {
        return Ok(Vec::new());
    }
    let eig = SymmetricEigen::new(gram(vs)?);
    let mut order: Vec<usize> = (0..vs.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(order
        .iter()
        .take(r)
        .filter(|&&k| eig.eigenvalues[k] > 0.0)
        .map(|&k| {
            let s = eig.eigenvalues[k].sqrt();
            let coef: Vec<f64> = eig.eigenvectors.column(k).iter().map(|c| c / s).collect();
            canonical_sign(combine(vs, &coef))
        })
        .collect())
}

/// Fixes the sign so the largest-magnitude coefficient is positive.
fn canonical_sign(u: DiscreteForm) -> DiscreteForm {
    let big = u
        .coefficients()
        .iter()
        .fold(0.0f64, |m, &c| if c.abs() > m.abs() { c } else { m });
    if big < 0.0 {
        u.scale(-1.0)
    } else {
        u
    }
}

fn check_shared(sets: &[&[DiscreteForm]]) -> Result<(), KernelError> {
    let mut first: Option<&DiscreteForm> = None;
    for v in sets.iter().flat_map(|s| s.iter()) {
        match first {
            None => first = Some(v),
            Some(f) => {
                if !f.geometry().same_as(v.geometry()) || f.degree() != v.degree() {
                    return Err(KernelError::GeometryMismatch);
                }
            }
        }
    }
    Ok(())
}

/// Orthonormal basis of the span of several bases; directions whose Gram
/// eigenvalue is below `tol²` are dropped.
pub fn subspace_sum(sets: &[&[DiscreteForm]], tol: f64) -> Result<Vec<DiscreteForm>, KernelError> {
    check_shared(sets)?;
    let vs: Vec<DiscreteForm> = sets.iter().flat_map(|s| s.iter().cloned()).collect();
    if vs.is_empty() {
        return Ok(Vec::new());
    }
    let eig = SymmetricEigen::new(gram(&vs)?);
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol * tol).count();
    orthonormal_top(&vs, rank)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Relation {
    Equal,
    LeftInRight,
    RightInLeft,
    Incomparable,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubspaceRelation {
    pub relation: Relation,
    pub principal_angles: Vec<f64>,
    pub dims: (usize, usize),
}

impl SubspaceRelation {
    pub fn max_angle(&self) -> f64 {
        self.principal_angles.iter().fold(0.0, |m, &a| m.max(a))
    }
}

/// Principal angles between two orthonormal bases and their relation.
pub fn subspace_compare(
    a: &[DiscreteForm],
    b: &[DiscreteForm],
    angle_tol: f64,
) -> Result<SubspaceRelation, KernelError> {
    check_shared(&[a, b])?;
    let (ra, rb) = (a.len(), b.len());
    let mut angles = Vec::new();
    if ra > 0 && rb > 0 {
        let pairs: Vec<(usize, usize)> = (0..ra).flat_map(|i| (0..rb).map(move |j| (i, j))).collect();
        let vals: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| l2_inner(&a[i], &b[j]))
            .collect::<Result<_, _>>()?;
        let m = DMatrix::from_row_slice(ra, rb, &vals);
        let svd = m.svd(false, false);
        angles = svd.singular_values.iter().map(|&c| c.clamp(-1.0, 1.0).acos()).collect();
        angles.sort_by(f64::total_cmp);
    }
    let within = angles.iter().all(|&t| t <= angle_tol);
    let relation = match (within, ra.cmp(&rb)) {
        (true, std::cmp::Ordering::Equal) => Relation::Equal,
        (true, std::cmp::Ordering::Less) => Relation::LeftInRight,
        (true, std::cmp::Ordering::Greater) => Relation::RightInLeft,
        (false, _) => Relation::Incomparable,
    };
    Ok(SubspaceRelation {
        relation,
        principal_angles: angles,
        dims: (ra, rb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FactorSpec;
    use crate::operators::*;

    fn torus(d: usize, n: usize) -> Arc<ProductGeometry> {
        ProductGeometry::build(&[FactorSpec::unit_torus(d, n)], None).unwrap()
    }

    #[test]
    fn mode_dedup_counts_everything() {
        for lens in [vec![8usize], vec![6, 5], vec![4, 4, 3]] {
            let total: usize = modes(&lens).iter().map(|m| m.multiplicity).sum();
            assert_eq!(total, lens.iter().product::<usize>());
        }
    }

    #[test]
    fn constants_span_d0_kernel() {
        let g = ProductGeometry::build(&[FactorSpec::torus(&[1.0, 2.0], &[8, 6])], None).unwrap();
        let d = assemble_exterior_derivative(&g, 0).unwrap();
        let rep = kernel_basis(&d, &TolerancePolicy::exact(&g)).unwrap();
        assert_eq!(rep.dimension, 1);
        assert!(rep.gap > 1e6);
        let vol = g.weights().iter().sum::<f64>();
        let c = rep.basis[0].coefficients();
        assert!(c.iter().all(|&x| (x - 1.0 / vol.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn parallel_one_forms_on_t3() {
        let g = torus(3, 5);
        let op = assemble_parallel_residual(&g, 1).unwrap();
        let rep = kernel_basis(&op, &TolerancePolicy::exact(&g)).unwrap();
        assert_eq!(rep.dimension, 3);
        assert!(rep.singular_values[..3].iter().all(|&s| s < 1e-10));
        for u in &rep.basis {
            assert!((l2_inner(u, u).unwrap() - 1.0).abs() < 1e-10);
        }
        assert!(rep.residuals.iter().all(|&r| r < 1e-10));
    }

    #[test]
    fn dense_path_matches_blocks() {
        // a non-invariant conformal factor forces one dense block
        let g = ProductGeometry::build(&[FactorSpec::unit_torus(2, 6)], Some("0.1 sin(x1) cos(x2)")).unwrap();
        assert!(g.invariant_axes().is_empty());
        let op = assemble_exterior_derivative(&g, 0).unwrap();
        let rep = kernel_basis(&op, &TolerancePolicy::exact(&g)).unwrap();
        assert_eq!(rep.method, "dense");
        assert_eq!(rep.dimension, 1);
    }

    #[test]
    fn dense_limit_is_enforced() {
        let g = ProductGeometry::build(&[FactorSpec::unit_torus(2, 6)], Some("0.1 sin(x1) cos(x2)")).unwrap();
        let op = assemble_exterior_derivative(&g, 0).unwrap();
        let mut policy = TolerancePolicy::exact(&g);
        policy.dense_limit = 10;
        assert!(matches!(kernel_basis(&op, &policy), Err(KernelError::SolverFailure(_))));
    }

    #[test]
    fn sums_and_comparisons() {
        let g = torus(2, 4);
        let e1 = vec![DiscreteForm::basis(&g, 0b01).unwrap()];
        let e2 = vec![DiscreteForm::basis(&g, 0b10).unwrap()];
        let n1: Vec<DiscreteForm> = e1.iter().map(|u| u.scale(1.0 / u.norm())).collect();
        let n2: Vec<DiscreteForm> = e2.iter().map(|u| u.scale(1.0 / u.norm())).collect();
        let s = subspace_sum(&[&n1, &n1], 1e-3).unwrap();
        assert_eq!(s.len(), 1);
        let s = subspace_sum(&[&n1, &n2], 1e-3).unwrap();
        assert_eq!(s.len(), 2);
        let r = subspace_compare(&n1, &n1, 1e-3).unwrap();
        assert_eq!(r.relation, Relation::Equal);
        assert!(r.max_angle() < 1e-7);
        let r = subspace_compare(&n1, &n2, 1e-3).unwrap();
        assert_eq!(r.relation, Relation::Incomparable);
        assert!((r.principal_angles[0] - PI / 2.0).abs() < 1e-12);
        let r = subspace_compare(&n1, &s, 1e-3).unwrap();
        assert_eq!(r.relation, Relation::LeftInRight);
        let w = vec![DiscreteForm::random(&g, 2, 0).unwrap()];
        assert!(matches!(
            subspace_compare(&n1, &w, 1e-3),
            Err(KernelError::GeometryMismatch)
        ));
    }

    #[test]
    fn ambiguous_rank_is_reported() {
        let g = torus(1, 8);
        let d = assemble_exterior_derivative(&g, 0).unwrap();
        let mut policy = TolerancePolicy::exact(&g);
        // a tolerance right at a nonzero singular value leaves no gap
        policy.relative_floor = 0.5;
        policy.min_gap = 1e30;
        assert!(matches!(kernel_basis(&d, &policy), Err(KernelError::AmbiguousRank(_))));
    }
}
