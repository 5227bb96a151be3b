//! End-to-end verification scenarios producing [`SuiteReport`]s.
//!
//! Every suite computes its own τ(h) calibration, records one
//! [`CheckRecord`] per verified statement and passes iff all checks pass.
//! Wall-clock timings are kept out of the serialized report so that equal
//! inputs give byte-identical JSON.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::fixtures::{fixture_samples, FixtureError, FixtureKind, OracleFixture};
use crate::forms::{bidegree_components, hodge_star, l2_inner, lift_from_factor, DiscreteForm, FormError};
use crate::geometry::{FactorSpec, GeometryError, ProductGeometry};
use crate::kernels::{
    kernel_basis, subspace_compare, subspace_sum, KernelError, KernelReport, Relation, SubspaceRelation,
    TolerancePolicy, DEFAULT_ANGLE_TOL, DEFAULT_MIN_GAP, DEFAULT_RELATIVE_FLOOR, DENSE_LIMIT,
};
use crate::modes::{torus_mode_kernel, ModeError, ModeOperator};
use crate::multiindex::FormBasis;
use crate::operators::{
    assemble_codifferential, assemble_conformal_killing_vec, assemble_covariant_derivative,
    assemble_exterior_derivative, assemble_killing_residual, assemble_killing_vec, assemble_parallel_residual,
    assemble_partial_d, assemble_partial_delta, assemble_twistor, OperatorError, OperatorHandle,
};
use crate::oracle::{calibration_samples, killing_vectors, smooth_random_form, vector_samples, Calibration};

/// Relative residual regarded as exact (roundoff level).
pub const EXACT_TOL: f64 = 1e-12;
/// Minimum refinement order for differential identities.
const ADJOINT_PAIRS: u64 = 4;
pub const MIN_IDENTITY_ORDER: f64 = 3.5;
/// Allowed relative drift of κ between two resolutions.
pub const KAPPA_STABILITY: f64 = 0.2;
/// Required ratio κ/τ(h).
pub const KAPPA_MARGIN: f64 = 100.0;
pub const FLAT_SIGMA_TOL: f64 = 1e-10;
pub const FLAT_GAP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("degenerate field choice {field}: max |ξ(f)| = {max:.3e} on the grid")]
    DegenerateChoice { field: String, max: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Mode(#[from] ModeError),
}

impl SuiteError {
    /// Rank ambiguity or solver trouble, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SuiteError::Kernel(KernelError::AmbiguousRank(_) | KernelError::SolverFailure(_))
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub fixtures: Vec<OracleFixture>,
    pub min_gap: f64,
    pub relative_floor: f64,
    pub angle_tol: f64,
    pub dense_limit: usize,
    /// Coarse resolution factor `num/den` for stability checks.
    pub coarsening: (usize, usize),
    /// Fine resolution factor for refinement studies.
    pub refinement: usize,
    pub random_forms: usize,
    pub mode_cutoff: i64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            fixtures: Vec::new(),
            min_gap: DEFAULT_MIN_GAP,
            relative_floor: DEFAULT_RELATIVE_FLOOR,
            angle_tol: DEFAULT_ANGLE_TOL,
            dense_limit: DENSE_LIMIT,
            coarsening: (3, 4),
            refinement: 2,
            random_forms: 20,
            mode_cutoff: 2,
        }
    }
}

impl SuiteOptions {
    pub fn policy(&self, g: &ProductGeometry, cal: &Calibration) -> TolerancePolicy {
        TolerancePolicy {
            min_gap: self.min_gap,
            relative_floor: self.relative_floor,
            angle_tol: self.angle_tol,
            dense_limit: self.dense_limit,
            ..TolerancePolicy::new(g, cal.constant)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    AtLeast,
    Equals,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
    pub passed: bool,
    pub citations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationEntry {
    pub label: String,
    pub geometry: String,
    pub calibration: Calibration,
    pub tau: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RelationEntry {
    pub label: String,
    pub result: SubspaceRelation,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub scenario: String,
    pub geometry: String,
    pub factors: Vec<FactorSpec>,
    pub conformal_exponent: Option<String>,
    pub degrees: Vec<usize>,
    pub seeds: Vec<u64>,
    pub calibrations: Vec<CalibrationEntry>,
    pub dimensions: BTreeMap<String, usize>,
    pub relations: Vec<RelationEntry>,
    pub kernels: Vec<KernelReport>,
    pub checks: Vec<CheckRecord>,
    pub passed: bool,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl SuiteReport {
    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.1).sum()
    }
}

struct Builder {
    report: SuiteReport,
    clock: Instant,
    factor_policies: BTreeMap<usize, TolerancePolicy>,
}

impl Builder {
    fn new(suite: &str, g: &ProductGeometry, degrees: Vec<usize>) -> Self {
        Builder {
            report: SuiteReport {
                suite: suite.to_string(),
                scenario: g.describe(),
                geometry: g.describe(),
                factors: g.factor_specs(),
                conformal_exponent: g.conformal_source().map(str::to_string),
                degrees,
                seeds: Vec::new(),
                calibrations: Vec::new(),
                dimensions: BTreeMap::new(),
                relations: Vec::new(),
                kernels: Vec::new(),
                checks: Vec::new(),
                passed: false,
                timings: Vec::new(),
            },
            clock: Instant::now(),
            factor_policies: BTreeMap::new(),
        }
    }

    fn lap(&mut self, label: impl Into<String>) {
        let now = Instant::now();
        self.report
            .timings
            .push((label.into(), now.duration_since(self.clock).as_secs_f64()));
        self.clock = now;
    }

    fn check(
        &mut self,
        name: impl Into<String>,
        measured: f64,
        tolerance: f64,
        comparison: Comparison,
        citations: &[&str],
    ) -> &mut CheckRecord {
        let passed = match comparison {
            Comparison::AtMost => measured <= tolerance,
            Comparison::AtLeast => measured >= tolerance,
            Comparison::Equals => measured == tolerance,
        };
        self.report.checks.push(CheckRecord {
            name: name.into(),
            measured,
            tolerance,
            comparison,
            passed,
            citations: citations.iter().map(|s| s.to_string()).collect(),
            note: None,
        });
        self.report.checks.last_mut().expect("pushed")
    }

    fn calibrate(
        &mut self,
        label: &str,
        g: &Arc<ProductGeometry>,
        opts: &SuiteOptions,
        exclude: Option<&str>,
    ) -> Result<TolerancePolicy, SuiteError> {
        let mut samples = if g.is_conformal() {
            vector_samples(g, exclude)?
        } else {
            calibration_samples(g)?
        };
        samples.extend(fixture_samples(&opts.fixtures, g)?);
        let cal = Calibration::from_samples(g, &samples);
        let policy = opts.policy(g, &cal);
        self.report.calibrations.push(CalibrationEntry {
            label: label.to_string(),
            geometry: g.describe(),
            tau: cal.tau(),
            calibration: cal,
        });
        self.lap(format!("calibrate {label}"));
        Ok(policy)
    }

    fn factor_policy(
        &mut self,
        factor: usize,
        fg: &Arc<ProductGeometry>,
        opts: &SuiteOptions,
    ) -> Result<TolerancePolicy, SuiteError> {
        if let Some(p) = self.factor_policies.get(&factor) {
            return Ok(p.clone());
        }
        let p = self.calibrate(&format!("factor{factor}"), fg, opts, None)?;
        self.factor_policies.insert(factor, p.clone());
        Ok(p)
    }

    fn kernel(
        &mut self,
        label: &str,
        op: &OperatorHandle,
        policy: &TolerancePolicy,
    ) -> Result<KernelReport, SuiteError> {
        let rep = kernel_basis(op, policy)?;
        self.report.dimensions.insert(label.to_string(), rep.dimension);
        self.report.kernels.push(rep.clone());
        self.lap(format!("kernel {label}"));
        Ok(rep)
    }

    fn dimension(&mut self, label: &str, d: usize) {
        self.report.dimensions.insert(label.to_string(), d);
    }

    fn relation(&mut self, label: &str, r: SubspaceRelation) -> SubspaceRelation {
        self.report.relations.push(RelationEntry {
            label: label.to_string(),
            result: r.clone(),
        });
        r
    }

    fn finish(mut self) -> SuiteReport {
        self.report.passed = self.report.checks.iter().all(|c| c.passed);
        self.report
    }
}

fn require_pair(g: &ProductGeometry) -> Result<(), SuiteError> {
    if g.n_factors() != 2 {
        return Err(SuiteError::Precondition(format!(
            "two-factor product required, got {} factor(s)",
            g.n_factors()
        )));
    }
    Ok(())
}

fn require_unrescaled(g: &ProductGeometry) -> Result<(), SuiteError> {
    if g.is_conformal() {
        return Err(SuiteError::Precondition("unrescaled product metric required".into()));
    }
    Ok(())
}

/// Residual tolerance: τ(h), never below roundoff level.
fn residual_tol(policy: &TolerancePolicy) -> f64 {
    policy.tau().max(EXACT_TOL)
}

fn resampled(g: &ProductGeometry, num: usize, den: usize) -> Result<Arc<ProductGeometry>, SuiteError> {
    let specs: Vec<FactorSpec> = g.factor_specs().iter().map(|s| s.rescaled(num, den)).collect();
    Ok(ProductGeometry::build(&specs, g.conformal_source())?)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Weighted norm of `∇u` restricted to the given frame directions.
fn directional_norm(nabla: &OperatorHandle, u: &DiscreteForm, dirs: std::ops::Range<usize>) -> Result<f64, SuiteError> {
    let y = nabla.apply(u)?;
    let g = u.geometry();
    let c = u.components();
    let per_point = g.total_dim() * c;
    let mut acc = 0.0;
    for (w, chunk) in g.weights().iter().zip(y.chunks(per_point.max(1))) {
        let s: f64 = dirs
            .clone()
            .flat_map(|a| &chunk[a * c..(a + 1) * c])
            .map(|v| v * v)
            .sum();
        acc += w * s;
    }
    Ok(acc.sqrt())
}

/// `𝔎₀` in degree `p`: lifted factor Killing forms plus product parallel
/// forms. Also checks that each lift is parallel along the other factor.
fn killing_parallel_span(
    b: &mut Builder,
    g: &Arc<ProductGeometry>,
    p: usize,
    opts: &SuiteOptions,
    policy: &TolerancePolicy,
) -> Result<Vec<DiscreteForm>, SuiteError> {
    let nabla = assemble_covariant_derivative(g, p)?;
    let tol = residual_tol(policy);
    let mut parts: Vec<Vec<DiscreteForm>> = Vec::new();
    for factor in 1..=2 {
        let fg = g.factor_geometry(factor)?;
        if p == 0 || p >= fg.total_dim() {
            continue;
        }
        let fpol = b.factor_policy(factor, &fg, opts)?;
        let op = assemble_killing_residual(&fg, p)?;
        let rep = b.kernel(&format!("factor{factor}:{}", op.name()), &op, &fpol)?;
        let lifted = rep
            .basis
            .iter()
            .map(|u| lift_from_factor(u, g, factor))
            .collect::<Result<Vec<_>, _>>()?;
        let other = g.factor_directions(3 - factor);
        let mut worst: f64 = 0.0;
        for u in &lifted {
            worst = worst.max(ratio(directional_norm(&nabla, u, other.clone())?, u.norm()));
        }
        b.check(
            format!("lift_transverse_parallel[factor{factor},p={p}]"),
            worst,
            tol,
            Comparison::AtMost,
            &["killing-lift-characterization"],
        );
        parts.push(lifted);
    }
    let par = assemble_parallel_residual(g, p)?;
    let rep = b.kernel(par.name(), &par, policy)?;
    parts.push(rep.basis);
    let refs: Vec<&[DiscreteForm]> = parts.iter().map(|v| v.as_slice()).collect();
    Ok(subspace_sum(&refs, opts.angle_tol)?)
}

fn mode_operator_kernel(
    b: &mut Builder,
    g: &Arc<ProductGeometry>,
    op: ModeOperator,
    p: usize,
    policy: &TolerancePolicy,
    opts: &SuiteOptions,
    cached: Option<&KernelReport>,
) -> Result<(), SuiteError> {
    let table = torus_mode_kernel(&g.factor_specs(), op, p, opts.mode_cutoff)?;
    let rep = match cached {
        Some(r) => r.clone(),
        None => {
            let handle = match op {
                ModeOperator::Twistor => assemble_twistor(g, p)?,
                ModeOperator::Killing => assemble_killing_residual(g, p)?,
                ModeOperator::Parallel => assemble_parallel_residual(g, p)?,
            };
            b.kernel(handle.name(), &handle, policy)?
        }
    };
    let tag = format!("{op:?}").to_lowercase();
    b.check(
        format!("flat_{tag}_dimension[p={p}]"),
        rep.dimension as f64,
        table.total as f64,
        Comparison::Equals,
        &["exact-mode-oracle"],
    );
    let sigma = rep
        .singular_values
        .iter()
        .take(rep.dimension)
        .fold(0.0, |m: f64, &s| m.max(s));
    b.check(
        format!("flat_{tag}_sigma[p={p}]"),
        sigma,
        FLAT_SIGMA_TOL,
        Comparison::AtMost,
        &["exact-mode-oracle"],
    );
    b.check(
        format!("flat_{tag}_gap[p={p}]"),
        rep.gap,
        FLAT_GAP,
        Comparison::AtLeast,
        &["exact-mode-oracle"],
    );
    let specs = g.factor_specs();
    for fx in opts.fixtures.iter().filter(|f| f.kind == FixtureKind::ModeTable) {
        let Some(t) = fx.mode_table.as_ref() else { continue };
        let same_torus = fx.manifold.factors.len() == specs.len()
            && fx
                .manifold
                .factors
                .iter()
                .zip(&specs)
                .all(|(a, b)| a.kind == b.kind && a.dim == b.dim && a.radii == b.radii);
        if !same_torus || t.operator != op || t.degree != p {
            continue;
        }
        let agrees = fx.mode_table_agrees()?;
        b.check(
            format!("fixture_mode_table[{}]", fx.name),
            if agrees { 1.0 } else { 0.0 },
            1.0,
            Comparison::Equals,
            &["exact-mode-oracle"],
        )
        .note = Some(fx.source.display().to_string());
    }
    Ok(())
}

/// Twistor kernel against the sum of Killing, parallel and dual pieces.
pub fn run_theorem1(g: &Arc<ProductGeometry>, p: usize, opts: &SuiteOptions) -> Result<SuiteReport, SuiteError> {
    require_pair(g)?;
    require_unrescaled(g)?;
    let n = g.total_dim();
    if p == 0 || p >= n {
        return Err(SuiteError::Precondition(format!("degree {p} outside 1..={}", n - 1)));
    }
    let mut b = Builder::new("theorem1", g, vec![p]);
    let policy = b.calibrate("product", g, opts, None)?;
    let tol = residual_tol(&policy);

    let t = assemble_twistor(g, p)?;
    let tk = b.kernel(t.name(), &t, &policy)?;

    let k0 = killing_parallel_span(&mut b, g, p, opts, &policy)?;
    b.dimension("killing_parallel_span", k0.len());
    let dual_src = if n - p == p {
        k0.clone()
    } else {
        killing_parallel_span(&mut b, g, n - p, opts, &policy)?
    };
    let dual: Vec<DiscreteForm> = dual_src.iter().map(hodge_star).collect();
    b.dimension("dual_span", dual.len());
    let total = subspace_sum(&[&k0, &dual], opts.angle_tol)?;
    b.dimension("span_with_dual", total.len());

    let gate = b.relation("span_in_twistor", subspace_compare(&k0, &tk.basis, opts.angle_tol)?);
    b.check(
        "containment_angle",
        gate.max_angle(),
        opts.angle_tol,
        Comparison::AtMost,
        &["killing-and-parallel-are-twistor"],
    );
    b.check(
        "containment_dimension",
        k0.len() as f64,
        tk.dimension as f64,
        Comparison::AtMost,
        &["killing-and-parallel-are-twistor"],
    );
    let eq = b.relation(
        "twistor_vs_span_with_dual",
        subspace_compare(&tk.basis, &total, opts.angle_tol)?,
    );
    b.check(
        "equality_angle",
        eq.max_angle(),
        opts.angle_tol,
        Comparison::AtMost,
        &["twistor-decomposition"],
    );
    b.check(
        "equality_dimension",
        tk.dimension as f64,
        total.len() as f64,
        Comparison::Equals,
        &["twistor-decomposition"],
    )
    .note = Some(format!("relation {:?}", eq.relation));
    b.check(
        "equality_relation",
        (eq.relation == Relation::Equal) as u8 as f64,
        1.0,
        Comparison::Equals,
        &["twistor-decomposition"],
    );
    b.lap("subspaces");

    let dual_op = assemble_twistor(g, n - p)?;
    let mut worst: f64 = 0.0;
    for psi in &tk.basis {
        worst = worst.max(ratio(dual_op.residual_norm(&hodge_star(psi))?, psi.norm()));
    }
    b.check("hodge_closure", worst, tol, Comparison::AtMost, &["hodge-duality"]);
    b.lap("hodge closure");

    let coarse = resampled(g, opts.coarsening.0, opts.coarsening.1)?;
    let cpol = b.calibrate("coarse", &coarse, opts, None)?;
    let ct = assemble_twistor(&coarse, p)?;
    let crep = b.kernel(&format!("coarse:{}", ct.name()), &ct, &cpol)?;
    b.check(
        "dimension_stability",
        crep.dimension as f64,
        tk.dimension as f64,
        Comparison::Equals,
        &["refinement-monotonicity"],
    )
    .note = Some(coarse.describe());

    if g.is_flat() {
        mode_operator_kernel(&mut b, g, ModeOperator::Twistor, p, &policy, opts, Some(&tk))?;
        mode_operator_kernel(&mut b, g, ModeOperator::Killing, p, &policy, opts, None)?;
        mode_operator_kernel(&mut b, g, ModeOperator::Parallel, p, &policy, opts, None)?;
    }
    Ok(b.finish())
}

#[derive(Clone, Copy, Debug)]
enum Step {
    D(Option<usize>),
    Delta(Option<usize>),
}

impl Step {
    fn target(self, p: usize, n: usize) -> Option<usize> {
        match self {
            Step::D(_) => (p < n).then_some(p + 1),
            Step::Delta(_) => (p >= 1).then(|| p - 1),
        }
    }

    fn apply(self, u: &DiscreteForm) -> Result<DiscreteForm, SuiteError> {
        let g = u.geometry();
        let p = u.degree();
        let op = match self {
            Step::D(None) => assemble_exterior_derivative(g, p)?,
            Step::D(Some(f)) => assemble_partial_d(g, p, f)?,
            Step::Delta(None) => assemble_codifferential(g, p)?,
            Step::Delta(Some(f)) => assemble_partial_delta(g, p, f)?,
        };
        Ok(op.apply_to_form(u)?)
    }
}

/// Operator relations as sums of compositions; each term lists steps in
/// application order.
fn relation_table() -> Vec<(&'static str, Vec<Vec<Step>>)> {
    use Step::*;
    vec![
        ("d1d1", vec![vec![D(Some(1)), D(Some(1))]]),
        ("d2d2", vec![vec![D(Some(2)), D(Some(2))]]),
        ("delta1delta1", vec![vec![Delta(Some(1)), Delta(Some(1))]]),
        ("delta2delta2", vec![vec![Delta(Some(2)), Delta(Some(2))]]),
        (
            "d1d2+d2d1",
            vec![vec![D(Some(2)), D(Some(1))], vec![D(Some(1)), D(Some(2))]],
        ),
        (
            "delta1delta2+delta2delta1",
            vec![
                vec![Delta(Some(2)), Delta(Some(1))],
                vec![Delta(Some(1)), Delta(Some(2))],
            ],
        ),
        (
            "d1delta2+delta2d1",
            vec![vec![Delta(Some(2)), D(Some(1))], vec![D(Some(1)), Delta(Some(2))]],
        ),
        (
            "delta1d2+d2delta1",
            vec![vec![D(Some(2)), Delta(Some(1))], vec![Delta(Some(1)), D(Some(2))]],
        ),
        ("dd", vec![vec![D(None), D(None)]]),
        ("deltadelta", vec![vec![Delta(None), Delta(None)]]),
    ]
}

fn feasible(terms: &[Vec<Step>], p: usize, n: usize) -> bool {
    terms
        .iter()
        .all(|t| t.iter().try_fold(p, |deg, s| s.target(deg, n)).is_some())
}

fn relation_residual(terms: &[Vec<Step>], u: &DiscreteForm) -> Result<f64, SuiteError> {
    let mut acc: Option<DiscreteForm> = None;
    for t in terms {
        let mut v = u.clone();
        for s in t {
            v = s.apply(&v)?;
        }
        acc = Some(match acc {
            None => v,
            Some(a) => a.add(&v)?,
        });
    }
    Ok(ratio(acc.map_or(0.0, |a| a.norm()), u.norm()))
}

fn order(coarse: f64, fine: f64, h_coarse: f64, h_fine: f64) -> f64 {
    (coarse / fine).ln() / (h_coarse / h_fine).ln()
}

fn pointwise_contraction_defect(u: &DiscreteForm) -> f64 {
    let g = u.geometry();
    let n = g.total_dim();
    let p = u.degree();
    let mut acc = vec![0.0; u.coefficients().len()];
    if p > 0 {
        for dir in g.directions() {
            let inner = crate::forms::interior_product(dir, u).expect("degree ≥ 1");
            let back = crate::forms::wedge_direction(dir, &inner).expect("degree fits");
            for (a, v) in acc.iter_mut().zip(back.coefficients()) {
                *a += v;
            }
        }
    }
    let c = FormBasis::get(n, p).len();
    let mut worst: f64 = 0.0;
    for (pt, chunk) in acc.chunks(c.max(1)).enumerate() {
        for (a, x) in chunk.iter().zip(u.at(pt)) {
            worst = worst.max((a - p as f64 * x).abs());
        }
    }
    worst
}

/// Algebraic and differential identities, plus the relations satisfied by
/// computed twistor-kernel elements.
pub fn run_identities(
    g: &Arc<ProductGeometry>,
    p: usize,
    seed: u64,
    opts: &SuiteOptions,
) -> Result<SuiteReport, SuiteError> {
    require_pair(g)?;
    require_unrescaled(g)?;
    let n = g.total_dim();
    if p == 0 || p >= n {
        return Err(SuiteError::Precondition(format!("degree {p} outside 1..={}", n - 1)));
    }
    let mut b = Builder::new("identities", g, vec![p]);
    b.report.seeds.push(seed);
    let policy = b.calibrate("product", g, opts, None)?;
    let tol = if g.is_flat() { EXACT_TOL } else { residual_tol(&policy) };

    let mut worst: f64 = 0.0;
    for i in 0..opts.random_forms as u64 {
        let w = DiscreteForm::random(g, p, seed.wrapping_add(i))?;
        worst = worst.max(pointwise_contraction_defect(&w));
    }
    b.check(
        "contraction_identity",
        worst,
        EXACT_TOL,
        Comparison::AtMost,
        &["frame-contraction-identity"],
    )
    .note = Some(format!("{} random forms, seeds {seed}..", opts.random_forms));
    b.lap("algebraic identities");

    let split = |full: &OperatorHandle, a: &OperatorHandle, c: &OperatorHandle| -> Result<f64, SuiteError> {
        let sum = a.sum(c, "sum")?;
        let scale = full.coo().iter().fold(0.0, |m: f64, e| m.max(e.2.abs()));
        Ok(ratio(full.max_entry_difference(&sum)?, scale))
    };
    let d = assemble_exterior_derivative(g, p)?;
    let dsplit = split(&d, &assemble_partial_d(g, p, 1)?, &assemble_partial_d(g, p, 2)?)?;
    b.check(
        "d_split",
        dsplit,
        EXACT_TOL,
        Comparison::AtMost,
        &["partial-derivative-split"],
    );
    let delta = assemble_codifferential(g, p)?;
    let dsplit = split(
        &delta,
        &assemble_partial_delta(g, p, 1)?,
        &assemble_partial_delta(g, p, 2)?,
    )?;
    b.check(
        "delta_split",
        dsplit,
        EXACT_TOL,
        Comparison::AtMost,
        &["partial-derivative-split"],
    );
    b.lap("operator splits");

    let fine = resampled(g, opts.refinement, 1)?;
    let (hc, hf) = (g.mesh_size(), fine.mesh_size());
    let form_seed = seed ^ 0x5eed;
    b.report.seeds.push(form_seed);
    let u = smooth_random_form(g, p, form_seed);
    let uf = smooth_random_form(&fine, p, form_seed);
    for (name, terms) in relation_table() {
        if !feasible(&terms, p, n) {
            continue;
        }
        let rc = relation_residual(&terms, &u)?;
        b.check(
            format!("relation:{name}"),
            rc,
            tol,
            Comparison::AtMost,
            &["operator-relations"],
        );
        if rc > EXACT_TOL {
            let rf = relation_residual(&terms, &uf)?;
            b.check(
                format!("order:{name}"),
                order(rc, rf, hc, hf),
                MIN_IDENTITY_ORDER,
                Comparison::AtLeast,
                &["operator-relations"],
            )
            .note = Some(format!("residuals {rc:.3e} -> {rf:.3e}"));
        }
    }
    b.lap("differential relations");

    // worst case over several pairs: one signed pairing can cancel by accident
    let pairs: Vec<_> = (0..ADJOINT_PAIRS)
        .map(|k| {
            let (su, sv) = (form_seed.wrapping_add(2 * k), form_seed.wrapping_add(2 * k + 1));
            let (uc, uf) = if k == 0 {
                (u.clone(), uf.clone())
            } else {
                (smooth_random_form(g, p, su), smooth_random_form(&fine, p, su))
            };
            (
                uc,
                uf,
                smooth_random_form(g, p + 1, sv),
                smooth_random_form(&fine, p + 1, sv),
            )
        })
        .collect();
    for factor in [None, Some(1), Some(2)] {
        let defect = |u: &DiscreteForm, v: &DiscreteForm| -> Result<f64, SuiteError> {
            let lhs = l2_inner(&Step::D(factor).apply(u)?, v)?;
            let rhs = l2_inner(u, &Step::Delta(factor).apply(v)?)?;
            Ok(ratio((lhs - rhs).abs(), u.norm() * v.norm()))
        };
        let tag = factor.map_or("d".to_string(), |f| format!("d{f}"));
        let (mut dc, mut df) = (0.0f64, 0.0f64);
        for (uc, uf, vc, vf) in &pairs {
            dc = dc.max(defect(uc, vc)?);
            df = df.max(defect(uf, vf)?);
        }
        let rec = if dc <= EXACT_TOL {
            b.check(
                format!("adjoint:{tag}"),
                dc,
                EXACT_TOL,
                Comparison::AtMost,
                &["adjointness"],
            )
        } else {
            b.check(
                format!("adjoint_order:{tag}"),
                order(dc, df, hc, hf),
                MIN_IDENTITY_ORDER,
                Comparison::AtLeast,
                &["adjointness"],
            )
        };
        rec.note = Some(format!("max defects over {ADJOINT_PAIRS} pairs {dc:.3e} -> {df:.3e}"));
    }
    b.lap("adjointness");

    let t = assemble_twistor(g, p)?;
    let tk = b.kernel(t.name(), &t, &policy)?;
    kernel_relations(&mut b, g, p, &tk.basis, residual_tol(&policy))?;
    Ok(b.finish())
}

/// Bidegree relations and vanishing statements on twistor-kernel elements.
fn kernel_relations(
    b: &mut Builder,
    g: &Arc<ProductGeometry>,
    p: usize,
    basis: &[DiscreteForm],
    tol: f64,
) -> Result<(), SuiteError> {
    let m = g.factor_directions(1).len();
    let m2 = g.factor_directions(2).len();
    let d = |f| assemble_partial_d(g, p, f);
    let de = |f| assemble_partial_delta(g, p, f);
    let (d1, d2, de1, de2) = (d(1)?, d(2)?, de(1)?, de(2)?);
    let norm = |op: &OperatorHandle, u: &DiscreteForm| -> Result<f64, SuiteError> { Ok(op.residual_norm(u)?) };

    let mut wedge_rel = vec![0.0f64; p + 1];
    let mut inner_rel = vec![0.0f64; p + 1];
    let mut low: f64 = 0.0;
    let mut high: f64 = 0.0;
    let case_one = p < m.min(m2);
    // the factor of smaller dimension plays the role of the first factor
    let (a, small_dim) = if m <= m2 { (1, m) } else { (2, m2) };
    let case_three = small_dim <= p && p <= m.max(m2) && !case_one;
    let mut three_low: f64 = 0.0;
    let mut three_high: f64 = 0.0;

    for u in basis {
        let un = u.norm();
        let parts = bidegree_components(u)?;
        let zero = DiscreteForm::zeros(g, p)?;
        let part = |k: isize| {
            if k < 0 || k as usize > p {
                &zero
            } else {
                &parts[k as usize]
            }
        };
        for k in 0..=p {
            let ki = k as isize;
            let lhs = d1.apply_to_form(part(ki))?.scale((p - k) as f64);
            let rhs = d2.apply_to_form(part(ki + 1))?.scale((k + 1) as f64);
            wedge_rel[k] = wedge_rel[k].max(ratio(lhs.sub(&rhs)?.norm(), un));
            let lhs = de1.apply_to_form(part(ki))?.scale(m2 as f64 + k as f64 - p as f64);
            let rhs = de2.apply_to_form(part(ki - 1))?.scale(m as f64 - k as f64 + 1.0);
            inner_rel[k] = inner_rel[k].max(ratio(lhs.sub(&rhs)?.norm(), un));
            if case_one {
                if k < p {
                    low = low
                        .max(ratio(norm(&d1, part(ki))?, un))
                        .max(ratio(norm(&de2, part(ki))?, un));
                }
                if k > 0 {
                    high = high
                        .max(ratio(norm(&d2, part(ki))?, un))
                        .max(ratio(norm(&de1, part(ki))?, un));
                }
            }
            if case_three {
                let ka = if a == 1 { k } else { p - k };
                let (da, db, dea, deb) = if a == 1 {
                    (&d1, &d2, &de1, &de2)
                } else {
                    (&d2, &d1, &de2, &de1)
                };
                if ka < small_dim {
                    three_low = three_low
                        .max(ratio(norm(da, part(ki))?, un))
                        .max(ratio(norm(deb, part(ki))?, un));
                }
                if ka >= 1 && ka <= small_dim {
                    three_high = three_high
                        .max(ratio(norm(db, part(ki))?, un))
                        .max(ratio(norm(dea, part(ki))?, un));
                }
            }
        }
    }
    for k in 0..=p {
        b.check(
            format!("wedge_relation[k={k}]"),
            wedge_rel[k],
            tol,
            Comparison::AtMost,
            &["bidegree-wedge-relation"],
        );
        b.check(
            format!("interior_relation[k={k}]"),
            inner_rel[k],
            tol,
            Comparison::AtMost,
            &["bidegree-interior-relation"],
        );
    }
    if case_one {
        b.check(
            "low_degree_vanishing",
            low,
            tol,
            Comparison::AtMost,
            &["integration-vanishing"],
        )
        .note = Some("d1 u_k = delta2 u_k = 0 for k < p".into());
        b.check(
            "high_degree_vanishing",
            high,
            tol,
            Comparison::AtMost,
            &["integration-vanishing"],
        )
        .note = Some("d2 u_k = delta1 u_k = 0 for k > 0".into());
    }
    if case_three {
        b.check(
            "boundary_low_vanishing",
            three_low,
            tol,
            Comparison::AtMost,
            &["integration-vanishing"],
        )
        .note = Some(format!("smaller factor {a}: d_a u = delta_b u = 0 below its dimension"));
        b.check(
            "boundary_high_vanishing",
            three_high,
            tol,
            Comparison::AtMost,
            &["integration-vanishing"],
        )
        .note = Some(format!("smaller factor {a}: d_b u = delta_a u = 0 from degree 1"));
    }
    b.dimension("kernel_elements_checked", basis.len());
    b.lap("kernel relations");
    Ok(())
}

/// Conformal and Killing vector fields coincide on the product, and the
/// twistor 1-forms are their duals.
pub fn run_proposition2(g: &Arc<ProductGeometry>, opts: &SuiteOptions) -> Result<SuiteReport, SuiteError> {
    require_pair(g)?;
    require_unrescaled(g)?;
    let mut b = Builder::new("proposition2", g, vec![1]);
    let policy = b.calibrate("product", g, opts, None)?;
    let ck = assemble_conformal_killing_vec(g);
    let ckr = b.kernel(ck.name(), &ck, &policy)?;
    let kv = assemble_killing_vec(g);
    let kvr = b.kernel(kv.name(), &kv, &policy)?;
    let rel = b.relation(
        "conformal_vs_killing",
        subspace_compare(&ckr.basis, &kvr.basis, opts.angle_tol)?,
    );
    b.check(
        "conformal_equals_killing_angle",
        rel.max_angle(),
        opts.angle_tol,
        Comparison::AtMost,
        &["conformal-fields-on-products"],
    );
    b.check(
        "conformal_equals_killing_dimension",
        ckr.dimension as f64,
        kvr.dimension as f64,
        Comparison::Equals,
        &["conformal-fields-on-products"],
    );
    let t = assemble_twistor(g, 1)?;
    let tr = b.kernel(t.name(), &t, &policy)?;
    let rel = b.relation(
        "twistor_vs_conformal_flat",
        subspace_compare(&tr.basis, &ckr.basis, opts.angle_tol)?,
    );
    b.check(
        "twistor_equals_conformal_angle",
        rel.max_angle(),
        opts.angle_tol,
        Comparison::AtMost,
        &["musical-correspondence"],
    );
    b.check(
        "twistor_equals_conformal_dimension",
        tr.dimension as f64,
        ckr.dimension as f64,
        Comparison::Equals,
        &["musical-correspondence"],
    );
    if g.is_flat() {
        let table = torus_mode_kernel(&g.factor_specs(), ModeOperator::Twistor, 1, opts.mode_cutoff)?;
        b.check(
            "flat_conformal_dimension",
            ckr.dimension as f64,
            table.total as f64,
            Comparison::Equals,
            &["exact-mode-oracle"],
        );
    }
    Ok(b.finish())
}

/// Largest `|ξ(f)|` over the grid.
fn field_derivative_of_exponent(g: &ProductGeometry, xi: &DiscreteForm) -> f64 {
    (0..g.n_points())
        .map(|pt| {
            let scale = (-g.conformal_exponent(pt)).exp();
            xi.at(pt)
                .iter()
                .enumerate()
                .map(|(a, c)| scale * c * g.conformal_gradient(pt, a))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

struct ConformalMeasurement {
    conformal: f64,
    killing: f64,
    tau: f64,
}

fn conformal_measure(
    b: &mut Builder,
    label: &str,
    g: &Arc<ProductGeometry>,
    field: &str,
    opts: &SuiteOptions,
) -> Result<ConformalMeasurement, SuiteError> {
    let xi = killing_vectors(g)
        .into_iter()
        .find(|f| f.name == field)
        .ok_or_else(|| SuiteError::Precondition(format!("unknown Killing field {field}")))?;
    let scale = xi.form.max_abs();
    let max = field_derivative_of_exponent(g, &xi.form);
    if max <= EXACT_TOL * (1.0 + scale) {
        return Err(SuiteError::DegenerateChoice {
            field: field.to_string(),
            max,
        });
    }
    let policy = b.calibrate(label, g, opts, Some(field))?;
    let v = crate::forms::VectorField::from_components(g, xi.form.coefficients().to_vec())?;
    let norm = xi.form.norm();
    let conformal = ratio(assemble_conformal_killing_vec(g).field_residual_norm(&v)?, norm);
    let killing = ratio(assemble_killing_vec(g).field_residual_norm(&v)?, norm);
    b.lap(format!("residuals {label}"));
    Ok(ConformalMeasurement {
        conformal,
        killing,
        tau: policy.tau(),
    })
}

/// A Killing field of the base metric stays conformal but stops being
/// Killing after a conformal change `e^{2f}g` with `ξ(f) ≢ 0`.
pub fn run_conformal_example(
    g: &Arc<ProductGeometry>,
    field: &str,
    opts: &SuiteOptions,
) -> Result<SuiteReport, SuiteError> {
    if !g.is_conformal() {
        return Err(SuiteError::Precondition(
            "geometry carries no conformal exponent".into(),
        ));
    }
    let mut b = Builder::new("conformal_example", g, vec![1]);
    let fine = conformal_measure(&mut b, "fine", g, field, opts)?;
    let coarse_g = resampled(g, opts.coarsening.0, opts.coarsening.1)?;
    let coarse = conformal_measure(&mut b, "coarse", &coarse_g, field, opts)?;
    b.check(
        "conformal_residual",
        fine.conformal,
        fine.tau.max(EXACT_TOL),
        Comparison::AtMost,
        &["conformal-invariance"],
    )
    .note = Some(format!("field {field}"));
    b.check(
        "coarse_conformal_residual",
        coarse.conformal,
        coarse.tau.max(EXACT_TOL),
        Comparison::AtMost,
        &["conformal-invariance"],
    )
    .note = Some(coarse_g.describe());
    b.check(
        "killing_margin",
        ratio(fine.killing, fine.tau),
        KAPPA_MARGIN,
        Comparison::AtLeast,
        &["killing-broken-by-rescaling"],
    )
    .note = Some(format!("kappa {:.6e}", fine.killing));
    b.check(
        "killing_stability",
        ratio((fine.killing - coarse.killing).abs(), fine.killing),
        KAPPA_STABILITY,
        Comparison::AtMost,
        &["killing-broken-by-rescaling"],
    )
    .note = Some(format!("kappa {:.6e} vs {:.6e}", fine.killing, coarse.killing));
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2t1(n: usize) -> Arc<ProductGeometry> {
        ProductGeometry::build(&[FactorSpec::unit_torus(2, n), FactorSpec::unit_torus(1, n)], None).unwrap()
    }

    #[test]
    fn flat_theorem1_passes() {
        let r = run_theorem1(&t2t1(6), 1, &SuiteOptions::default()).unwrap();
        assert!(r.passed, "{:#?}", r.failures().collect::<Vec<_>>());
        assert_eq!(r.dimensions["twistor[p=1]"], 3);
    }

    #[test]
    fn identities_on_flat_product() {
        let r = run_identities(&t2t1(6), 1, 3, &SuiteOptions::default()).unwrap();
        for c in &r.checks {
            if c.name.starts_with("relation:") || c.name.ends_with("split") || c.name == "contraction_identity" {
                assert!(c.passed, "{c:?}");
            }
        }
    }

    #[test]
    fn verdict_ignores_factor_order_and_duality() {
        let (s2, t1) = (FactorSpec::sphere(1.0, 8, 16), FactorSpec::unit_torus(1, 6));
        let opts = SuiteOptions::default();
        let a = ProductGeometry::build(&[s2.clone(), t1.clone()], None).unwrap();
        let b = ProductGeometry::build(&[t1, s2], None).unwrap();
        let runs = [
            run_theorem1(&a, 1, &opts).unwrap(),
            run_theorem1(&b, 1, &opts).unwrap(),
            run_theorem1(&a, 2, &opts).unwrap(),
        ];
        let dims: Vec<usize> = runs
            .iter()
            .zip([1, 1, 2])
            .map(|(r, p)| r.dimensions[&format!("twistor[p={p}]")])
            .collect();
        assert_eq!(dims, [4, 4, 4]);
        for r in &runs {
            assert!(r.passed, "{:#?}", r.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn preconditions_reject_bad_input() {
        let single = ProductGeometry::build(&[FactorSpec::unit_torus(3, 6)], None).unwrap();
        let opts = SuiteOptions::default();
        assert!(matches!(
            run_theorem1(&single, 1, &opts),
            Err(SuiteError::Precondition(_))
        ));
        assert!(matches!(
            run_theorem1(&t2t1(6), 3, &opts),
            Err(SuiteError::Precondition(_))
        ));
        assert!(matches!(
            run_conformal_example(&t2t1(6), "translation[1]1", &opts),
            Err(SuiteError::Precondition(_))
        ));
    }

    #[test]
    fn degenerate_field_is_rejected() {
        let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16)], Some("0")).unwrap();
        let e = run_conformal_example(&g, "rotation[1]z", &SuiteOptions::default()).unwrap_err();
        assert!(matches!(e, SuiteError::DegenerateChoice { .. }));
    }

    #[test]
    fn relation_feasibility() {
        let table = relation_table();
        let dd = &table.iter().find(|r| r.0 == "dd").unwrap().1;
        assert!(feasible(dd, 1, 3));
        assert!(!feasible(dd, 2, 3));
        let dl = &table.iter().find(|r| r.0 == "deltadelta").unwrap().1;
        assert!(!feasible(dl, 1, 3));
    }
}
