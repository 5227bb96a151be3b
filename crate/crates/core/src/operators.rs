//! Sparse differential operators on discrete form spaces.
//!
//! Every operator is a constant pointwise linear map applied to the
//! discrete covariant derivative `∇ψ`, so `d`, `δ`, the partial operators
//! and the twistor operator share one set of stencils. Rows are stored
//! for base points only; entries carry a shift along the geometry's
//! invariant axes (see [`ProductGeometry::invariant_axes`]).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::forms::{DiscreteForm, FormError, VectorField};
use crate::geometry::{FactorKind, GeometryError, ProductGeometry};
use crate::multiindex::{binomial, insertion_sign, sort_sign, FormBasis};
use crate::stencil::{self, POLE_ORDER, STENCIL_ORDER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("d is not defined on top-degree forms (p = {0})")]
    TopDegree(usize),
    #[error("δ is not defined on 0-forms")]
    DegreeZero,
    #[error("degree {degree} out of range 1..={max}")]
    DegreeOutOfRange { degree: usize, max: usize },
    #[error("partial operators need a product of at least two factors")]
    NotAProduct,
    #[error("operand does not match operator domain {expected}")]
    DescriptorMismatch { expected: String },
    #[error("operators live on different geometries or spaces")]
    Incompatible,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Form(#[from] FormError),
}

/// Pointwise fibre of a discrete space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Form(usize),
    VectorField,
    /// `T*M ⊗ Λᵖ`, direction-major.
    FrameForm(usize),
    /// Symmetric 2-tensors, pairs `a ≤ b` in lexicographic order.
    SymTensor,
    Stack(Vec<SpaceKind>),
}

impl SpaceKind {
    pub fn components(&self, n: usize) -> usize {
        match self {
            SpaceKind::Form(p) => binomial(n, *p),
            SpaceKind::VectorField => n,
            SpaceKind::FrameForm(p) => n * binomial(n, *p),
            SpaceKind::SymTensor => n * (n + 1) / 2,
            SpaceKind::Stack(parts) => parts.iter().map(|s| s.components(n)).sum(),
        }
    }

    /// Pointwise norm weights per component.
    pub fn component_weights(&self, n: usize) -> Vec<f64> {
        match self {
            SpaceKind::SymTensor => {
                let mut w = Vec::new();
                for a in 0..n {
                    for b in a..n {
                        w.push(if a == b { 1.0 } else { 2.0 });
                    }
                }
                w
            }
            SpaceKind::Stack(parts) => parts.iter().flat_map(|s| s.component_weights(n)).collect(),
            other => vec![1.0; other.components(n)],
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceKind::Form(p) => write!(f, "Λ^{p}"),
            SpaceKind::VectorField => write!(f, "TM"),
            SpaceKind::FrameForm(p) => write!(f, "T*M⊗Λ^{p}"),
            SpaceKind::SymTensor => write!(f, "Sym²T*M"),
            SpaceKind::Stack(parts) => {
                let s: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "({})", s.join(" ⊕ "))
            }
        }
    }
}

/// Symmetric-storage position of the pair `(a, b)`.
pub fn sym_index(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * n + b - a - a * a.saturating_sub(1) / 2
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub col_base: u32,
    pub col_comp: u32,
    pub shift: u32,
    pub value: f64,
}

/// Translation-invariant sparse operator between two discrete spaces.
#[derive(Clone, Debug)]
pub struct OperatorHandle {
    name: String,
    geometry: Arc<ProductGeometry>,
    domain: SpaceKind,
    codomain: SpaceKind,
    accuracy_order: u32,
    shifts: Vec<Vec<i32>>,
    row_ptr: Vec<usize>,
    entries: Vec<Entry>,
}

/// Vector-field residual operators share the same representation.
pub type VectorFieldResidualHandle = OperatorHandle;

type RawRow = Vec<(u32, u32, Vec<i32>, f64)>;

impl OperatorHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn geometry(&self) -> &Arc<ProductGeometry> {
        &self.geometry
    }

    pub fn domain(&self) -> &SpaceKind {
        &self.domain
    }

    pub fn codomain(&self) -> &SpaceKind {
        &self.codomain
    }

    pub fn accuracy_order(&self) -> u32 {
        self.accuracy_order
    }

    pub fn domain_components(&self) -> usize {
        self.domain.components(self.geometry.total_dim())
    }

    pub fn codomain_components(&self) -> usize {
        self.codomain.components(self.geometry.total_dim())
    }

    pub fn n_cols(&self) -> usize {
        self.geometry.n_points() * self.domain_components()
    }

    pub fn n_rows(&self) -> usize {
        self.geometry.n_points() * self.codomain_components()
    }

    pub fn shifts(&self) -> &[Vec<i32>] {
        &self.shifts
    }

    /// Template entries of codomain component `comp` at base point `b`.
    pub fn row(&self, b: usize, comp: usize) -> &[Entry] {
        let r = b * self.codomain_components() + comp;
        &self.entries[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Number of stored (template) entries.
    pub fn template_nnz(&self) -> usize {
        self.entries.len()
    }

    /// Applies the operator to raw coefficients laid out point-major.
    pub fn apply_raw(&self, x: &[f64]) -> Result<Vec<f64>, OperatorError> {
        if x.len() != self.n_cols() {
            return Err(OperatorError::DescriptorMismatch {
                expected: self.domain.to_string(),
            });
        }
        let g = &self.geometry;
        let (cd, cc) = (self.domain_components(), self.codomain_components());
        let n_inv = g.invariant_axes().len();
        let mut out = vec![0.0; self.n_rows()];
        out.par_chunks_mut(cc.max(1)).enumerate().for_each_init(
            || vec![0usize; n_inv],
            |inv, (pt, chunk)| {
                let b = g.split_point(pt, inv);
                for (comp, o) in chunk.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for e in self.row(b, comp) {
                        let col_pt = g.resolve(e.col_base as usize, inv, &self.shifts[e.shift as usize]);
                        acc += e.value * x[col_pt * cd + e.col_comp as usize];
                    }
                    *o = acc;
                }
            },
        );
        Ok(out)
    }

    fn check_form(&self, u: &DiscreteForm) -> Result<(), OperatorError> {
        let ok = self.geometry.same_as(u.geometry()) && matches!(self.domain, SpaceKind::Form(p) if p == u.degree());
        if ok {
            Ok(())
        } else {
            Err(OperatorError::DescriptorMismatch {
                expected: self.domain.to_string(),
            })
        }
    }

    pub fn apply(&self, u: &DiscreteForm) -> Result<Vec<f64>, OperatorError> {
        self.check_form(u)?;
        self.apply_raw(u.coefficients())
    }

    pub fn apply_field(&self, v: &VectorField) -> Result<Vec<f64>, OperatorError> {
        if !self.geometry.same_as(v.geometry()) || self.domain != SpaceKind::VectorField {
            return Err(OperatorError::DescriptorMismatch {
                expected: self.domain.to_string(),
            });
        }
        self.apply_raw(v.components())
    }

    /// Applies a form-to-form operator and wraps the result.
    pub fn apply_to_form(&self, u: &DiscreteForm) -> Result<DiscreteForm, OperatorError> {
        let q = match self.codomain {
            SpaceKind::Form(q) => q,
            _ => {
                return Err(OperatorError::DescriptorMismatch {
                    expected: "form codomain".into(),
                })
            }
        };
        let y = self.apply(u)?;
        Ok(DiscreteForm::from_coefficients(&self.geometry, q, y)?)
    }

    /// Weighted L² norm of a codomain vector.
    pub fn codomain_norm(&self, y: &[f64]) -> f64 {
        let n = self.geometry.total_dim();
        let cw = self.codomain.component_weights(n);
        let c = cw.len();
        self.geometry
            .weights()
            .iter()
            .zip(y.chunks(c.max(1)))
            .map(|(w, chunk)| w * chunk.iter().zip(&cw).map(|(v, k)| k * v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn residual_norm(&self, u: &DiscreteForm) -> Result<f64, OperatorError> {
        Ok(self.codomain_norm(&self.apply(u)?))
    }

    pub fn field_residual_norm(&self, v: &VectorField) -> Result<f64, OperatorError> {
        Ok(self.codomain_norm(&self.apply_field(v)?))
    }

    /// Expanded global `(row, col, value)` triplets, rows in order.
    pub fn coo(&self) -> Vec<(usize, usize, f64)> {
        let g = &self.geometry;
        let (cd, cc) = (self.domain_components(), self.codomain_components());
        let mut inv = vec![0usize; g.invariant_axes().len()];
        let mut out = Vec::new();
        for pt in 0..g.n_points() {
            let b = g.split_point(pt, &mut inv);
            for comp in 0..cc {
                for e in self.row(b, comp) {
                    let col_pt = g.resolve(e.col_base as usize, &inv, &self.shifts[e.shift as usize]);
                    out.push((pt * cc + comp, col_pt * cd + e.col_comp as usize, e.value));
                }
            }
        }
        out
    }

    /// Coordinate-list text export with a `#` descriptor header.
    pub fn write_coo<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# operator: {}", self.name)?;
        writeln!(w, "# geometry: {}", self.geometry.describe())?;
        writeln!(w, "# domain: {}", self.domain)?;
        writeln!(w, "# codomain: {}", self.codomain)?;
        writeln!(w, "# accuracy_order: {}", self.accuracy_order)?;
        writeln!(w, "# shape: {} {}", self.n_rows(), self.n_cols())?;
        writeln!(w, "row,col,value")?;
        for (r, c, v) in self.coo() {
            writeln!(w, "{r},{c},{v:e}")?;
        }
        Ok(())
    }

    fn from_raw_rows(
        name: String,
        geometry: &Arc<ProductGeometry>,
        domain: SpaceKind,
        codomain: SpaceKind,
        rows: Vec<RawRow>,
    ) -> Self {
        let mut interner: BTreeMap<Vec<i32>, u32> = BTreeMap::new();
        let mut shifts = Vec::new();
        let mut row_ptr = vec![0];
        let mut entries = Vec::new();
        for row in rows {
            let mut keyed: Vec<(u32, u32, u32, f64)> = row
                .into_iter()
                .map(|(cb, cc, sh, v)| {
                    let id = *interner.entry(sh.clone()).or_insert_with(|| {
                        shifts.push(sh);
                        (shifts.len() - 1) as u32
                    });
                    (cb, id, cc, v)
                })
                .collect();
            keyed.sort_by_key(|k| (k.0, k.1, k.2));
            let mut i = 0;
            while i < keyed.len() {
                let (cb, id, cc, mut v) = keyed[i];
                let mut j = i + 1;
                while j < keyed.len() && (keyed[j].0, keyed[j].1, keyed[j].2) == (cb, id, cc) {
                    v += keyed[j].3;
                    j += 1;
                }
                if v != 0.0 {
                    entries.push(Entry {
                        col_base: cb,
                        col_comp: cc,
                        shift: id,
                        value: v,
                    });
                }
                i = j;
            }
            row_ptr.push(entries.len());
        }
        if shifts.is_empty() {
            shifts.push(vec![0; geometry.invariant_axes().len()]);
        }
        OperatorHandle {
            name,
            geometry: geometry.clone(),
            domain,
            codomain,
            accuracy_order: accuracy_order(geometry),
            shifts,
            row_ptr,
            entries,
        }
    }

    fn raw_rows(&self) -> Vec<RawRow> {
        (0..self.row_ptr.len() - 1)
            .map(|r| {
                self.entries[self.row_ptr[r]..self.row_ptr[r + 1]]
                    .iter()
                    .map(|e| (e.col_base, e.col_comp, self.shifts[e.shift as usize].clone(), e.value))
                    .collect()
            })
            .collect()
    }

    /// Entrywise sum of two operators with identical descriptors.
    pub fn sum(&self, other: &OperatorHandle, name: &str) -> Result<OperatorHandle, OperatorError> {
        if !self.geometry.same_as(&other.geometry) || self.domain != other.domain || self.codomain != other.codomain {
            return Err(OperatorError::Incompatible);
        }
        let rows = self
            .raw_rows()
            .into_iter()
            .zip(other.raw_rows())
            .map(|(mut a, b)| {
                a.extend(b);
                a
            })
            .collect();
        Ok(Self::from_raw_rows(
            name.to_string(),
            &self.geometry,
            self.domain.clone(),
            self.codomain.clone(),
            rows,
        ))
    }

    /// Largest absolute difference between corresponding entries
    /// (missing entries count as zero).
    pub fn max_entry_difference(&self, other: &OperatorHandle) -> Result<f64, OperatorError> {
        if !self.geometry.same_as(&other.geometry) || self.domain != other.domain || self.codomain != other.codomain {
            return Err(OperatorError::Incompatible);
        }
        let mut worst = 0.0f64;
        for (a, b) in self.raw_rows().into_iter().zip(other.raw_rows()) {
            let mut m: BTreeMap<(u32, u32, Vec<i32>), f64> = BTreeMap::new();
            for (cb, cc, sh, v) in a {
                *m.entry((cb, cc, sh)).or_default() += v;
            }
            for (cb, cc, sh, v) in b {
                *m.entry((cb, cc, sh)).or_default() -= v;
            }
            worst = m.values().fold(worst, |w, v| w.max(v.abs()));
        }
        Ok(worst)
    }
}

fn accuracy_order(g: &ProductGeometry) -> u32 {
    if g.factors().iter().any(|f| f.spec.kind == FactorKind::RoundSphere2) {
        POLE_ORDER
    } else {
        STENCIL_ORDER
    }
}

/// Rows of `∇ : Λᵖ → T*M ⊗ Λᵖ` at base point `b`, indexed `a·C(n,p) + I`.
fn nabla_rows(g: &ProductGeometry, p: usize, b: usize) -> Vec<RawRow> {
    let n = g.total_dim();
    let basis = FormBasis::get(n, p);
    let c = basis.len();
    let pt = g.base_point(b);
    let gamma = g.connection_at(pt);
    let zero = vec![0i32; g.invariant_axes().len()];
    let mut rows: Vec<RawRow> = vec![Vec::new(); n * c];
    for a in 0..n {
        let axis = g.direction_axis(a);
        let scale = g.derivative_scale(pt, a);
        let sphere_mask = match g.factors()[g.factor_of_direction(a)].spec.kind {
            FactorKind::RoundSphere2 => g.factor_mask(g.factor_of_direction(a)),
            FactorKind::FlatTorus => 0,
        };
        for (off, w) in stencil::taps() {
            let nb = g.neighbor(b, axis, off);
            for (i, &mi) in basis.masks().iter().enumerate() {
                // both sphere frame vectors reverse across a pole
                let flip = nb.crossed_pole && (mi & sphere_mask).count_ones() % 2 == 1;
                let v = scale * w * if flip { -1.0 } else { 1.0 };
                rows[a * c + i].push((nb.base as u32, i as u32, nb.shift.clone(), v));
            }
        }
        if p == 0 {
            continue;
        }
        for (i, &mi) in basis.masks().iter().enumerate() {
            let idx = crate::multiindex::indices(mi);
            for k in 0..p {
                for cdir in 0..n {
                    let gv = gamma[(a * n + cdir) * n + idx[k]];
                    if gv == 0.0 {
                        continue;
                    }
                    let mut seq = idx.clone();
                    seq[k] = cdir;
                    let (s, mask) = sort_sign(&seq);
                    if s == 0.0 {
                        continue;
                    }
                    let j = basis.rank(mask).expect("degree");
                    rows[a * c + i].push((b as u32, j as u32, zero.clone(), -gv * s));
                }
            }
        }
    }
    rows
}

/// Sparse pointwise map from `∇ψ` components to codomain components.
type Symbol = Vec<Vec<(usize, f64)>>;

fn assemble_symbol(
    g: &Arc<ProductGeometry>,
    name: String,
    p: usize,
    domain: SpaceKind,
    codomain: SpaceKind,
    symbol: &Symbol,
) -> OperatorHandle {
    let rows: Vec<RawRow> = (0..g.base_count())
        .into_par_iter()
        .map(|b| {
            let nab = nabla_rows(g, p, b);
            symbol
                .iter()
                .map(|terms| {
                    let mut row = Vec::new();
                    for &(j, coef) in terms {
                        for (cb, cc, sh, v) in &nab[j] {
                            row.push((*cb, *cc, sh.clone(), coef * v));
                        }
                    }
                    row
                })
                .collect::<Vec<RawRow>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    OperatorHandle::from_raw_rows(name, g, domain, codomain, rows)
}

/// `dψ_K = Σ_{a ∈ K ∩ S} ε(a, K∖a) ∇_a ψ_{K∖a}` as ∇-component terms.
fn d_terms(n: usize, p: usize, mask_k: u32, dirs: u32) -> Vec<(usize, f64)> {
    let basis = FormBasis::get(n, p);
    let c = basis.len();
    (0..n)
        .filter(|&a| mask_k & dirs & (1 << a) != 0)
        .map(|a| {
            let rest = mask_k & !(1 << a);
            (a * c + basis.rank(rest).expect("degree"), insertion_sign(a, rest))
        })
        .collect()
}

/// `δψ_L = −Σ_{a ∈ S, a ∉ L} ε(a, L) ∇_a ψ_{a∪L}` as ∇-component terms.
fn delta_terms(n: usize, p: usize, mask_l: u32, dirs: u32) -> Vec<(usize, f64)> {
    let basis = FormBasis::get(n, p);
    let c = basis.len();
    (0..n)
        .filter(|&a| mask_l & (1 << a) == 0 && dirs & (1 << a) != 0)
        .map(|a| {
            (
                a * c + basis.rank(mask_l | (1 << a)).expect("degree"),
                -insertion_sign(a, mask_l),
            )
        })
        .collect()
}

fn all_dirs(n: usize) -> u32 {
    ((1u64 << n) - 1) as u32
}

fn partial_d(g: &Arc<ProductGeometry>, p: usize, dirs: u32, name: String) -> OperatorHandle {
    let n = g.total_dim();
    let symbol: Symbol = FormBasis::get(n, p + 1)
        .masks()
        .iter()
        .map(|&k| d_terms(n, p, k, dirs))
        .collect();
    assemble_symbol(g, name, p, SpaceKind::Form(p), SpaceKind::Form(p + 1), &symbol)
}

fn partial_delta(g: &Arc<ProductGeometry>, p: usize, dirs: u32, name: String) -> OperatorHandle {
    let n = g.total_dim();
    let symbol: Symbol = FormBasis::get(n, p - 1)
        .masks()
        .iter()
        .map(|&l| delta_terms(n, p, l, dirs))
        .collect();
    assemble_symbol(g, name, p, SpaceKind::Form(p), SpaceKind::Form(p - 1), &symbol)
}

/// Folds per-factor partial operators so that the total equals their sum
/// entry for entry.
fn fold_factors(
    g: &Arc<ProductGeometry>,
    name: &str,
    mut part: impl FnMut(u32, String) -> OperatorHandle,
) -> OperatorHandle {
    let mut acc = part(g.factor_mask(0), name.to_string());
    for fi in 1..g.n_factors() {
        let next = part(g.factor_mask(fi), name.to_string());
        acc = acc.sum(&next, name).expect("same descriptors");
    }
    acc
}

pub fn assemble_exterior_derivative(g: &Arc<ProductGeometry>, p: usize) -> Result<OperatorHandle, OperatorError> {
    if p >= g.total_dim() {
        return Err(OperatorError::TopDegree(p));
    }
    Ok(fold_factors(g, &format!("d[p={p}]"), |dirs, name| {
        partial_d(g, p, dirs, name)
    }))
}

pub fn assemble_codifferential(g: &Arc<ProductGeometry>, p: usize) -> Result<OperatorHandle, OperatorError> {
    if p == 0 {
        return Err(OperatorError::DegreeZero);
    }
    if p > g.total_dim() {
        return Err(OperatorError::DegreeOutOfRange {
            degree: p,
            max: g.total_dim(),
        });
    }
    Ok(fold_factors(g, &format!("delta[p={p}]"), |dirs, name| {
        partial_delta(g, p, dirs, name)
    }))
}

fn check_partial(g: &ProductGeometry, factor: usize) -> Result<(), OperatorError> {
    if g.n_factors() < 2 {
        return Err(OperatorError::NotAProduct);
    }
    g.check_factor(factor)?;
    Ok(())
}

/// `d_i = Σ_{e ∈ factor i} e^♭ ∧ ∇_e` (factor index 1-based).
pub fn assemble_partial_d(g: &Arc<ProductGeometry>, p: usize, factor: usize) -> Result<OperatorHandle, OperatorError> {
    check_partial(g, factor)?;
    if p >= g.total_dim() {
        return Err(OperatorError::TopDegree(p));
    }
    Ok(partial_d(g, p, g.factor_mask(factor - 1), format!("d{factor}[p={p}]")))
}

/// `δ_i = −Σ_{e ∈ factor i} e ⌟ ∇_e` (factor index 1-based).
pub fn assemble_partial_delta(
    g: &Arc<ProductGeometry>,
    p: usize,
    factor: usize,
) -> Result<OperatorHandle, OperatorError> {
    check_partial(g, factor)?;
    if p == 0 {
        return Err(OperatorError::DegreeZero);
    }
    if p > g.total_dim() {
        return Err(OperatorError::DegreeOutOfRange {
            degree: p,
            max: g.total_dim(),
        });
    }
    Ok(partial_delta(
        g,
        p,
        g.factor_mask(factor - 1),
        format!("delta{factor}[p={p}]"),
    ))
}

pub fn assemble_covariant_derivative(g: &Arc<ProductGeometry>, p: usize) -> Result<OperatorHandle, OperatorError> {
    let n = g.total_dim();
    if p > n {
        return Err(OperatorError::DegreeOutOfRange { degree: p, max: n });
    }
    let m = n * binomial(n, p);
    let symbol: Symbol = (0..m).map(|j| vec![(j, 1.0)]).collect();
    Ok(assemble_symbol(
        g,
        format!("nabla[p={p}]"),
        p,
        SpaceKind::Form(p),
        SpaceKind::FrameForm(p),
        &symbol,
    ))
}

pub fn assemble_parallel_residual(g: &Arc<ProductGeometry>, p: usize) -> Result<OperatorHandle, OperatorError> {
    let mut op = assemble_covariant_derivative(g, p)?;
    op.name = format!("parallel[p={p}]");
    Ok(op)
}

fn twistor_symbol(n: usize, p: usize) -> Symbol {
    let basis = FormBasis::get(n, p);
    let c = basis.len();
    let full = all_dirs(n);
    let (kd, kdelta) = (1.0 / (p as f64 + 1.0), 1.0 / ((n - p) as f64 + 1.0));
    let mut symbol = Vec::with_capacity(n * c);
    for x in 0..n {
        for &mi in basis.masks() {
            let mut terms = vec![(x * c + basis.rank(mi).expect("degree"), 1.0)];
            if mi & (1 << x) == 0 {
                // −1/(p+1) (X ⌟ dψ)_I = −1/(p+1) ε(X, I) (dψ)_{X∪I}
                let s = insertion_sign(x, mi);
                for (j, v) in d_terms(n, p, mi | (1 << x), full) {
                    terms.push((j, -kd * s * v));
                }
            } else {
                // +1/(n−p+1) (X^♭ ∧ δψ)_I = ε(X, I∖X) (δψ)_{I∖X}
                let rest = mi & !(1 << x);
                let s = insertion_sign(x, rest);
                for (j, v) in delta_terms(n, p, rest, full) {
                    terms.push((j, kdelta * s * v));
                }
            }
            symbol.push(terms);
        }
    }
    symbol
}

fn check_twistor_degree(g: &ProductGeometry, p: usize) -> Result<(), OperatorError> {
    let n = g.total_dim();
    if p == 0 || p >= n {
        return Err(OperatorError::DegreeOutOfRange {
            degree: p,
            max: n.saturating_sub(1),
        });
    }
    Ok(())
}

/// `T(ψ)_X = ∇_Xψ − 1/(p+1) X⌟dψ + 1/(n−p+1) X^♭∧δψ`.
pub fn assemble_twistor(g: &Arc<ProductGeometry>, p: usize) -> Result<OperatorHandle, OperatorError> {
    check_twistor_degree(g, p)?;
    let symbol = twistor_symbol(g.total_dim(), p);
    Ok(assemble_symbol(
        g,
        format!("twistor[p={p}]"),
        p,
        SpaceKind::Form(p),
        SpaceKind::FrameForm(p),
        &symbol,
    ))
}

/// Stacked `(T; δ)`.
pub fn assemble_killing_residual(g: &Arc<ProductGeometry>, p: usize) -> Result<OperatorHandle, OperatorError> {
    check_twistor_degree(g, p)?;
    let n = g.total_dim();
    let mut symbol = twistor_symbol(n, p);
    let full = all_dirs(n);
    for &l in FormBasis::get(n, p - 1).masks() {
        symbol.push(delta_terms(n, p, l, full));
    }
    Ok(assemble_symbol(
        g,
        format!("killing[p={p}]"),
        p,
        SpaceKind::Form(p),
        SpaceKind::Stack(vec![SpaceKind::FrameForm(p), SpaceKind::Form(p - 1)]),
        &symbol,
    ))
}

fn vector_symbol(n: usize, trace_free: bool) -> Symbol {
    let mut symbol = Vec::new();
    for a in 0..n {
        for b in a..n {
            // (∇_a ξ)_b sits at ∇-component a·n + b
            let mut terms = vec![(a * n + b, 1.0), (b * n + a, 1.0)];
            if trace_free && a == b {
                for c in 0..n {
                    terms.push((c * n + c, -2.0 / n as f64));
                }
            }
            symbol.push(terms);
        }
    }
    symbol
}

/// `L_ξ g` in symmetric storage.
pub fn assemble_killing_vec(g: &Arc<ProductGeometry>) -> VectorFieldResidualHandle {
    assemble_symbol(
        g,
        "killing_vec".into(),
        1,
        SpaceKind::VectorField,
        SpaceKind::SymTensor,
        &vector_symbol(g.total_dim(), false),
    )
}

/// Trace-free part `L_ξ g − (2/n)(div ξ) g`.
pub fn assemble_conformal_killing_vec(g: &Arc<ProductGeometry>) -> VectorFieldResidualHandle {
    assemble_symbol(
        g,
        "conformal_killing_vec".into(),
        1,
        SpaceKind::VectorField,
        SpaceKind::SymTensor,
        &vector_symbol(g.total_dim(), true),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{hodge_star, lift_from_factor, project_bidegree, BidegreeIndex};
    use crate::geometry::FactorSpec;
    use std::f64::consts::PI;

    fn circle(n: usize) -> Arc<ProductGeometry> {
        ProductGeometry::build(&[FactorSpec::torus(&[1.0], &[n])], None).unwrap()
    }

    fn s2t1(nt: usize) -> Arc<ProductGeometry> {
        ProductGeometry::build(
            &[FactorSpec::sphere(1.0, nt, 2 * nt), FactorSpec::unit_torus(1, 6)],
            None,
        )
        .unwrap()
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn sym_index_layout() {
        let n = 4;
        let mut k = 0;
        for a in 0..n {
            for b in a..n {
                assert_eq!(sym_index(n, a, b), k);
                assert_eq!(sym_index(n, b, a), k);
                k += 1;
            }
        }
    }

    #[test]
    fn d_of_constant_is_zero() {
        let g = s2t1(8);
        let one = DiscreteForm::from_fn(&g, 0, |_, o| o[0] = 1.0).unwrap();
        let d = assemble_exterior_derivative(&g, 0).unwrap();
        assert!(max_abs(&d.apply(&one).unwrap()) < 1e-13);
    }

    #[test]
    fn d_and_delta_of_trig_on_circle() {
        let mut errs = Vec::new();
        for n in [16usize, 32] {
            let g = circle(n);
            let h = 2.0 * PI / n as f64;
            let f = DiscreteForm::from_fn(&g, 0, |pt, o| o[0] = (pt as f64 * h).sin()).unwrap();
            let df = assemble_exterior_derivative(&g, 0).unwrap().apply(&f).unwrap();
            let e1 = df
                .iter()
                .enumerate()
                .map(|(pt, v)| (v - (pt as f64 * h).cos()).abs())
                .fold(0.0, f64::max);
            let w = DiscreteForm::from_fn(&g, 1, |pt, o| o[0] = (pt as f64 * h).cos()).unwrap();
            let dw = assemble_codifferential(&g, 1).unwrap().apply(&w).unwrap();
            let e2 = dw
                .iter()
                .enumerate()
                .map(|(pt, v)| (v - (pt as f64 * h).sin()).abs())
                .fold(0.0, f64::max);
            errs.push((e1, e2));
        }
        let order = (errs[0].0 / errs[1].0).log2();
        assert!(order > 4.5, "order {order}");
        let order = (errs[0].1 / errs[1].1).log2();
        assert!(order > 4.5, "order {order}");
    }

    #[test]
    fn partials_sum_entrywise() {
        let g = s2t1(8);
        for p in 0..3 {
            let d = assemble_exterior_derivative(&g, p).unwrap();
            let d1 = assemble_partial_d(&g, p, 1).unwrap();
            let d2 = assemble_partial_d(&g, p, 2).unwrap();
            assert_eq!(d.max_entry_difference(&d1.sum(&d2, "s").unwrap()).unwrap(), 0.0);
        }
        for p in 1..4 {
            let d = assemble_codifferential(&g, p).unwrap();
            let d1 = assemble_partial_delta(&g, p, 1).unwrap();
            let d2 = assemble_partial_delta(&g, p, 2).unwrap();
            assert_eq!(d.max_entry_difference(&d1.sum(&d2, "s").unwrap()).unwrap(), 0.0);
        }
    }

    #[test]
    fn dd_vanishes_on_torus() {
        let g = ProductGeometry::build(
            &[FactorSpec::torus(&[1.0, 2.0], &[6, 8]), FactorSpec::unit_torus(1, 5)],
            None,
        )
        .unwrap();
        for p in 0..2 {
            let u = DiscreteForm::random(&g, p, 3).unwrap();
            let d0 = assemble_exterior_derivative(&g, p).unwrap();
            let d1 = assemble_exterior_derivative(&g, p + 1).unwrap();
            let du = d0.apply_to_form(&u).unwrap();
            let ddu = d1.apply(&du).unwrap();
            assert!(max_abs(&ddu) < 1e-12 * du.max_abs());
        }
    }

    #[test]
    fn partial_d_respects_bidegree() {
        let g = s2t1(6);
        let p = 1;
        let d1 = assemble_partial_d(&g, p, 1).unwrap();
        let n = g.total_dim();
        let (bi, bo) = (FormBasis::get(n, p), FormBasis::get(n, p + 1));
        let k = |m: u32| (m & g.factor_mask(0)).count_ones();
        for b in 0..g.base_count() {
            for (r, &mo) in bo.masks().iter().enumerate() {
                for e in d1.row(b, r) {
                    assert_eq!(k(bi.mask(e.col_comp as usize)) + 1, k(mo));
                }
            }
        }
    }

    #[test]
    fn area_form_is_parallel() {
        let mut res = Vec::new();
        for nt in [8usize, 16] {
            let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, nt, 2 * nt)], None).unwrap();
            let vol = DiscreteForm::basis(&g, 0b11).unwrap();
            let nab = assemble_covariant_derivative(&g, 2).unwrap();
            res.push(nab.residual_norm(&vol).unwrap());
        }
        // derivative of constant components, connection acts trivially on Λ²
        assert!(res[0] < 1e-12 && res[1] < 1e-12, "{res:?}");
    }

    #[test]
    fn rotation_is_killing_on_sphere() {
        // ξ = ∂_φ has frame components (0, sin θ)
        let mut res = Vec::new();
        for nt in [8usize, 16] {
            let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, nt, 2 * nt)], None).unwrap();
            let fg = &g.factors()[0];
            let xi = VectorField::from_fn(&g, |pt, o| {
                let th = fg.coordinate(0, fg.coords(pt)[0]);
                o[1] = th.sin();
            })
            .unwrap();
            let kv = assemble_killing_vec(&g);
            res.push(kv.field_residual_norm(&xi).unwrap() / xi.norm());
            let tw = assemble_twistor(&g, 1).unwrap();
            let k = assemble_killing_residual(&g, 1).unwrap();
            let flat = crate::forms::musical_flat(&xi);
            assert!(tw.residual_norm(&flat).unwrap() <= 2.0 * res.last().unwrap() + 1e-12);
            assert!(k.residual_norm(&flat).unwrap().is_finite());
        }
        assert!(res[1] < res[0] / 8.0, "{res:?}");
    }

    #[test]
    fn twistor_is_half_conformal_killing() {
        let g = s2t1(6);
        let v = VectorField::from_components(&g, DiscreteForm::random(&g, 1, 7).unwrap().into_coefficients()).unwrap();
        let ck = assemble_conformal_killing_vec(&g).field_residual_norm(&v).unwrap();
        let tw = assemble_twistor(&g, 1)
            .unwrap()
            .residual_norm(&crate::forms::musical_flat(&v))
            .unwrap();
        assert!((tw - 0.5 * ck).abs() <= 1e-12 * ck);
    }

    #[test]
    fn twistor_of_constant_torus_forms_is_zero() {
        let g = ProductGeometry::build(&[FactorSpec::unit_torus(3, 5)], None).unwrap();
        for mask in [0b001u32, 0b011, 0b110] {
            let u = DiscreteForm::basis(&g, mask).unwrap();
            let t = assemble_twistor(&g, mask.count_ones() as usize).unwrap();
            assert!(max_abs(&t.apply(&u).unwrap()) < 1e-14);
        }
    }

    #[test]
    fn lifted_delta_commutes() {
        let g = s2t1(8);
        let sg = g.factor_geometry(1).unwrap();
        let a = DiscreteForm::random(&sg, 1, 2).unwrap();
        let lhs = assemble_codifferential(&g, 1)
            .unwrap()
            .apply_to_form(&lift_from_factor(&a, &g, 1).unwrap())
            .unwrap();
        let inner = assemble_codifferential(&sg, 1).unwrap().apply_to_form(&a).unwrap();
        let rhs = lift_from_factor(&inner, &g, 1).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12 * rhs.max_abs());
    }

    #[test]
    fn degree_errors() {
        let g = s2t1(6);
        assert_eq!(
            assemble_exterior_derivative(&g, 3).unwrap_err(),
            OperatorError::TopDegree(3)
        );
        assert_eq!(assemble_codifferential(&g, 0).unwrap_err(), OperatorError::DegreeZero);
        assert!(matches!(
            assemble_twistor(&g, 0),
            Err(OperatorError::DegreeOutOfRange { .. })
        ));
        assert!(matches!(
            assemble_twistor(&g, 3),
            Err(OperatorError::DegreeOutOfRange { .. })
        ));
        let single = circle(8);
        assert_eq!(
            assemble_partial_d(&single, 0, 1).unwrap_err(),
            OperatorError::NotAProduct
        );
        assert!(matches!(
            assemble_partial_d(&g, 0, 3),
            Err(OperatorError::Geometry(GeometryError::BadFactorIndex { .. }))
        ));
        let d = assemble_exterior_derivative(&g, 1).unwrap();
        let u = DiscreteForm::random(&g, 2, 0).unwrap();
        assert!(matches!(d.apply(&u), Err(OperatorError::DescriptorMismatch { .. })));
    }

    #[test]
    fn coo_matches_apply() {
        let g = s2t1(6);
        let op = assemble_twistor(&g, 2).unwrap();
        let u = DiscreteForm::random(&g, 2, 11).unwrap();
        let y = op.apply(&u).unwrap();
        let mut z = vec![0.0; op.n_rows()];
        for (r, c, v) in op.coo() {
            z[r] += v * u.coefficients()[c];
        }
        let diff = y.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12 * max_abs(&y));
        let mut buf = Vec::new();
        op.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# operator: twistor[p=2]"));
    }

    #[test]
    fn star_of_parallel_is_twistor() {
        let g = s2t1(8);
        let vol = lift_from_factor(
            &DiscreteForm::basis(&g.factor_geometry(1).unwrap(), 0b11).unwrap(),
            &g,
            1,
        )
        .unwrap();
        let dual = hodge_star(&vol);
        let t = assemble_twistor(&g, 1).unwrap();
        assert!(t.residual_norm(&dual).unwrap() < 1e-12);
        let part = project_bidegree(&dual, BidegreeIndex::new(0, 1)).unwrap();
        assert_eq!(part.coefficients(), dual.coefficients());
    }

    #[test]
    fn adjointness_defect_shrinks_on_sphere() {
        let defect = |nt: usize| {
            let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, nt, 2 * nt)], None).unwrap();
            let u = crate::oracle::smooth_random_form(&g, 0, 21);
            let v = crate::oracle::smooth_random_form(&g, 1, 22);
            let du = assemble_exterior_derivative(&g, 0).unwrap().apply_to_form(&u).unwrap();
            let dv = assemble_codifferential(&g, 1).unwrap().apply_to_form(&v).unwrap();
            let gap = crate::forms::l2_inner(&du, &v).unwrap() - crate::forms::l2_inner(&u, &dv).unwrap();
            gap.abs() / (u.norm() * v.norm())
        };
        let (coarse, fine) = (defect(16), defect(32));
        let order = POLE_ORDER as f64;
        assert!(coarse / fine >= 2f64.powf(order - 0.5), "{coarse:e} -> {fine:e}");
    }
}
