//! Discrete differential forms and their pointwise algebra.
//!
//! Coefficients are stored point-major, one real per canonical multi-index
//! (see [`crate::multiindex`]). Interior products contract the first slot.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{FrameDirection, GeometryError, ProductGeometry};
use crate::multiindex::{binomial, insertion_sign, wedge_sign, FormBasis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormError {
    #[error("forms live on different geometries")]
    GeometryMismatch,
    #[error("degree mismatch: {0} vs {1}")]
    DegreeMismatch(usize, usize),
    #[error("degree {degree} out of range for dimension {dim}")]
    DegreeOutOfRange { degree: usize, dim: usize },
    #[error("wedge degree {0} exceeds dimension {1}")]
    DegreeOverflow(usize, usize),
    #[error("interior product of a 0-form")]
    DegreeZero,
    #[error("bidegree split needs a two-factor product")]
    NotAProduct,
    #[error("factor form does not match the product's factor grid")]
    FactorMismatch,
    #[error("coefficient length {got}, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A degree-`p` form sampled in the orthonormal coframe.
#[derive(Clone, Debug)]
pub struct DiscreteForm {
    geometry: Arc<ProductGeometry>,
    degree: usize,
    coefficients: Vec<f64>,
}

/// Bidegree `(k, p − k)`: `k` factor-1 coframe indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BidegreeIndex {
    pub k: usize,
    pub complement: usize,
}

impl BidegreeIndex {
    pub fn new(k: usize, p: usize) -> Self {
        BidegreeIndex {
            k,
            complement: p.saturating_sub(k),
        }
    }
}

impl DiscreteForm {
    pub fn zeros(geometry: &Arc<ProductGeometry>, degree: usize) -> Result<Self, FormError> {
        let n = geometry.total_dim();
        if degree > n {
            return Err(FormError::DegreeOutOfRange { degree, dim: n });
        }
        Ok(DiscreteForm {
            geometry: geometry.clone(),
            degree,
            coefficients: vec![0.0; geometry.n_points() * binomial(n, degree)],
        })
    }

    pub fn from_coefficients(
        geometry: &Arc<ProductGeometry>,
        degree: usize,
        coefficients: Vec<f64>,
    ) -> Result<Self, FormError> {
        let n = geometry.total_dim();
        if degree > n {
            return Err(FormError::DegreeOutOfRange { degree, dim: n });
        }
        let expected = geometry.n_points() * binomial(n, degree);
        if coefficients.len() != expected {
            return Err(FormError::BadLength {
                got: coefficients.len(),
                expected,
            });
        }
        Ok(DiscreteForm {
            geometry: geometry.clone(),
            degree,
            coefficients,
        })
    }

    /// Form with the given pointwise coefficients, `f(point, out)`.
    pub fn from_fn(
        geometry: &Arc<ProductGeometry>,
        degree: usize,
        mut f: impl FnMut(usize, &mut [f64]),
    ) -> Result<Self, FormError> {
        let mut form = Self::zeros(geometry, degree)?;
        let c = form.components();
        for (pt, chunk) in form.coefficients.chunks_mut(c.max(1)).enumerate() {
            if c > 0 {
                f(pt, chunk);
            }
        }
        Ok(form)
    }

    /// Constant basis form `e^I` for a multi-index mask.
    pub fn basis(geometry: &Arc<ProductGeometry>, mask: u32) -> Result<Self, FormError> {
        let degree = mask.count_ones() as usize;
        let basis = FormBasis::get(geometry.total_dim(), degree);
        let r = basis.rank(mask).ok_or(FormError::DegreeOutOfRange {
            degree,
            dim: geometry.total_dim(),
        })?;
        Self::from_fn(geometry, degree, |_, out| out[r] = 1.0)
    }

    /// Seeded random form with coefficients uniform in `[−1, 1]`.
    pub fn random(geometry: &Arc<ProductGeometry>, degree: usize, seed: u64) -> Result<Self, FormError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut form = Self::zeros(geometry, degree)?;
        for c in form.coefficients.iter_mut() {
            *c = rng.gen_range(-1.0..=1.0);
        }
        Ok(form)
    }

    pub fn geometry(&self) -> &Arc<ProductGeometry> {
        &self.geometry
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn components(&self) -> usize {
        binomial(self.geometry.total_dim(), self.degree)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn at(&self, pt: usize) -> &[f64] {
        let c = self.components();
        &self.coefficients[pt * c..(pt + 1) * c]
    }

    fn check_same(&self, other: &DiscreteForm) -> Result<(), FormError> {
        if !self.geometry.same_as(&other.geometry) {
            return Err(FormError::GeometryMismatch);
        }
        Ok(())
    }

    fn check_compatible(&self, other: &DiscreteForm) -> Result<(), FormError> {
        self.check_same(other)?;
        if self.degree != other.degree {
            return Err(FormError::DegreeMismatch(self.degree, other.degree));
        }
        Ok(())
    }

    pub fn add(&self, other: &DiscreteForm) -> Result<DiscreteForm, FormError> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &DiscreteForm) -> Result<DiscreteForm, FormError> {
        self.axpy(-1.0, other)
    }

    /// `self + alpha · other`.
    pub fn axpy(&self, alpha: f64, other: &DiscreteForm) -> Result<DiscreteForm, FormError> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.coefficients.iter_mut().zip(&other.coefficients) {
            *a += alpha * b;
        }
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> DiscreteForm {
        let mut out = self.clone();
        out.coefficients.iter_mut().for_each(|c| *c *= alpha);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.coefficients.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn norm(&self) -> f64 {
        l2_inner(self, self).expect("same form").sqrt()
    }
}

/// Weighted L² inner product `Σ_x w(x) ⟨u, v⟩_x`.
pub fn l2_inner(u: &DiscreteForm, v: &DiscreteForm) -> Result<f64, FormError> {
    u.check_compatible(v)?;
    let c = u.components();
    if c == 0 {
        return Ok(0.0);
    }
    Ok(u.geometry
        .weights()
        .iter()
        .zip(u.coefficients.chunks(c).zip(v.coefficients.chunks(c)))
        .map(|(w, (a, b))| w * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
        .sum())
}

fn bidegree_of(geometry: &ProductGeometry, mask: u32) -> usize {
    (mask & geometry.factor_mask(0)).count_ones() as usize
}

/// Component of `u` with exactly `k` factor-1 indices.
pub fn project_bidegree(u: &DiscreteForm, k: BidegreeIndex) -> Result<DiscreteForm, FormError> {
    let g = &u.geometry;
    if g.n_factors() != 2 {
        return Err(FormError::NotAProduct);
    }
    let p = u.degree;
    let m = g.factors()[0].dim();
    let n2 = g.factors()[1].dim();
    if k.k > p || k.k + k.complement != p || k.k > m || k.complement > n2 {
        return Err(FormError::DegreeOutOfRange { degree: k.k, dim: p });
    }
    let basis = FormBasis::get(g.total_dim(), p);
    let keep: Vec<bool> = basis.masks().iter().map(|&mk| bidegree_of(g, mk) == k.k).collect();
    let mut out = u.clone();
    let c = u.components();
    for chunk in out.coefficients.chunks_mut(c.max(1)) {
        for (x, &kp) in chunk.iter_mut().zip(&keep) {
            if !kp {
                *x = 0.0;
            }
        }
    }
    Ok(out)
}

/// All bidegree components `u_0, …, u_p` (empty components are zero forms).
pub fn bidegree_components(u: &DiscreteForm) -> Result<Vec<DiscreteForm>, FormError> {
    let g = &u.geometry;
    if g.n_factors() != 2 {
        return Err(FormError::NotAProduct);
    }
    let basis = FormBasis::get(g.total_dim(), u.degree);
    let c = u.components();
    (0..=u.degree)
        .map(|k| {
            let mut out = u.clone();
            for chunk in out.coefficients.chunks_mut(c.max(1)) {
                for (x, &mk) in chunk.iter_mut().zip(basis.masks()) {
                    if bidegree_of(g, mk) != k {
                        *x = 0.0;
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Pointwise wedge product.
pub fn wedge(a: &DiscreteForm, b: &DiscreteForm) -> Result<DiscreteForm, FormError> {
    a.check_same(b)?;
    let n = a.geometry.total_dim();
    let p = a.degree + b.degree;
    if p > n {
        return Err(FormError::DegreeOverflow(p, n));
    }
    let (ba, bb, bo) = (
        FormBasis::get(n, a.degree),
        FormBasis::get(n, b.degree),
        FormBasis::get(n, p),
    );
    let mut table = Vec::new();
    for (i, &mi) in ba.masks().iter().enumerate() {
        for (j, &mj) in bb.masks().iter().enumerate() {
            let s = wedge_sign(mi, mj);
            if s != 0.0 {
                table.push((i, j, bo.rank(mi | mj).expect("degree"), s, mi.min(mj), mi.max(mj)));
            }
        }
    }
    // symmetric summation order so that a∧b and b∧a agree bitwise
    table.sort_by_key(|t| (t.2, t.4, t.5));
    let mut out = DiscreteForm::zeros(&a.geometry, p)?;
    let (ca, cb, co) = (ba.len(), bb.len(), bo.len());
    for pt in 0..a.geometry.n_points() {
        let (xa, xb) = (&a.coefficients[pt * ca..], &b.coefficients[pt * cb..]);
        let xo = &mut out.coefficients[pt * co..(pt + 1) * co];
        for &(i, j, o, s, _, _) in &table {
            xo[o] += s * xa[i] * xb[j];
        }
    }
    Ok(out)
}

/// `e^a ∧ u` for a unit frame direction.
pub fn wedge_direction(direction: &FrameDirection, u: &DiscreteForm) -> Result<DiscreteForm, FormError> {
    let e = DiscreteForm::basis(&u.geometry, 1 << direction.index)?;
    wedge(&e, u)
}

/// First-slot contraction `e_a ⌟ u` with a unit frame direction.
pub fn interior_product(direction: &FrameDirection, u: &DiscreteForm) -> Result<DiscreteForm, FormError> {
    if u.degree == 0 {
        return Err(FormError::DegreeZero);
    }
    let n = u.geometry.total_dim();
    let a = direction.index;
    let (bi, bo) = (FormBasis::get(n, u.degree), FormBasis::get(n, u.degree - 1));
    let table: Vec<(usize, usize, f64)> = bi
        .masks()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m & (1 << a) != 0)
        .map(|(i, &m)| {
            let rest = m & !(1 << a);
            (i, bo.rank(rest).expect("degree"), insertion_sign(a, rest))
        })
        .collect();
    let mut out = DiscreteForm::zeros(&u.geometry, u.degree - 1)?;
    let (ci, co) = (bi.len(), bo.len());
    for pt in 0..u.geometry.n_points() {
        for &(i, o, s) in &table {
            out.coefficients[pt * co + o] += s * u.coefficients[pt * ci + i];
        }
    }
    Ok(out)
}

/// Hodge star with the product orientation: `*e^I = ε(I, Iᶜ) e^{Iᶜ}`.
pub fn hodge_star(u: &DiscreteForm) -> DiscreteForm {
    let n = u.geometry.total_dim();
    let full = ((1u64 << n) - 1) as u32;
    let (bi, bo) = (FormBasis::get(n, u.degree), FormBasis::get(n, n - u.degree));
    let table: Vec<(usize, usize, f64)> = bi
        .masks()
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let c = full & !m;
            (i, bo.rank(c).expect("degree"), wedge_sign(m, c))
        })
        .collect();
    let mut out = DiscreteForm::zeros(&u.geometry, n - u.degree).expect("degree");
    let (ci, co) = (bi.len(), bo.len());
    for pt in 0..u.geometry.n_points() {
        for &(i, o, s) in &table {
            out.coefficients[pt * co + o] = s * u.coefficients[pt * ci + i];
        }
    }
    out
}

/// Vector field by components in the orthonormal frame.
#[derive(Clone, Debug)]
pub struct VectorField(DiscreteForm);

impl VectorField {
    pub fn from_components(geometry: &Arc<ProductGeometry>, components: Vec<f64>) -> Result<Self, FormError> {
        Ok(VectorField(DiscreteForm::from_coefficients(geometry, 1, components)?))
    }

    pub fn from_fn(geometry: &Arc<ProductGeometry>, f: impl FnMut(usize, &mut [f64])) -> Result<Self, FormError> {
        Ok(VectorField(DiscreteForm::from_fn(geometry, 1, f)?))
    }

    /// Unit frame field `e_a`.
    pub fn frame(geometry: &Arc<ProductGeometry>, direction: &FrameDirection) -> Self {
        VectorField(DiscreteForm::basis(geometry, 1 << direction.index).expect("degree 1"))
    }

    pub fn components(&self) -> &[f64] {
        self.0.coefficients()
    }

    pub fn geometry(&self) -> &Arc<ProductGeometry> {
        self.0.geometry()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

pub fn musical_flat(v: &VectorField) -> DiscreteForm {
    v.0.clone()
}

pub fn musical_sharp(u: &DiscreteForm) -> Result<VectorField, FormError> {
    if u.degree != 1 {
        return Err(FormError::DegreeMismatch(u.degree, 1));
    }
    Ok(VectorField(u.clone()))
}

/// Pointwise `g(v, w)` as a 0-form.
pub fn metric_pairing(v: &VectorField, w: &VectorField) -> Result<DiscreteForm, FormError> {
    v.0.check_compatible(&w.0)?;
    let n = v.0.components();
    DiscreteForm::from_fn(v.geometry(), 0, |pt, out| {
        out[0] = (0..n)
            .map(|a| v.0.coefficients[pt * n + a] * w.0.coefficients[pt * n + a])
            .sum();
    })
}

/// Pointwise evaluation `u(w)` of a 1-form on a vector field.
pub fn evaluate_one_form(u: &DiscreteForm, w: &VectorField) -> Result<DiscreteForm, FormError> {
    if u.degree != 1 {
        return Err(FormError::DegreeMismatch(u.degree, 1));
    }
    metric_pairing(&VectorField(u.clone()), w)
}

/// Pullback of a form on factor `factor` (1-based) to the product.
pub fn lift_from_factor(
    factor_form: &DiscreteForm,
    product: &Arc<ProductGeometry>,
    factor: usize,
) -> Result<DiscreteForm, FormError> {
    product.check_factor(factor)?;
    let fg = factor_form.geometry();
    if fg.n_factors() != 1
        || fg.is_conformal()
        || product.is_conformal()
        || fg.factors()[0].spec != product.factors()[factor - 1].spec
    {
        return Err(FormError::FactorMismatch);
    }
    let fi = factor - 1;
    let (nf, n) = (fg.total_dim(), product.total_dim());
    let p = factor_form.degree;
    let off = product.dir_offset(fi);
    let (bf, bp) = (FormBasis::get(nf, p), FormBasis::get(n, p));
    let map: Vec<usize> = bf.masks().iter().map(|&m| bp.rank(m << off).expect("degree")).collect();
    let cf = bf.len();
    DiscreteForm::from_fn(product, p, |pt, out| {
        let fpt = product.factor_point(pt, fi);
        for (i, &o) in map.iter().enumerate() {
            out[o] = factor_form.coefficients[fpt * cf + i];
        }
    })
}


impl PartialEq for DiscreteForm {
    fn eq(&self, other: &Self) -> bool {
        self.geometry.same_as(&other.geometry) && self.degree == other.degree && self.coefficients == other.coefficients
    }
}
