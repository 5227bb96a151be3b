//! Factor manifolds (flat tori, round 2-spheres) and their Riemannian
//! products sampled on tensor-product grids.
//!
//! Pointwise metric data lives in an orthonormal frame:
//!
//! * torus `T^d`: arc-length coordinates `x_j`, frame `∂/∂x_j`, zero
//!   connection;
//! * sphere `S²(R)`: `e_θ = R⁻¹∂_θ`, `e_φ = (R sin θ)⁻¹∂_φ`, with
//!   `∇_{e_φ} e_θ = (cot θ / R) e_φ` and `∇_{e_φ} e_φ = −(cot θ / R) e_θ`.
//!
//! Latitude nodes sit at `θ_j = (j + ½)π/N_θ`, so no node lies on a pole.
//! Stencils that run past a pole continue on the meridian `φ + π`; under
//! that continuation both sphere frame vectors change sign.
//!
//! Product orientation is (factor-1 orientation) ∧ (factor-2 orientation),
//! with `e^θ ∧ e^φ` orienting each sphere.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};

pub const DEFAULT_TORUS_RESOLUTION: usize = 8;
pub const DEFAULT_SPHERE_RESOLUTION: [usize; 2] = [16, 32];
const MIN_RESOLUTION: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
    #[error("invalid radius: {0}")]
    InvalidRadius(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("product needs at least one factor")]
    EmptyFactorList,
    #[error("conformal exponent cannot be evaluated: {0}")]
    UnevaluableExpression(String),
    #[error("factor index {index} out of range for a product of {count} factor(s)")]
    BadFactorIndex { index: usize, count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    FlatTorus,
    RoundSphere2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub dim: usize,
    pub radii: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl FactorSpec {
    pub fn torus(radii: &[f64], resolution: &[usize]) -> Self {
        FactorSpec {
            kind: FactorKind::FlatTorus,
            dim: radii.len(),
            radii: radii.to_vec(),
            resolution: resolution.to_vec(),
        }
    }

    /// Unit-radius torus of dimension `d` with `n` nodes per circle.
    pub fn unit_torus(d: usize, n: usize) -> Self {
        Self::torus(&vec![1.0; d], &vec![n; d])
    }

    pub fn sphere(radius: f64, n_theta: usize, n_phi: usize) -> Self {
        FactorSpec {
            kind: FactorKind::RoundSphere2,
            dim: 2,
            radii: vec![radius],
            resolution: vec![n_theta, n_phi],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self.kind {
            FactorKind::FlatTorus => {
                if self.dim == 0 || self.radii.len() != self.dim {
                    return Err(GeometryError::InvalidDimension(format!(
                        "torus of dim {} with {} radii",
                        self.dim,
                        self.radii.len()
                    )));
                }
                if self.resolution.len() != self.dim {
                    return Err(GeometryError::InvalidResolution(format!(
                        "torus of dim {} needs {} grid sizes, got {}",
                        self.dim,
                        self.dim,
                        self.resolution.len()
                    )));
                }
            }
            FactorKind::RoundSphere2 => {
                if self.dim != 2 || self.radii.len() != 1 {
                    return Err(GeometryError::InvalidDimension(
                        "round sphere has dim 2 and exactly one radius".into(),
                    ));
                }
                if self.resolution.len() != 2 {
                    return Err(GeometryError::InvalidResolution("sphere needs [n_theta, n_phi]".into()));
                }
                if self.resolution[1] % 2 != 0 {
                    return Err(GeometryError::InvalidResolution(format!(
                        "sphere longitude count {} must be even",
                        self.resolution[1]
                    )));
                }
            }
        }
        if let Some(&n) = self.resolution.iter().find(|&&n| n < MIN_RESOLUTION) {
            return Err(GeometryError::InvalidResolution(format!(
                "grid size {n} below minimum {MIN_RESOLUTION}"
            )));
        }
        if let Some(&r) = self.radii.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
            return Err(GeometryError::InvalidRadius(format!("{r}")));
        }
        Ok(())
    }

    /// Copy with every grid size multiplied by `num/den` (rounded, sphere
    /// longitude kept even).
    pub fn rescaled(&self, num: usize, den: usize) -> Self {
        let mut out = self.clone();
        for (i, n) in out.resolution.iter_mut().enumerate() {
            let mut m = (*n * num + den / 2) / den;
            if self.kind == FactorKind::RoundSphere2 && i == 1 && m % 2 == 1 {
                m += 1;
            }
            *n = m.max(MIN_RESOLUTION);
        }
        out
    }

    pub fn label(&self) -> String {
        let res = self
            .resolution
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let radii = self.radii.iter().map(|r| format!("{r}")).collect::<Vec<_>>().join(",");
        match self.kind {
            FactorKind::FlatTorus => format!("T{}(r={radii};{res})", self.dim),
            FactorKind::RoundSphere2 => format!("S2(r={radii};{res})"),
        }
    }
}

/// One coordinate axis of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub label: String,
    pub len: usize,
    /// Uniform periodic axis (torus circles, sphere longitude).
    pub periodic: bool,
    /// Sphere latitude axis with cross-pole continuation.
    pub pole: bool,
    pub step: f64,
}

/// Orthonormal frame direction of a product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrameDirection {
    /// Global index (factor-1 directions first).
    pub index: usize,
    /// 1-based factor number.
    pub factor: usize,
    /// Index within the factor frame.
    pub local: usize,
    pub label: String,
}

/// Sampled geometry of one factor manifold.
#[derive(Debug)]
pub struct FactorGeometry {
    pub spec: FactorSpec,
    axes: Vec<Axis>,
    strides: Vec<usize>,
    n_points: usize,
    weights: Vec<f64>,
    /// `connection[pt][X][a][b]`: coefficient of `e_a` in `∇_{e_X} e_b`.
    connection: Vec<f64>,
    /// Derivative factor per point and frame direction; multiplying the
    /// unit-step stencil by it gives the frame derivative.
    scales: Vec<f64>,
}

impl FactorGeometry {
    pub fn build(spec: &FactorSpec) -> Result<FactorGeometry, GeometryError> {
        spec.validate()?;
        let dim = spec.dim;
        let axes: Vec<Axis> = match spec.kind {
            FactorKind::FlatTorus => (0..dim)
                .map(|j| Axis {
                    label: format!("x{}", j + 1),
                    len: spec.resolution[j],
                    periodic: true,
                    pole: false,
                    step: 2.0 * PI * spec.radii[j] / spec.resolution[j] as f64,
                })
                .collect(),
            FactorKind::RoundSphere2 => vec![
                Axis {
                    label: "theta".into(),
                    len: spec.resolution[0],
                    periodic: false,
                    pole: true,
                    step: PI / spec.resolution[0] as f64,
                },
                Axis {
                    label: "phi".into(),
                    len: spec.resolution[1],
                    periodic: true,
                    pole: false,
                    step: 2.0 * PI / spec.resolution[1] as f64,
                },
            ],
        };
        let strides = row_major_strides(&axes.iter().map(|a| a.len).collect::<Vec<_>>());
        let n_points: usize = axes.iter().map(|a| a.len).product();
        let mut weights = vec![0.0; n_points];
        let mut connection = vec![0.0; n_points * dim * dim * dim];
        let mut scales = vec![0.0; n_points * dim];
        match spec.kind {
            FactorKind::FlatTorus => {
                let cell: f64 = axes.iter().map(|a| a.step).product();
                weights.iter_mut().for_each(|w| *w = cell);
                for pt in 0..n_points {
                    for (j, axis) in axes.iter().enumerate() {
                        scales[pt * dim + j] = 1.0 / axis.step;
                    }
                }
            }
            FactorKind::RoundSphere2 => {
                let r = spec.radii[0];
                let (nt, np) = (axes[0].len, axes[1].len);
                let fejer = fejer_weights(nt);
                let dphi = axes[1].step;
                for j in 0..nt {
                    let theta = latitude(j, nt);
                    let cot = theta.cos() / theta.sin();
                    for k in 0..np {
                        let pt = j * np + k;
                        weights[pt] = r * r * fejer[j] * dphi;
                        scales[pt * 2] = 1.0 / (r * axes[0].step);
                        scales[pt * 2 + 1] = 1.0 / (r * theta.sin() * dphi);
                        let base = pt * 8;
                        // ∇_{e_φ} e_θ = (cot θ / R) e_φ ; ∇_{e_φ} e_φ = −(cot θ / R) e_θ
                        connection[base + 4 + 2 + 0] = cot / r; // [X=φ][a=φ][b=θ]
                        connection[base + 4 + 0 + 1] = -cot / r; // [X=φ][a=θ][b=φ]
                    }
                }
            }
        }
        Ok(FactorGeometry {
            spec: spec.clone(),
            axes,
            strides,
            n_points,
            weights,
            connection,
            scales,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Connection coefficients at a point, laid out `[X][a][b]`.
    pub fn connection(&self, pt: usize) -> &[f64] {
        let d = self.dim();
        &self.connection[pt * d * d * d..(pt + 1) * d * d * d]
    }

    pub fn scale(&self, pt: usize, dir: usize) -> f64 {
        self.scales[pt * self.dim() + dir]
    }

    /// Axis carrying the derivative of frame direction `dir`.
    pub fn direction_axis(&self, dir: usize) -> usize {
        dir
    }

    pub fn coords(&self, pt: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.axes)
            .map(|(s, a)| (pt / s) % a.len)
            .collect()
    }

    pub fn point_index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    /// Coordinate value on an axis (arc length on tori, radians on spheres).
    pub fn coordinate(&self, axis: usize, idx: usize) -> f64 {
        match self.spec.kind {
            FactorKind::FlatTorus => idx as f64 * self.axes[axis].step,
            FactorKind::RoundSphere2 => {
                if axis == 0 {
                    latitude(idx, self.axes[0].len)
                } else {
                    idx as f64 * self.axes[1].step
                }
            }
        }
    }

    /// Exact total volume of the continuum factor.
    pub fn exact_volume(&self) -> f64 {
        match self.spec.kind {
            FactorKind::FlatTorus => self.spec.radii.iter().map(|r| 2.0 * PI * r).product(),
            FactorKind::RoundSphere2 => 4.0 * PI * self.spec.radii[0].powi(2),
        }
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Ambient position of a sphere grid point (unit normal times radius).
    pub fn ambient(&self, pt: usize) -> [f64; 3] {
        let c = self.coords(pt);
        let (t, p) = (self.coordinate(0, c[0]), self.coordinate(1, c[1]));
        let r = self.spec.radii[0];
        [r * t.sin() * p.cos(), r * t.sin() * p.sin(), r * t.cos()]
    }
}

/// `θ_j = (j + ½)π/N_θ`.
pub fn latitude(j: usize, n_theta: usize) -> f64 {
    (j as f64 + 0.5) * PI / n_theta as f64
}

/// Fejér's first rule on the offset latitude nodes: weights for
/// `∫₀^π g(θ) sin θ dθ`, exact for polynomials in `cos θ` of degree < N.
pub fn fejer_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let theta = latitude(j, n);
            let tail: f64 = (1..=n / 2)
                .map(|k| (2.0 * k as f64 * theta).cos() / (4.0 * (k * k) as f64 - 1.0))
                .sum();
            2.0 / n as f64 * (1.0 - 2.0 * tail)
        })
        .collect()
}

fn row_major_strides(lens: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; lens.len()];
    for i in (0..lens.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * lens[i + 1];
    }
    strides
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductAxis {
    pub factor: usize,
    pub local: usize,
    pub axis: Axis,
    /// Operators commute with shifts along this axis.
    pub invariant: bool,
}

#[derive(Debug)]
struct Conformal {
    source: String,
    f: Vec<f64>,
    /// `e_a(f)` in the unrescaled frame, `n_points × total_dim`.
    df: Vec<f64>,
}

/// A stencil neighbour expressed relative to a base point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub base: usize,
    pub shift: Vec<i32>,
    pub crossed_pole: bool,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Product of factor manifolds, optionally conformally rescaled by `e^{2f}`.
#[derive(Debug)]
pub struct ProductGeometry {
    id: u64,
    factors: Vec<FactorGeometry>,
    dir_offsets: Vec<usize>,
    axis_offsets: Vec<usize>,
    axes: Vec<ProductAxis>,
    strides: Vec<usize>,
    n_points: usize,
    total_dim: usize,
    weights: Vec<f64>,
    conformal: Option<Conformal>,
    invariant_axes: Vec<usize>,
    base_axes: Vec<usize>,
    base_offsets: Vec<usize>,
    directions: Vec<FrameDirection>,
    factor_views: Vec<OnceLock<Arc<ProductGeometry>>>,
}

impl ProductGeometry {
    pub fn build(
        factors: &[FactorSpec],
        conformal_exponent: Option<&str>,
    ) -> Result<Arc<ProductGeometry>, GeometryError> {
        if factors.is_empty() {
            return Err(GeometryError::EmptyFactorList);
        }
        let factor_geoms = factors
            .iter()
            .map(FactorGeometry::build)
            .collect::<Result<Vec<_>, _>>()?;
        let mut dir_offsets = Vec::new();
        let mut axis_offsets = Vec::new();
        let mut axes = Vec::new();
        let mut directions = Vec::new();
        let (mut dir_acc, mut axis_acc) = (0, 0);
        for (fi, fg) in factor_geoms.iter().enumerate() {
            dir_offsets.push(dir_acc);
            axis_offsets.push(axis_acc);
            for (li, a) in fg.axes().iter().enumerate() {
                axes.push(ProductAxis {
                    factor: fi,
                    local: li,
                    axis: a.clone(),
                    invariant: a.periodic,
                });
            }
            for local in 0..fg.dim() {
                let label = match fg.spec.kind {
                    FactorKind::FlatTorus => format!("f{}:e_x{}", fi + 1, local + 1),
                    FactorKind::RoundSphere2 => {
                        format!("f{}:e_{}", fi + 1, if local == 0 { "theta" } else { "phi" })
                    }
                };
                directions.push(FrameDirection {
                    index: dir_acc + local,
                    factor: fi + 1,
                    local,
                    label,
                });
            }
            dir_acc += fg.dim();
            axis_acc += fg.axes().len();
        }
        let strides = row_major_strides(&axes.iter().map(|a| a.axis.len).collect::<Vec<_>>());
        let n_points: usize = factor_geoms.iter().map(|f| f.n_points()).product();
        let total_dim = dir_acc;
        let mut geom = ProductGeometry {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            factor_views: (0..factor_geoms.len()).map(|_| OnceLock::new()).collect(),
            factors: factor_geoms,
            dir_offsets,
            axis_offsets,
            axes,
            strides,
            n_points,
            total_dim,
            weights: Vec::new(),
            conformal: None,
            invariant_axes: Vec::new(),
            base_axes: Vec::new(),
            base_offsets: Vec::new(),
            directions,
        };
        geom.weights = (0..n_points)
            .map(|pt| {
                (0..geom.factors.len())
                    .map(|fi| geom.factors[fi].weights()[geom.factor_point(pt, fi)])
                    .product()
            })
            .collect();
        if let Some(src) = conformal_exponent {
            geom.apply_conformal(src)?;
        }
        geom.layout_base();
        Ok(Arc::new(geom))
    }

    fn apply_conformal(&mut self, src: &str) -> Result<(), GeometryError> {
        let expr = Expr::parse(src).map_err(|e| GeometryError::UnevaluableExpression(e.to_string()))?;
        let bindings = self.variable_bindings();
        for v in expr.variables() {
            if !bindings.contains_key(&v) {
                return Err(GeometryError::UnevaluableExpression(
                    ExprError::UnknownVariable(v).to_string(),
                ));
            }
        }
        // partial derivatives with respect to every product axis coordinate
        let mut partials: Vec<Option<Expr>> = vec![None; self.axes.len()];
        for (name, &axis) in &bindings {
            let d = expr.derivative(name);
            if d != Expr::Num(0.0) {
                partials[axis] = Some(match partials[axis].take() {
                    Some(prev) => Expr::Add(Box::new(prev), Box::new(d)),
                    None => d,
                });
            }
        }
        let n = self.total_dim;
        let mut f = vec![0.0; self.n_points];
        let mut df = vec![0.0; self.n_points * n];
        let mut coord_vals = vec![0.0; self.axes.len()];
        for pt in 0..self.n_points {
            let coords = self.coords(pt);
            for (a, pa) in self.axes.iter().enumerate() {
                coord_vals[a] = self.factors[pa.factor].coordinate(pa.local, coords[a]);
            }
            let lookup = |name: &str| bindings.get(name).map(|&a| coord_vals[a]);
            let value = expr
                .eval(&lookup)
                .map_err(|e| GeometryError::UnevaluableExpression(e.to_string()))?;
            if !value.is_finite() {
                return Err(GeometryError::UnevaluableExpression(format!(
                    "non-finite value at point {pt}"
                )));
            }
            f[pt] = value;
            for (a, partial) in partials.iter().enumerate() {
                let Some(partial) = partial else { continue };
                let d = partial
                    .eval(&lookup)
                    .map_err(|e| GeometryError::UnevaluableExpression(e.to_string()))?;
                // coordinate derivative → unrescaled frame derivative
                let pa = &self.axes[a];
                let fg = &self.factors[pa.factor];
                let fpt = self.factor_point(pt, pa.factor);
                let dir = pa.local;
                let factor = match fg.spec.kind {
                    FactorKind::FlatTorus => 1.0,
                    FactorKind::RoundSphere2 => fg.scale(fpt, dir) * fg.axes()[dir].step,
                };
                df[pt * n + self.dir_offsets[pa.factor] + dir] += factor * d;
            }
        }
        for (w, &fv) in self.weights.iter_mut().zip(&f) {
            *w *= (n as f64 * fv).exp();
        }
        // axes along which f and df are exactly shift invariant stay invariant
        for a in 0..self.axes.len() {
            if !self.axes[a].invariant {
                continue;
            }
            let stride = self.strides[a];
            let len = self.axes[a].axis.len;
            let invariant = (0..self.n_points).all(|pt| {
                let c = (pt / stride) % len;
                let next = if c + 1 == len { pt - c * stride } else { pt + stride };
                f[pt] == f[next] && df[pt * n..(pt + 1) * n] == df[next * n..(next + 1) * n]
            });
            self.axes[a].invariant = invariant;
        }
        self.conformal = Some(Conformal {
            source: src.to_string(),
            f,
            df,
        });
        Ok(())
    }

    fn layout_base(&mut self) {
        self.invariant_axes = (0..self.axes.len()).filter(|&a| self.axes[a].invariant).collect();
        self.base_axes = (0..self.axes.len()).filter(|&a| !self.axes[a].invariant).collect();
        let lens: Vec<usize> = self.base_axes.iter().map(|&a| self.axes[a].axis.len).collect();
        let count: usize = lens.iter().product();
        let bstrides = row_major_strides(&lens);
        self.base_offsets = (0..count)
            .map(|b| {
                self.base_axes
                    .iter()
                    .zip(&bstrides)
                    .zip(&lens)
                    .map(|((&a, s), l)| ((b / s) % l) * self.strides[a])
                    .sum()
            })
            .collect();
    }

    /// Names usable in conformal-exponent expressions, mapped to axes.
    ///
    /// First sphere: `theta`/`θ`, `phi`/`φ`; second sphere `theta2`, `phi2`.
    /// First torus: `x1..xd` (and `s` when it is a circle); later tori use
    /// `y1..`, `z1..`.
    pub fn variable_bindings(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        let (mut spheres, mut tori) = (0usize, 0usize);
        for (fi, fg) in self.factors.iter().enumerate() {
            let off = self.axis_offsets[fi];
            match fg.spec.kind {
                FactorKind::RoundSphere2 => {
                    spheres += 1;
                    let suffix = if spheres == 1 {
                        String::new()
                    } else {
                        spheres.to_string()
                    };
                    out.insert(format!("theta{suffix}"), off);
                    out.insert(format!("phi{suffix}"), off + 1);
                    if spheres == 1 {
                        out.insert("θ".into(), off);
                        out.insert("φ".into(), off + 1);
                    }
                }
                FactorKind::FlatTorus => {
                    let letter = ["x", "y", "z", "w"][tori.min(3)];
                    tori += 1;
                    for j in 0..fg.dim() {
                        out.insert(format!("{letter}{}", j + 1), off + j);
                    }
                    if tori == 1 && fg.dim() == 1 {
                        out.insert("s".into(), off);
                    }
                }
            }
        }
        out
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn same_as(&self, other: &ProductGeometry) -> bool {
        self.id == other.id
    }

    pub fn factors(&self) -> &[FactorGeometry] {
        &self.factors
    }

    pub fn factor_specs(&self) -> Vec<FactorSpec> {
        self.factors.iter().map(|f| f.spec.clone()).collect()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn axes(&self) -> &[ProductAxis] {
        &self.axes
    }

    pub fn is_conformal(&self) -> bool {
        self.conformal.is_some()
    }

    pub fn conformal_source(&self) -> Option<&str> {
        self.conformal.as_ref().map(|c| c.source.as_str())
    }

    /// Sampled conformal exponent (zero when absent).
    pub fn conformal_exponent(&self, pt: usize) -> f64 {
        self.conformal.as_ref().map_or(0.0, |c| c.f[pt])
    }

    /// `e_a(f)` in the unrescaled frame (zero when absent).
    pub fn conformal_gradient(&self, pt: usize, dir: usize) -> f64 {
        self.conformal.as_ref().map_or(0.0, |c| c.df[pt * self.total_dim + dir])
    }

    pub fn directions(&self) -> &[FrameDirection] {
        &self.directions
    }

    /// Frame directions of factor `factor` (1-based).
    pub fn frame_fields(&self, factor: usize) -> Result<Vec<FrameDirection>, GeometryError> {
        self.check_factor(factor)?;
        Ok(self.directions.iter().filter(|d| d.factor == factor).cloned().collect())
    }

    pub fn check_factor(&self, factor: usize) -> Result<(), GeometryError> {
        if factor == 0 || factor > self.factors.len() {
            return Err(GeometryError::BadFactorIndex {
                index: factor,
                count: self.factors.len(),
            });
        }
        Ok(())
    }

    /// Frame-direction range `[offset, offset + dim)` of factor (1-based).
    pub fn factor_directions(&self, factor: usize) -> std::ops::Range<usize> {
        let fi = factor - 1;
        self.dir_offsets[fi]..self.dir_offsets[fi] + self.factors[fi].dim()
    }

    /// 0-based factor owning a global frame direction.
    pub fn factor_of_direction(&self, dir: usize) -> usize {
        self.directions[dir].factor - 1
    }

    pub fn coords(&self, pt: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.axes)
            .map(|(s, a)| (pt / s) % a.axis.len)
            .collect()
    }

    pub fn point_index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Point index within factor `fi` (0-based) of a product point.
    pub fn factor_point(&self, pt: usize, fi: usize) -> usize {
        let fg = &self.factors[fi];
        let off = self.axis_offsets[fi];
        let coords: Vec<usize> = (0..fg.axes().len())
            .map(|l| (pt / self.strides[off + l]) % fg.axes()[l].len)
            .collect();
        fg.point_index(&coords)
    }

    /// Frame derivative factor for direction `dir` at a point, including
    /// the `e^{−f}` of a conformal rescaling.
    pub fn derivative_scale(&self, pt: usize, dir: usize) -> f64 {
        let fi = self.factor_of_direction(dir);
        let local = dir - self.dir_offsets[fi];
        let s = self.factors[fi].scale(self.factor_point(pt, fi), local);
        match &self.conformal {
            Some(c) => s * (-c.f[pt]).exp(),
            None => s,
        }
    }

    /// Product axis carrying the derivative of a frame direction.
    pub fn direction_axis(&self, dir: usize) -> usize {
        let fi = self.factor_of_direction(dir);
        self.axis_offsets[fi] + self.factors[fi].direction_axis(dir - self.dir_offsets[fi])
    }

    /// Dense `n³` connection block `[X][a][b]` at a point: coefficient of
    /// `ẽ_a` in `∇_{ẽ_X} ẽ_b`, including conformal terms.
    pub fn connection_at(&self, pt: usize) -> Vec<f64> {
        let n = self.total_dim;
        let mut out = vec![0.0; n * n * n];
        for (fi, fg) in self.factors.iter().enumerate() {
            let d = fg.dim();
            let off = self.dir_offsets[fi];
            let local = fg.connection(self.factor_point(pt, fi));
            for x in 0..d {
                for a in 0..d {
                    for b in 0..d {
                        out[((off + x) * n + off + a) * n + off + b] = local[(x * d + a) * d + b];
                    }
                }
            }
        }
        if let Some(c) = &self.conformal {
            let scale = (-c.f[pt]).exp();
            let df = &c.df[pt * n..(pt + 1) * n];
            for x in 0..n {
                for a in 0..n {
                    for b in 0..n {
                        let mut g = out[(x * n + a) * n + b];
                        if a == x {
                            g += df[b];
                        }
                        if x == b {
                            g -= df[a];
                        }
                        out[(x * n + a) * n + b] = scale * g;
                    }
                }
            }
        }
        out
    }

    /// Axes along which every operator is shift invariant.
    pub fn invariant_axes(&self) -> &[usize] {
        &self.invariant_axes
    }

    pub fn base_count(&self) -> usize {
        self.base_offsets.len()
    }

    /// Point index of base point `b` (invariant coordinates zero).
    pub fn base_point(&self, b: usize) -> usize {
        self.base_offsets[b]
    }

    /// Splits a point into its base index and invariant coordinates.
    pub fn split_point(&self, pt: usize, inv: &mut [usize]) -> usize {
        let mut rest = pt;
        for (k, &a) in self.invariant_axes.iter().enumerate() {
            let c = (pt / self.strides[a]) % self.axes[a].axis.len;
            inv[k] = c;
            rest -= c * self.strides[a];
        }
        self.base_index_of(rest)
    }

    fn base_index_of(&self, pt: usize) -> usize {
        let mut b = 0;
        for &a in &self.base_axes {
            let c = (pt / self.strides[a]) % self.axes[a].axis.len;
            b = b * self.axes[a].axis.len + c;
        }
        b
    }

    /// Neighbour of base point `b` at `offset` steps along `axis`.
    pub fn neighbor(&self, b: usize, axis: usize, offset: i32) -> Neighbor {
        let mut coords = self.coords(self.base_offsets[b]);
        let mut shift = vec![0i32; self.invariant_axes.len()];
        let inv_pos = |a: usize| self.invariant_axes.iter().position(|&x| x == a);
        let move_axis = |coords: &mut Vec<usize>, shift: &mut Vec<i32>, a: usize, o: i32| {
            let len = self.axes[a].axis.len as i32;
            match inv_pos(a) {
                Some(k) => shift[k] += o,
                None => coords[a] = ((coords[a] as i32 + o).rem_euclid(len)) as usize,
            }
        };
        let mut crossed = false;
        let pa = &self.axes[axis];
        if pa.axis.pole {
            let n = pa.axis.len as i32;
            let mut j = coords[axis] as i32 + offset;
            if j < 0 {
                j = -1 - j;
                crossed = true;
            } else if j >= n {
                j = 2 * n - 1 - j;
                crossed = true;
            }
            coords[axis] = j as usize;
            if crossed {
                let phi_axis = axis + 1;
                let half = (self.axes[phi_axis].axis.len / 2) as i32;
                move_axis(&mut coords, &mut shift, phi_axis, half);
            }
        } else {
            move_axis(&mut coords, &mut shift, axis, offset);
        }
        let pt = self.point_index(&coords);
        // invariant coordinates of `coords` are zero apart from `shift`
        let mut inv = vec![0; self.invariant_axes.len()];
        let base = self.split_point(pt, &mut inv);
        for (s, c) in shift.iter_mut().zip(&inv) {
            *s += *c as i32;
        }
        Neighbor {
            base,
            shift,
            crossed_pole: crossed,
        }
    }

    /// Resolves a base point plus invariant coordinates plus shift.
    pub fn resolve(&self, base: usize, inv: &[usize], shift: &[i32]) -> usize {
        let mut pt = self.base_offsets[base];
        for (k, &a) in self.invariant_axes.iter().enumerate() {
            let len = self.axes[a].axis.len as i64;
            let c = (inv[k] as i64 + shift[k] as i64).rem_euclid(len);
            pt += c as usize * self.strides[a];
        }
        pt
    }

    /// Mask of frame directions belonging to factor `fi` (0-based).
    pub fn factor_mask(&self, fi: usize) -> u32 {
        crate::multiindex::range_mask(self.dir_offsets[fi], self.factors[fi].dim())
    }

    pub fn dir_offset(&self, fi: usize) -> usize {
        self.dir_offsets[fi]
    }

    pub fn axis_offset(&self, fi: usize) -> usize {
        self.axis_offsets[fi]
    }

    /// Unrescaled single-factor geometry with the same grid as factor
    /// `factor` (1-based).
    pub fn factor_geometry(&self, factor: usize) -> Result<Arc<ProductGeometry>, GeometryError> {
        self.check_factor(factor)?;
        let slot = &self.factor_views[factor - 1];
        if let Some(g) = slot.get() {
            return Ok(g.clone());
        }
        let g = ProductGeometry::build(&[self.factors[factor - 1].spec.clone()], None)?;
        Ok(slot.get_or_init(|| g).clone())
    }

    /// Largest grid spacing (physical length) over curved factors, or over
    /// all factors when every factor is flat.
    pub fn mesh_size(&self) -> f64 {
        let spacing = |fg: &FactorGeometry| match fg.spec.kind {
            FactorKind::FlatTorus => fg.axes().iter().map(|a| a.step).fold(0.0, f64::max),
            FactorKind::RoundSphere2 => fg.spec.radii[0] * fg.axes()[0].step.max(fg.axes()[1].step),
        };
        let curved: Vec<f64> = self
            .factors
            .iter()
            .filter(|f| f.spec.kind == FactorKind::RoundSphere2)
            .map(spacing)
            .collect();
        if curved.is_empty() {
            self.factors.iter().map(spacing).fold(0.0, f64::max)
        } else {
            curved.into_iter().fold(0.0, f64::max)
        }
    }

    pub fn is_flat(&self) -> bool {
        self.conformal.is_none() && self.factors.iter().all(|f| f.spec.kind == FactorKind::FlatTorus)
    }

    pub fn has_sphere(&self) -> bool {
        self.factors.iter().any(|f| f.spec.kind == FactorKind::RoundSphere2)
    }

    pub fn describe(&self) -> String {
        let mut s = self
            .factors
            .iter()
            .map(|f| f.spec.label())
            .collect::<Vec<_>>()
            .join(" x ");
        if let Some(c) = &self.conformal {
            s.push_str(&format!(" [e^(2f), f = {}]", c.source));
        }
        s
    }
}

impl fmt::Display for ProductGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_weights_are_uniform() {
        let g = FactorGeometry::build(&FactorSpec::torus(&[1.0], &[8])).unwrap();
        assert_eq!(g.n_points(), 8);
        for &w in g.weights() {
            assert!((w - 2.0 * PI / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sphere_area() {
        let g = FactorGeometry::build(&FactorSpec::sphere(1.0, 16, 32)).unwrap();
        assert!((g.volume() - 4.0 * PI).abs() < 1e-3);
        let g = FactorGeometry::build(&FactorSpec::sphere(2.5, 8, 16)).unwrap();
        assert!((g.volume() - 4.0 * PI * 6.25).abs() < 1e-12);
    }

    #[test]
    fn torus_connection_vanishes() {
        let g = FactorGeometry::build(&FactorSpec::torus(&[1.0, 2.0], &[8, 8])).unwrap();
        for pt in 0..g.n_points() {
            assert!(g.connection(pt).iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn sphere_connection_is_antisymmetric() {
        let g = FactorGeometry::build(&FactorSpec::sphere(1.5, 8, 16)).unwrap();
        for pt in 0..g.n_points() {
            let c = g.connection(pt);
            for x in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        assert_eq!(c[(x * 2 + a) * 2 + b], -c[(x * 2 + b) * 2 + a]);
                    }
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            FactorSpec::sphere(1.0, 8, 15).validate(),
            Err(GeometryError::InvalidResolution(_))
        ));
        assert!(matches!(
            FactorSpec::torus(&[1.0], &[3]).validate(),
            Err(GeometryError::InvalidResolution(_))
        ));
        assert!(matches!(
            FactorSpec::torus(&[-1.0], &[8]).validate(),
            Err(GeometryError::InvalidRadius(_))
        ));
        assert!(matches!(
            FactorSpec::sphere(0.0, 8, 16).validate(),
            Err(GeometryError::InvalidRadius(_))
        ));
        let mut bad = FactorSpec::torus(&[1.0, 1.0], &[8, 8]);
        bad.dim = 3;
        assert!(matches!(bad.validate(), Err(GeometryError::InvalidDimension(_))));
    }

    #[test]
    fn product_weights_and_dims() {
        let s = FactorSpec::sphere(1.0, 8, 16);
        let t = FactorSpec::torus(&[1.0], &[6]);
        let g = ProductGeometry::build(&[s.clone(), t.clone()], None).unwrap();
        assert_eq!(g.total_dim(), 3);
        assert_eq!(g.n_points(), 8 * 16 * 6);
        let sg = FactorGeometry::build(&s).unwrap();
        let tg = FactorGeometry::build(&t).unwrap();
        for pt in 0..g.n_points() {
            let w = sg.weights()[g.factor_point(pt, 0)] * tg.weights()[g.factor_point(pt, 1)];
            assert_eq!(g.weights()[pt], w);
        }
        assert!(matches!(
            ProductGeometry::build(&[], None),
            Err(GeometryError::EmptyFactorList)
        ));
    }

    #[test]
    fn zero_exponent_is_bitwise_identical() {
        let specs = [FactorSpec::sphere(1.0, 8, 16), FactorSpec::torus(&[1.0], &[6])];
        let plain = ProductGeometry::build(&specs, None).unwrap();
        let zero = ProductGeometry::build(&specs, Some("0")).unwrap();
        assert_eq!(plain.weights(), zero.weights());
        for pt in [0, 17, 400] {
            assert_eq!(plain.connection_at(pt), zero.connection_at(pt));
            for d in 0..3 {
                assert_eq!(plain.derivative_scale(pt, d), zero.derivative_scale(pt, d));
            }
        }
        assert_eq!(plain.invariant_axes(), zero.invariant_axes());
    }

    #[test]
    fn constant_exponent_scales_weights() {
        let specs = [FactorSpec::sphere(1.0, 8, 16), FactorSpec::torus(&[1.0], &[6])];
        let plain = ProductGeometry::build(&specs, None).unwrap();
        let c: f64 = 0.25;
        let scaled = ProductGeometry::build(&specs, Some("0.25")).unwrap();
        for (w0, w1) in plain.weights().iter().zip(scaled.weights()) {
            assert_eq!(*w1, w0 * (3.0 * c).exp());
        }
        // connection only rescaled, no derivative terms
        let s = (-c).exp();
        for pt in [3, 250] {
            let a = plain.connection_at(pt);
            let b = scaled.connection_at(pt);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(*y, s * x);
            }
        }
    }

    #[test]
    fn latitude_only_exponent_keeps_longitude_invariance() {
        let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16)], Some("0.3 cos theta")).unwrap();
        assert_eq!(g.invariant_axes(), &[1]);
        let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16)], Some("0.3 sin(theta) cos(phi)")).unwrap();
        assert!(g.invariant_axes().is_empty());
        assert_eq!(g.base_count(), g.n_points());
    }

    #[test]
    fn unknown_variable_rejected() {
        let err = ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16)], Some("x1 + 1"));
        assert!(matches!(err, Err(GeometryError::UnevaluableExpression(_))));
    }

    #[test]
    fn frame_fields_per_factor() {
        let g = ProductGeometry::build(&[FactorSpec::unit_torus(2, 4), FactorSpec::unit_torus(1, 4)], None).unwrap();
        assert_eq!(g.frame_fields(1).unwrap().len(), 2);
        assert_eq!(g.frame_fields(2).unwrap().len(), 1);
        let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, 4, 4), FactorSpec::unit_torus(2, 4)], None).unwrap();
        assert_eq!(g.frame_fields(2).unwrap().len(), 2);
        let single = ProductGeometry::build(&[FactorSpec::sphere(1.0, 4, 4)], None).unwrap();
        assert!(matches!(
            single.frame_fields(2),
            Err(GeometryError::BadFactorIndex { index: 2, count: 1 })
        ));
    }

    #[test]
    fn cross_pole_neighbor() {
        let g = ProductGeometry::build(&[FactorSpec::sphere(1.0, 4, 8)], None).unwrap();
        // base points are latitudes; φ is invariant
        assert_eq!(g.base_count(), 4);
        let nb = g.neighbor(0, 0, -1);
        assert!(nb.crossed_pole);
        assert_eq!(nb.base, 0);
        assert_eq!(nb.shift, vec![4]);
        let nb = g.neighbor(3, 0, 2);
        assert!(nb.crossed_pole);
        assert_eq!(nb.base, 2);
        let nb = g.neighbor(1, 0, 1);
        assert!(!nb.crossed_pole);
        assert_eq!((nb.base, nb.shift.clone()), (2, vec![0]));
    }

    #[test]
    fn rescaled_resolutions() {
        let s = FactorSpec::sphere(1.0, 16, 32).rescaled(3, 2);
        assert_eq!(s.resolution, vec![24, 48]);
        let s = FactorSpec::sphere(1.0, 6, 10).rescaled(3, 2);
        assert_eq!(s.resolution[1] % 2, 0);
    }
}
