//! Closed-form reference fields on catalog manifolds and the τ(h)
//! calibration built from them.
//!
//! Sphere fields come from the ambient picture: rotations `a × x` and
//! conformal gradients `a − (a·n)n`, projected on the orthonormal frame
//! `e_θ = (cos θ cos φ, cos θ sin φ, −sin θ)`, `e_φ = (−sin φ, cos φ, 0)`.
//! Vector components are returned in the (possibly rescaled) frame of the
//! geometry, i.e. multiplied by `e^f`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::forms::{hodge_star, wedge, DiscreteForm, VectorField};
use crate::geometry::{FactorKind, ProductGeometry};
use crate::multiindex::FormBasis;
use crate::operators::{
    assemble_conformal_killing_vec, assemble_killing_residual, assemble_killing_vec, assemble_parallel_residual,
    assemble_twistor, OperatorError,
};

pub const CALIBRATION_SAFETY: f64 = 10.0;

const AXES: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Debug)]
pub struct OracleField {
    pub name: String,
    pub form: DiscreteForm,
}

fn sphere_frame(theta: f64, phi: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (st, ct, sp, cp) = (theta.sin(), theta.cos(), phi.sin(), phi.cos());
    ([st * cp, st * sp, ct], [ct * cp, ct * sp, -st], [-sp, cp, 0.0])
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Vector field on a sphere factor from an ambient field `v(n)`.
fn sphere_field(g: &Arc<ProductGeometry>, fi: usize, v: impl Fn(&[f64; 3]) -> [f64; 3]) -> DiscreteForm {
    let fg = &g.factors()[fi];
    let off = g.dir_offset(fi);
    DiscreteForm::from_fn(g, 1, |pt, out| {
        let c = fg.coords(g.factor_point(pt, fi));
        let (n, et, ep) = sphere_frame(fg.coordinate(0, c[0]), fg.coordinate(1, c[1]));
        let w = v(&n);
        let scale = g.conformal_exponent(pt).exp();
        out[off] = scale * dot(&w, &et);
        out[off + 1] = scale * dot(&w, &ep);
    })
    .expect("degree 1")
}

/// Rotation generators `a × x` of every sphere factor.
pub fn sphere_rotations(g: &Arc<ProductGeometry>) -> Vec<OracleField> {
    let mut out = Vec::new();
    for (fi, fg) in g.factors().iter().enumerate() {
        if fg.spec.kind != FactorKind::RoundSphere2 {
            continue;
        }
        let r = fg.spec.radii[0];
        for (k, a) in AXES.iter().enumerate() {
            let form = sphere_field(g, fi, |n| {
                let x = cross(a, n);
                [r * x[0], r * x[1], r * x[2]]
            });
            out.push(OracleField {
                name: format!("rotation[{}]{}", fi + 1, ["x", "y", "z"][k]),
                form,
            });
        }
    }
    out
}

/// Conformal gradients `a − (a·n)n` of every sphere factor.
pub fn sphere_gradients(g: &Arc<ProductGeometry>) -> Vec<OracleField> {
    let mut out = Vec::new();
    for (fi, fg) in g.factors().iter().enumerate() {
        if fg.spec.kind != FactorKind::RoundSphere2 {
            continue;
        }
        for (k, a) in AXES.iter().enumerate() {
            let form = sphere_field(g, fi, |n| {
                let s = dot(a, n);
                [a[0] - s * n[0], a[1] - s * n[1], a[2] - s * n[2]]
            });
            out.push(OracleField {
                name: format!("gradient[{}]{}", fi + 1, ["x", "y", "z"][k]),
                form,
            });
        }
    }
    out
}

/// Unit translations along every torus direction.
pub fn torus_translations(g: &Arc<ProductGeometry>) -> Vec<OracleField> {
    let mut out = Vec::new();
    for (fi, fg) in g.factors().iter().enumerate() {
        if fg.spec.kind != FactorKind::FlatTorus {
            continue;
        }
        for j in 0..fg.dim() {
            let dir = g.dir_offset(fi) + j;
            let form = DiscreteForm::from_fn(g, 1, |pt, o| o[dir] = g.conformal_exponent(pt).exp()).expect("degree 1");
            out.push(OracleField {
                name: format!("translation[{}]{}", fi + 1, j + 1),
                form,
            });
        }
    }
    out
}

/// Killing vector fields of the unrescaled product.
pub fn killing_vectors(g: &Arc<ProductGeometry>) -> Vec<OracleField> {
    let mut out = sphere_rotations(g);
    out.extend(torus_translations(g));
    out
}

/// Conformal vector fields: on a product these are the Killing fields;
/// a lone sphere adds its three gradients.
pub fn conformal_vectors(g: &Arc<ProductGeometry>) -> Vec<OracleField> {
    let mut out = killing_vectors(g);
    if g.n_factors() == 1 && g.factors()[0].spec.kind == FactorKind::RoundSphere2 {
        out.extend(sphere_gradients(g));
    }
    out
}

/// Constant-coefficient forms `∧ (area forms) ∧ e^J`: sphere area forms
/// times torus coframe monomials.
pub fn parallel_forms(g: &Arc<ProductGeometry>, p: usize) -> Vec<OracleField> {
    let n = g.total_dim();
    let mut sphere_masks = Vec::new();
    let mut torus_mask = 0u32;
    for (fi, fg) in g.factors().iter().enumerate() {
        match fg.spec.kind {
            FactorKind::RoundSphere2 => sphere_masks.push(g.factor_mask(fi)),
            FactorKind::FlatTorus => torus_mask |= g.factor_mask(fi),
        }
    }
    FormBasis::get(n, p)
        .masks()
        .iter()
        .filter(|&&m| {
            m & !torus_mask & !sphere_masks.iter().fold(0, |a, b| a | b) == 0
                && sphere_masks.iter().all(|&s| m & s == 0 || m & s == s)
        })
        .map(|&m| OracleField {
            name: format!("parallel[{}]", mask_label(m)),
            form: DiscreteForm::basis(g, m).expect("valid mask"),
        })
        .collect()
}

fn mask_label(m: u32) -> String {
    crate::multiindex::indices(m)
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join("")
}

/// Spanning set of `𝔎₀` in degree `p`: parallel forms plus lifted
/// sphere rotation 1-forms.
pub fn killing_forms(g: &Arc<ProductGeometry>, p: usize) -> Vec<OracleField> {
    let mut out = parallel_forms(g, p);
    if p == 1 {
        out.extend(sphere_rotations(g));
    }
    out
}

/// Spanning set of `𝔎₀ + *𝔎₀` in degree `p`.
pub fn twistor_forms(g: &Arc<ProductGeometry>, p: usize) -> Vec<OracleField> {
    let n = g.total_dim();
    let mut out = killing_forms(g, p);
    for f in killing_forms(g, n - p) {
        out.push(OracleField {
            name: format!("*{}", f.name),
            form: hodge_star(&f.form),
        });
    }
    out
}

/// Seeded smooth random `p`-form: sums of wedge products of factor pieces
/// (ambient quadratics and linear vector fields on spheres, low-mode
/// trigonometric coefficients on tori).
pub fn smooth_random_form(g: &Arc<ProductGeometry>, p: usize, seed: u64) -> DiscreteForm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_factor: Vec<Vec<(usize, Piece)>> = g
        .factors()
        .iter()
        .enumerate()
        .map(|(fi, fg)| factor_pieces(g, fi, fg.spec.kind))
        .collect();
    let mut acc = DiscreteForm::zeros(g, p).expect("degree");
    let mut choice = vec![0usize; per_factor.len()];
    loop {
        let deg: usize = choice.iter().zip(&per_factor).map(|(&c, ps)| ps[c].0).sum();
        if deg == p {
            let mut term = DiscreteForm::from_fn(g, 0, |_, o| o[0] = 1.0).expect("degree 0");
            for (fi, (&c, ps)) in choice.iter().zip(&per_factor).enumerate() {
                let piece = sample_piece(g, fi, &ps[c].1, &mut rng);
                term = wedge(&term, &piece).expect("degree fits");
            }
            acc = acc.add(&term).expect("same shape");
        }
        // odometer over piece choices
        let mut k = 0;
        loop {
            if k == choice.len() {
                return acc;
            }
            choice[k] += 1;
            if choice[k] < per_factor[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

#[derive(Clone, Copy)]
enum Piece {
    /// Torus coefficient on a local multi-index.
    Torus(u32),
    SphereScalar,
    SphereOneForm,
    SphereArea,
}

fn factor_pieces(g: &ProductGeometry, fi: usize, kind: FactorKind) -> Vec<(usize, Piece)> {
    match kind {
        FactorKind::RoundSphere2 => vec![
            (0, Piece::SphereScalar),
            (1, Piece::SphereOneForm),
            (2, Piece::SphereArea),
        ],
        FactorKind::FlatTorus => {
            let d = g.factors()[fi].dim();
            (0..1u32 << d)
                .map(|m| (m.count_ones() as usize, Piece::Torus(m)))
                .collect()
        }
    }
}

fn sample_piece(g: &Arc<ProductGeometry>, fi: usize, piece: &Piece, rng: &mut ChaCha8Rng) -> DiscreteForm {
    let fg = &g.factors()[fi];
    let off = g.dir_offset(fi);
    let mut coef = || rng.gen_range(-1.0..=1.0);
    match *piece {
        Piece::Torus(local) => {
            let d = fg.dim();
            let radii = fg.spec.radii.clone();
            let c0 = coef();
            let mut waves = Vec::new();
            for j in 0..d {
                for k in 1..=2 {
                    waves.push((j, k as f64, coef(), coef()));
                }
            }
            let mask = local << off;
            let p = local.count_ones() as usize;
            let basis = FormBasis::get(g.total_dim(), p);
            let r = basis.rank(mask).expect("degree");
            DiscreteForm::from_fn(g, p, |pt, o| {
                let c = fg.coords(g.factor_point(pt, fi));
                let mut v = c0;
                for &(j, k, a, b) in &waves {
                    let x = fg.coordinate(j, c[j]) / radii[j];
                    v += 0.5 * (a * (k * x).cos() + b * (k * x).sin()) / k;
                }
                o[r] = v;
            })
            .expect("degree")
        }
        Piece::SphereScalar | Piece::SphereArea => {
            let c0 = coef();
            let lin = [coef(), coef(), coef()];
            let quad: Vec<f64> = (0..6).map(|_| coef()).collect();
            let (p, mask) = match piece {
                Piece::SphereArea => (2, 0b11u32 << off),
                _ => (0, 0),
            };
            let r = FormBasis::get(g.total_dim(), p).rank(mask).expect("degree");
            DiscreteForm::from_fn(g, p, |pt, o| {
                let c = fg.coords(g.factor_point(pt, fi));
                let (x, _, _) = sphere_frame(fg.coordinate(0, c[0]), fg.coordinate(1, c[1]));
                o[r] = c0
                    + dot(&lin, &x)
                    + quad[0] * x[0] * x[0]
                    + quad[1] * x[1] * x[1]
                    + quad[2] * x[2] * x[2]
                    + quad[3] * x[0] * x[1]
                    + quad[4] * x[1] * x[2]
                    + quad[5] * x[0] * x[2];
            })
            .expect("degree")
        }
        Piece::SphereOneForm => {
            let v0 = [coef(), coef(), coef()];
            let m: Vec<f64> = (0..9).map(|_| coef()).collect();
            DiscreteForm::from_fn(g, 1, |pt, o| {
                let c = fg.coords(g.factor_point(pt, fi));
                let (x, et, ep) = sphere_frame(fg.coordinate(0, c[0]), fg.coordinate(1, c[1]));
                let w = [
                    v0[0] + m[0] * x[0] + m[1] * x[1] + m[2] * x[2],
                    v0[1] + m[3] * x[0] + m[4] * x[1] + m[5] * x[2],
                    v0[2] + m[6] * x[0] + m[7] * x[1] + m[8] * x[2],
                ];
                o[off] = dot(&w, &et);
                o[off + 1] = dot(&w, &ep);
            })
            .expect("degree 1")
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationSample {
    pub field: String,
    pub operator: String,
    pub relative_residual: f64,
}

/// `C = safety · max ‖Aψ‖ / (h⁴ ‖ψ‖)` over reference fields.
#[derive(Clone, Debug, Serialize)]
pub struct Calibration {
    pub constant: f64,
    pub mesh_size: f64,
    pub safety: f64,
    pub max_ratio: f64,
    pub worst: Option<CalibrationSample>,
    pub samples: usize,
}

impl Calibration {
    pub fn from_samples(g: &ProductGeometry, samples: &[CalibrationSample]) -> Self {
        let h4 = g.mesh_size().powi(4);
        let worst = samples
            .iter()
            .max_by(|a, b| a.relative_residual.total_cmp(&b.relative_residual))
            .cloned();
        let max_ratio = worst.as_ref().map_or(0.0, |w| w.relative_residual / h4);
        Calibration {
            constant: CALIBRATION_SAFETY * max_ratio,
            mesh_size: g.mesh_size(),
            safety: CALIBRATION_SAFETY,
            max_ratio,
            worst,
            samples: samples.len(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.constant * self.mesh_size.powi(4)
    }
}

fn relative(res: f64, u: &DiscreteForm) -> f64 {
    let n = u.norm();
    if n > 0.0 {
        res / n
    } else {
        0.0
    }
}

/// Residuals of every reference field under the operator that should
/// annihilate it (unrescaled geometries).
pub fn calibration_samples(g: &Arc<ProductGeometry>) -> Result<Vec<CalibrationSample>, OperatorError> {
    let n = g.total_dim();
    let mut out = Vec::new();
    let mut push = |field: &str, op: &str, r: f64| {
        out.push(CalibrationSample {
            field: field.to_string(),
            operator: op.to_string(),
            relative_residual: r,
        })
    };
    for p in 1..n {
        let t = assemble_twistor(g, p)?;
        for f in twistor_forms(g, p) {
            push(&f.name, t.name(), relative(t.residual_norm(&f.form)?, &f.form));
        }
        let k = assemble_killing_residual(g, p)?;
        for f in killing_forms(g, p) {
            push(&f.name, k.name(), relative(k.residual_norm(&f.form)?, &f.form));
        }
    }
    for p in 0..=n {
        let par = assemble_parallel_residual(g, p)?;
        for f in parallel_forms(g, p) {
            push(&f.name, par.name(), relative(par.residual_norm(&f.form)?, &f.form));
        }
    }
    out.extend(vector_samples(g, None)?);
    Ok(out)
}

/// Vector-field residuals; on rescaled geometries only the conformal
/// operator applies. `exclude` drops one field by name.
pub fn vector_samples(
    g: &Arc<ProductGeometry>,
    exclude: Option<&str>,
) -> Result<Vec<CalibrationSample>, OperatorError> {
    let mut out = Vec::new();
    let ck = assemble_conformal_killing_vec(g);
    let kv = (!g.is_conformal()).then(|| assemble_killing_vec(g));
    let fields = conformal_vectors(g);
    let killing: Vec<String> = killing_vectors(g).into_iter().map(|f| f.name).collect();
    for f in fields.iter().filter(|f| Some(f.name.as_str()) != exclude) {
        let v = VectorField::from_components(g, f.form.coefficients().to_vec())?;
        out.push(CalibrationSample {
            field: f.name.clone(),
            operator: ck.name().to_string(),
            relative_residual: relative(ck.field_residual_norm(&v)?, &f.form),
        });
        if let Some(kv) = &kv {
            if killing.contains(&f.name) {
                out.push(CalibrationSample {
                    field: f.name.clone(),
                    operator: kv.name().to_string(),
                    relative_residual: relative(kv.field_residual_norm(&v)?, &f.form),
                });
            }
        }
    }
    Ok(out)
}

pub fn calibrate(g: &Arc<ProductGeometry>) -> Result<Calibration, OperatorError> {
    let samples = if g.is_conformal() {
        vector_samples(g, None)?
    } else {
        calibration_samples(g)?
    };
    Ok(Calibration::from_samples(g, &samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FactorSpec;

    fn s2t2() -> Arc<ProductGeometry> {
        ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16), FactorSpec::unit_torus(2, 4)], None).unwrap()
    }

    #[test]
    fn counts() {
        let g = s2t2();
        assert_eq!(sphere_rotations(&g).len(), 3);
        assert_eq!(torus_translations(&g).len(), 2);
        assert_eq!(parallel_forms(&g, 0).len(), 1);
        assert_eq!(parallel_forms(&g, 1).len(), 2);
        // area, e3∧e4
        assert_eq!(parallel_forms(&g, 2).len(), 2);
        assert_eq!(parallel_forms(&g, 3).len(), 2);
        assert_eq!(killing_forms(&g, 1).len(), 5);
        assert_eq!(conformal_vectors(&g).len(), 5);
        let s2 = ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16)], None).unwrap();
        assert_eq!(conformal_vectors(&s2).len(), 6);
    }

    #[test]
    fn rotation_z_is_sin_theta_dphi() {
        let g = s2t2();
        let rz = &sphere_rotations(&g)[2];
        let fg = &g.factors()[0];
        for pt in [0, 37, 200] {
            let th = fg.coordinate(0, fg.coords(g.factor_point(pt, 0))[0]);
            let c = rz.form.at(pt);
            assert!(c[0].abs() < 1e-15 && (c[1] - th.sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn sphere_calibration_is_small_and_positive() {
        let g = s2t2();
        let cal = calibrate(&g).unwrap();
        assert!(cal.constant > 0.0 && cal.tau() < 1e-2, "{cal:?}");
        assert!(cal.samples > 20);
    }

    #[test]
    fn flat_calibration_is_roundoff() {
        let g = ProductGeometry::build(&[FactorSpec::unit_torus(2, 6), FactorSpec::unit_torus(1, 6)], None).unwrap();
        let cal = calibrate(&g).unwrap();
        assert!(cal.tau() < 1e-12, "{cal:?}");
    }
}
