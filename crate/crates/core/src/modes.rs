//! Exact kernel dimensions of the continuum operators on flat tori, one
//! Fourier mode at a time.
//!
//! On the mode `e^{i⟨k, x⟩}` with wave vector `ξ_j = k_j / r_j` every first
//! order operator becomes `i` times an algebraic map built from `ξ`; its
//! kernel is computed by Gaussian elimination over the rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FactorKind, FactorSpec};
use crate::multiindex::{binomial, insertion_sign, FormBasis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("mode analysis needs flat tori only")]
    NotFlat,
    #[error("degree {degree} invalid for {operator:?} on dimension {dim}")]
    BadDegree {
        operator: ModeOperator,
        degree: usize,
        dim: usize,
    },
    #[error("radius {0} is not finite")]
    BadRadius(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeOperator {
    Twistor,
    Killing,
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeDimension {
    pub mode: Vec<i64>,
    pub dimension: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTable {
    pub operator: ModeOperator,
    pub degree: usize,
    pub radii: Vec<f64>,
    pub cutoff: i64,
    pub modes: Vec<ModeDimension>,
    pub total: usize,
}

impl ModeTable {
    /// Modes carrying a nonzero kernel.
    pub fn support(&self) -> impl Iterator<Item = &ModeDimension> {
        self.modes.iter().filter(|m| m.dimension > 0)
    }
}

fn rational(x: f64) -> Result<BigRational, ModeError> {
    BigRational::from_float(x).ok_or(ModeError::BadRadius(x))
}

fn small(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Rank by elimination over ℚ.
pub fn rank(mut m: Vec<Vec<BigRational>>) -> usize {
    let rows = m.len();
    let cols = m.first().map_or(0, |r| r.len());
    let mut r = 0;
    for c in 0..cols {
        let Some(piv) = (r..rows).find(|&i| !m[i][c].is_zero()) else {
            continue;
        };
        m.swap(r, piv);
        let inv = m[r][c].recip();
        for j in c..cols {
            let v = &m[r][j] * &inv;
            m[r][j] = v;
        }
        for i in 0..rows {
            if i != r && !m[i][c].is_zero() {
                let f = m[i][c].clone();
                for j in c..cols {
                    let v = &m[i][j] - &f * &m[r][j];
                    m[i][j] = v;
                }
            }
        }
        r += 1;
        if r == rows {
            break;
        }
    }
    r
}

/// Symbol matrix on one mode: rows are output components, columns the
/// coefficients of `ψ̂`.
fn symbol_matrix(op: ModeOperator, xi: &[BigRational], p: usize) -> Vec<Vec<BigRational>> {
    let n = xi.len();
    let basis = FormBasis::get(n, p);
    let c = basis.len();
    let zero_row = || vec![BigRational::zero(); c];
    let sign = |s: f64| {
        if s > 0.0 {
            BigRational::one()
        } else {
            -BigRational::one()
        }
    };
    // (ξ∧ψ)_K and (ξ⌟ψ)_L as linear forms in ψ̂
    let wedge_xi = |k: u32| {
        let mut row = zero_row();
        for a in 0..n {
            if k & (1 << a) != 0 {
                let rest = k & !(1 << a);
                let j = basis.rank(rest).expect("degree");
                row[j] += &xi[a] * sign(insertion_sign(a, rest));
            }
        }
        row
    };
    let contract_xi = |l: u32| {
        let mut row = zero_row();
        for a in 0..n {
            if l & (1 << a) == 0 {
                let j = basis.rank(l | (1 << a)).expect("degree");
                row[j] += &xi[a] * sign(insertion_sign(a, l));
            }
        }
        row
    };
    let mut rows = Vec::new();
    match op {
        ModeOperator::Parallel => {
            for a in 0..n {
                for i in 0..c {
                    let mut row = zero_row();
                    row[i] = xi[a].clone();
                    rows.push(row);
                }
            }
        }
        ModeOperator::Twistor | ModeOperator::Killing => {
            let kd = small(1, p as i64 + 1);
            let kdelta = small(1, (n - p) as i64 + 1);
            for a in 0..n {
                for (i, &mi) in basis.masks().iter().enumerate() {
                    let mut row = zero_row();
                    row[i] += &xi[a];
                    if mi & (1 << a) == 0 {
                        // e_a ⌟ (ξ∧ψ) at I = ε(a, I) (ξ∧ψ)_{a∪I}
                        let s = sign(insertion_sign(a, mi));
                        for (j, v) in wedge_xi(mi | (1 << a)).into_iter().enumerate() {
                            row[j] -= &kd * &s * v;
                        }
                    } else {
                        // e^a ∧ (ξ⌟ψ) at I = ε(a, I∖a) (ξ⌟ψ)_{I∖a}
                        let rest = mi & !(1 << a);
                        let s = sign(insertion_sign(a, rest));
                        for (j, v) in contract_xi(rest).into_iter().enumerate() {
                            row[j] -= &kdelta * &s * v;
                        }
                    }
                    rows.push(row);
                }
            }
            if op == ModeOperator::Killing {
                for &l in FormBasis::get(n, p - 1).masks() {
                    rows.push(contract_xi(l));
                }
            }
        }
    }
    rows
}

/// Per-mode kernel dimensions for `|k|_∞ ≤ cutoff` on a product of flat
/// tori.
pub fn torus_mode_kernel(
    factors: &[FactorSpec],
    operator: ModeOperator,
    p: usize,
    cutoff: i64,
) -> Result<ModeTable, ModeError> {
    if factors.is_empty() || factors.iter().any(|f| f.kind != FactorKind::FlatTorus) {
        return Err(ModeError::NotFlat);
    }
    let radii: Vec<f64> = factors.iter().flat_map(|f| f.radii.iter().copied()).collect();
    let n = radii.len();
    let valid = match operator {
        ModeOperator::Parallel => p <= n,
        _ => p >= 1 && p < n,
    };
    if !valid {
        return Err(ModeError::BadDegree {
            operator,
            degree: p,
            dim: n,
        });
    }
    let inv_r: Vec<BigRational> = radii
        .iter()
        .map(|&r| rational(r).map(|q| q.recip()))
        .collect::<Result<_, _>>()?;
    let cols = binomial(n, p);
    let side = (2 * cutoff + 1) as usize;
    let mut modes = Vec::new();
    for flat in 0..side.pow(n as u32) {
        let mut k = vec![0i64; n];
        let mut rest = flat;
        for slot in k.iter_mut().rev() {
            *slot = (rest % side) as i64 - cutoff;
            rest /= side;
        }
        let xi: Vec<BigRational> = k
            .iter()
            .zip(&inv_r)
            .map(|(&kj, ir)| BigRational::from_integer(BigInt::from(kj)) * ir)
            .collect();
        let m = symbol_matrix(operator, &xi, p);
        let dimension = cols - rank(m);
        modes.push(ModeDimension { mode: k, dimension });
    }
    let total = modes.iter().map(|m| m.dimension).sum();
    Ok(ModeTable {
        operator,
        degree: p,
        radii,
        cutoff,
        modes,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3() -> Vec<FactorSpec> {
        vec![FactorSpec::unit_torus(3, 8)]
    }

    #[test]
    fn zero_mode_parallel_counts_constants() {
        for p in 0..=3 {
            let t = torus_mode_kernel(&t3(), ModeOperator::Parallel, p, 1).unwrap();
            let zero = t.modes.iter().find(|m| m.mode.iter().all(|&k| k == 0)).unwrap();
            assert_eq!(zero.dimension, binomial(3, p));
            assert_eq!(t.total, binomial(3, p));
        }
    }

    #[test]
    fn t3_one_forms_only_constant() {
        for cutoff in [1, 2] {
            let t = torus_mode_kernel(&t3(), ModeOperator::Twistor, 1, cutoff).unwrap();
            assert_eq!(t.total, 3);
            assert!(t
                .modes
                .iter()
                .filter(|m| m.mode.iter().any(|&k| k != 0))
                .all(|m| m.dimension == 0));
        }
    }

    #[test]
    fn circle_twistor_degree_guard() {
        let c = vec![FactorSpec::unit_torus(1, 8)];
        assert!(matches!(
            torus_mode_kernel(&c, ModeOperator::Twistor, 1, 1),
            Err(ModeError::BadDegree { .. })
        ));
        let s = vec![FactorSpec::sphere(1.0, 8, 16)];
        assert_eq!(
            torus_mode_kernel(&s, ModeOperator::Parallel, 0, 1),
            Err(ModeError::NotFlat)
        );
    }

    #[test]
    fn uneven_radii_keep_totals() {
        let f = vec![FactorSpec::torus(&[1.0, 2.5], &[8, 8]), FactorSpec::torus(&[0.7], &[8])];
        for p in 1..3 {
            for op in [ModeOperator::Twistor, ModeOperator::Killing] {
                let t = torus_mode_kernel(&f, op, p, 2).unwrap();
                assert_eq!(t.total, binomial(3, p));
            }
        }
    }

    #[test]
    fn rank_of_small_matrices() {
        let q = |v: i64| BigRational::from_integer(BigInt::from(v));
        assert_eq!(rank(vec![vec![q(1), q(2)], vec![q(2), q(4)]]), 1);
        assert_eq!(rank(vec![vec![q(0), q(1)], vec![q(1), q(0)]]), 2);
        assert_eq!(rank(vec![vec![q(0), q(0)]]), 0);
    }
}
