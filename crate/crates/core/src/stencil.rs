//! First-derivative stencil shared by every periodic and cross-pole axis.
//!
//! Six-point upwind-biased difference, fifth order in the grid spacing:
//! `f'(x) ≈ (−2f₋₃ + 15f₋₂ − 60f₋₁ + 20f₀ + 30f₁ − 3f₂) / (60h)`.
//! Its Fourier symbol vanishes only on constants, so there are no
//! odd-even (Nyquist) null modes on periodic grids.

pub const OFFSETS: [i32; 6] = [-3, -2, -1, 0, 1, 2];
pub const WEIGHTS: [f64; 6] = [
    -2.0 / 60.0,
    15.0 / 60.0,
    -60.0 / 60.0,
    20.0 / 60.0,
    30.0 / 60.0,
    -3.0 / 60.0,
];

/// Truncation order of the stencil on uniform periodic axes.
pub const STENCIL_ORDER: u32 = 5;

/// Effective order on axes whose frame scale is singular at a pole
/// (the `1/sin θ` factor costs one power of `h`).
pub const POLE_ORDER: u32 = 4;

pub fn taps() -> impl Iterator<Item = (i32, f64)> {
    OFFSETS.iter().copied().zip(WEIGHTS.iter().copied())
}

/// Complex Fourier symbol `Σ c_j e^{i j θ}` of the stencil (without `1/h`).
pub fn symbol(theta: f64) -> (f64, f64) {
    taps().fold((0.0, 0.0), |(re, im), (o, c)| {
        let a = o as f64 * theta;
        (re + c * a.cos(), im + c * a.sin())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_conditions() {
        for k in 0..6u32 {
            let m: f64 = taps().map(|(o, c)| c * (o as f64).powi(k as i32)).sum();
            let expected = if k == 1 { 1.0 } else { 0.0 };
            assert!((m - expected).abs() < 1e-14, "moment {k} = {m}");
        }
        let m6: f64 = taps().map(|(o, c)| c * (o as f64).powi(6)).sum();
        assert!(m6.abs() > 1.0);
    }

    #[test]
    fn symbol_vanishes_only_at_zero() {
        for n in [4usize, 5, 6, 8, 16, 33] {
            for k in 1..n {
                let (re, im) = symbol(2.0 * std::f64::consts::PI * k as f64 / n as f64);
                assert!(re.hypot(im) > 1e-3, "n={n} k={k}");
            }
        }
        let (re, im) = symbol(0.0);
        assert!(re.abs() < 1e-15 && im.abs() < 1e-15);
    }
}
