//! Gamma-family special functions used by the Dirichlet closed forms.
//!
//! `ln Γ` uses a Lanczos approximation below 10 and the Stirling series above;
//! `ψ` and `ψ'` shift the argument up to 6 with the recurrence and then apply
//! their asymptotic expansions. Everything is plain `f64` arithmetic so results
//! are identical on every platform.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `B_{2k} / (2k)` for k = 1..7, used by the digamma asymptotic series.
const DIGAMMA_ASYMP: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
];

/// `B_{2k}` for k = 1..7, used by the trigamma asymptotic series.
const TRIGAMMA_ASYMP: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2_730.0,
    7.0 / 6.0,
];

const ASYMPTOTIC_SHIFT: f64 = 6.0;

fn check_domain(name: &str, x: f64) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!(
            "{name} requires a finite positive argument, got {x}"
        )));
    }
    Ok(())
}

/// Natural logarithm of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_domain("log_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_domain("digamma", x)?;
    Ok(digamma_unchecked(x))
}

/// Trigamma ψ'(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_domain("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

/// `ln Γ(x)` without the domain check. Callers guarantee `x > 0`.
pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x) = Γ(x + 1) / x keeps the Lanczos sum in its accurate range.
        return ln_gamma_unchecked(x + 1.0) - x.ln();
    }
    if x >= 10.0 {
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        let series = inv
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 360.0
                        - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))));
        return (x - 0.5) * x.ln() - x + HALF_LN_2PI + series;
    }
    let z = x - 1.0;
    let mut sum = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        sum += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_2PI + (z + 0.5) * t.ln() - t + sum.ln()
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut acc = 0.0;
    let mut xx = x;
    while xx < ASYMPTOTIC_SHIFT {
        acc -= 1.0 / xx;
        xx += 1.0;
    }
    acc += xx.ln() - 0.5 / xx;
    let inv2 = 1.0 / (xx * xx);
    let mut term = inv2;
    for &c in &DIGAMMA_ASYMP {
        acc -= c * term;
        term *= inv2;
    }
    acc
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut acc = 0.0;
    let mut xx = x;
    while xx < ASYMPTOTIC_SHIFT {
        acc += 1.0 / (xx * xx);
        xx += 1.0;
    }
    let inv = 1.0 / xx;
    let inv2 = inv * inv;
    acc += inv + 0.5 * inv2;
    let mut term = inv2 * inv;
    for &c in &TRIGAMMA_ASYMP {
        acc += c * term;
        term *= inv2;
    }
    acc
}

/// Solves ψ(x) = y for x > 0 by Newton's method (Minka's initialisation).
pub(crate) fn inverse_digamma(y: f64) -> f64 {
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + 0.577_215_664_901_532_9)
    };
    for _ in 0..5 {
        let step = (digamma_unchecked(x) - y) / trigamma_unchecked(x);
        x -= step;
        if x <= 0.0 {
            x = 1e-12;
        }
    }
    x
}
