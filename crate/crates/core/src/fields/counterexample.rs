//! Closed-form ingredients of the planar counterexample drift
//! `b(x, y) = (0, b1(x) b2(y))`.
//!
//! Along the characteristics `x` is frozen and `dY/dt = b1(x) b2(Y)`, which
//! integrates to `g(Y(t)) = g(y) exp(2 b1(x) t)` with `g(y) = y^2 exp(y^2)`.
//!
//! Jacobians here use the standard layout `J[i][j] = d F_i / d x_j`, so the
//! mixed derivative `dY/dx` sits in row 1, column 0.
//!
//! Note: the ratio `g(y) / g'(y)` equals `y / (2 (1 + y^2))`. The value
//! `y / (2 (1 + y))` that circulates alongside this example is not what the
//! derivative gives; both are bounded below away from `y = 0`, so nothing
//! qualitative depends on it, but the code uses the derived value.

use crate::error::{Error, Result};

/// `x^{3/4}` on `(0, 1)`, `x^{-3/4}` on `[1, inf)`, zero otherwise.
pub fn b1(x: f64) -> f64 {
    if x > 0.0 && x < 1.0 {
        x.powf(0.75)
    } else if x >= 1.0 {
        x.powf(-0.75)
    } else {
        0.0
    }
}

/// Derivative of [`b1`]. At the kinks `x = 0` and `x = 1` the value of the
/// left-hand piece is returned (`0` and `3/4`).
pub fn b1_prime(x: f64) -> f64 {
    if x > 0.0 && x <= 1.0 {
        0.75 * x.powf(-0.25)
    } else if x > 1.0 {
        -0.75 * x.powf(-1.75)
    } else {
        0.0
    }
}

pub fn b2(y: f64) -> f64 {
    if y >= 0.0 {
        y / (1.0 + y * y)
    } else {
        0.0
    }
}

pub fn b2_prime(y: f64) -> f64 {
    if y >= 0.0 {
        let q = 1.0 + y * y;
        (1.0 - y * y) / (q * q)
    } else {
        0.0
    }
}

fn check_nonneg(v: f64, what: &str) -> Result<()> {
    if v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} requires a nonnegative argument, got {v}")))
    }
}

/// `g(y) = y^2 exp(y^2)` for `y >= 0`.
pub fn g(y: f64) -> Result<f64> {
    check_nonneg(y, "g")?;
    Ok(y * y * (y * y).exp())
}

/// `g'(y) = 2 y exp(y^2) (1 + y^2)`.
pub fn g_prime(y: f64) -> Result<f64> {
    check_nonneg(y, "g'")?;
    Ok(2.0 * y * (y * y).exp() * (1.0 + y * y))
}

/// `g(y) / g'(y) = y / (2 (1 + y^2))`, extended by continuity to `y = 0`.
pub fn g_ratio(y: f64) -> Result<f64> {
    check_nonneg(y, "g/g'")?;
    Ok(y / (2.0 * (1.0 + y * y)))
}

/// Monotone inverse of [`g`].
///
/// Works on `ln g(y) = y^2 + 2 ln y`, which stays well conditioned across
/// the whole range: the root is bracketed by doubling/halving from `1`,
/// narrowed by bisection and polished by safeguarded Newton steps.
pub fn g_inv(v: f64) -> Result<f64> {
    check_nonneg(v, "g^-1")?;
    if v == 0.0 {
        return Ok(0.0);
    }
    if v.is_infinite() {
        return Err(Error::Saturation("g^-1 of an infinite value".into()));
    }
    let target = v.ln();
    let phi = |y: f64| y * y + 2.0 * y.ln() - target;
    let mut lo = 1.0_f64;
    let mut hi = 1.0_f64;
    if phi(1.0) < 0.0 {
        while phi(hi) < 0.0 {
            lo = hi;
            hi *= 2.0;
        }
    } else {
        while phi(lo) > 0.0 {
            hi = lo;
            lo *= 0.5;
        }
    }
    for _ in 0..20 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut y = 0.5 * (lo + hi);
    for _ in 0..60 {
        let f = phi(y);
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let step = f / (2.0 * y + 2.0 / y);
        let mut next = y - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - y).abs() <= 4.0 * f64::EPSILON * y;
        y = next;
        if done {
            break;
        }
    }
    Ok(y)
}

/// Time-`t` characteristic map `(x, y) -> (x, g^-1(g(y) exp(2 b1(x) t)))`.
pub fn analytic_flow(t: f64, x: f64, y: f64) -> Result<[f64; 2]> {
    check_nonneg(t, "analytic_flow time")?;
    check_nonneg(y, "analytic_flow y")?;
    if t == 0.0 || b1(x) == 0.0 {
        return Ok([x, y]);
    }
    let arg = g(y)? * (2.0 * b1(x) * t).exp();
    if !arg.is_finite() {
        return Err(Error::Saturation(format!(
            "g(y) exp(2 b1(x) t) overflows at t={t}, x={x}, y={y}"
        )));
    }
    Ok([x, g_inv(arg)?])
}

/// Preimage under the time-`t` map: `(x, g^-1(g(y) exp(-2 b1(x) t)))`.
pub fn analytic_inverse_flow(t: f64, x: f64, y: f64) -> Result<[f64; 2]> {
    check_nonneg(t, "analytic_inverse_flow time")?;
    check_nonneg(y, "analytic_inverse_flow y")?;
    if t == 0.0 || b1(x) == 0.0 {
        return Ok([x, y]);
    }
    let arg = g(y)? * (-2.0 * b1(x) * t).exp();
    Ok([x, g_inv(arg)?])
}

/// `g'(to) / g'(from)` computed without forming the exponentials separately.
fn g_prime_quotient(to: f64, from: f64) -> f64 {
    (to / from) * (to * to - from * from).exp() * (1.0 + to * to) / (1.0 + from * from)
}

/// Jacobian of the time-`t` map at the starting point `(x, y)`, row-major.
pub fn analytic_jacobian(t: f64, x: f64, y: f64) -> Result<[f64; 4]> {
    if y <= 0.0 {
        return Err(Error::Singular(format!("g'(y) vanishes at y = {y}")));
    }
    let [_, big_y] = analytic_flow(t, x, y)?;
    let e = (2.0 * b1(x) * t).exp();
    // dY/dy = g'(y) e / g'(Y); dY/dx = g(y) e 2 b1'(x) t / g'(Y)
    let dy_dy = e / g_prime_quotient(big_y, y);
    let dy_dx = g_ratio(y)? * 2.0 * b1_prime(x) * t * dy_dy;
    Ok([1.0, 0.0, dy_dx, dy_dy])
}

/// Inverse of [`analytic_jacobian`] at the same starting point `(x, y)`:
/// `[[1, 0], [-(g(y)/g'(y)) 2 b1'(x) t, g'(Y) exp(-2 b1(x) t) / g'(y)]]`.
pub fn analytic_jacobian_inverse(t: f64, x: f64, y: f64) -> Result<[f64; 4]> {
    if y <= 0.0 {
        return Err(Error::Singular(format!("g'(y) vanishes at y = {y}")));
    }
    let [_, big_y] = analytic_flow(t, x, y)?;
    let off = -g_ratio(y)? * 2.0 * b1_prime(x) * t;
    let diag = g_prime_quotient(big_y, y) * (-2.0 * b1(x) * t).exp();
    Ok([1.0, 0.0, off, diag])
}

/// Profile `u01` of the product initial datum: `(4/3) x^{3/4}` on `(0, 1]`
/// (so `u01'(x) = x^{-1/4}`), a cubic Hermite blend down to zero with zero
/// slope on `[1, 2]`, and zero elsewhere.
pub fn u01(x: f64) -> f64 {
    if x > 0.0 && x <= 1.0 {
        4.0 / 3.0 * x.powf(0.75)
    } else if x > 1.0 && x < 2.0 {
        let s = x - 1.0;
        4.0 / 3.0 * (2.0 * s * s * s - 3.0 * s * s + 1.0) + (s * s * s - 2.0 * s * s + s)
    } else {
        0.0
    }
}

pub fn u01_prime(x: f64) -> f64 {
    if x > 0.0 && x <= 1.0 {
        x.powf(-0.25)
    } else if x > 1.0 && x < 2.0 {
        let s = x - 1.0;
        4.0 / 3.0 * (6.0 * s * s - 6.0 * s) + (3.0 * s * s - 4.0 * s + 1.0)
    } else {
        0.0
    }
}

/// Profile `u02(y) = (1 - y^2/4)^2` on `|y| < 2`, zero outside (C^1).
pub fn u02(y: f64) -> f64 {
    if y.abs() < 2.0 {
        let q = 1.0 - 0.25 * y * y;
        q * q
    } else {
        0.0
    }
}

pub fn u02_prime(y: f64) -> f64 {
    if y.abs() < 2.0 {
        -y * (1.0 - 0.25 * y * y)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b1_branches() {
        assert!((b1(0.0625) - 0.125).abs() < 1e-15);
        assert!((b1(16.0) - 0.125).abs() < 1e-15);
        assert_eq!(b1(-1.0), 0.0);
        assert_eq!(b1(1.0), 1.0);
        assert_eq!(b1(0.0), 0.0);
    }

    #[test]
    fn b2_branches() {
        assert_eq!(b2(1.0), 0.5);
        assert_eq!(b2(-3.0), 0.0);
        assert_eq!(b2_prime(0.0), 1.0);
        assert_eq!(b2_prime(1.0), 0.0);
        assert_eq!(b2_prime(-2.0), 0.0);
    }

    #[test]
    fn g_values() {
        assert!((g(1.0).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(g(0.0).unwrap(), 0.0);
        assert_eq!(g_inv(0.0).unwrap(), 0.0);
        assert!((g_inv(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(g(-1.0), Err(Error::Domain(_))));
        assert!(matches!(g_inv(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn g_inv_residual_over_range() {
        for i in 0..=2000 {
            let y = 10.0 * i as f64 / 2000.0;
            let v = g(y).unwrap();
            let back = g_inv(v).unwrap();
            assert!((g(back).unwrap() - v).abs() <= 1e-12 * v.max(1.0), "y={y}");
            assert!((back - y).abs() <= 1e-12 * y.max(1.0), "y={y} back={back}");
        }
        for &v in &[1e-300, 1e-30, 1e-8, 0.5, 1e5, 1e100, 1e300] {
            let y = g_inv(v).unwrap();
            assert!((g(y).unwrap() - v).abs() <= 1e-12 * v.max(1.0), "v={v}");
        }
    }

    #[test]
    fn g_ratio_is_derived_value() {
        for &y in &[0.1, 0.5, 1.0, 2.0, 3.5] {
            let r = g(y).unwrap() / g_prime(y).unwrap();
            assert!((r - g_ratio(y).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_flow_examples() {
        assert_eq!(analytic_flow(0.0, 3.0, 2.0).unwrap(), [3.0, 2.0]);
        let frozen = analytic_flow(5.0, -1.0, 1.0).unwrap();
        assert_eq!(frozen[0], -1.0);
        assert!((frozen[1] - 1.0).abs() < 1e-15);
        let p = analytic_flow(1.0, 1.0, 1.0).unwrap();
        assert!((g(p[1]).unwrap() - 3.0_f64.exp()).abs() < 1e-12 * 3.0_f64.exp());
    }

    #[test]
    fn analytic_flow_saturates() {
        assert!(matches!(analytic_flow(1e4, 0.5, 3.0), Err(Error::Saturation(_))));
    }

    #[test]
    fn inverse_flow_undoes_forward() {
        let p = analytic_flow(2.0, 0.3, 1.2).unwrap();
        let q = analytic_inverse_flow(2.0, p[0], p[1]).unwrap();
        assert!((q[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn jacobian_inverse_examples() {
        let m = analytic_jacobian_inverse(0.0, 0.7, 1.0).unwrap();
        assert_eq!(m, [1.0, 0.0, 0.0, 1.0]);
        let m = analytic_jacobian_inverse(1.0, -1.0, 1.0).unwrap();
        assert_eq!(m[2], 0.0);
        assert!((m[3] - 1.0).abs() < 1e-14);
        let m = analytic_jacobian_inverse(1.0, 0.5, 1.0).unwrap();
        let expected = -0.25 * 2.0 * 0.75 * 0.5_f64.powf(-0.25);
        assert!((m[2] - expected).abs() < 1e-14);
        assert!(matches!(analytic_jacobian_inverse(1.0, 0.5, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn jacobian_and_inverse_multiply_to_identity() {
        let j = analytic_jacobian(1.5, 0.4, 0.8).unwrap();
        let k = analytic_jacobian_inverse(1.5, 0.4, 0.8).unwrap();
        let mut p = [0.0; 4];
        crate::linalg::matmul(2, &j, &k, &mut p);
        for (v, e) in p.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn datum_profile_is_c1() {
        let h = 1e-7;
        for &x in &[1.0, 2.0] {
            assert!((u01(x - h) - u01(x + h)).abs() < 1e-6);
            assert!((u01_prime(x - h) - u01_prime(x + h)).abs() < 1e-5);
        }
        assert!((u01_prime(0.5) - 0.5_f64.powf(-0.25)).abs() < 1e-15);
        assert!((u02(2.0 - h)).abs() < 1e-12);
        assert!((u02_prime(2.0 - h)).abs() < 1e-6);
    }
}
