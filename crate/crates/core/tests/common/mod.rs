//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the crate's own integrators or quadrature.

#![allow(dead_code)]

use statrs::function::gamma::gamma;

/// Classical RK4 with step doubling for a scalar autonomous ODE
/// `y' = f(y)`, integrated from 0 to `t` with local error control `tol`.
pub fn rk4_adaptive<F: Fn(f64) -> f64>(f: F, y0: f64, t: f64, tol: f64) -> f64 {
    let step = |y: f64, h: f64| {
        let k1 = f(y);
        let k2 = f(y + 0.5 * h * k1);
        let k3 = f(y + 0.5 * h * k2);
        let k4 = f(y + h * k3);
        y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    };
    let mut y = y0;
    let mut s = 0.0;
    let mut h = t / 64.0;
    while s < t {
        h = h.min(t - s);
        let full = step(y, h);
        let half = step(step(y, 0.5 * h), 0.5 * h);
        let err = (half - full).abs() / 15.0;
        if err <= tol * (1.0 + half.abs()) || h < 1e-12 {
            s += h;
            y = half + (half - full) / 15.0;
            if err < 0.1 * tol {
                h *= 2.0;
            }
        } else {
            h *= 0.5;
        }
    }
    y
}

/// Kummer's confluent hypergeometric function by its power series; adequate
/// for moderate `|z|`.
pub fn hyp1f1(a: f64, b: f64, z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..500 {
        let n = n as f64;
        term *= (a + n) / (b + n) * z / (n + 1.0);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `E |N(mu, sigma^2)|^nu` for `nu > -1`:
/// `sigma^nu 2^{nu/2} Gamma((1 + nu)/2) / sqrt(pi) 1F1(-nu/2; 1/2; -mu^2 / (2 sigma^2))`.
pub fn gaussian_abs_moment(mu: f64, sigma: f64, nu: f64) -> f64 {
    sigma.powf(nu) * 2f64.powf(nu / 2.0) * gamma((1.0 + nu) / 2.0) / std::f64::consts::PI.sqrt()
        * hyp1f1(-nu / 2.0, 0.5, -mu * mu / (2.0 * sigma * sigma))
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
