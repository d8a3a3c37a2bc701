//! Monte Carlo estimates of flow-regularity quantities: pair moments,
//! Jacobian sup-moments, Hölder increments of the Jacobian and the tail of
//! the dyadic-increment supremum.
//!
//! Sample `i` is driven by Brownian stream `i` of the configured seed.
//! Samples are evaluated in parallel but collected in stream order and
//! reduced sequentially, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::fields::{DriftField, Regularity};
use crate::flow::{self, FlowOptions, Noise, Scheme};
use crate::linalg;

/// Largest tolerated fraction of excluded (divergent or non-finite) samples.
pub const MAX_EXCLUSION_RATE: f64 = 0.01;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Default cap on `samples x lattice points x time steps` for [`dyadic_tail`].
pub const DEFAULT_TAIL_BUDGET: f64 = 2e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    PairMoment,
    JacSupMoment,
    JacDiffMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McOptions {
    pub seed: u64,
    pub n_samples: usize,
    pub horizon: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            n_samples: 1000,
            horizon: 1.0,
            n_steps: 100,
            scheme: Scheme::EulerMaruyama,
        }
    }
}

impl McOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Argument("n_samples must be at least 2".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Argument(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(Error::Argument("n_steps must be positive".into()));
        }
        Ok(())
    }

    fn path(&self, stream: u64, dim: usize) -> Result<BrownianPath> {
        BrownianPath::generate(self.seed, stream, dim, self.horizon, self.n_steps)
    }

    fn flow(&self) -> FlowOptions {
        FlowOptions::with_scheme(self.scheme)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub quantity: Quantity,
    pub m: f64,
    /// Samples that entered the estimate.
    pub samples: usize,
    pub excluded: usize,
    pub value: f64,
    pub std_dev: f64,
    pub ci_halfwidth: f64,
    /// Estimate divided by the natural scale of the quantity, when defined
    /// (`|x - y|^m` for pair moments).
    pub ratio: Option<f64>,
}

/// Failures that mark a single sample as divergent rather than aborting.
fn is_sample_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Diverged { .. } | Error::Singular(_) | Error::Inversion(_) | Error::Saturation(_)
    )
}

/// Evaluate `f` on every stream in parallel; returns the finite values in
/// stream order and the number of excluded samples.
fn run_samples<F>(n: usize, f: F) -> Result<(Vec<f64>, usize)>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let raw: Vec<Result<f64>> = (0..n as u64).into_par_iter().map(&f).collect();
    let mut values = Vec::with_capacity(n);
    let mut excluded = 0;
    for r in raw {
        match r {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) => excluded += 1,
            Err(e) if is_sample_failure(&e) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    let rate = excluded as f64 / n as f64;
    if rate > MAX_EXCLUSION_RATE {
        return Err(Error::Numeric(format!(
            "{excluded} of {n} samples diverged ({:.2}% > {:.0}%)",
            100.0 * rate,
            100.0 * MAX_EXCLUSION_RATE
        )));
    }
    Ok((values, excluded))
}

/// Mean, sample standard deviation and the CLT half-width `1.96 sd / sqrt(n)`.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    // Shifted by the first value: exact when all samples coincide.
    let v0 = values[0];
    let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::NAN, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    (mean, sd, Z95 * sd / (n as f64).sqrt())
}

fn estimate(quantity: Quantity, m: f64, values: &[f64], excluded: usize, scale: Option<f64>) -> MomentEstimate {
    let (value, std_dev, ci) = summarize(values);
    MomentEstimate {
        quantity,
        m,
        samples: values.len(),
        excluded,
        value,
        std_dev,
        ci_halfwidth: ci,
        ratio: scale.filter(|s| *s > 0.0).map(|s| value / s),
    }
}

fn check_point(b: &dyn DriftField, x: &[f64]) -> Result<()> {
    if x.len() != b.dim() {
        return Err(Error::Argument(format!("point has {} coordinates, field has {}", x.len(), b.dim())));
    }
    Ok(())
}

/// `E sup_t |X(t, x) - X(t, y)|^m` over paired runs sharing each path.
pub fn pair_moment(b: &dyn DriftField, x: &[f64], y: &[f64], m: f64, opts: &McOptions) -> Result<MomentEstimate> {
    opts.validate()?;
    check_point(b, x)?;
    check_point(b, y)?;
    if !(m >= 2.0) {
        return Err(Error::Argument(format!("moment order must be at least 2, got {m}")));
    }
    let d = b.dim();
    let (values, excluded) = run_samples(opts.n_samples, |stream| {
        let path = opts.path(stream, d)?;
        let noise = Noise::Path(&path);
        let fo = opts.flow();
        let rx = flow::integrate_forward(b, x, &noise, &fo)?;
        let ry = flow::integrate_forward(b, y, &noise, &fo)?;
        // Same path for both: the Brownian part cancels in the offsets.
        let mut sup: f64 = 0.0;
        for k in 0..rx.len() {
            let (a, c) = (rx.offset(k), ry.offset(k));
            let dist = (0..d).map(|i| (a[i] - c[i]).powi(2)).sum::<f64>().sqrt();
            sup = sup.max(dist);
        }
        Ok(sup.powf(m))
    })?;
    let sep = (0..d).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
    Ok(estimate(Quantity::PairMoment, m, &values, excluded, Some(sep.powf(m))))
}

/// Max of the Frobenius norm of `grad X^{-1}(t, x)` over `points x times`
/// for one realisation of the noise.
pub fn jacobian_inverse_sup(
    b: &dyn DriftField,
    points: &[Vec<f64>],
    times: &[f64],
    noise: &Noise,
    opts: &FlowOptions,
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for t in times {
        for x in points {
            let jinv = flow::jacobian_inverse_flow(b, x, noise, *t, opts)?;
            sup = sup.max(linalg::frobenius(&jinv));
        }
    }
    Ok(sup)
}

/// `E (max over the space-time grid of ||grad X^{-1}||_F)^m`.
pub fn jacobian_sup_moment(
    b: &dyn DriftField,
    points: &[Vec<f64>],
    times: &[f64],
    m: f64,
    opts: &McOptions,
) -> Result<MomentEstimate> {
    opts.validate()?;
    if !(m >= 1.0) {
        return Err(Error::Argument(format!("moment order must be at least 1, got {m}")));
    }
    if points.is_empty() || times.is_empty() {
        return Err(Error::Argument("space-time grid is empty".into()));
    }
    for x in points {
        check_point(b, x)?;
    }
    let d = b.dim();
    let (values, excluded) = run_samples(opts.n_samples, |stream| {
        let path = opts.path(stream, d)?;
        Ok(jacobian_inverse_sup(b, points, times, &Noise::Path(&path), &opts.flow())?.powf(m))
    })?;
    Ok(estimate(Quantity::JacSupMoment, m, &values, excluded, None))
}

/// Hölder exponent `1 - d/p` attached to a field's declared regularity:
/// 1 for smooth fields, 1/4 for the singular family.
pub fn default_holder_exponent(regularity: Regularity) -> f64 {
    match regularity {
        Regularity::SmoothBounded => 1.0,
        Regularity::SobolevW1p | Regularity::Counterexample => 0.25,
    }
}

/// `E sup_t ||xi_t(x) - xi_t(y)||_F^m / |x - y|^{alpha m}`; zero when
/// `x = y`.
pub fn holder_jacobian_diff(
    b: &dyn DriftField,
    x: &[f64],
    y: &[f64],
    m: f64,
    alpha: f64,
    opts: &McOptions,
) -> Result<MomentEstimate> {
    opts.validate()?;
    check_point(b, x)?;
    check_point(b, y)?;
    if !(m >= 1.0) || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Argument(format!("need m >= 1 and alpha in (0, 1], got {m}, {alpha}")));
    }
    let d = b.dim();
    let dd = d * d;
    let sep = (0..d).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>().sqrt();
    let norm = if sep > 0.0 { sep.powf(alpha * m) } else { 1.0 };
    let (values, excluded) = run_samples(opts.n_samples, |stream| {
        if sep == 0.0 {
            return Ok(0.0);
        }
        let path = opts.path(stream, d)?;
        let noise = Noise::Path(&path);
        let fo = opts.flow().jacobian();
        let rx = flow::integrate_forward(b, x, &noise, &fo)?;
        let ry = flow::integrate_forward(b, y, &noise, &fo)?;
        let (jx, jy) = (rx.jacobians.expect("requested"), ry.jacobians.expect("requested"));
        let mut sup: f64 = 0.0;
        for k in 0..rx.times.len() {
            let diff: f64 = (0..dd).map(|i| (jx[k * dd + i] - jy[k * dd + i]).powi(2)).sum();
            sup = sup.max(diff.sqrt());
        }
        Ok(sup.powf(m) / norm)
    })?;
    Ok(estimate(Quantity::JacDiffMoment, m, &values, excluded, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailOptions {
    pub thresholds: Vec<f64>,
    #[serde(default = "default_levels")]
    pub n_max: u32,
    /// Hölder exponent; the level-`n` normaliser is `tau^n`, `tau = 2^{-alpha/2}`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_budget")]
    pub budget: f64,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self {
            thresholds: vec![1.0, 2.0, 4.0, 8.0],
            n_max: default_levels(),
            alpha: default_alpha(),
            budget: DEFAULT_TAIL_BUDGET,
        }
    }
}

fn default_levels() -> u32 {
    6
}

fn default_alpha() -> f64 {
    1.0
}

fn default_budget() -> f64 {
    DEFAULT_TAIL_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub thresholds: Vec<f64>,
    /// Empirical `P(sup >= K)` for each threshold.
    pub frequencies: Vec<f64>,
    /// `-d log(freq) / d log(K)` over the thresholds with non-zero frequency.
    pub fitted_exponent: Option<f64>,
    pub samples: usize,
    pub excluded: usize,
    pub n_max: u32,
    pub tau: f64,
    /// Per-sample suprema, in stream order.
    pub suprema: Vec<f64>,
}

/// Exceedance frequencies of `sup_{t, n, z, e} |xi_t(z 2^-n + e 2^-n) - xi_t(z 2^-n)| / tau^n`
/// over the dyadic lattices of the unit cube, `n = 0..=n_max`.
pub fn dyadic_tail(b: &dyn DriftField, tail: &TailOptions, opts: &McOptions) -> Result<TailReport> {
    opts.validate()?;
    let d = b.dim();
    if tail.thresholds.is_empty() || tail.thresholds.iter().any(|k| !(*k > 0.0)) {
        return Err(Error::Argument("thresholds must be a non-empty list of positive values".into()));
    }
    if tail.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument("thresholds must be strictly increasing".into()));
    }
    if !(tail.alpha > 0.0 && tail.alpha <= 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 1], got {}", tail.alpha)));
    }
    if tail.n_max > 20 {
        return Err(Error::Budget(format!("n_max = {} is far beyond any sample budget", tail.n_max)));
    }
    let side = (1usize << tail.n_max) + 1;
    let lattice = side.pow(d as u32);
    let work = opts.n_samples as f64 * lattice as f64 * opts.n_steps as f64;
    if work > tail.budget {
        return Err(Error::Budget(format!(
            "n_max = {} needs {work:e} step evaluations, budget is {:e}",
            tail.n_max, tail.budget
        )));
    }
    let tau = 2f64.powf(-tail.alpha / 2.0);
    let spacing = 1.0 / (side - 1) as f64;
    let points: Vec<Vec<f64>> = (0..lattice)
        .map(|flat| {
            let mut rest = flat;
            let mut p = vec![0.0; d];
            for a in (0..d).rev() {
                p[a] = (rest % side) as f64 * spacing;
                rest /= side;
            }
            p
        })
        .collect();
    let dd = d * d;
    let (suprema, excluded) = run_samples(opts.n_samples, |stream| {
        let path = opts.path(stream, d)?;
        let noise = Noise::Path(&path);
        let fo = opts.flow().jacobian();
        let jac: Vec<Vec<f64>> = points
            .iter()
            .map(|p| Ok(flow::integrate_forward(b, p, &noise, &fo)?.jacobians.expect("requested")))
            .collect::<Result<_>>()?;
        let n_times = opts.n_steps + 1;
        let mut sup: f64 = 0.0;
        for level in 0..=tail.n_max {
            let stride = 1usize << (tail.n_max - level);
            let norm = tau.powi(level as i32);
            for flat in 0..lattice {
                let mut rest = flat;
                let mut idx = vec![0usize; d];
                for a in (0..d).rev() {
                    idx[a] = rest % side;
                    rest /= side;
                }
                if idx.iter().any(|i| i % stride != 0) {
                    continue;
                }
                for a in 0..d {
                    if idx[a] + stride >= side {
                        continue;
                    }
                    let mut nb = 0;
                    for c in 0..d {
                        let i = if c == a { idx[c] + stride } else { idx[c] };
                        nb = nb * side + i;
                    }
                    for k in 0..n_times {
                        let diff: f64 = (0..dd)
                            .map(|i| (jac[flat][k * dd + i] - jac[nb][k * dd + i]).powi(2))
                            .sum();
                        sup = sup.max(diff.sqrt() / norm);
                    }
                }
            }
        }
        Ok(sup)
    })?;
    let n = suprema.len() as f64;
    let frequencies: Vec<f64> = tail
        .thresholds
        .iter()
        .map(|k| suprema.iter().filter(|s| **s >= *k).count() as f64 / n)
        .collect();
    let (lk, lf): (Vec<f64>, Vec<f64>) = tail
        .thresholds
        .iter()
        .zip(&frequencies)
        .filter(|(_, f)| **f > 0.0)
        .map(|(k, f)| (k.ln(), f.ln()))
        .unzip();
    let fitted_exponent = if lk.len() >= 2 { linalg::fit_slope(&lk, &lf).map(|s| -s) } else { None };
    Ok(TailReport {
        thresholds: tail.thresholds.clone(),
        frequencies,
        fitted_exponent,
        samples: suprema.len(),
        excluded,
        n_max: tail.n_max,
        tau,
        suprema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{GaussianBumpField, ZeroField};

    fn opts(n: usize) -> McOptions {
        McOptions {
            seed: 5,
            n_samples: n,
            horizon: 1.0,
            n_steps: 50,
            scheme: Scheme::EulerMaruyama,
        }
    }

    #[test]
    fn trivial_cases_are_exact() {
        let z = ZeroField::new(2);
        let b = GaussianBumpField::standard(2);
        let x = [0.1, 0.2];
        let y = [0.35, -0.1];
        let est = pair_moment(&z, &x, &y, 3.0, &opts(20)).unwrap();
        let sep = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt().powf(3.0);
        assert_eq!(est.value, sep);
        assert_eq!(est.ratio, Some(1.0));
        assert_eq!(pair_moment(&b, &x, &x, 2.0, &opts(20)).unwrap().value, 0.0);
        assert_eq!(holder_jacobian_diff(&b, &x, &x, 2.0, 1.0, &opts(20)).unwrap().value, 0.0);
        assert_eq!(holder_jacobian_diff(&z, &x, &y, 2.0, 1.0, &opts(20)).unwrap().value, 0.0);
        let pts = vec![x.to_vec(), y.to_vec()];
        let j = jacobian_sup_moment(&z, &pts, &[0.5, 1.0], 2.0, &opts(10)).unwrap();
        assert_eq!(j.value, 2f64.sqrt().powf(2.0));
        let j1 = jacobian_sup_moment(&ZeroField::new(1), &[vec![0.3]], &[1.0], 4.0, &opts(10)).unwrap();
        assert_eq!(j1.value, 1.0);
    }

    #[test]
    fn zero_field_tail_is_empty() {
        let tail = TailOptions {
            thresholds: vec![0.5, 1.0],
            n_max: 3,
            alpha: 1.0,
            budget: DEFAULT_TAIL_BUDGET,
        };
        let r = dyadic_tail(&ZeroField::new(2), &tail, &opts(10)).unwrap();
        assert!(r.suprema.iter().all(|s| *s == 0.0));
        assert_eq!(r.frequencies, vec![0.0, 0.0]);
        assert_eq!(r.fitted_exponent, None);
    }

    #[test]
    fn tail_budget_is_enforced() {
        let tail = TailOptions {
            thresholds: vec![1.0],
            n_max: 10,
            alpha: 1.0,
            budget: 1e6,
        };
        assert!(matches!(
            dyadic_tail(&ZeroField::new(2), &tail, &opts(100)),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn tail_frequencies_are_monotone() {
        let b = GaussianBumpField::new(vec![4.0], vec![0.5], 0.2);
        let tail = TailOptions {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            n_max: 4,
            alpha: 1.0,
            budget: DEFAULT_TAIL_BUDGET,
        };
        let r = dyadic_tail(&b, &tail, &opts(200)).unwrap();
        assert!(r.frequencies.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.frequencies);
    }

    #[test]
    fn estimates_are_deterministic() {
        let b = GaussianBumpField::standard(2);
        let a = pair_moment(&b, &[0.0, 0.0], &[0.1, 0.0], 2.0, &opts(40)).unwrap();
        let c = pair_moment(&b, &[0.0, 0.0], &[0.1, 0.0], 2.0, &opts(40)).unwrap();
        assert_eq!(a.value.to_bits(), c.value.to_bits());
        assert_eq!(a.ci_halfwidth.to_bits(), c.ci_halfwidth.to_bits());
    }

    #[test]
    fn validation() {
        let b = ZeroField::new(1);
        assert!(pair_moment(&b, &[0.0], &[1.0], 1.0, &opts(10)).is_err());
        assert!(pair_moment(&b, &[0.0, 1.0], &[1.0], 2.0, &opts(10)).is_err());
        assert!(pair_moment(&b, &[0.0], &[1.0], 2.0, &opts(1)).is_err());
    }

    #[test]
    fn summary_statistics() {
        let (m, sd, ci) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((ci - 1.96 * sd / 2.0).abs() < 1e-15);
    }
}
