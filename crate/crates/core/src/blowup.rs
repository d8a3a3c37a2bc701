//! Blowup experiments for the planar counterexample: the truncated
//! `W^{1,3}` integral of the deterministic solution, the almost-sure
//! finiteness of its noisy analogue, and an end-to-end contrast of the two
//! through the transport solver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::fields::counterexample::{b1_prime, u01_prime, u02_prime};
use crate::fields::{BlowupSeed, CounterexampleField};
use crate::flow::{FlowOptions, Noise, Scheme};
use crate::grid::{Axis, Grid};
use crate::linalg;
use crate::quadrature::{integrate, integrate_log, QuadOptions};
use crate::stats::summarize;
use crate::transport::{self, GradientMeasure};

/// Fitted slope at or below which a truncated integral is declared divergent.
pub const DIVERGENCE_SLOPE: f64 = -0.4;

/// Fitted slope at or above which a truncated integral is declared bounded.
pub const BOUNDED_SLOPE: f64 = -0.05;

/// Largest tolerated fraction of Monte Carlo samples whose quadrature fails.
pub const MAX_SAMPLE_FAILURE_RATE: f64 = 1e-3;

/// Successive cutoffs are "stable" when their estimates differ by less than
/// this many confidence half-widths.
pub const STABILITY_CI_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Diverges,
    Bounded,
    Inconclusive,
}

pub fn verdict_from_slope(slope: f64) -> Verdict {
    if slope <= DIVERGENCE_SLOPE {
        Verdict::Diverges
    } else if slope >= BOUNDED_SLOPE {
        Verdict::Bounded
    } else {
        Verdict::Inconclusive
    }
}

/// Which `b1` enters the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftProfile {
    /// The singular profile, `b1'(x) = (3/4) x^{-1/4}` near `0+`.
    #[default]
    Counterexample,
    /// A globally Lipschitz surrogate with `b1' = 3/4` on `(0, 1]`.
    Lipschitz,
}

impl DriftProfile {
    fn b1_prime(self, x: f64) -> f64 {
        match self {
            DriftProfile::Counterexample => b1_prime(x),
            DriftProfile::Lipschitz => {
                if x > 0.0 && x <= 1.0 {
                    0.75
                } else {
                    b1_prime(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupCertificate {
    pub t: f64,
    pub radius: f64,
    pub profile: DriftProfile,
    /// Decreasing.
    pub cutoffs: Vec<f64>,
    /// `I(eps) = prefactor * y_factor * x_integral(eps)`.
    pub truncated_integrals: Vec<f64>,
    pub x_integrals: Vec<f64>,
    /// `int_0^R |u02'(y)|^3 (y / (1 + y^2))^3 dy`.
    pub y_factor: f64,
    /// `exp(-t/8) t^3`.
    pub prefactor: f64,
    /// `d log I / d log eps`.
    pub fitted_slope: f64,
    pub verdict: Verdict,
}

fn quad() -> QuadOptions {
    QuadOptions::default()
}

fn check_cutoffs(cutoffs: &[f64], upper: f64) -> Result<()> {
    if cutoffs.len() < 2 {
        return Err(Error::Argument("need at least two cutoffs".into()));
    }
    if cutoffs.iter().any(|e| !(*e > 0.0 && *e < upper)) {
        return Err(Error::Argument(format!("cutoffs must lie in (0, {upper})")));
    }
    if cutoffs.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Argument("cutoffs must be strictly decreasing".into()));
    }
    Ok(())
}

/// Integral of `f` over `[a, b]`, split at the profile kinks `1` and `2`,
/// with a logarithmic substitution on the part inside `(0, 1]`.
fn piecewise_integral<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64) -> Result<f64> {
    let mut total = 0.0;
    let first_end = b.min(1.0);
    if a < first_end {
        total += integrate_log(f, a, first_end, quad())?.value;
    }
    for (lo, hi) in [(1.0, 2.0), (2.0, f64::INFINITY)] {
        let (l, h) = (a.max(lo), b.min(hi));
        if l < h {
            total += integrate(f, l, h, quad())?.value;
        }
    }
    Ok(total)
}

/// `int_0^R |u02'(y)|^3 (y / (1 + y^2))^3 dy`.
pub fn y_factor(radius: f64) -> Result<f64> {
    let f = |y: f64| (u02_prime(y).abs() * y / (1.0 + y * y)).powi(3);
    let mut total = integrate(f, 0.0, radius.min(2.0), quad())?.value;
    if radius > 2.0 {
        total += integrate(f, 2.0, radius, quad())?.value;
    }
    Ok(total)
}

/// `int_eps^R |u01'(x)|^3 |b1'(x)|^3 dx`.
pub fn x_integral(eps: f64, radius: f64, profile: DriftProfile) -> Result<f64> {
    piecewise_integral(move |x| (u01_prime(x) * profile.b1_prime(x)).abs().powi(3), eps, radius)
}

pub fn deterministic_blowup(
    radius: f64,
    t: f64,
    cutoffs: &[f64],
    profile: DriftProfile,
) -> Result<BlowupCertificate> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Argument(format!("t must be positive, got {t}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Argument(format!("radius must be positive, got {radius}")));
    }
    check_cutoffs(cutoffs, radius.min(1.0))?;
    let prefactor = (-t / 8.0).exp() * t.powi(3);
    let yf = y_factor(radius)?;
    let x_integrals = cutoffs
        .iter()
        .map(|e| x_integral(*e, radius, profile))
        .collect::<Result<Vec<_>>>()?;
    let truncated: Vec<f64> = x_integrals.iter().map(|v| prefactor * yf * v).collect();
    let slope = linalg::fit_loglog_slope(cutoffs, &truncated)
        .ok_or_else(|| Error::Numeric("cannot fit a slope to the truncated integrals".into()))?;
    Ok(BlowupCertificate {
        t,
        radius,
        profile,
        cutoffs: cutoffs.to_vec(),
        truncated_integrals: truncated,
        x_integrals,
        y_factor: yf,
        prefactor,
        fitted_slope: slope,
        verdict: verdict_from_slope(slope),
    })
}

/// Quadrature value of `int_eps^1 x^{-3/2} dx` next to its antiderivative
/// value `2 (eps^{-1/2} - 1)`.
pub fn power_law_check(eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Argument(format!("eps must lie in (0, 1), got {eps}")));
    }
    let q = integrate_log(|x| x.powf(-1.5), eps, 1.0, quad())?.value;
    Ok((q, 2.0 * (eps.powf(-0.5) - 1.0)))
}

/// `J(eps) = int_eps^1 x^{-3/4} |x + b|^{-3/4} dx` for one value `b` of the
/// Brownian coordinate.
///
/// With `x = v^4` the integrand is `4 |v^4 + b|^{-3/4}` on `[eps^{1/4}, 1]`.
/// For `b < 0` it is singular at `v* = (-b)^{1/4}`; on either side
/// `v = v* -+ w^4` and the factorisation
/// `|v^4 - v*^4| = w^4 (v + v*) (v^2 + v*^2)` turn the piece into the smooth
/// integral of `16 ((v + v*) (v^2 + v*^2))^{-3/4}` in `w`.
pub fn j_integral(eps: f64, b: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) || !b.is_finite() {
        return Err(Error::Argument(format!("need eps in [0, 1) and finite b, got {eps}, {b}")));
    }
    let a = eps.powf(0.25);
    if b >= 0.0 {
        if b == 0.0 && a == 0.0 {
            return Err(Error::Domain("J(0) diverges at b = 0".into()));
        }
        return Ok(integrate(|v| 4.0 * (v.powi(4) + b).powf(-0.75), a, 1.0, quad())?.value);
    }
    let vs = (-b).powf(0.25);
    let smooth = |v: f64| 16.0 * ((v + vs) * (v * v + vs * vs)).powf(-0.75);
    let mut total = 0.0;
    if a < vs {
        // v = vs - w^4 over v in [a, min(vs, 1)]
        let w_lo = if vs > 1.0 { (vs - 1.0).powf(0.25) } else { 0.0 };
        let w_hi = (vs - a).powf(0.25);
        total += integrate(|w| smooth(vs - w.powi(4)), w_lo, w_hi, quad())?.value;
    }
    if vs < 1.0 {
        // v = vs + w^4 over v in [max(a, vs), 1]
        let w_lo = (a.max(vs) - vs).powf(0.25);
        let w_hi = (1.0 - vs).powf(0.25);
        total += integrate(|w| smooth(vs + w.powi(4)), w_lo, w_hi, quad())?.value;
    }
    Ok(total)
}

fn gaussian_density(z: f64, t: f64) -> f64 {
    (-z * z / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// `E |x + N(0, t)|^{-3/4} = 4 int_0^inf [phi_t(w^4 - x) + phi_t(w^4 + x)] dw`.
pub fn shifted_gaussian_moment(x: f64, t: f64) -> Result<f64> {
    let top = (x.abs() + 12.0 * t.sqrt()).powf(0.25);
    let f = |w: f64| {
        let q = w.powi(4);
        4.0 * (gaussian_density(q - x, t) + gaussian_density(q + x, t))
    };
    let peak = x.abs().powf(0.25).min(top);
    Ok(integrate(f, 0.0, peak, quad())?.value + integrate(f, peak, top, quad())?.value)
}

/// `E J(eps) = int_eps^1 x^{-3/4} E|x + B(t)|^{-3/4} dx` by nested
/// quadrature in `v = x^{1/4}`.
pub fn reference_value(eps: f64, t: f64) -> Result<f64> {
    let a = eps.powf(0.25);
    let inner_err = std::sync::Mutex::new(None);
    let outer = integrate(
        |v| match shifted_gaussian_moment(v.powi(4), t) {
            Ok(k) => 4.0 * k,
            Err(e) => {
                inner_err.lock().expect("not poisoned").get_or_insert(e);
                f64::NAN
            }
        },
        a,
        1.0,
        quad(),
    );
    if let Some(e) = inner_err.into_inner().expect("not poisoned") {
        return Err(e);
    }
    Ok(outer?.value)
}

/// Product bound on the reference value:
/// `int_0^1 x^{-3/4} e^{x^2 / 2t} dx * int |y|^{-3/4} (2 pi t)^{-1/2} e^{-y^2 / 4t} dy`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Majorant {
    pub space_factor: f64,
    pub gaussian_factor: f64,
    pub value: f64,
}

pub fn majorant(t: f64) -> Result<Majorant> {
    // x = v^4 and y = w^4 remove both endpoint singularities.
    let space = integrate(|v| 4.0 * (v.powi(8) / (2.0 * t)).exp(), 0.0, 1.0, quad())?.value;
    let top = (4.0 * t * 60.0).powf(0.125);
    let half = integrate(|w| 4.0 * (-w.powi(8) / (4.0 * t)).exp(), 0.0, top, quad())?.value;
    let gaussian = 2.0 * half / (2.0 * std::f64::consts::PI * t).sqrt();
    Ok(Majorant {
        space_factor: space,
        gaussian_factor: gaussian,
        value: space * gaussian,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticFiniteness {
    pub t: f64,
    pub cutoffs: Vec<f64>,
    pub samples: usize,
    pub failed_samples: usize,
    /// Monte Carlo means of `J(eps)` per cutoff, over shared samples.
    pub mc_estimates: Vec<f64>,
    pub ci_halfwidths: Vec<f64>,
    /// Nested-quadrature values of `E J(eps)` per cutoff.
    pub quadrature_reference: Vec<f64>,
    /// `E J(0)`.
    pub reference_untruncated: f64,
    pub majorant: Majorant,
    /// `|mc - reference| / ci` at the smallest cutoff.
    pub agreement_in_ci: f64,
    /// Largest `|mc(eps_{i+1}) - mc(eps_i)| / ci`.
    pub max_drift_in_ci: f64,
    pub verdict: Verdict,
}

pub fn stochastic_finiteness(t: f64, cutoffs: &[f64], n_samples: usize, seed: u64) -> Result<StochasticFiniteness> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Argument(format!("t must be positive, got {t}")));
    }
    if n_samples < 1000 {
        return Err(Error::Argument(format!("need at least 1000 samples, got {n_samples}")));
    }
    check_cutoffs(cutoffs, 1.0)?;
    let draws: Vec<Result<Vec<f64>>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|stream| {
            let b = BrownianPath::generate(seed, stream, 1, t, 1)?.value(1)[0];
            cutoffs.iter().map(|e| j_integral(*e, b)).collect()
        })
        .collect();
    let mut per_cutoff = vec![Vec::with_capacity(n_samples); cutoffs.len()];
    let mut failed = 0usize;
    for d in draws {
        match d {
            Ok(v) if v.iter().all(|x| x.is_finite()) => {
                for (i, x) in v.into_iter().enumerate() {
                    per_cutoff[i].push(x);
                }
            }
            Ok(_) | Err(Error::Quadrature { .. }) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed as f64 > MAX_SAMPLE_FAILURE_RATE * n_samples as f64 {
        return Err(Error::Numeric(format!(
            "{failed} of {n_samples} sample quadratures failed (limit {:.1}%)",
            100.0 * MAX_SAMPLE_FAILURE_RATE
        )));
    }
    let (mc, ci): (Vec<f64>, Vec<f64>) = per_cutoff
        .iter()
        .map(|v| {
            let (m, _, c) = summarize(v);
            (m, c)
        })
        .unzip();
    let reference = cutoffs
        .iter()
        .map(|e| reference_value(*e, t))
        .collect::<Result<Vec<_>>>()?;
    let last = cutoffs.len() - 1;
    let drift = (0..last)
        .map(|i| (mc[i + 1] - mc[i]).abs() / ci[i].max(ci[i + 1]))
        .fold(0.0f64, f64::max);
    Ok(StochasticFiniteness {
        t,
        cutoffs: cutoffs.to_vec(),
        samples: per_cutoff[0].len(),
        failed_samples: failed,
        agreement_in_ci: (mc[last] - reference[last]).abs() / ci[last],
        max_drift_in_ci: drift,
        verdict: if drift < STABILITY_CI_FACTOR { Verdict::Bounded } else { Verdict::Inconclusive },
        mc_estimates: mc,
        ci_halfwidths: ci,
        quadrature_reference: reference,
        reference_untruncated: reference_value(0.0, t)?,
        majorant: majorant(t)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub t: f64,
    /// Window `[-R, R]^2`.
    pub radius: f64,
    /// Innermost `|x|` node of the grid.
    pub eps_min: f64,
    pub points_per_decade: usize,
    pub y_points: usize,
    /// Strictly decreasing, each `>= eps_min`.
    pub cutoffs: Vec<f64>,
    /// Cutoffs at or below this value enter the plateau fit.
    pub plateau_below: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub n_steps: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            radius: 1.0,
            eps_min: 1e-6,
            points_per_decade: 4,
            y_points: 21,
            cutoffs: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            plateau_below: 1e-3,
            n_paths: 100,
            seed: 1,
            n_steps: 100,
            scheme: Scheme::EulerMaruyama,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::Argument(format!("t must be nonnegative, got {}", self.t)));
        }
        if !(self.eps_min > 0.0 && self.eps_min < self.radius) {
            return Err(Error::Argument("need 0 < eps_min < radius".into()));
        }
        if self.points_per_decade == 0 || self.y_points < 2 || self.n_paths == 0 || self.n_steps == 0 {
            return Err(Error::Argument(
                "points_per_decade, y_points, n_paths and n_steps must be positive".into(),
            ));
        }
        check_cutoffs(&self.cutoffs, self.radius)?;
        if self.cutoffs.iter().any(|e| *e < self.eps_min * (1.0 - 1e-9)) {
            return Err(Error::Argument("cutoffs must not be below eps_min".into()));
        }
        if self.cutoffs.iter().filter(|e| **e <= self.plateau_below).count() < 2 {
            return Err(Error::Argument("need at least two cutoffs at or below plateau_below".into()));
        }
        Ok(())
    }

    fn grid(&self) -> Result<Grid> {
        let decades = (self.radius / self.eps_min).log10();
        let n = (decades * self.points_per_decade as f64).ceil() as usize + 1;
        let pos = Axis::geometric(self.eps_min, self.radius, n)?;
        let mut nodes: Vec<f64> = pos.nodes().iter().rev().map(|v| -v).collect();
        nodes.extend_from_slice(pos.nodes());
        let x = Axis::from_nodes(nodes)?;
        let y = Axis::uniform(-self.radius, self.radius, self.y_points)?;
        Ok(Grid::new(vec![x, y]))
    }
}

/// Truncated `int |grad u|^3` per cutoff, under two gradient measures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastCurve {
    /// Shear product bound (see [`GradientMeasure::Shear`]).
    pub shear: Vec<f64>,
    /// Chain-rule gradient of the computed solution.
    pub chain_rule: Vec<f64>,
    pub masked_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastReport {
    pub t: f64,
    pub cutoffs: Vec<f64>,
    pub deterministic: ContrastCurve,
    /// Slope of the deterministic shear curve over all cutoffs.
    pub det_slope: f64,
    /// Slope of the deterministic chain-rule curve over all cutoffs.
    pub det_solution_slope: f64,
    pub stochastic: Vec<ContrastCurve>,
    /// Per-path shear-curve slope over the cutoffs at or below `plateau_below`.
    pub stochastic_slopes: Vec<f64>,
    /// Fraction of paths with `|slope| <= 0.1`.
    pub plateau_fraction: f64,
    pub verdict_deterministic: Verdict,
}

/// Plateau threshold on the per-path slope magnitude.
pub const PLATEAU_SLOPE: f64 = 0.1;

fn contrast_curve(sol: &transport::SolutionField, cfg: &ContrastConfig) -> Result<ContrastCurve> {
    let grid = &sol.grid;
    let y_weights = grid.axis(1).weights();
    let mut shear = Vec::with_capacity(cfg.cutoffs.len());
    let mut chain = Vec::with_capacity(cfg.cutoffs.len());
    let mut masked: f64 = 0.0;
    for eps in &cfg.cutoffs {
        let keep = eps * (1.0 - 1e-9);
        let xa = grid.axis(0);
        let neg = xa.weights_in(|x| x < 0.0 && -x >= keep);
        let pos = xa.weights_in(|x| x > 0.0 && x >= keep);
        let xw: Vec<f64> = neg.iter().zip(&pos).map(|(a, b)| a + b).collect();
        let w = grid.tensor_weights(&[xw, y_weights.clone()]);
        let s = transport::weighted_sobolev_norm(sol, &w, 3.0, GradientMeasure::Shear)?;
        let c = transport::weighted_sobolev_norm(sol, &w, 3.0, GradientMeasure::ChainRule)?;
        masked = masked.max(s.masked_fraction);
        shear.push(s.integral.expect("finite exponent"));
        chain.push(c.integral.expect("finite exponent"));
    }
    Ok(ContrastCurve {
        shear,
        chain_rule: chain,
        masked_fraction: masked,
    })
}

fn slope_or_nan(xs: &[f64], ys: &[f64]) -> f64 {
    if ys.iter().all(|v| *v > 0.0) {
        linalg::fit_loglog_slope(xs, ys).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    }
}

pub fn end_to_end_contrast(cfg: &ContrastConfig) -> Result<ContrastReport> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let b = CounterexampleField;
    let u0 = BlowupSeed;
    let horizon = if cfg.t > 0.0 { cfg.t } else { 1.0 };
    let opts = FlowOptions::with_scheme(cfg.scheme);
    let det_noise = Noise::deterministic(horizon, cfg.n_steps)?;
    let det = transport::solve(&b, &u0, cfg.t, &grid, &det_noise, &opts)?;
    let deterministic = contrast_curve(&det, cfg)?;
    let det_slope = slope_or_nan(&cfg.cutoffs, &deterministic.shear);
    let det_solution_slope = slope_or_nan(&cfg.cutoffs, &deterministic.chain_rule);

    let plateau_idx: Vec<usize> = (0..cfg.cutoffs.len())
        .filter(|i| cfg.cutoffs[*i] <= cfg.plateau_below)
        .collect();
    let plateau_eps: Vec<f64> = plateau_idx.iter().map(|i| cfg.cutoffs[*i]).collect();
    let mut stochastic = Vec::with_capacity(cfg.n_paths);
    let mut slopes = Vec::with_capacity(cfg.n_paths);
    for stream in 0..cfg.n_paths as u64 {
        let path = BrownianPath::generate(cfg.seed, stream, 2, horizon, cfg.n_steps)?;
        let sol = transport::solve(&b, &u0, cfg.t, &grid, &Noise::Path(&path), &opts)?;
        let curve = contrast_curve(&sol, cfg)?;
        let ys: Vec<f64> = plateau_idx.iter().map(|i| curve.shear[*i]).collect();
        slopes.push(if ys.iter().all(|v| *v == ys[0]) { 0.0 } else { slope_or_nan(&plateau_eps, &ys) });
        stochastic.push(curve);
    }
    let flat = slopes.iter().filter(|s| s.abs() <= PLATEAU_SLOPE).count();
    Ok(ContrastReport {
        t: cfg.t,
        cutoffs: cfg.cutoffs.clone(),
        verdict_deterministic: if det_slope.is_nan() { Verdict::Bounded } else { verdict_from_slope(det_slope) },
        deterministic,
        det_slope,
        det_solution_slope,
        stochastic,
        plateau_fraction: flat as f64 / cfg.n_paths as f64,
        stochastic_slopes: slopes,
    })
}
