//! Transport solutions `u(t, x) = u0(X^{-1}(t, x))` and their diagnostics.
//!
//! Every grid point is independent: the preimage and the inverse Jacobian
//! come from the flow engine and the gradient from the chain rule
//! `grad u = grad u0(X^{-1}) . grad X^{-1}`. Trajectories that diverge or
//! whose Jacobian is numerically singular are masked rather than
//! extrapolated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::PathId;
use crate::error::{Error, Result};
use crate::fields::{BumpTestFunction, DriftField, InitialDatum};
use crate::flow::{self, FlowOptions, InversePoint, Noise};
use crate::grid::Grid;
use crate::linalg;
use crate::report::{Cell, Table};

/// Fraction of masked cells above which norms carry a warning.
pub const MASK_WARNING_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub time: f64,
    pub grid: Grid,
    pub values: Vec<f64>,
    /// `len x dim`, row-major.
    pub gradients: Vec<f64>,
    /// `true` where the characteristic was computed successfully.
    pub valid: Vec<bool>,
    /// `|grad u0|` at the preimage.
    pub datum_gradient_norm: Vec<f64>,
    /// Spectral norm of `grad X^{-1}`.
    pub inverse_jacobian_norm: Vec<f64>,
    /// Frobenius norm of the off-diagonal part of `grad X^{-1}`.
    pub inverse_jacobian_shear: Vec<f64>,
    pub near_singular: Vec<bool>,
    pub realization: Option<PathId>,
}

impl SolutionField {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn gradient(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.gradients[i * d..(i + 1) * d]
    }

    pub fn masked_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// One row per grid point: coordinates, value, gradient, mask flag.
    pub fn to_table(&self, name: &str) -> Table {
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        header.extend((0..d).map(|i| format!("grad{i}")));
        header.push("masked".into());
        let mut t = Table::with_header(name, header);
        for i in 0..self.len() {
            let mut row: Vec<Cell> = self.grid.point(i).into_iter().map(Cell::from).collect();
            row.push(self.values[i].into());
            row.extend(self.gradient(i).iter().map(|g| Cell::from(*g)));
            row.push((!self.valid[i]).into());
            t.push(row);
        }
        t
    }
}

fn check_grid(b: &dyn DriftField, grid: &Grid, opts: &FlowOptions) -> Result<()> {
    if grid.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "grid dimension {} does not match field dimension {}",
            grid.dim(),
            b.dim()
        )));
    }
    if grid.lower().iter().chain(grid.upper().iter()).any(|v| v.abs() > opts.bound) {
        return Err(Error::Argument(format!(
            "grid leaves the bounding box [-{0}, {0}]^d",
            opts.bound
        )));
    }
    Ok(())
}

/// Preimage and inverse Jacobian for every grid point; recoverable
/// per-point failures become `None`.
fn characteristics(
    b: &dyn DriftField,
    grid: &Grid,
    noise: &Noise,
    t: f64,
    opts: &FlowOptions,
) -> Result<Vec<Option<InversePoint>>> {
    check_grid(b, grid, opts)?;
    noise.index_of(t)?;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.point(i);
            match flow::inverse_with_jacobian(b, &x, noise, t, opts) {
                Ok(p) => Ok(Some(p)),
                Err(Error::Diverged { .. }) | Err(Error::Singular(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn off_diagonal_norm(d: usize, a: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += a[i * d + j] * a[i * d + j];
            }
        }
    }
    s.sqrt()
}

pub fn solve(
    b: &dyn DriftField,
    u0: &dyn InitialDatum,
    t: f64,
    grid: &Grid,
    noise: &Noise,
    opts: &FlowOptions,
) -> Result<SolutionField> {
    let d = b.dim();
    if u0.dim() != d {
        return Err(Error::Argument("initial datum and field dimensions differ".into()));
    }
    let chars = characteristics(b, grid, noise, t, opts)?;
    let n = grid.len();
    let mut values = vec![f64::NAN; n];
    let mut gradients = vec![f64::NAN; n * d];
    let mut valid = vec![false; n];
    let mut datum_gradient_norm = vec![f64::NAN; n];
    let mut inverse_jacobian_norm = vec![f64::NAN; n];
    let mut inverse_jacobian_shear = vec![f64::NAN; n];
    let mut near_singular = vec![false; n];
    let mut g0 = vec![0.0; d];
    for (i, c) in chars.iter().enumerate() {
        let Some(p) = c else { continue };
        values[i] = u0.eval(&p.preimage);
        u0.gradient(&p.preimage, &mut g0);
        linalg::vecmat(d, &g0, &p.jacobian_inverse, &mut gradients[i * d..(i + 1) * d]);
        datum_gradient_norm[i] = linalg::norm(&g0);
        inverse_jacobian_norm[i] = linalg::spectral_norm(d, &p.jacobian_inverse);
        inverse_jacobian_shear[i] = off_diagonal_norm(d, &p.jacobian_inverse);
        near_singular[i] = p.near_singular;
        valid[i] = true;
    }
    Ok(SolutionField {
        time: t,
        grid: grid.clone(),
        values,
        gradients,
        valid,
        datum_gradient_norm,
        inverse_jacobian_norm,
        inverse_jacobian_shear,
        near_singular,
        realization: noise.path_ref(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakFormReport {
    pub test_function_id: String,
    pub residual: f64,
    pub quadrature_step: f64,
    pub time_step: f64,
    pub points: usize,
}

/// Defect of the weak formulation tested against `phi`.
///
/// All spatial integrals are pulled back to the initial configuration:
/// with `J = det grad X`, `int psi(x) u(s, x) dx = int psi(X(s, z)) u0(z)
/// J(s, z) dz`, so a single forward run per quadrature node `z` supplies
/// every time level. The drift term uses the trapezoid rule and the
/// stochastic term the midpoint (Stratonovich) rule on the flow grid.
pub fn weak_form_residual(
    b: &dyn DriftField,
    u0: &dyn InitialDatum,
    phi: &BumpTestFunction,
    t: f64,
    noise: &Noise,
    z_grid: &Grid,
    opts: &FlowOptions,
) -> Result<WeakFormReport> {
    let d = b.dim();
    if phi.dim() != d || u0.dim() != d {
        return Err(Error::Argument("test function, datum and field dimensions differ".into()));
    }
    check_grid(b, z_grid, opts)?;
    let k_end = noise.index_of(t)?;
    let h = noise.step();
    let path = noise.path();
    let weights = z_grid.weights();
    let jac_opts = opts.jacobian();

    let per_point: Vec<Result<(f64, bool)>> = (0..z_grid.len())
        .into_par_iter()
        .map(|i| {
            let z = z_grid.point(i);
            let boundary = z_grid.is_boundary(i);
            let mut support_violation = false;
            let mut drift_integral = 0.0;
            let mut noise_integral = 0.0;
            let mut prev_f = 0.0;
            let mut prev_g = vec![0.0; d];
            let mut g = vec![0.0; d];
            let mut bx = vec![0.0; d];
            let mut first = 0.0;
            let mut last = 0.0;
            let mut db = vec![0.0; d];
            flow::integrate_between(b, &z, noise, 0, k_end, &jac_opts).map(|r| {
                for k in 0..r.len() {
                    let x = r.state(k);
                    let jac = linalg::determinant(d, r.jacobian(k).expect("jacobian requested"));
                    let tk = noise.time(k);
                    let phi_x = phi.eval(x);
                    if boundary && phi_x != 0.0 {
                        support_violation = true;
                    }
                    phi.gradient(x, &mut g);
                    b.eval(tk, x, &mut bx);
                    let f = (b.divergence(tk, x) * phi_x + bx.iter().zip(&g).map(|(a, c)| a * c).sum::<f64>()) * jac;
                    for gi in g.iter_mut() {
                        *gi *= jac;
                    }
                    if k == 0 {
                        first = phi_x * jac;
                    } else {
                        drift_integral += 0.5 * h * (prev_f + f);
                        if let Some(p) = path {
                            p.increment(k - 1, &mut db);
                            noise_integral +=
                                (0..d).map(|j| 0.5 * (prev_g[j] + g[j]) * db[j]).sum::<f64>();
                        }
                    }
                    if k + 1 == r.len() {
                        last = phi_x * jac;
                    }
                    prev_f = f;
                    prev_g.copy_from_slice(&g);
                }
                (
                    weights[i] * u0.eval(&z) * (last - first - drift_integral - noise_integral),
                    support_violation,
                )
            })
        })
        .collect();

    let mut residual = 0.0;
    for r in per_point {
        let (v, violation) = r?;
        if violation {
            return Err(Error::Argument(format!(
                "support of {} reaches the boundary of the quadrature box",
                phi.id()
            )));
        }
        residual += v;
    }
    Ok(WeakFormReport {
        test_function_id: phi.id(),
        residual,
        quadrature_step: z_grid.min_spacing(),
        time_step: h,
        points: z_grid.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommutatorReport {
    pub epsilon: f64,
    pub exponent: f64,
    pub value: f64,
    pub evaluated_points: usize,
    pub skipped_points: usize,
}

fn mollifier_profile(s2: f64) -> f64 {
    if s2 < 1.0 {
        (-1.0 / (1.0 - s2)).exp()
    } else {
        0.0
    }
}

/// `|| b . grad(u * rho_eps) - (b . grad u) * rho_eps ||_{L^r}` over the box
/// `[lower, upper]`, using the sampled chain-rule gradients of `u`.
///
/// Pointwise the commutator equals `sum_j w_j (b(x) - b(x - y_j)) .
/// grad u(x - y_j)`, where `y_j` runs over grid offsets inside the ball of
/// radius `eps` and `w_j` are the normalised mollifier weights.
pub fn commutator_norm(
    b: &dyn DriftField,
    u: &SolutionField,
    epsilon: f64,
    r: f64,
    lower: &[f64],
    upper: &[f64],
) -> Result<CommutatorReport> {
    let grid = &u.grid;
    let d = grid.dim();
    if b.dim() != d || lower.len() != d || upper.len() != d {
        return Err(Error::Argument("commutator box dimension mismatch".into()));
    }
    if !(r >= 1.0) {
        return Err(Error::Argument(format!("exponent must be >= 1, got {r}")));
    }
    if grid.axes().iter().any(|a| !a.is_uniform()) {
        return Err(Error::Argument("commutator needs a uniform grid".into()));
    }
    let spacing: Vec<f64> = grid.axes().iter().map(|a| a.max_spacing()).collect();
    let coarsest = spacing.iter().cloned().fold(0.0, f64::max);
    if epsilon < 2.0 * coarsest {
        return Err(Error::Resolution(format!(
            "mollifier radius {epsilon} is below twice the grid spacing {coarsest}"
        )));
    }
    let glo = grid.lower();
    let ghi = grid.upper();
    for a in 0..d {
        if lower[a] - epsilon < glo[a] - 1e-12 || upper[a] + epsilon > ghi[a] + 1e-12 || lower[a] >= upper[a] {
            return Err(Error::Argument(format!(
                "evaluation box plus the mollifier radius {epsilon} must lie inside the grid"
            )));
        }
    }

    // stencil of integer offsets with their normalised weights
    let reach: Vec<i64> = spacing.iter().map(|h| (epsilon / h).floor() as i64).collect();
    let mut stencil: Vec<(Vec<i64>, f64)> = Vec::new();
    let mut idx: Vec<i64> = reach.iter().map(|r| -r).collect();
    'outer: loop {
        let s2: f64 = (0..d).map(|a| (idx[a] as f64 * spacing[a] / epsilon).powi(2)).sum();
        let w = mollifier_profile(s2);
        if w > 0.0 {
            stencil.push((idx.clone(), w));
        }
        // odometer increment over the offset box
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] <= reach[a] {
                continue 'outer;
            }
            idx[a] = -reach[a];
        }
        break;
    }
    let total: f64 = stencil.iter().map(|(_, w)| w).sum();
    for s in stencil.iter_mut() {
        s.1 /= total;
    }

    let weights = grid.weights_in_box(lower, upper);
    let t = u.time;
    let contributions: Vec<Option<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if weights[i] == 0.0 {
                return Some(0.0);
            }
            let center = grid.multi_index(i);
            let x = grid.point(i);
            let mut bx = vec![0.0; d];
            let mut by = vec![0.0; d];
            b.eval(t, &x, &mut bx);
            let mut acc = 0.0;
            let mut j_idx = vec![0usize; d];
            for (off, w) in &stencil {
                for a in 0..d {
                    j_idx[a] = (center[a] as i64 - off[a]) as usize;
                }
                let j = grid.flat_index(&j_idx);
                if !u.valid[j] {
                    return None;
                }
                let y = grid.point(j);
                b.eval(t, &y, &mut by);
                let gu = u.gradient(j);
                acc += w * (0..d).map(|a| (bx[a] - by[a]) * gu[a]).sum::<f64>();
            }
            Some(weights[i] * acc.abs().powf(r))
        })
        .collect();
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (i, c) in contributions.iter().enumerate() {
        if weights[i] == 0.0 {
            continue;
        }
        match c {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(CommutatorReport {
        epsilon,
        exponent: r,
        value: sum.powf(1.0 / r),
        evaluated_points: evaluated,
        skipped_points: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub violations: usize,
    pub max_gap: f64,
    pub masked: usize,
    pub tolerance: f64,
}

/// Solve for both data with one set of characteristics and count points
/// where the ordering fails.
pub fn comparison_check(
    b: &dyn DriftField,
    low: &dyn InitialDatum,
    high: &dyn InitialDatum,
    t: f64,
    noise: &Noise,
    grid: &Grid,
    opts: &FlowOptions,
    tolerance: f64,
) -> Result<ComparisonReport> {
    let offending: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| grid.point(i))
        .filter(|x| low.eval(x) > high.eval(x))
        .take(5)
        .collect();
    if !offending.is_empty() {
        return Err(Error::Argument(format!(
            "initial data are not ordered; offending points include {offending:?}"
        )));
    }
    let chars = characteristics(b, grid, noise, t, opts)?;
    let mut violations = 0;
    let mut max_gap: f64 = 0.0;
    let mut masked = 0;
    for c in &chars {
        let Some(p) = c else {
            masked += 1;
            continue;
        };
        let gap = low.eval(&p.preimage) - high.eval(&p.preimage);
        if gap > tolerance {
            violations += 1;
        }
        max_gap = max_gap.max(gap);
    }
    Ok(ComparisonReport {
        violations,
        max_gap,
        masked,
        tolerance,
    })
}

/// Which pointwise gradient size enters a Sobolev norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMeasure {
    /// `|grad u|` from the chain rule.
    ChainRule,
    /// `|grad u0(X^{-1})| * ||grad X^{-1}||`, the product bound on it.
    Majorant,
    /// `|grad u0(X^{-1})| * ||offdiag(grad X^{-1})||_F`: the product bound
    /// with only the shear part of the inverse Jacobian kept.
    Shear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SobolevNorm {
    pub exponent: f64,
    /// `(sum w |grad u|^r)^{1/r}`, or the max for infinite `r`.
    pub value: f64,
    /// `sum w |grad u|^r` for finite `r`.
    pub integral: Option<f64>,
    pub masked_fraction: f64,
    pub warning: Option<String>,
}

fn pointwise_gradient(sol: &SolutionField, i: usize, measure: GradientMeasure) -> f64 {
    match measure {
        GradientMeasure::ChainRule => linalg::norm(sol.gradient(i)),
        GradientMeasure::Majorant => sol.datum_gradient_norm[i] * sol.inverse_jacobian_norm[i],
        GradientMeasure::Shear => sol.datum_gradient_norm[i] * sol.inverse_jacobian_shear[i],
    }
}

/// Gradient norm with explicit quadrature weights (zero weight = outside).
pub fn weighted_sobolev_norm(sol: &SolutionField, weights: &[f64], r: f64, measure: GradientMeasure) -> Result<SobolevNorm> {
    if !(r >= 1.0) {
        return Err(Error::Argument(format!("exponent must be >= 1, got {r}")));
    }
    let mut inside = 0usize;
    let mut masked = 0usize;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for i in 0..sol.len() {
        if weights[i] == 0.0 {
            continue;
        }
        inside += 1;
        if !sol.valid[i] {
            masked += 1;
            continue;
        }
        let g = pointwise_gradient(sol, i, measure);
        if r.is_infinite() {
            max = max.max(g);
        } else {
            sum += weights[i] * g.powf(r);
        }
    }
    let masked_fraction = if inside == 0 { 0.0 } else { masked as f64 / inside as f64 };
    let warning = (masked_fraction > MASK_WARNING_FRACTION).then(|| {
        format!(
            "{:.1}% of cells masked; norm is unreliable",
            100.0 * masked_fraction
        )
    });
    Ok(if r.is_infinite() {
        SobolevNorm {
            exponent: r,
            value: max,
            integral: None,
            masked_fraction,
            warning,
        }
    } else {
        SobolevNorm {
            exponent: r,
            value: sum.powf(1.0 / r),
            integral: Some(sum),
            masked_fraction,
            warning,
        }
    })
}

/// `|| grad u(t) ||_{L^r([-R, R]^d)}`; `r = f64::INFINITY` gives the max.
pub fn local_sobolev_norm(sol: &SolutionField, radius: f64, r: f64) -> Result<SobolevNorm> {
    let d = sol.dim();
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("radius must be positive, got {radius}")));
    }
    let (lo, hi) = (sol.grid.lower(), sol.grid.upper());
    if (0..d).any(|a| lo[a] > -radius + 1e-12 * radius || hi[a] < radius - 1e-12 * radius) {
        return Err(Error::Argument(format!("grid does not cover the cube of radius {radius}")));
    }
    let weights = sol.grid.weights_in_box(&vec![-radius; d], &vec![radius; d]);
    weighted_sobolev_norm(sol, &weights, r, GradientMeasure::ChainRule)
}

/// `int |u|^r` over the whole grid (trapezoid).
pub fn value_integral(sol: &SolutionField, r: f64) -> f64 {
    let w = sol.grid.weights();
    (0..sol.len())
        .filter(|i| sol.valid[*i])
        .map(|i| w[i] * sol.values[i].abs().powf(r))
        .sum()
}
