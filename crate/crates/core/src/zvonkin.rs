//! Zvonkin transform: the backward parabolic problem
//! `dU/dt + (1/2) Lap U + b . grad U = lambda U - b`, `U(T) = 0`,
//! the map `gamma = x + U`, and the transformed SDE
//! `dY = lambda U(t, gamma^{-1}(Y)) dt + (I + grad U(t, gamma^{-1}(Y))) dB`.
//!
//! Space is a uniform tensor grid on `[-L, L]^d` (d = 1 or 2) with zero
//! Dirichlet data; time is backward implicit Euler, optionally with
//! two-stage Richardson extrapolation. All norms are taken over the inner
//! trust region, away from the artificial boundary.

use serde::{Deserialize, Serialize};

use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::fields::DriftField;
use crate::flow::{self, FlowOptions, Noise};
use crate::grid::Axis;
use crate::linalg;

/// Relative residual tolerated after each linear solve.
pub const STEP_RESIDUAL_TOL: f64 = 1e-10;

/// Boundary-band `|U|`, relative to the interior maximum, above which a
/// truncation warning is attached.
pub const TRUNCATION_WARNING_RATIO: f64 = 1e-3;

/// LU factorisation of a banded matrix without pivoting. Intended for
/// diagonally dominant M-matrices, for which pivoting is unnecessary.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    p: usize,
    /// Row `i` stores columns `i - p ..= i + p` at offsets `0 ..= 2p`.
    data: Vec<f64>,
}

impl BandedLu {
    pub fn new(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            data: vec![0.0; n * (2 * p + 1)],
        }
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        i * (2 * self.p + 1) + (j + self.p - i)
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i.abs_diff(j) <= self.p);
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.p {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    pub fn factor(&mut self) -> Result<()> {
        let (n, p) = (self.n, self.p);
        for k in 0..n {
            let pivot = self.get(k, k);
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(Error::Solver(format!("zero pivot at row {k}")));
            }
            let last = (k + p).min(n - 1);
            for i in k + 1..=last {
                let s = self.slot(i, k);
                let l = self.data[s] / pivot;
                self.data[s] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=last {
                    let sij = self.slot(i, j);
                    let skj = self.slot(k, j);
                    self.data[sij] -= l * self.data[skj];
                }
            }
        }
        Ok(())
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, p) = (self.n, self.p);
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(p)..i {
                s -= self.data[self.slot(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + p).min(n - 1) {
                s -= self.data[self.slot(i, j)] * x[j];
            }
            x[i] = s / self.data[self.slot(i, i)];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZvonkinConfig {
    pub lambda: f64,
    pub horizon: f64,
    /// The box is `[-half_width, half_width]^d`.
    pub half_width: f64,
    /// Grid points per axis, boundary included.
    pub points: usize,
    pub time_steps: usize,
    /// Combine runs with `n`, `2n` and `4n` steps by Richardson extrapolation.
    #[serde(default)]
    pub extrapolate: bool,
    /// Keep every `store_stride`-th time level (the two ends are always kept).
    #[serde(default = "default_stride")]
    pub store_stride: usize,
    /// Fraction of the box, per axis, used for all norms.
    #[serde(default = "default_trust")]
    pub trust_fraction: f64,
}

impl Default for ZvonkinConfig {
    fn default() -> Self {
        Self {
            lambda: 50.0,
            horizon: 1.0,
            half_width: 4.0,
            points: 801,
            time_steps: 1000,
            extrapolate: true,
            store_stride: 1,
            trust_fraction: default_trust(),
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_trust() -> f64 {
    0.6
}

impl ZvonkinConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::Argument(format!("dimension must be 1 or 2, got {dim}")));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Argument(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::Argument("half_width must be positive".into()));
        }
        if self.points < 5 {
            return Err(Error::Argument("need at least 5 points per axis".into()));
        }
        if self.time_steps == 0 || self.store_stride == 0 {
            return Err(Error::Argument("time_steps and store_stride must be positive".into()));
        }
        if !(self.trust_fraction > 0.0 && self.trust_fraction <= 1.0) {
            return Err(Error::Argument("trust_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn stored_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=self.time_steps).step_by(self.store_stride).collect();
        if *v.last().unwrap() != self.time_steps {
            v.push(self.time_steps);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZvonkinSolution {
    pub lambda: f64,
    pub dim: usize,
    pub horizon: f64,
    pub axis: Axis,
    pub trust_half_width: f64,
    /// Stored times, increasing; the last one is the horizon.
    pub times: Vec<f64>,
    /// Per stored time: `nodes x dim` values of `U`.
    pub u: Vec<Vec<f64>>,
    /// Per stored time: `nodes x dim x dim` centred-difference gradients,
    /// `grad[.][node * d * d + i * d + j] = dU_i / dx_j`.
    pub grad: Vec<Vec<f64>>,
    pub field_name: String,
    pub max_step_residual: f64,
    pub warnings: Vec<String>,
}

/// Sup norms over the trust region and all stored times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZvonkinNorms {
    pub u_sup: f64,
    /// Largest spectral norm of `grad U`.
    pub grad_sup: f64,
    /// Largest second difference.
    pub hess_sup: f64,
    /// `max |U(T, .)|`, zero by construction.
    pub terminal_sup: f64,
}

struct Operator {
    n_axis: usize,
    inner: usize,
    dim: usize,
    spacing: f64,
}

impl Operator {
    fn unknowns(&self) -> usize {
        self.inner.pow(self.dim as u32)
    }

    fn band(&self) -> usize {
        if self.dim == 1 { 1 } else { self.inner }
    }

    /// Node index on the full grid of interior unknown `k`.
    fn node_of(&self, k: usize) -> usize {
        if self.dim == 1 {
            k + 1
        } else {
            let (i, j) = (k / self.inner, k % self.inner);
            (i + 1) * self.n_axis + (j + 1)
        }
    }

    fn node_coords(&self, axis: &Axis, node: usize) -> Vec<f64> {
        if self.dim == 1 {
            vec![axis.nodes()[node]]
        } else {
            vec![axis.nodes()[node / self.n_axis], axis.nodes()[node % self.n_axis]]
        }
    }

    /// Stencil coefficients `(diag, [(minus, plus); d])` for unknown `k`.
    fn coefficients(&self, b: &[f64], lambda: f64, dt: f64) -> (f64, Vec<(f64, f64)>) {
        let h2 = self.spacing * self.spacing;
        let diag = 1.0 + dt * (lambda + self.dim as f64 / h2);
        let off = (0..self.dim)
            .map(|a| {
                let diff = 0.5 / h2;
                let adv = b[a] / (2.0 * self.spacing);
                (-dt * (diff - adv), -dt * (diff + adv))
            })
            .collect();
        (diag, off)
    }
}

/// Per-node stencil: diagonal and per-axis `(lower, upper)` coefficients.
type Stencil = (f64, Vec<(f64, f64)>);

fn assemble(
    op: &Operator,
    b: &dyn DriftField,
    axis: &Axis,
    t: f64,
    lambda: f64,
    dt: f64,
    drift: &mut [f64],
) -> Result<(BandedLu, Vec<Stencil>)> {
    let d = op.dim;
    let m = op.unknowns();
    let band = op.band();
    let mut lu = BandedLu::new(m, band);
    let mut stencils = Vec::with_capacity(m);
    let stride = |a: usize| if d == 1 || a == 1 { 1 } else { op.inner };
    let mut bx = vec![0.0; d];
    for k in 0..m {
        let x = op.node_coords(axis, op.node_of(k));
        b.eval(t, &x, &mut bx);
        for a in 0..d {
            if bx[a].abs() * op.spacing > 1.0 {
                return Err(Error::Resolution(format!(
                    "cell Peclet number |b| dx = {} exceeds 1 at {x:?}; refine the grid",
                    bx[a].abs() * op.spacing
                )));
            }
        }
        drift[k * d..(k + 1) * d].copy_from_slice(&bx);
        let (diag, off) = op.coefficients(&bx, lambda, dt);
        lu.set(k, k, diag);
        let local = interior_position(op, k);
        for a in 0..d {
            let s = stride(a);
            if local[a] > 0 {
                lu.set(k, k - s, off[a].0);
            }
            if local[a] + 1 < op.inner {
                lu.set(k, k + s, off[a].1);
            }
        }
        stencils.push((diag, off));
    }
    lu.factor()?;
    Ok((lu, stencils))
}

fn interior_position(op: &Operator, k: usize) -> Vec<usize> {
    if op.dim == 1 {
        vec![k]
    } else {
        vec![k / op.inner, k % op.inner]
    }
}

fn apply(op: &Operator, stencils: &[(f64, Vec<(f64, f64)>)], x: &[f64], out: &mut [f64]) {
    let d = op.dim;
    let stride = |a: usize| if d == 1 || a == 1 { 1 } else { op.inner };
    for k in 0..op.unknowns() {
        let (diag, off) = &stencils[k];
        let mut s = diag * x[k];
        let local = interior_position(op, k);
        for a in 0..d {
            let st = stride(a);
            if local[a] > 0 {
                s += off[a].0 * x[k - st];
            }
            if local[a] + 1 < op.inner {
                s += off[a].1 * x[k + st];
            }
        }
        out[k] = s;
    }
}

/// One backward march with `n` steps; returns `U` at the stored indices
/// (scaled to this run's step count) in increasing time, and the largest
/// relative step residual.
fn march(
    b: &dyn DriftField,
    cfg: &ZvonkinConfig,
    axis: &Axis,
    op: &Operator,
    n: usize,
    keep: &[usize],
) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = op.dim;
    let m = op.unknowns();
    let nodes = op.n_axis.pow(d as u32);
    let dt = cfg.horizon / n as f64;
    let mut drift = vec![0.0; m * d];
    let mut factored = None;
    let mut state = vec![vec![0.0; m]; d];
    let mut rhs = vec![0.0; m];
    let mut check = vec![0.0; m];
    let mut max_res: f64 = 0.0;
    let mut stored: Vec<Option<Vec<f64>>> = vec![None; keep.len()];

    let scatter = |state: &Vec<Vec<f64>>| {
        let mut full = vec![0.0; nodes * d];
        for k in 0..m {
            let node = op.node_of(k);
            for i in 0..d {
                full[node * d + i] = state[i][k];
            }
        }
        full
    };
    if let Some(pos) = keep.iter().position(|&k| k == n) {
        stored[pos] = Some(vec![0.0; nodes * d]);
    }
    for step in 0..n {
        let k_new = n - step - 1;
        let t_new = cfg.horizon * k_new as f64 / n as f64;
        if factored.is_none() || !b.is_autonomous() {
            factored = Some(assemble(op, b, axis, t_new, cfg.lambda, dt, &mut drift)?);
        }
        let (lu, stencils) = factored.as_ref().expect("assembled above");
        for i in 0..d {
            for k in 0..m {
                rhs[k] = state[i][k] + dt * drift[k * d + i];
            }
            let mut x = rhs.clone();
            lu.solve_in_place(&mut x);
            apply(op, stencils, &x, &mut check);
            let scale = 1.0 + rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let res = check
                .iter()
                .zip(&rhs)
                .fold(0.0f64, |a, (c, r)| a.max((c - r).abs()))
                / scale;
            if !(res <= STEP_RESIDUAL_TOL) {
                return Err(Error::Solver(format!(
                    "step residual {res:e} exceeds {STEP_RESIDUAL_TOL:e} at t = {t_new}"
                )));
            }
            max_res = max_res.max(res);
            state[i] = x;
        }
        if let Some(pos) = keep.iter().position(|&k| k == k_new) {
            stored[pos] = Some(scatter(&state));
        }
    }
    Ok((stored.into_iter().map(|s| s.expect("every kept level visited")).collect(), max_res))
}

pub fn solve_backward_pde(b: &dyn DriftField, cfg: &ZvonkinConfig) -> Result<ZvonkinSolution> {
    let d = b.dim();
    cfg.validate(d)?;
    let axis = Axis::uniform(-cfg.half_width, cfg.half_width, cfg.points)?;
    let op = Operator {
        n_axis: cfg.points,
        inner: cfg.points - 2,
        dim: d,
        spacing: axis.max_spacing(),
    };
    let keep = cfg.stored_indices();
    let n = cfg.time_steps;
    let (u, max_res) = if cfg.extrapolate {
        let (u1, r1) = march(b, cfg, &axis, &op, n, &keep)?;
        let keep2: Vec<usize> = keep.iter().map(|k| 2 * k).collect();
        let (u2, r2) = march(b, cfg, &axis, &op, 2 * n, &keep2)?;
        let keep4: Vec<usize> = keep.iter().map(|k| 4 * k).collect();
        let (u4, r4) = march(b, cfg, &axis, &op, 4 * n, &keep4)?;
        let combined = (0..keep.len())
            .map(|l| {
                (0..u1[l].len())
                    .map(|i| {
                        let r_a = 2.0 * u2[l][i] - u1[l][i];
                        let r_b = 2.0 * u4[l][i] - u2[l][i];
                        (4.0 * r_b - r_a) / 3.0
                    })
                    .collect()
            })
            .collect();
        (combined, r1.max(r2).max(r4))
    } else {
        march(b, cfg, &axis, &op, n, &keep)?
    };
    let times: Vec<f64> = keep.iter().map(|k| cfg.horizon * *k as f64 / n as f64).collect();
    let grad: Vec<Vec<f64>> = u.iter().map(|level| gradient_of(&axis, d, level)).collect();
    let mut sol = ZvonkinSolution {
        lambda: cfg.lambda,
        dim: d,
        horizon: cfg.horizon,
        trust_half_width: cfg.trust_fraction * cfg.half_width,
        axis,
        times,
        u,
        grad,
        field_name: b.name(),
        max_step_residual: max_res,
        warnings: Vec::new(),
    };
    sol.check_truncation();
    Ok(sol)
}

fn gradient_of(axis: &Axis, d: usize, level: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let h = axis.max_spacing();
    let nodes = n.pow(d as u32);
    let mut g = vec![0.0; nodes * d * d];
    let idx = |c: &[usize]| if d == 1 { c[0] } else { c[0] * n + c[1] };
    for node in 0..nodes {
        let c: Vec<usize> = if d == 1 { vec![node] } else { vec![node / n, node % n] };
        for j in 0..d {
            let mut lo = c.clone();
            let mut hi = c.clone();
            let span;
            if c[j] == 0 {
                hi[j] += 1;
                span = h;
            } else if c[j] + 1 == n {
                lo[j] -= 1;
                span = h;
            } else {
                lo[j] -= 1;
                hi[j] += 1;
                span = 2.0 * h;
            }
            for i in 0..d {
                g[node * d * d + i * d + j] = (level[idx(&hi) * d + i] - level[idx(&lo) * d + i]) / span;
            }
        }
    }
    g
}

impl ZvonkinSolution {
    fn nodes_per_axis(&self) -> usize {
        self.axis.len()
    }

    pub fn node_coords(&self, node: usize) -> Vec<f64> {
        let n = self.nodes_per_axis();
        if self.dim == 1 {
            vec![self.axis.nodes()[node]]
        } else {
            vec![self.axis.nodes()[node / n], self.axis.nodes()[node % n]]
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    fn in_trust(&self, node: usize) -> bool {
        let tol = 1e-12 * self.trust_half_width.max(1.0);
        self.node_coords(node).iter().all(|c| c.abs() <= self.trust_half_width + tol)
    }

    fn check_truncation(&mut self) {
        let n = self.nodes_per_axis();
        let d = self.dim;
        let mut interior: f64 = 0.0;
        let mut band: f64 = 0.0;
        for level in &self.u {
            for node in 0..self.node_count() {
                let c: Vec<usize> = if d == 1 { vec![node] } else { vec![node / n, node % n] };
                let near_edge = c.iter().any(|&i| i <= 1 || i + 2 >= n);
                let mag = (0..d).map(|i| level[node * d + i].abs()).fold(0.0, f64::max);
                if near_edge {
                    band = band.max(mag);
                } else {
                    interior = interior.max(mag);
                }
            }
        }
        if interior > 0.0 && band > TRUNCATION_WARNING_RATIO * interior {
            self.warnings.push(format!(
                "boundary influence: |U| next to the artificial boundary reaches {band:e} \
                 ({:.2e} of the interior maximum); enlarge the box",
                band / interior
            ));
        }
    }

    pub fn norms(&self) -> ZvonkinNorms {
        let d = self.dim;
        let dd = d * d;
        let mut u_sup: f64 = 0.0;
        let mut grad_sup: f64 = 0.0;
        for (level, grad) in self.u.iter().zip(&self.grad) {
            for node in (0..self.node_count()).filter(|n| self.in_trust(*n)) {
                for i in 0..d {
                    u_sup = u_sup.max(level[node * d + i].abs());
                }
                grad_sup = grad_sup.max(linalg::spectral_norm(d, &grad[node * dd..(node + 1) * dd]));
            }
        }
        let terminal_sup = self.u.last().map_or(0.0, |l| l.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        ZvonkinNorms {
            u_sup,
            grad_sup,
            hess_sup: self.hessian_sup(),
            terminal_sup,
        }
    }

    /// Largest centred second difference of any component over the trust
    /// region and all stored times.
    pub fn hessian_sup(&self) -> f64 {
        let n = self.nodes_per_axis();
        let d = self.dim;
        let h = self.axis.max_spacing();
        let idx = |c: &[usize]| if d == 1 { c[0] } else { c[0] * n + c[1] };
        let mut sup: f64 = 0.0;
        for level in &self.u {
            for node in (0..self.node_count()).filter(|k| self.in_trust(*k)) {
                let c: Vec<usize> = if d == 1 { vec![node] } else { vec![node / n, node % n] };
                if c.iter().any(|&i| i == 0 || i + 1 == n) {
                    continue;
                }
                for i in 0..d {
                    let v = |cc: &[usize]| level[idx(cc) * d + i];
                    for a in 0..d {
                        for bb in 0..d {
                            let val = if a == bb {
                                let mut p = c.clone();
                                let mut m = c.clone();
                                p[a] += 1;
                                m[a] -= 1;
                                (v(&p) - 2.0 * v(&c) + v(&m)) / (h * h)
                            } else {
                                let mut pp = c.clone();
                                let mut pm = c.clone();
                                let mut mp = c.clone();
                                let mut mm = c.clone();
                                pp[a] += 1;
                                pp[bb] += 1;
                                pm[a] += 1;
                                pm[bb] -= 1;
                                mp[a] -= 1;
                                mp[bb] += 1;
                                mm[a] -= 1;
                                mm[bb] -= 1;
                                (v(&pp) - v(&pm) - v(&mp) + v(&mm)) / (4.0 * h * h)
                            };
                            sup = sup.max(val.abs());
                        }
                    }
                }
            }
        }
        sup
    }

    /// Multilinear interpolation of `U` and `grad U` at stored level `l`.
    fn interpolate_level(&self, l: usize, z: &[f64], u_out: &mut [f64], g_out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let n = self.nodes_per_axis();
        let lo = self.axis.lo();
        let h = self.axis.max_spacing();
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..d {
            let s = (z[a] - lo) / h;
            if !(s >= 0.0 && s <= (n - 1) as f64) {
                return Err(Error::Truncation(format!(
                    "point {z:?} left the Zvonkin grid [-{0}, {0}]^d",
                    self.axis.hi()
                )));
            }
            let i = (s.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        u_out.fill(0.0);
        g_out.fill(0.0);
        let dd = d * d;
        let corners = 1usize << d;
        for corner in 0..corners {
            let mut w = 1.0;
            let mut node = 0;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                node = node * n + base[a] + bit;
            }
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                u_out[i] += w * self.u[l][node * d + i];
            }
            for k in 0..dd {
                g_out[k] += w * self.grad[l][node * dd + k];
            }
        }
        Ok(())
    }

    /// `U(t, z)` and `grad U(t, z)`, linear in time between stored levels.
    pub fn interpolate(&self, t: f64, z: &[f64], u_out: &mut [f64], g_out: &mut [f64]) -> Result<()> {
        let last = self.times.len() - 1;
        let pos = self.times.partition_point(|s| *s < t - 1e-12 * self.horizon);
        if pos == 0 || (pos <= last && (self.times[pos] - t).abs() <= 1e-12 * self.horizon) {
            return self.interpolate_level(pos.min(last), z, u_out, g_out);
        }
        if pos > last {
            return Err(Error::Argument(format!("time {t} beyond the horizon {}", self.horizon)));
        }
        let (t0, t1) = (self.times[pos - 1], self.times[pos]);
        let w = (t - t0) / (t1 - t0);
        let d = self.dim;
        let mut u1 = [0.0; 2];
        let mut g1 = [0.0; 4];
        self.interpolate_level(pos - 1, z, u_out, g_out)?;
        self.interpolate_level(pos, z, &mut u1[..d], &mut g1[..d * d])?;
        for i in 0..d {
            u_out[i] = (1.0 - w) * u_out[i] + w * u1[i];
        }
        for k in 0..d * d {
            g_out[k] = (1.0 - w) * g_out[k] + w * g1[k];
        }
        Ok(())
    }

    /// `gamma(t, z) = z + U(t, z)`.
    pub fn gamma(&self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut u = vec![0.0; d];
        let mut g = vec![0.0; d * d];
        self.interpolate(t, z, &mut u, &mut g)?;
        Ok((0..d).map(|i| z[i] + u[i]).collect())
    }

    /// Solve `z + U(t, z) = target` by Newton iteration from `z = target`.
    pub fn gamma_inverse(&self, t: f64, target: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut z = vec![0.0; d];
        let mut u = [0.0; 2];
        let mut g = [0.0; 4];
        self.gamma_inverse_into(t, target, &mut z, &mut u[..d], &mut g[..d * d])?;
        Ok(z)
    }

    /// As [`Self::gamma_inverse`], also returning `U` and `grad U` at the
    /// preimage. Uses the interpolated `grad U` as the Newton Jacobian.
    fn gamma_inverse_into(&self, t: f64, target: &[f64], z: &mut [f64], u: &mut [f64], g: &mut [f64]) -> Result<()> {
        let d = self.dim;
        z.copy_from_slice(target);
        let scale = 1.0 + linalg::norm(target);
        for _ in 0..100 {
            self.interpolate(t, z, u, g).map_err(|e| match e {
                Error::Truncation(m) => Error::Truncation(m),
                other => Error::Inversion(other.to_string()),
            })?;
            let mut r = [0.0; 2];
            for i in 0..d {
                r[i] = z[i] + u[i] - target[i];
            }
            if linalg::norm(&r[..d]) <= 1e-13 * scale {
                return Ok(());
            }
            if d == 1 {
                z[0] -= r[0] / (1.0 + g[0]);
            } else {
                let (a, b, c, e) = (1.0 + g[0], g[1], g[2], 1.0 + g[3]);
                let det = a * e - b * c;
                if !(det.abs() > 1e-300) {
                    return Err(Error::Inversion(format!("singular gamma Jacobian at {z:?}")));
                }
                z[0] -= (e * r[0] - b * r[1]) / det;
                z[1] -= (a * r[1] - c * r[0]) / det;
            }
        }
        Err(Error::Inversion(format!("gamma^-1 Newton iteration did not converge at {target:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffeoReport {
    pub min_det: f64,
    /// `sup ||I + grad U||`.
    pub lipschitz_forward: f64,
    /// `sup ||(I + grad U)^{-1}||`.
    pub lipschitz_inverse: f64,
    pub grad_sup: f64,
    /// When `||grad U|| <= 1/2` everywhere: whether the inverse bound 2 holds.
    pub inverse_bound_holds: Option<bool>,
    pub diffeomorphic: bool,
}

pub fn gamma_diffeo_check(sol: &ZvonkinSolution) -> DiffeoReport {
    let d = sol.dim;
    let dd = d * d;
    let mut min_det = f64::INFINITY;
    let mut fwd: f64 = 0.0;
    let mut inv: f64 = 0.0;
    let mut grad_sup: f64 = 0.0;
    let mut m = vec![0.0; dd];
    for grad in &sol.grad {
        for node in (0..sol.node_count()).filter(|n| sol.in_trust(*n)) {
            let gu = &grad[node * dd..(node + 1) * dd];
            grad_sup = grad_sup.max(linalg::spectral_norm(d, gu));
            m.copy_from_slice(gu);
            for i in 0..d {
                m[i * d + i] += 1.0;
            }
            let det = linalg::determinant(d, &m);
            min_det = min_det.min(det);
            fwd = fwd.max(linalg::spectral_norm(d, &m));
            match linalg::inverse(d, &m) {
                Ok(mi) => inv = inv.max(linalg::spectral_norm(d, &mi)),
                Err(_) => inv = f64::INFINITY,
            }
        }
    }
    DiffeoReport {
        min_det,
        lipschitz_forward: fwd,
        lipschitz_inverse: inv,
        grad_sup,
        inverse_bound_holds: (grad_sup <= 0.5).then_some(inv <= 2.0 + 1e-12),
        diffeomorphic: min_det > 0.0,
    }
}

/// `sup_k |gamma^{-1}(t_k, Y_k) - X_k|` over the grid of `path` up to `t`,
/// with `X` from the original SDE and `Y` from the transformed one, both
/// driven by `path`.
pub fn transformed_sde_equivalence(
    b: &dyn DriftField,
    sol: &ZvonkinSolution,
    x: &[f64],
    path: &BrownianPath,
    t: f64,
) -> Result<f64> {
    let d = sol.dim;
    if b.dim() != d || x.len() != d {
        return Err(Error::Argument("dimension mismatch in equivalence check".into()));
    }
    if t > sol.horizon * (1.0 + 1e-12) {
        return Err(Error::Argument(format!("time {t} beyond the PDE horizon {}", sol.horizon)));
    }
    let noise = Noise::Path(path);
    let k_end = noise.index_of(t)?;
    let xs = flow::integrate_between(b, x, &noise, 0, k_end, &FlowOptions::default())?;
    let h = path.step();
    let (mut u, mut g, mut db, mut y, mut z) = ([0.0; 2], [0.0; 4], [0.0; 2], [0.0; 2], [0.0; 2]);
    // Y_k = V_k + B_k: only the correction to the unit diffusion is
    // accumulated in V, so U = 0 reproduces X exactly.
    let mut v = sol.gamma(0.0, x)?;
    let mut worst: f64 = 0.0;
    for k in 0..=k_end {
        let tk = path.time(k);
        let bk = path.value(k);
        for i in 0..d {
            y[i] = v[i] + bk[i];
        }
        sol.gamma_inverse_into(tk, &y[..d], &mut z[..d], &mut u[..d], &mut g[..d * d])?;
        let xk = xs.state(k);
        let gap = (0..d).map(|i| (z[i] - xk[i]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(gap);
        if k == k_end {
            break;
        }
        path.increment(k, &mut db[..d]);
        for i in 0..d {
            let noise_corr: f64 = (0..d).map(|j| g[i * d + j] * db[j]).sum();
            v[i] += sol.lambda * u[i] * h + noise_corr;
        }
    }
    Ok(worst)
}

/// Mean over `n_paths` Brownian paths (streams `0..n_paths` of `seed`) of
/// the sup discrepancy, for the base step count and each of `levels`
/// successive Lévy refinements. Refinement keeps the coarse values, so every
/// level sees the same realisations.
pub fn equivalence_study(
    b: &dyn DriftField,
    sol: &ZvonkinSolution,
    x: &[f64],
    seed: u64,
    n_paths: usize,
    base_steps: usize,
    levels: usize,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    if n_paths == 0 {
        return Err(Error::Argument("n_paths must be positive".into()));
    }
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let mut path = BrownianPath::generate(seed, stream, sol.dim, sol.horizon, base_steps)?;
            let mut out = Vec::with_capacity(levels + 1);
            for level in 0..=levels {
                if level > 0 {
                    path = path.refine();
                }
                out.push(transformed_sde_equivalence(b, sol, x, &path, sol.horizon)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..=levels)
        .map(|l| per_path.iter().map(|v| v[l]).sum::<f64>() / n_paths as f64)
        .collect())
}
