//! Drift fields, initial data and test functions.
//!
//! Vectors and matrices are passed as flat slices; gradients are row-major
//! with row `i` holding the gradient of component `i`.

pub mod counterexample;
mod datum;

pub use datum::{BlowupSeed, ConstantDatum, DatumRegularity, GaussianDatum, InitialDatum, OffsetDatum, SumDatum};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    SmoothBounded,
    SobolevW1p,
    Counterexample,
}

pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `out[i * d + j] = d b_i / d x_j`.
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn divergence(&self, t: f64, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut g = vec![0.0; d * d];
        self.gradient(t, x, &mut g);
        (0..d).map(|i| g[i * d + i]).sum()
    }

    fn regularity(&self) -> Regularity;

    fn name(&self) -> String;

    /// Distance to a known singular set of the gradient, if the field has one.
    fn singular_distance(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroField {
    pub dim: usize,
}

impl ZeroField {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl DriftField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn divergence(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn regularity(&self) -> Regularity {
        Regularity::SmoothBounded
    }
    fn name(&self) -> String {
        "zero".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value }
    }
}

impl DriftField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }
    fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn divergence(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn regularity(&self) -> Regularity {
        Regularity::SmoothBounded
    }
    fn name(&self) -> String {
        format!("constant{:?}", self.value)
    }
}

/// C-infinity step: 1 for `s <= 0`, 0 for `s >= 1`.
fn smooth_step(s: f64) -> f64 {
    let psi = |v: f64| if v > 0.0 { (-1.0 / v).exp() } else { 0.0 };
    let a = psi(1.0 - s);
    let b = psi(s);
    a / (a + b)
}

fn smooth_step_prime(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let a = (-1.0 / (1.0 - s)).exp();
    let b = (-1.0 / s).exp();
    let da = -a / ((1.0 - s) * (1.0 - s));
    let db = b / (s * s);
    (da * (a + b) - a * (da + db)) / ((a + b) * (a + b))
}

/// Planar rigid rotation `(-y, x)` times a radial cutoff that equals one on
/// `r <= inner` and vanishes for `r >= outer`. Divergence-free everywhere;
/// inside the inner disc the flow is rotation by angle `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationField {
    pub inner: f64,
    pub outer: f64,
}

impl Default for RotationField {
    fn default() -> Self {
        Self { inner: 3.0, outer: 4.0 }
    }
}

impl RotationField {
    fn cutoff(&self, r: f64) -> (f64, f64) {
        let w = self.outer - self.inner;
        let s = (r - self.inner) / w;
        (smooth_step(s), smooth_step_prime(s) / w)
    }
}

impl DriftField for RotationField {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let (chi, _) = self.cutoff(r);
        out[0] = -x[1] * chi;
        out[1] = x[0] * chi;
    }
    fn gradient(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let (chi, dchi) = self.cutoff(r);
        let (rx, ry) = if r > 0.0 { (x[0] / r, x[1] / r) } else { (0.0, 0.0) };
        out[0] = -x[1] * dchi * rx;
        out[1] = -chi - x[1] * dchi * ry;
        out[2] = chi + x[0] * dchi * rx;
        out[3] = x[0] * dchi * ry;
    }
    fn divergence(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
    fn regularity(&self) -> Regularity {
        Regularity::SmoothBounded
    }
    fn name(&self) -> String {
        format!("rotation(inner={}, outer={})", self.inner, self.outer)
    }
}

/// `b(x) = direction * exp(-|x - center|^2 / (2 width^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBumpField {
    pub direction: Vec<f64>,
    pub center: Vec<f64>,
    pub width: f64,
}

impl GaussianBumpField {
    pub fn new(direction: Vec<f64>, center: Vec<f64>, width: f64) -> Self {
        assert_eq!(direction.len(), center.len());
        Self {
            direction,
            center,
            width,
        }
    }

    /// Unit-amplitude bump centred at the origin pointing along `(1, 1, ..)`.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![1.0; dim], vec![0.0; dim], 0.5)
    }

    fn profile(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        (-r2 / (2.0 * self.width * self.width)).exp()
    }

    pub fn sup_norm(&self) -> f64 {
        crate::linalg::norm(&self.direction)
    }
}

impl DriftField for GaussianBumpField {
    fn dim(&self) -> usize {
        self.direction.len()
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let p = self.profile(x);
        for (o, v) in out.iter_mut().zip(&self.direction) {
            *o = v * p;
        }
    }
    fn gradient(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let p = self.profile(x);
        let s2 = self.width * self.width;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = -self.direction[i] * p * (x[j] - self.center[j]) / s2;
            }
        }
    }
    fn divergence(&self, _t: f64, x: &[f64]) -> f64 {
        let p = self.profile(x);
        let s2 = self.width * self.width;
        -(0..self.dim())
            .map(|i| self.direction[i] * (x[i] - self.center[i]))
            .sum::<f64>()
            * p
            / s2
    }
    fn regularity(&self) -> Regularity {
        Regularity::SmoothBounded
    }
    fn name(&self) -> String {
        format!(
            "gaussian_bump(direction={:?}, center={:?}, width={})",
            self.direction, self.center, self.width
        )
    }
}

/// The planar field `(0, b1(x) b2(y))`, in `W^{1,3}` but with unbounded
/// gradient along `x -> 0+`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CounterexampleField;

impl DriftField for CounterexampleField {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = counterexample::b1(x[0]) * counterexample::b2(x[1]);
    }
    fn gradient(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        use counterexample::*;
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = b1_prime(x[0]) * b2(x[1]);
        out[3] = b1(x[0]) * b2_prime(x[1]);
    }
    fn divergence(&self, _t: f64, x: &[f64]) -> f64 {
        counterexample::b1(x[0]) * counterexample::b2_prime(x[1])
    }
    fn regularity(&self) -> Regularity {
        Regularity::Counterexample
    }
    fn name(&self) -> String {
        "counterexample".into()
    }
    fn singular_distance(&self, x: &[f64]) -> Option<f64> {
        Some(x[0].abs())
    }
}

/// Smooth compactly supported test function
/// `exp(-1 / (1 - |x - c|^2 / rho^2))` on the ball of radius `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpTestFunction {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BumpTestFunction {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn id(&self) -> String {
        format!("bump(center={:?}, radius={})", self.center, self.radius)
    }

    fn q(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / (self.radius * self.radius)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let q = self.q(x);
        if q < 1.0 {
            (-1.0 / (1.0 - q)).exp()
        } else {
            0.0
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let q = self.q(x);
        if q >= 1.0 {
            out.fill(0.0);
            return;
        }
        let v = (-1.0 / (1.0 - q)).exp();
        let dv_dq = -v / ((1.0 - q) * (1.0 - q));
        for (j, o) in out.iter_mut().enumerate() {
            *o = dv_dq * 2.0 * (x[j] - self.center[j]) / (self.radius * self.radius);
        }
    }

    /// Axis-aligned box containing the support.
    pub fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.center.iter().map(|c| c - self.radius).collect(),
            self.center.iter().map(|c| c + self.radius).collect(),
        )
    }
}
