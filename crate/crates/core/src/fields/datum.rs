use serde::{Deserialize, Serialize};

use super::counterexample::{u01, u01_prime, u02, u02_prime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatumRegularity {
    Smooth,
    W1r,
    BlowupSeed,
}

/// Initial profile `u0` transported by the flow.
pub trait InitialDatum: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn regularity(&self) -> DatumRegularity;
    fn name(&self) -> String;
}

impl<T: InitialDatum + ?Sized> InitialDatum for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        (**self).eval(x)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (**self).gradient(x, out)
    }
    fn regularity(&self) -> DatumRegularity {
        (**self).regularity()
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantDatum {
    pub dim: usize,
    pub value: f64,
}

impl InitialDatum for ConstantDatum {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _x: &[f64]) -> f64 {
        self.value
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn regularity(&self) -> DatumRegularity {
        DatumRegularity::Smooth
    }
    fn name(&self) -> String {
        format!("constant({})", self.value)
    }
}

/// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDatum {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

impl GaussianDatum {
    pub fn new(center: Vec<f64>, width: f64, amplitude: f64) -> Self {
        Self {
            center,
            width,
            amplitude,
        }
    }
}

impl InitialDatum for GaussianDatum {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        self.amplitude * (-r2 / (2.0 * self.width * self.width)).exp()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let v = self.eval(x);
        let s2 = self.width * self.width;
        for (j, o) in out.iter_mut().enumerate() {
            *o = -v * (x[j] - self.center[j]) / s2;
        }
    }
    fn regularity(&self) -> DatumRegularity {
        DatumRegularity::Smooth
    }
    fn name(&self) -> String {
        format!(
            "gaussian(center={:?}, width={}, amplitude={})",
            self.center, self.width, self.amplitude
        )
    }
}

/// Sum of smooth components; used to build ordered pairs of data.
pub struct SumDatum {
    pub parts: Vec<Box<dyn InitialDatum>>,
}

impl InitialDatum for SumDatum {
    fn dim(&self) -> usize {
        self.parts.first().map_or(1, |p| p.dim())
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.parts.iter().map(|p| p.eval(x)).sum()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut tmp = vec![0.0; out.len()];
        for p in &self.parts {
            p.gradient(x, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o += v;
            }
        }
    }
    fn regularity(&self) -> DatumRegularity {
        self.parts
            .iter()
            .map(|p| p.regularity())
            .find(|r| *r != DatumRegularity::Smooth)
            .unwrap_or(DatumRegularity::Smooth)
    }
    fn name(&self) -> String {
        let names: Vec<String> = self.parts.iter().map(|p| p.name()).collect();
        format!("sum[{}]", names.join(", "))
    }
}

/// `inner(x) + offset`.
pub struct OffsetDatum<D: InitialDatum> {
    pub inner: D,
    pub offset: f64,
}

impl<D: InitialDatum> InitialDatum for OffsetDatum<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &[f64]) -> f64 {
        self.inner.eval(x) + self.offset
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.gradient(x, out)
    }
    fn regularity(&self) -> DatumRegularity {
        self.inner.regularity()
    }
    fn name(&self) -> String {
        format!("{} + {}", self.inner.name(), self.offset)
    }
}

/// Product datum `u01(x) * u02(y)` whose x-derivative behaves like
/// `x^{-1/4}` as `x -> 0+`: in `W^{1,r}` for `r < 4` but not Lipschitz.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BlowupSeed;

impl InitialDatum for BlowupSeed {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64]) -> f64 {
        u01(x[0]) * u02(x[1])
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = u01_prime(x[0]) * u02(x[1]);
        out[1] = u01(x[0]) * u02_prime(x[1]);
    }
    fn regularity(&self) -> DatumRegularity {
        DatumRegularity::BlowupSeed
    }
    fn name(&self) -> String {
        "blowup_seed".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_gradient(u: &dyn InitialDatum, x: &[f64]) {
        let d = u.dim();
        let mut g = vec![0.0; d];
        u.gradient(x, &mut g);
        let h = 1e-6;
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (u.eval(&xp) - u.eval(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + g[j].abs()), "{} at {:?}", u.name(), x);
        }
    }

    #[test]
    fn gradients_match_differences() {
        let g = GaussianDatum::new(vec![0.3, -0.1], 0.6, 2.0);
        let s = SumDatum {
            parts: vec![
                Box::new(g.clone()),
                Box::new(GaussianDatum::new(vec![-0.5, 0.5], 0.4, 1.0)),
            ],
        };
        for p in [[0.1, 0.2], [-0.7, 0.4], [1.3, -0.5]] {
            check_gradient(&g, &p);
            check_gradient(&s, &p);
            check_gradient(&BlowupSeed, &[0.5 + p[0].abs(), p[1]]);
        }
    }

    #[test]
    fn blowup_seed_profile() {
        let u = BlowupSeed;
        assert_eq!(u.eval(&[-0.5, 0.0]), 0.0);
        assert_eq!(u.eval(&[1.0, 0.0]), 4.0 / 3.0);
        assert_eq!(u.eval(&[0.5, 2.5]), 0.0);
        let mut g = [0.0; 2];
        u.gradient(&[1e-8, 0.0], &mut g);
        assert!((g[0] - 1e-8_f64.powf(-0.25)).abs() < 1e-6 * g[0]);
    }

    #[test]
    fn offset_shifts_value_only() {
        let base = GaussianDatum::new(vec![0.0], 1.0, 1.0);
        let o = OffsetDatum {
            inner: base.clone(),
            offset: -1.0,
        };
        assert_eq!(o.eval(&[0.3]), base.eval(&[0.3]) - 1.0);
    }
}
