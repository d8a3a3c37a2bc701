//! Reproducible Brownian paths from a counter-based generator.
//!
//! Every Gaussian variate is a pure function of `(seed, level, stream_id,
//! index)`, so paths can be built on any thread in any order and still be
//! bit-identical. Paths store the values `B(t_k)` rather than increments;
//! [`BrownianPath::refine`] inserts Lévy midpoints between existing values,
//! leaving every coarse-grid value untouched.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with ten rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let p0 = u64::from(PHILOX_M0) * u64::from(c[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(c[2]);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

fn key_for(seed: u64, level: u32) -> [u32; 2] {
    [seed as u32, ((seed >> 32) as u32) ^ level.wrapping_mul(0x85EB_CA6B)]
}

fn to_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Standard normal by inverse CDF of a uniform on the open unit interval.
fn inverse_normal_cdf(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Stateless source of standard normal variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianStream {
    key: [u32; 2],
    stream_id: u64,
}

impl GaussianStream {
    pub fn new(seed: u64, stream_id: u64, level: u32) -> Self {
        Self {
            key: key_for(seed, level),
            stream_id,
        }
    }

    fn block(&self, block: u64) -> [u32; 4] {
        philox4x32(
            [
                block as u32,
                (block >> 32) as u32,
                self.stream_id as u32,
                (self.stream_id >> 32) as u32,
            ],
            self.key,
        )
    }

    /// Uniform variate number `index` in (0, 1).
    pub fn uniform(&self, index: u64) -> f64 {
        let r = self.block(index / 2);
        let bits = if index.is_multiple_of(2) {
            (u64::from(r[0]) << 32) | u64::from(r[1])
        } else {
            (u64::from(r[2]) << 32) | u64::from(r[3])
        };
        to_unit(bits)
    }

    pub fn normal(&self, index: u64) -> f64 {
        inverse_normal_cdf(self.uniform(index))
    }

    /// Fill `out` with variates `start, start + 1, ...`.
    pub fn fill_normal(&self, start: u64, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.normal(start + i as u64);
        }
    }
}

/// Identifies a path without its samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathId {
    pub seed: u64,
    pub stream_id: u64,
    pub n_steps: usize,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub seed: u64,
    pub stream_id: u64,
    pub dim: usize,
    pub horizon: f64,
    pub n_steps: usize,
    /// Number of Lévy refinements applied to the base path.
    pub level: u32,
    /// `(n_steps + 1) x dim` row-major values; row 0 is zero.
    values: Vec<f64>,
}

impl BrownianPath {
    pub fn generate(seed: u64, stream_id: u64, dim: usize, horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Argument("n_steps must be at least 1".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if dim == 0 {
            return Err(Error::Argument("dimension must be at least 1".into()));
        }
        let stream = GaussianStream::new(seed, stream_id, 0);
        let sd = (horizon / n_steps as f64).sqrt();
        let mut values = vec![0.0; (n_steps + 1) * dim];
        let mut z = vec![0.0; dim];
        for k in 0..n_steps {
            stream.fill_normal((k * dim) as u64, &mut z);
            for i in 0..dim {
                values[(k + 1) * dim + i] = values[k * dim + i] + sd * z[i];
            }
        }
        Ok(Self {
            seed,
            stream_id,
            dim,
            horizon,
            n_steps,
            level: 0,
            values,
        })
    }

    /// Generate a base path with `base_steps` and refine it `levels` times.
    pub fn generate_refined(
        seed: u64,
        stream_id: u64,
        dim: usize,
        horizon: f64,
        base_steps: usize,
        levels: u32,
    ) -> Result<Self> {
        let mut p = Self::generate(seed, stream_id, dim, horizon, base_steps)?;
        for _ in 0..levels {
            p = p.refine();
        }
        Ok(p)
    }

    /// Halve the step by Brownian-bridge midpoints. Existing values are kept
    /// bit-for-bit.
    pub fn refine(&self) -> Self {
        let d = self.dim;
        let level = self.level + 1;
        let stream = GaussianStream::new(self.seed, self.stream_id, level);
        let sd = (self.step() / 4.0).sqrt();
        let n = self.n_steps * 2;
        let mut values = vec![0.0; (n + 1) * d];
        let mut z = vec![0.0; d];
        for k in 0..self.n_steps {
            stream.fill_normal((k * d) as u64, &mut z);
            for i in 0..d {
                let a = self.values[k * d + i];
                let b = self.values[(k + 1) * d + i];
                values[2 * k * d + i] = a;
                values[(2 * k + 1) * d + i] = 0.5 * (a + b) + sd * z[i];
            }
        }
        values[n * d..].copy_from_slice(&self.values[self.n_steps * d..]);
        Self {
            seed: self.seed,
            stream_id: self.stream_id,
            dim: d,
            horizon: self.horizon,
            n_steps: n,
            level,
            values,
        }
    }

    pub fn id(&self) -> PathId {
        PathId {
            seed: self.seed,
            stream_id: self.stream_id,
            n_steps: self.n_steps,
            level: self.level,
        }
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    /// `B(t_k)`.
    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// `B(t_{k+1}) - B(t_k)` written into `out`.
    pub fn increment(&self, k: usize, out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = self.values[(k + 1) * d + i] - self.values[k * d + i];
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Grid index of time `t`, if `t` lies on the grid (to rounding).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.horizon * self.n_steps as f64;
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > 1e-9 * self.n_steps as f64 {
            None
        } else {
            Some(k as usize)
        }
    }
}

/// Empirical mean and variance of `B_1(t)` over `n_samples` independent
/// streams.
pub fn sample_b1_density_check(seed: u64, t: f64, n_samples: usize) -> Result<(f64, f64)> {
    if !(t > 0.0) {
        return Err(Error::Argument(format!("time must be positive, got {t}")));
    }
    if n_samples < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let samples: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| t.sqrt() * GaussianStream::new(seed, s, 0).normal(0))
        .collect();
    let n = n_samples as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}
