//! Small dense matrix helpers on row-major slices.
//!
//! The flow kernels work on `d x d` matrices with `d` of one or two, so the
//! hot paths use flat buffers; anything beyond that falls back to nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `out = a * b` for square row-major matrices.
pub fn matmul(d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

pub fn to_dmatrix(d: usize, a: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, a)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = m[(i, j)];
        }
    }
    out
}

pub fn determinant(d: usize, a: &[f64]) -> f64 {
    match d {
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        _ => to_dmatrix(d, a).determinant(),
    }
}

pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value.
pub fn spectral_norm(d: usize, a: &[f64]) -> f64 {
    match d {
        1 => a[0].abs(),
        2 => {
            let s = a.iter().map(|v| v * v).sum::<f64>();
            let det = determinant(2, a);
            let disc = (s * s - 4.0 * det * det).max(0.0);
            ((s + disc.sqrt()) / 2.0).sqrt()
        }
        _ => to_dmatrix(d, a).singular_values().max(),
    }
}

/// Ratio of extreme singular values; infinite when singular.
pub fn condition_number(d: usize, a: &[f64]) -> f64 {
    if d <= 2 {
        let smax = spectral_norm(d, a);
        let det = determinant(d, a).abs();
        if d == 1 {
            return if smax == 0.0 { f64::INFINITY } else { 1.0 };
        }
        // smax * smin = |det|
        return if det == 0.0 { f64::INFINITY } else { smax * smax / det };
    }
    let sv = to_dmatrix(d, a).singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn inverse(d: usize, a: &[f64]) -> Result<Vec<f64>> {
    match d {
        1 => {
            if a[0] == 0.0 {
                return Err(Error::Singular("zero 1x1 matrix".into()));
            }
            Ok(vec![1.0 / a[0]])
        }
        2 => {
            let det = determinant(2, a);
            if det == 0.0 || !det.is_finite() {
                return Err(Error::Singular(format!("2x2 determinant {det}")));
            }
            Ok(vec![a[3] / det, -a[1] / det, -a[2] / det, a[0] / det])
        }
        _ => to_dmatrix(d, a)
            .try_inverse()
            .map(|m| from_dmatrix(&m))
            .ok_or_else(|| Error::Singular("matrix not invertible".into())),
    }
}

/// Row vector times matrix: `out_j = sum_i v_i a_ij`.
pub fn vecmat(d: usize, v: &[f64], a: &[f64], out: &mut [f64]) {
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += v[i] * a[i * d + j];
        }
        out[j] = s;
    }
}

/// Matrix times column vector.
pub fn matvec(d: usize, a: &[f64], v: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += a[i * d + j] * v[j];
        }
        out[i] = s;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    fit_slope(&lx, &ly)
}
