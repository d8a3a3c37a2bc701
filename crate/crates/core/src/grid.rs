//! Tensor-product sample grids with trapezoid weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    nodes: Vec<f64>,
}

impl Axis {
    pub fn uniform(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::Argument(format!("axis needs at least 2 points, got {n_points}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Argument(format!("axis bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (n_points - 1) as f64;
        let mut nodes: Vec<f64> = (0..n_points).map(|i| lo + step * i as f64).collect();
        nodes[n_points - 1] = hi;
        Ok(Self { nodes })
    }

    /// `n_points` nodes from `lo` to `hi` (both positive) in geometric
    /// progression.
    pub fn geometric(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Argument(format!("geometric axis needs 0 < lo < hi, got [{lo}, {hi}]")));
        }
        let log = Self::uniform(lo.ln(), hi.ln(), n_points)?;
        let mut nodes: Vec<f64> = log.nodes.iter().map(|v| v.exp()).collect();
        nodes[0] = lo;
        nodes[n_points - 1] = hi;
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Argument("axis needs at least 2 nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) || nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("axis nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Smallest gap between consecutive nodes.
    pub fn min_spacing(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn is_uniform(&self) -> bool {
        self.max_spacing() - self.min_spacing() <= 1e-9 * self.max_spacing()
    }

    /// Trapezoid weights over the whole axis.
    pub fn weights(&self) -> Vec<f64> {
        self.weights_in(|_| true)
    }

    /// Trapezoid weights of the sub-mesh of nodes in `[lo, hi]` (zero weight
    /// elsewhere). Nodes within `1e-12` relative of a bound count as inside.
    pub fn weights_between(&self, lo: f64, hi: f64) -> Vec<f64> {
        let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
        self.weights_in(|x| x >= lo - tol && x <= hi + tol)
    }

    /// Trapezoid weights on each maximal run of consecutive nodes accepted
    /// by `keep`.
    pub fn weights_in<F: Fn(f64) -> bool>(&self, keep: F) -> Vec<f64> {
        let n = self.nodes.len();
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            if keep(self.nodes[i]) && keep(self.nodes[i + 1]) {
                let half = 0.5 * (self.nodes[i + 1] - self.nodes[i]);
                w[i] += half;
                w[i + 1] += half;
            }
        }
        w
    }
}

/// Box plus resolution, as written in experiment configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl GridSpec {
    pub fn cube(dim: usize, half_width: f64, points: usize) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
            resolution: vec![points; dim],
        }
    }

    pub fn build(&self) -> Result<Grid> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.resolution.len() != d {
            return Err(Error::Argument(
                "grid lower, upper and resolution must have the same non-zero length".into(),
            ));
        }
        let axes = (0..d)
            .map(|i| Axis::uniform(self.lower[i], self.upper[i], self.resolution[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Grid::new(axes))
    }
}

/// Tensor grid; point index runs with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Self {
        Self { axes }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            let n = self.axes[a].len();
            idx[a] = flat % n;
            flat /= n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for (a, &i) in idx.iter().enumerate() {
            flat = flat * self.axes[a].len() + i;
        }
        flat
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.axes[a].nodes()[i])
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Product of per-axis weight vectors.
    pub fn tensor_weights(&self, per_axis: &[Vec<f64>]) -> Vec<f64> {
        (0..self.len())
            .map(|flat| {
                self.multi_index(flat)
                    .iter()
                    .enumerate()
                    .map(|(a, &i)| per_axis[a][i])
                    .product()
            })
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        let per: Vec<Vec<f64>> = self.axes.iter().map(Axis::weights).collect();
        self.tensor_weights(&per)
    }

    /// Trapezoid weights restricted to the box `[lower, upper]`.
    pub fn weights_in_box(&self, lower: &[f64], upper: &[f64]) -> Vec<f64> {
        let per: Vec<Vec<f64>> = self
            .axes
            .iter()
            .enumerate()
            .map(|(a, ax)| ax.weights_between(lower[a], upper[a]))
            .collect();
        self.tensor_weights(&per)
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .any(|(a, &i)| i == 0 || i + 1 == self.axes[a].len())
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::lo).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::hi).collect()
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::min_spacing).fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = GridSpec {
            lower: vec![0.0, -1.0],
            upper: vec![2.0, 1.0],
            resolution: vec![5, 9],
        }
        .build()
        .unwrap();
        let w = g.weights();
        let s: f64 = (0..g.len()).map(|i| {
            let p = g.point(i);
            w[i] * (1.0 + p[0] + 3.0 * p[1])
        }).sum();
        assert!((s - 8.0).abs() < 1e-13);
    }

    #[test]
    fn sub_box_weights() {
        let a = Axis::uniform(-2.0, 2.0, 9).unwrap();
        let w = a.weights_between(-1.0, 1.0);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[2], 0.25);
    }

    #[test]
    fn index_roundtrip() {
        let g = GridSpec::cube(2, 1.0, 4).build().unwrap();
        for f in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(f)), f);
        }
        let p = g.point(1);
        assert_eq!(p[0], -1.0);
        assert!((p[1] + 1.0 / 3.0).abs() <= 1e-15);
        assert!(g.is_boundary(0) && !g.is_boundary(5));
    }

    #[test]
    fn geometric_axis() {
        let a = Axis::geometric(1e-4, 1.0, 5).unwrap();
        assert_eq!(a.nodes()[0], 1e-4);
        assert!((a.nodes()[2] - 1e-2).abs() < 1e-15);
        assert!(Axis::geometric(0.0, 1.0, 5).is_err());
        assert!(Axis::uniform(1.0, 0.0, 5).is_err());
        assert!(Axis::from_nodes(vec![0.0, 0.0, 1.0]).is_err());
    }
}
