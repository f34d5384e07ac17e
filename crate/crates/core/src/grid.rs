//! Truncated tensor grids.
//!
//! A [`Grid`] is a box `[min_1,max_1] x ... x [min_d,max_d]` with `n_i`
//! equispaced nodes per axis, boundary layers included. Discretized operators
//! act on the *interior* nodes only (homogeneous Dirichlet truncation), so
//! every grid-sampled vector in this crate lives on the interior node set,
//! ordered row-major lexicographically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the total node count of a grid.
pub const DEFAULT_NODE_CAP: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    /// Node count including the two boundary nodes; at least 3.
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Axis { min, max, n }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("axis {axis}: need at least 3 nodes per axis, got {n}")]
    TooFewNodes { axis: usize, n: usize },
    #[error("axis {axis}: non-positive extent [{min}, {max}]")]
    BadExtent { axis: usize, min: f64, max: f64 },
    #[error("grid has {nodes} nodes, exceeding the memory cap of {cap}")]
    MemoryCap { nodes: usize, cap: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        Self::with_cap(axes, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(axes: Vec<Axis>, cap: usize) -> Result<Self, GridError> {
        let mut nodes: usize = 1;
        for (i, ax) in axes.iter().enumerate() {
            if ax.n < 3 {
                return Err(GridError::TooFewNodes { axis: i, n: ax.n });
            }
            if !(ax.max > ax.min) || !ax.spacing().is_finite() {
                return Err(GridError::BadExtent {
                    axis: i,
                    min: ax.min,
                    max: ax.max,
                });
            }
            nodes = nodes.saturating_mul(ax.n);
        }
        if nodes > cap {
            return Err(GridError::MemoryCap { nodes, cap });
        }
        Ok(Grid { axes })
    }

    /// Uniform grid with spacing at most `target` on each axis of `bounds`.
    pub fn from_spacing(bounds: &[(f64, f64)], target: f64) -> Result<Self, GridError> {
        let axes = bounds
            .iter()
            .map(|&(min, max)| {
                let n = ((max - min) / target).ceil() as usize + 1;
                Axis::new(min, max, n.max(3))
            })
            .collect();
        Self::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing()
    }

    pub fn total_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    /// Interior nodes per axis (`n_i - 2`).
    pub fn interior_shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n - 2).collect()
    }

    pub fn interior_len(&self) -> usize {
        self.axes.iter().map(|a| a.n - 2).product()
    }

    /// Row-major strides over the interior index space.
    pub fn interior_strides(&self) -> Vec<usize> {
        let shape = self.interior_shape();
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        strides
    }

    /// Coordinate of the interior node with per-axis offsets `multi`
    /// (offset 0 is the first node *inside* the boundary).
    pub fn interior_coord(&self, multi: &[usize], out: &mut [f64]) {
        for (i, (&k, ax)) in multi.iter().zip(&self.axes).enumerate() {
            out[i] = ax.min + (k + 1) as f64 * ax.spacing();
        }
    }

    pub fn interior_multi(&self, mut idx: usize, out: &mut [usize]) {
        let shape = self.interior_shape();
        for i in (0..shape.len()).rev() {
            out[i] = idx % shape[i];
            idx /= shape[i];
        }
    }

    /// Interior node nearest to `x`, if `x` lies inside the open box.
    pub fn nearest_interior_node(&self, x: &[f64]) -> Option<usize> {
        let strides = self.interior_strides();
        let mut idx = 0usize;
        for (i, ax) in self.axes.iter().enumerate() {
            if x[i] <= ax.min || x[i] >= ax.max {
                return None;
            }
            let k = ((x[i] - ax.min) / ax.spacing()).round() as isize - 1;
            let k = k.clamp(0, (ax.n - 3) as isize) as usize;
            idx += k * strides[i];
        }
        Some(idx)
    }

    /// Sample `f` on every interior node, row-major.
    pub fn sample_interior(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let len = self.interior_len();
        let dim = self.dim();
        let shape = self.interior_shape();
        let mut multi = vec![0usize; dim];
        let mut x = vec![0.0; dim];
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            self.interior_coord(&multi, &mut x);
            out.push(f(&x));
            for i in (0..dim).rev() {
                multi[i] += 1;
                if multi[i] < shape[i] {
                    break;
                }
                multi[i] = 0;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_and_coords_are_row_major() {
        let g = Grid::new(vec![Axis::new(0.0, 4.0, 5), Axis::new(0.0, 3.0, 4)]).unwrap();
        assert_eq!(g.interior_shape(), vec![3, 2]);
        assert_eq!(g.interior_len(), 6);
        assert_eq!(g.interior_strides(), vec![2, 1]);
        let mut x = [0.0; 2];
        g.interior_coord(&[0, 0], &mut x);
        assert_eq!(x, [1.0, 1.0]);
        g.interior_coord(&[2, 1], &mut x);
        assert_eq!(x, [3.0, 2.0]);
        let mut multi = [0usize; 2];
        g.interior_multi(5, &mut multi);
        assert_eq!(multi, [2, 1]);
    }

    #[test]
    fn node_cap_enforced() {
        let err = Grid::new(vec![
            Axis::new(0.0, 1.0, 3000),
            Axis::new(0.0, 1.0, 3000),
        ])
        .unwrap_err();
        assert!(matches!(err, GridError::MemoryCap { .. }));
    }

    #[test]
    fn nearest_interior_node_rejects_outside() {
        let g = Grid::new(vec![Axis::new(-1.0, 1.0, 5)]).unwrap();
        assert_eq!(g.nearest_interior_node(&[-1.0]), None);
        assert_eq!(g.nearest_interior_node(&[0.49]), Some(2));
        assert_eq!(g.nearest_interior_node(&[0.1]), Some(1));
    }
}
