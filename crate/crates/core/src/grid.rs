//! Time and space meshes shared by the solvers.

use crate::error::{Error, Result};

/// Strictly increasing time nodes `t_0 = 0 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("need at least two time nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first node must be 0, got {}", nodes[0])));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite node".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    /// `n` equal steps on `[0, horizon]`; the last node is exactly `horizon`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("uniform grid needs n >= 1 and T > 0 (n={n}, T={horizon})")));
        }
        let mut nodes: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        nodes[n] = horizon;
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of intervals.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Largest step, written ‖Π‖ for partitions.
    pub fn mesh(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn t(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    /// Index `k` with `t_k <= s < t_{k+1}`, clamped so that `s = T` maps to the last interval.
    pub fn interval_index(&self, s: f64) -> usize {
        let n = self.steps();
        if s <= self.nodes[0] {
            return 0;
        }
        if s >= self.nodes[n] {
            return n - 1;
        }
        // partition_point gives the first node > s
        let k = self.nodes.partition_point(|&v| v <= s);
        (k - 1).min(n - 1)
    }

    /// Left endpoint of the interval containing `s`; the last interval is closed at `T`.
    pub fn partition_clock(&self, s: f64) -> f64 {
        self.nodes[self.interval_index(s)]
    }

    /// Index of a node equal to `s` up to a relative tolerance.
    pub fn find_node(&self, s: f64) -> Option<usize> {
        let tol = 1e-12 * (1.0 + self.horizon().abs());
        let k = self.nodes.partition_point(|&v| v < s - tol);
        (k < self.nodes.len() && (self.nodes[k] - s).abs() <= tol).then_some(k)
    }

    /// Refine every interval into `factor` equal pieces.
    pub fn refine(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let mut nodes = Vec::with_capacity(self.steps() * factor + 1);
        for w in self.nodes.windows(2) {
            for q in 0..factor {
                nodes.push(w[0] + (w[1] - w[0]) * q as f64 / factor as f64);
            }
        }
        nodes.push(self.horizon());
        Self { nodes }
    }

    /// Whether every node of `self` is also a node of `fine`.
    pub fn is_subset_of(&self, fine: &TimeGrid) -> bool {
        self.nodes.iter().all(|&s| fine.find_node(s).is_some())
    }
}

/// The set `{(τ_i, t_j) : i <= j}` over a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularGrid {
    pub time: TimeGrid,
}

impl TriangularGrid {
    pub fn new(time: TimeGrid) -> Self {
        Self { time }
    }

    /// Number of admissible `(i, j)` pairs.
    pub fn pairs(&self) -> usize {
        let n = self.time.len();
        n * (n + 1) / 2
    }

    /// Flat offset of `(i, j)` in row-major order over rows `i`, columns `j >= i`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && j < self.time.len());
        let n = self.time.len();
        i * n - i * i.saturating_sub(1) / 2 + (j - i)
    }
}

/// Uniform mesh on `[x_min, x_max]` with `M + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid1D {
    x_min: f64,
    x_max: f64,
    m: usize,
}

impl SpatialGrid1D {
    pub fn new(x_min: f64, x_max: f64, m: usize) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidGrid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if m < 16 {
            return Err(Error::InvalidGrid(format!("need M >= 16 spatial intervals, got {m}")));
        }
        Ok(Self { x_min, x_max, m })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// Number of intervals `M`.
    pub fn intervals(&self) -> usize {
        self.m
    }

    /// Number of nodes `M + 1`.
    pub fn len(&self) -> usize {
        self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        (self.x_max - self.x_min) / self.m as f64
    }

    pub fn x(&self, k: usize) -> f64 {
        if k == self.m {
            self.x_max
        } else {
            self.x_min + self.h() * k as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.m).map(|k| self.x(k)).collect()
    }

    /// Cell index and weight for linear interpolation, clamped to the box.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let xc = x.clamp(self.x_min, self.x_max);
        let s = (xc - self.x_min) / self.h();
        let k = (s.floor() as usize).min(self.m - 1);
        (k, (s - k as f64).clamp(0.0, 1.0))
    }

    /// Piecewise-linear interpolation of nodal values, clamped to the box.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (k, w) = self.locate(x);
        values[k] * (1.0 - w) + values[k + 1] * w
    }
}
