//! Binary cumulative-sum tree over event weights.
//!
//! Supports O(log n) weight updates and O(log n) proportional selection;
//! the event engine keeps one leaf per bond. Internal nodes are always
//! recomputed as the sum of their children, so the root never drifts from
//! the leaf sum by more than accumulated rounding.

#[derive(Debug, Clone)]
pub struct SumTree {
    /// Number of leaves (events).
    n: usize,
    /// Power-of-two leaf capacity.
    cap: usize,
    /// Heap layout: `node[1]` is the root, leaves start at `cap`.
    node: Vec<f64>,
}

impl SumTree {
    pub fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let cap = n.next_power_of_two().max(1);
        let mut node = vec![0.0; 2 * cap];
        node[cap..cap + n].copy_from_slice(weights);
        for i in (1..cap).rev() {
            node[i] = node[2 * i] + node[2 * i + 1];
        }
        Self { n, cap, node }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.node[self.cap + i]
    }

    pub fn total(&self) -> f64 {
        self.node[1]
    }

    pub fn update(&mut self, i: usize, w: f64) {
        debug_assert!(w >= 0.0, "negative event weight {w}");
        let mut idx = self.cap + i;
        self.node[idx] = w;
        while idx > 1 {
            idx /= 2;
            self.node[idx] = self.node[2 * idx] + self.node[2 * idx + 1];
        }
    }

    /// Rebuilds every leaf from `weights` in one pass.
    pub fn rebuild(&mut self, weights: &[f64]) {
        assert_eq!(weights.len(), self.n);
        self.node[self.cap..self.cap + self.n].copy_from_slice(weights);
        for i in (1..self.cap).rev() {
            self.node[i] = self.node[2 * i] + self.node[2 * i + 1];
        }
    }

    /// Index of the leaf containing cumulative weight `x` in `[0, total)`.
    pub fn select(&self, x: f64) -> usize {
        let mut x = x.clamp(0.0, self.total());
        let mut idx = 1;
        while idx < self.cap {
            let left = self.node[2 * idx];
            if x < left {
                idx = 2 * idx;
            } else {
                x -= left;
                idx = 2 * idx + 1;
            }
        }
        (idx - self.cap).min(self.n.saturating_sub(1))
    }

    /// Linear-scan selection; oracle cross-check for [`select`](Self::select).
    pub fn select_linear(&self, x: f64) -> usize {
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.node[self.cap + i];
            if x < acc {
                return i;
            }
        }
        self.n.saturating_sub(1)
    }

    /// Freshly recomputed leaf sum, for drift checks against `total()`.
    pub fn recompute_total(&self) -> f64 {
        self.node[self.cap..self.cap + self.n].iter().sum()
    }
}
