use serde::Serialize;

use crate::error::{invalid, Error, Result};

pub type CellId = usize;

#[derive(Clone, Debug, PartialEq, Serialize)]
enum Node {
    Split {
        dim: usize,
        threshold: f64,
        /// Child for `x[dim] < threshold`.
        low: usize,
        high: usize,
    },
    Leaf(CellId),
}

/// Axis-aligned decision tree over ℝ^d. Every vector falls into exactly one
/// leaf; leaves are numbered cells, and a refinement keeps every existing
/// cell id except that the refined cell also gains a new sibling id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partitioning {
    dim: usize,
    nodes: Vec<Node>,
    /// Node index of each cell's leaf.
    leaves: Vec<usize>,
}

/// Threshold strictly separating `a` and `b` (which must differ): the
/// midpoint, nudged to the larger value when rounding collapses it onto the
/// smaller one.
fn separating_threshold(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

impl Partitioning {
    /// A single cell covering everything.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            nodes: vec![Node::Leaf(0)],
            leaves: vec![0],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_cells(&self) -> usize {
        self.leaves.len()
    }

    pub fn cell_of(&self, v: &[f64]) -> CellId {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                Node::Leaf(c) => return c,
                Node::Split { dim, threshold, low, high } => {
                    node = if v[dim] < threshold { low } else { high };
                }
            }
        }
    }

    fn check_dims(&self, vs: &[&[f64]]) -> Result<()> {
        if vs.iter().any(|v| v.len() != self.dim) {
            return Err(invalid(format!("vectors must have dimension {}", self.dim)));
        }
        Ok(())
    }

    /// Replaces the leaf of `cell` by a complete tree of splits, one level
    /// per entry of `dims`, and returns the leaf count added.
    fn expand(&mut self, cell: CellId, dims: &[(usize, f64)]) -> usize {
        let root = self.leaves[cell];
        let mut frontier = vec![root];
        let mut fresh_cells = Vec::new();
        for &(dim, threshold) in dims {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for node in frontier {
                let Node::Leaf(c) = self.nodes[node] else { unreachable!("frontier holds leaves") };
                let low = self.nodes.len();
                self.nodes.push(Node::Leaf(c));
                self.leaves[c] = low;
                let high = self.nodes.len();
                let new_cell = self.leaves.len();
                self.nodes.push(Node::Leaf(new_cell));
                self.leaves.push(high);
                fresh_cells.push(new_cell);
                self.nodes[node] = Node::Split { dim, threshold, low, high };
                next.push(low);
                next.push(high);
            }
            frontier = next;
        }
        fresh_cells.len()
    }

    /// Splits the cell holding `v1` and `v2` along the `depth` dimensions
    /// where they differ most (fewer if they differ in fewer dimensions), each
    /// at the midpoint, giving up to `2^depth` cells in its place.
    pub fn initial_split(&mut self, v1: &[f64], v2: &[f64], depth: usize) -> Result<()> {
        self.check_dims(&[v1, v2])?;
        if depth == 0 {
            return Err(invalid("split depth must be at least 1"));
        }
        let cell = self.cell_of(v1);
        if self.cell_of(v2) != cell {
            return Err(Error::ContractViolation("vectors are already in different cells".into()));
        }
        let mut dims: Vec<usize> = (0..self.dim).filter(|&i| v1[i] != v2[i]).collect();
        if dims.is_empty() {
            return Err(Error::RefinementImpossible("identical vectors cannot be split".into()));
        }
        // largest difference first; ties by dimension index
        dims.sort_by(|&a, &b| (v1[b] - v2[b]).abs().total_cmp(&(v1[a] - v2[a]).abs()).then(a.cmp(&b)));
        dims.truncate(depth);
        let splits: Vec<(usize, f64)> = dims.iter().map(|&i| (i, separating_threshold(v1[i], v2[i]))).collect();
        self.expand(cell, &splits);
        Ok(())
    }

    /// Splits `cell` once, on the dimension of largest difference between
    /// two vectors it contains, so that they end up in different cells.
    pub fn refine(&mut self, cell: CellId, v1: &[f64], v2: &[f64]) -> Result<()> {
        self.check_dims(&[v1, v2])?;
        if cell >= self.num_cells() || self.cell_of(v1) != cell || self.cell_of(v2) != cell {
            return Err(Error::ContractViolation(format!("both vectors must lie in cell {cell}")));
        }
        let best = (0..self.dim)
            .filter(|&i| v1[i] != v2[i])
            .max_by(|&a, &b| (v1[a] - v2[a]).abs().total_cmp(&(v1[b] - v2[b]).abs()).then(b.cmp(&a)))
            .ok_or_else(|| Error::RefinementImpossible("identical vectors cannot be split".into()))?;
        self.expand(cell, &[(best, separating_threshold(v1[best], v2[best]))]);
        Ok(())
    }
}
