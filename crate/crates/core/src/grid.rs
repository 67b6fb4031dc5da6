//! Uniform box grids and per-node vector fields.
//!
//! A node's *layer* is its index distance to the nearest face of the box.
//! Layers 0 and 1 form the clamped band that encodes value and first
//! derivative boundary data. The discrete operator is evaluated on every node
//! of layer ≥ 1 (its stencil stays inside the box); the unknowns are the nodes
//! of layer ≥ 2.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid dimension must be 1 or 2 (got {0})")]
    Dimension(usize),
    #[error("axis {axis}: need at least 5 nodes (got {nodes})")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("axis {axis}: extent must be positive and finite (got {extent})")]
    Extent { axis: usize, extent: f64 },
    #[error("field has {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sub-box {0}")]
    SubBox(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    nodes: Vec<usize>,
    extents: Vec<f64>,
    spacing: Vec<f64>,
}

/// Node classification with respect to the clamped band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Outermost layer: clamped, no operator row.
    Boundary,
    /// Second layer: clamped, carries an operator row.
    ClampRow,
    /// Unknown; carries an operator row.
    Free,
}

impl Grid {
    /// Box `[0, extents[0]] × …` with `nodes[a]` equispaced nodes on axis `a`.
    pub fn new(nodes: Vec<usize>, extents: Vec<f64>) -> Result<Self, GridError> {
        if nodes.is_empty() || nodes.len() > 2 {
            return Err(GridError::Dimension(nodes.len()));
        }
        if extents.len() != nodes.len() {
            return Err(GridError::Dimension(extents.len()));
        }
        for (axis, (&n, &e)) in nodes.iter().zip(&extents).enumerate() {
            if n < 5 {
                return Err(GridError::TooFewNodes { axis, nodes: n });
            }
            if !(e > 0.0) || !e.is_finite() {
                return Err(GridError::Extent { axis, extent: e });
            }
        }
        let spacing = nodes.iter().zip(&extents).map(|(&n, &e)| e / (n - 1) as f64).collect();
        Ok(Self {
            nodes,
            extents,
            spacing,
        })
    }

    /// Unit interval with `nodes` nodes.
    pub fn interval(nodes: usize) -> Result<Self, GridError> {
        Self::new(vec![nodes], vec![1.0])
    }

    /// Unit square with `nodes × nodes` nodes.
    pub fn square(nodes: usize) -> Result<Self, GridError> {
        Self::new(vec![nodes, nodes], vec![1.0, 1.0])
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Quadrature weight of one node, `Π h_a`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Linear index → multi-index (axis 0 fastest).
    pub fn multi_index(&self, node: usize) -> [usize; 2] {
        let mut out = [0; 2];
        let mut rest = node;
        for (a, &n) in self.nodes.iter().enumerate() {
            out[a] = rest % n;
            rest /= n;
        }
        out
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        let mut stride = 1;
        for (a, &n) in self.nodes.iter().enumerate() {
            lin += idx[a] * stride;
            stride *= n;
        }
        lin
    }

    /// Neighbour `node + offset` (offset per axis), if inside the box.
    pub fn offset(&self, node: usize, offset: &[isize]) -> Option<usize> {
        let mi = self.multi_index(node);
        let mut idx = [0usize; 2];
        for a in 0..self.dim() {
            let v = mi[a] as isize + offset[a];
            if v < 0 || v >= self.nodes[a] as isize {
                return None;
            }
            idx[a] = v as usize;
        }
        Some(self.linear_index(&idx[..self.dim()]))
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mi = self.multi_index(node);
        (0..self.dim()).map(|a| mi[a] as f64 * self.spacing[a]).collect()
    }

    pub fn layer(&self, node: usize) -> usize {
        let mi = self.multi_index(node);
        (0..self.dim())
            .map(|a| mi[a].min(self.nodes[a] - 1 - mi[a]))
            .min()
            .unwrap_or(0)
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        match self.layer(node) {
            0 => NodeKind::Boundary,
            1 => NodeKind::ClampRow,
            _ => NodeKind::Free,
        }
    }

    pub fn is_clamped(&self, node: usize) -> bool {
        self.layer(node) <= 1
    }

    /// Nodes carrying an operator row (layer ≥ 1), in increasing order.
    pub fn row_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&k| self.layer(k) >= 1).collect()
    }

    /// Unknown nodes (layer ≥ 2), in increasing order.
    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&k| self.layer(k) >= 2).collect()
    }

    pub fn clamped_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&k| self.layer(k) <= 1).collect()
    }

    /// Samples a function of position on every node.
    pub fn sample<F>(&self, components: usize, f: F) -> DofField
    where
        F: Fn(&[f64], &mut [f64]),
    {
        let mut values = vec![0.0; self.node_count() * components];
        for (k, chunk) in values.chunks_mut(components).enumerate() {
            f(&self.coords(k), chunk);
        }
        DofField { components, values }
    }
}

/// An index sub-box `lo..=hi` (per axis) of a grid, with its own layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubBox {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl SubBox {
    pub fn validate(&self, grid: &Grid) -> Result<(), GridError> {
        if self.lo.len() != grid.dim() || self.hi.len() != grid.dim() {
            return Err(GridError::SubBox("dimension mismatch".into()));
        }
        for a in 0..grid.dim() {
            if self.hi[a] >= grid.nodes_per_axis()[a] || self.hi[a] < self.lo[a] + 4 {
                return Err(GridError::SubBox(format!(
                    "axis {a}: range {}..={} must hold 5 nodes inside the grid",
                    self.lo[a], self.hi[a]
                )));
            }
        }
        Ok(())
    }

    /// Centred sub-box covering roughly `fraction` of each axis.
    pub fn centered(grid: &Grid, fraction: f64) -> Self {
        let (lo, hi) = grid
            .nodes_per_axis()
            .iter()
            .map(|&n| {
                let width = (((n - 1) as f64 * fraction).round() as usize).clamp(4, n - 1);
                let lo = (n - 1 - width) / 2;
                (lo, lo + width)
            })
            .unzip();
        Self { lo, hi }
    }

    /// Layer of a grid node relative to this box; `None` outside it.
    pub fn layer(&self, grid: &Grid, node: usize) -> Option<usize> {
        let mi = grid.multi_index(node);
        let mut layer = usize::MAX;
        for a in 0..grid.dim() {
            if mi[a] < self.lo[a] || mi[a] > self.hi[a] {
                return None;
            }
            layer = layer.min((mi[a] - self.lo[a]).min(self.hi[a] - mi[a]));
        }
        Some(layer)
    }
}

/// Per-node values in `R^N`, node-major (`values[node·N + c]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofField {
    pub components: usize,
    pub values: Vec<f64>,
}

impl DofField {
    pub fn zeros(nodes: usize, components: usize) -> Self {
        Self {
            components,
            values: vec![0.0; nodes * components],
        }
    }

    pub fn node_count(&self) -> usize {
        self.values.len() / self.components
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.values[node * self.components..(node + 1) * self.components]
    }

    pub fn at_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.values[node * self.components..(node + 1) * self.components]
    }

    pub fn norm_at(&self, node: usize) -> f64 {
        self.at(node).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check(&self, grid: &Grid, components: usize) -> Result<(), GridError> {
        let expected = grid.node_count() * components;
        if self.components != components || self.values.len() != expected {
            return Err(GridError::DimensionMismatch {
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `max_k |self_k − other_k|` over all entries.
    pub fn sup_distance(&self, other: &DofField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn axpy(&mut self, a: f64, x: &DofField) {
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }
}
