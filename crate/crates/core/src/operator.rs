//! The discrete operator `L_h u ≈ div(A Du)` on box grids.
//!
//! Second-order flux form. For each axis α the pure term
//! `D_α(A^{αα} D_α u)` combines forward/backward first differences with the
//! tensor sampled at the half-step midpoints `x ± h_α e_α/2`. Mixed terms
//! `D_α(A^{αβ} D_β u)`, α ≠ β, take the centred difference in α of
//! `A^{αβ}·D_β u` evaluated at the neighbours `x ± h_α e_α`, where `D_β` is
//! itself centred. The resulting matrix is symmetric on the unknowns for every
//! symmetric `A`, constant or not, and is exact on quadratics when `A` is
//! constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Execution;
use crate::grid::{DofField, Grid, GridError};
use crate::linalg::{pcg, Csr};
use crate::tensor::EllipticTensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("stencil of node {node} leaves the grid")]
    StencilOutOfDomain { node: usize },
    #[error("tensor acts on n = {tensor_dim} space dimensions, grid has {grid_dim}")]
    TensorGridMismatch { tensor_dim: usize, grid_dim: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("linear solve failed after {iterations} iterations (residual {residual:e}, target {target:e})")]
    LinearSolveFailure {
        iterations: usize,
        residual: f64,
        target: f64,
    },
}

/// Iterative solver settings for [`DiscreteOperator::dirichlet_solve`].
#[derive(Debug, Clone, Copy)]
pub struct LinearSolveOptions {
    /// CG stops once `‖r‖ ≤ tol·(1 + ‖b‖)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LinearSolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iter: 50_000,
        }
    }
}

/// Contract on the true residual of a Dirichlet solve.
pub const DIRICHLET_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: Grid,
    components: usize,
    constant_coefficients: bool,
    /// rows: row nodes × N; columns: all nodes × N
    matrix: Csr,
    row_nodes: Vec<usize>,
    free_nodes: Vec<usize>,
    free_dofs: Vec<usize>,
    clamped_dofs: Vec<usize>,
    /// `matrix` restricted to free columns, and its transpose
    free_part: Csr,
    free_part_t: Csr,
    clamped_part: Csr,
    /// position of each node in `row_nodes`, or usize::MAX
    row_of_node: Vec<usize>,
}

impl DiscreteOperator {
    pub fn assemble(grid: &Grid, tensor: &EllipticTensor, exec: Execution) -> Result<Self, OperatorError> {
        if tensor.space_dim() != grid.dim() {
            return Err(OperatorError::TensorGridMismatch {
                tensor_dim: tensor.space_dim(),
                grid_dim: grid.dim(),
            });
        }
        let nn = tensor.components();
        let n = grid.dim();
        let row_nodes = grid.row_nodes();
        let per_node: Vec<Result<Vec<SparseRow>, OperatorError>> =
            exec.map_slice(&row_nodes, |&node| node_rows(grid, tensor, node, n, nn));
        let mut rows = Vec::with_capacity(row_nodes.len() * nn);
        for r in per_node {
            rows.extend(r?);
        }
        let matrix = Csr::from_rows(grid.node_count() * nn, rows);

        let free_nodes = grid.free_nodes();
        let dofs =
            |nodes: &[usize]| -> Vec<usize> { nodes.iter().flat_map(|&k| (0..nn).map(move |c| k * nn + c)).collect() };
        let free_dofs = dofs(&free_nodes);
        let clamped_dofs = dofs(&grid.clamped_nodes());
        let free_part = matrix.select_columns(&free_dofs);
        let free_part_t = free_part.transpose();
        let clamped_part = matrix.select_columns(&clamped_dofs);
        let mut row_of_node = vec![usize::MAX; grid.node_count()];
        for (r, &k) in row_nodes.iter().enumerate() {
            row_of_node[k] = r;
        }
        Ok(Self {
            grid: grid.clone(),
            components: nn,
            constant_coefficients: tensor.is_constant(),
            matrix,
            row_nodes,
            free_nodes,
            free_dofs,
            clamped_dofs,
            free_part,
            free_part_t,
            clamped_part,
            row_of_node,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn has_constant_coefficients(&self) -> bool {
        self.constant_coefficients
    }

    pub fn matrix(&self) -> &Csr {
        &self.matrix
    }

    /// Nodes at which `L_h u` is defined.
    pub fn row_nodes(&self) -> &[usize] {
        &self.row_nodes
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn row_count(&self) -> usize {
        self.row_nodes.len()
    }

    pub fn free_dof_count(&self) -> usize {
        self.free_dofs.len()
    }

    /// Row-node position of a grid node.
    pub fn row_of(&self, node: usize) -> Option<usize> {
        let r = self.row_of_node[node];
        (r != usize::MAX).then_some(r)
    }

    /// `L_h` restricted to the unknowns, `(rows·N) × (free·N)`.
    pub fn free_part(&self) -> &Csr {
        &self.free_part
    }

    pub fn free_part_transpose(&self) -> &Csr {
        &self.free_part_t
    }

    /// Values at the free dofs of a full field.
    pub fn gather_free(&self, u: &DofField) -> Vec<f64> {
        self.free_dofs.iter().map(|&d| u.values[d]).collect()
    }

    /// `clamp` with its free dofs replaced by `free`.
    pub fn compose(&self, clamp: &DofField, free: &[f64]) -> DofField {
        let mut out = clamp.clone();
        for (&d, &v) in self.free_dofs.iter().zip(free) {
            out.values[d] = v;
        }
        out
    }

    /// `L_h` of the clamped part only: `z = L_F u_F + offset`.
    pub fn clamp_offset(&self, clamp: &DofField, exec: Execution) -> Vec<f64> {
        let uc: Vec<f64> = self.clamped_dofs.iter().map(|&d| clamp.values[d]).collect();
        self.clamped_part.mul_vec(&uc, exec)
    }

    /// Compact `L_h u` on the row nodes, `(rows·N)` values.
    pub fn apply_rows(&self, u: &DofField, exec: Execution) -> Vec<f64> {
        self.matrix.mul_vec(&u.values, exec)
    }

    /// `L_h u` as a grid field, zero on the outermost layer.
    pub fn apply(&self, u: &DofField, exec: Execution) -> Result<DofField, OperatorError> {
        u.check(&self.grid, self.components)?;
        Ok(self.scatter_rows(&self.apply_rows(u, exec)))
    }

    /// Places compact row values on the grid, zero elsewhere.
    pub fn scatter_rows(&self, rows: &[f64]) -> DofField {
        let nn = self.components;
        let mut out = DofField::zeros(self.grid.node_count(), nn);
        for (r, &k) in self.row_nodes.iter().enumerate() {
            out.at_mut(k).copy_from_slice(&rows[r * nn..(r + 1) * nn]);
        }
        out
    }

    /// Compact row values of a grid field.
    pub fn gather_rows(&self, field: &DofField) -> Vec<f64> {
        self.row_nodes
            .iter()
            .flat_map(|&k| field.at(k).iter().copied())
            .collect()
    }

    /// `L_Fᵀ g`: the action of a row field on unknown-supported test fields.
    pub fn adjoint_free(&self, g_rows: &[f64], exec: Execution) -> Vec<f64> {
        self.free_part_t.mul_vec(g_rows, exec)
    }

    /// Solves `L_h u = rhs` at the free nodes with every clamped value taken
    /// from `clamp`, by Jacobi-preconditioned CG on `−L_h`.
    pub fn dirichlet_solve(
        &self,
        rhs: &DofField,
        clamp: &DofField,
        opts: &LinearSolveOptions,
        exec: Execution,
    ) -> Result<DofField, OperatorError> {
        rhs.check(&self.grid, self.components)?;
        clamp.check(&self.grid, self.components)?;
        let nn = self.components;
        let free_rows: Vec<usize> = self
            .free_nodes
            .iter()
            .flat_map(|&k| {
                let r = self.row_of_node[k];
                (0..nn).map(move |c| r * nn + c)
            })
            .collect();
        let square = self.free_part.select_rows(&free_rows);
        let offset = self.clamp_offset(clamp, exec);
        let b: Vec<f64> = free_rows
            .iter()
            .zip(&self.free_dofs)
            .map(|(&r, &d)| -(rhs.values[d] - offset[r]))
            .collect();
        let diag: Vec<f64> = square.diagonal().iter().map(|d| -d).collect();
        let apply = |x: &[f64]| -> Vec<f64> { square.mul_vec(x, exec).into_iter().map(|v| -v).collect() };
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = self.gather_free(clamp);
        let out = pcg(apply, &diag, &b, &mut x, opts.tol * (1.0 + bnorm), opts.max_iter);
        let ax = apply(&x);
        let residual = ax.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let target = DIRICHLET_RESIDUAL * (1.0 + bnorm);
        if !(residual <= target) {
            return Err(OperatorError::LinearSolveFailure {
                iterations: out.iterations,
                residual,
                target,
            });
        }
        Ok(self.compose(clamp, &x))
    }

    /// Largest fraction, over `trials` random clamp data, of free nodes where
    /// the solution of `L_h f = 0` satisfies `|f| ≤ 1e-10·max|f|`.
    pub fn harmonic_zero_set_fraction(
        &self,
        trials: usize,
        seed: u64,
        opts: &LinearSolveOptions,
        exec: Execution,
    ) -> Result<f64, OperatorError> {
        let n_nodes = self.grid.node_count();
        let nn = self.components;
        let zero = DofField::zeros(n_nodes, nn);
        let fractions: Vec<Result<f64, OperatorError>> = exec.map_range(trials.max(1), |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let mut clamp = DofField::zeros(n_nodes, nn);
            for k in 0..n_nodes {
                if self.grid.is_clamped(k) {
                    for v in clamp.at_mut(k) {
                        *v = rng.random_range(-1.0..1.0);
                    }
                }
            }
            let f = self.dirichlet_solve(&zero, &clamp, opts, Execution::Sequential)?;
            let max = self.free_nodes.iter().map(|&k| f.norm_at(k)).fold(0.0, f64::max);
            let small = self.free_nodes.iter().filter(|&&k| f.norm_at(k) <= 1e-10 * max).count();
            Ok(small as f64 / self.free_nodes.len() as f64)
        });
        let mut worst = 0.0f64;
        for f in fractions {
            worst = worst.max(f?);
        }
        Ok(worst)
    }
}

/// `(column, value)` pairs of one matrix row.
type SparseRow = Vec<(usize, f64)>;

fn node_rows(
    grid: &Grid,
    tensor: &EllipticTensor,
    node: usize,
    n: usize,
    nn: usize,
) -> Result<Vec<SparseRow>, OperatorError> {
    let x = grid.coords(node);
    let h = grid.spacing();
    let mut rows = vec![Vec::with_capacity(9 * nn); nn];
    let mut a_plus = vec![0.0; tensor.entry_count()];
    let mut a_minus = vec![0.0; tensor.entry_count()];
    let out = || OperatorError::StencilOutOfDomain { node };
    let shifted = |axis: usize, by: f64| -> Vec<f64> {
        let mut p = x.clone();
        p[axis] += by;
        p
    };
    let neighbour = |da: isize, axis_a: usize, db: isize, axis_b: usize| -> Option<usize> {
        let mut off = [0isize; 2];
        off[axis_a] += da;
        off[axis_b] += db;
        grid.offset(node, &off[..n])
    };
    for al in 0..n {
        let h2 = h[al] * h[al];
        tensor.eval_into(&shifted(al, 0.5 * h[al]), &mut a_plus);
        tensor.eval_into(&shifted(al, -0.5 * h[al]), &mut a_minus);
        let np = neighbour(1, al, 0, al).ok_or_else(out)?;
        let nm = neighbour(-1, al, 0, al).ok_or_else(out)?;
        for (i, row) in rows.iter_mut().enumerate() {
            for j in 0..nn {
                let k = tensor.index(al, al, i, j);
                let cp = a_plus[k] / h2;
                let cm = a_minus[k] / h2;
                if cp == 0.0 && cm == 0.0 {
                    continue;
                }
                row.push((np * nn + j, cp));
                row.push((nm * nn + j, cm));
                row.push((node * nn + j, -(cp + cm)));
            }
        }
        for be in (0..n).filter(|&b| b != al) {
            let s = 1.0 / (4.0 * h[al] * h[be]);
            tensor.eval_into(&shifted(al, h[al]), &mut a_plus);
            tensor.eval_into(&shifted(al, -h[al]), &mut a_minus);
            let pp = neighbour(1, al, 1, be).ok_or_else(out)?;
            let pm = neighbour(1, al, -1, be).ok_or_else(out)?;
            let mp = neighbour(-1, al, 1, be).ok_or_else(out)?;
            let mm = neighbour(-1, al, -1, be).ok_or_else(out)?;
            for (i, row) in rows.iter_mut().enumerate() {
                for j in 0..nn {
                    let k = tensor.index(al, be, i, j);
                    let ap = a_plus[k] * s;
                    let am = a_minus[k] * s;
                    if ap == 0.0 && am == 0.0 {
                        continue;
                    }
                    row.push((pp * nn + j, ap));
                    row.push((pm * nn + j, -ap));
                    row.push((mp * nn + j, -am));
                    row.push((mm * nn + j, am));
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn assemble(grid: &Grid, a: &EllipticTensor) -> DiscreteOperator {
        DiscreteOperator::assemble(grid, a, Execution::default()).unwrap()
    }

    #[test]
    fn exact_on_quadratics_1d() {
        let g = Grid::interval(11).unwrap();
        let op = assemble(&g, &EllipticTensor::identity(1, 1));
        let u = g.sample(1, |x, o| o[0] = x[0] * x[0]);
        let lu = op.apply_rows(&u, Execution::Sequential);
        for v in lu {
            assert_relative_eq!(v, 2.0, epsilon = 1e-10);
        }
        let aff = g.sample(1, |x, o| o[0] = 3.0 - 2.0 * x[0]);
        for v in op.apply_rows(&aff, Execution::Sequential) {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn exact_on_quadratics_2d() {
        let g = Grid::square(9).unwrap();
        let op = assemble(&g, &EllipticTensor::identity(2, 1));
        let u = g.sample(1, |x, o| o[0] = x[0] * x[0] + x[1] * x[1]);
        for v in op.apply_rows(&u, Execution::Sequential) {
            assert_relative_eq!(v, 4.0, epsilon = 1e-10);
        }
        // full constant tensor against the continuum value on vector quadratics
        let a = EllipticTensor::block_diagonal(
            &[vec![0.6, 0.8], vec![-0.8, 0.6]],
            &[vec![2.0, 0.5, 0.5, 1.0], vec![1.0, -0.3, -0.3, 3.0]],
        )
        .unwrap();
        let op = assemble(&g, &a);
        // u¹ = x² + 3xy, u² = −y² + xy − x
        let u = g.sample(2, |x, o| {
            o[0] = x[0] * x[0] + 3.0 * x[0] * x[1];
            o[1] = -x[1] * x[1] + x[0] * x[1] - x[0];
        });
        // D²u¹ = [[2, 3], [3, 0]], D²u² = [[0, 1], [1, −2]]
        let d2 = [[[2.0, 3.0], [3.0, 0.0]], [[0.0, 1.0], [1.0, -2.0]]];
        let e = a.eval(&[0.0, 0.0]);
        let mut want = [0.0; 2];
        for (i, w) in want.iter_mut().enumerate() {
            for al in 0..2 {
                for be in 0..2 {
                    for j in 0..2 {
                        *w += e[a.index(al, be, i, j)] * d2[j][al][be];
                    }
                }
            }
        }
        let lu = op.apply_rows(&u, Execution::Sequential);
        for r in 0..op.row_count() {
            for i in 0..2 {
                assert!((lu[2 * r + i] - want[i]).abs() <= 1e-12 * 64.0 * 10.0);
            }
        }
    }

    fn free_block(op: &DiscreteOperator) -> Csr {
        let nn = op.components();
        let rows: Vec<usize> = op
            .free_nodes()
            .iter()
            .flat_map(|&k| {
                let r = op.row_of(k).unwrap();
                (0..nn).map(move |c| r * nn + c)
            })
            .collect();
        op.free_part().select_rows(&rows)
    }

    #[test]
    fn symmetric_for_constant_and_variable_tensors() {
        let g = Grid::square(8).unwrap();
        let tensors = [
            EllipticTensor::det_coupled(3.0),
            EllipticTensor::isotropic_field(2, 2, |x| 1.0 + x[0] * x[1] + 0.5 * x[0], 1.0),
            EllipticTensor::field(
                2,
                2,
                |x, out| {
                    let base = EllipticTensor::det_coupled(0.5 + x[0]).eval(x);
                    out.copy_from_slice(&base);
                    out[0] += x[1];
                },
                0.5,
            ),
        ];
        for a in &tensors {
            let op = assemble(&g, a);
            let m = free_block(&op);
            let t = m.transpose();
            for r in 0..m.rows {
                for (c, v) in m.row(r) {
                    assert!((v - t.get(r, c)).abs() <= 1e-14 * v.abs().max(1.0), "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn linearity() {
        let g = Grid::square(7).unwrap();
        let op = assemble(&g, &EllipticTensor::det_coupled(1.0));
        let u = g.sample(2, |x, o| {
            o[0] = (3.0 * x[0]).sin();
            o[1] = x[1].exp();
        });
        let v = g.sample(2, |x, o| {
            o[0] = x[0] * x[1];
            o[1] = (x[0] - x[1]).cos();
        });
        let mut w = u.clone();
        w.axpy(1.0, &v);
        let (lu, lv, lw) = (
            op.apply_rows(&u, Execution::Sequential),
            op.apply_rows(&v, Execution::Sequential),
            op.apply_rows(&w, Execution::Sequential),
        );
        for k in 0..lw.len() {
            assert!((lw[k] - lu[k] - lv[k]).abs() <= 1e-14 * 36.0 * 8.0);
        }
        let zero = DofField::zeros(g.node_count(), 2);
        assert!(op.apply_rows(&zero, Execution::Sequential).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dirichlet_recovers_affine_and_manufactured() {
        let g = Grid::square(13).unwrap();
        let op = assemble(&g, &EllipticTensor::identity(2, 1));
        let opts = LinearSolveOptions::default();
        let aff = g.sample(1, |x, o| o[0] = 1.0 + 2.0 * x[0] - x[1]);
        let mut clamp = aff.clone();
        for &k in op.free_nodes() {
            clamp.at_mut(k)[0] = 0.0;
        }
        let zero = DofField::zeros(g.node_count(), 1);
        let u = op.dirichlet_solve(&zero, &clamp, &opts, Execution::default()).unwrap();
        assert!(u.sup_distance(&aff) < 1e-11);

        let star = g.sample(1, |x, o| o[0] = (3.0 * x[0]).sin() * (2.0 * x[1]).cos());
        let rhs = op.apply(&star, Execution::default()).unwrap();
        let u = op.dirichlet_solve(&rhs, &star, &opts, Execution::default()).unwrap();
        assert!(u.sup_distance(&star) < 1e-9);
    }

    #[test]
    fn error_on_mismatched_tensor() {
        let g = Grid::interval(9).unwrap();
        assert!(matches!(
            DiscreteOperator::assemble(&g, &EllipticTensor::identity(2, 1), Execution::default()),
            Err(OperatorError::TensorGridMismatch { .. })
        ));
    }
}
