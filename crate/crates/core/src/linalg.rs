//! Sparse and banded linear algebra used by the operator and the solvers.

use crate::exec::Execution;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(column, value)` lists; duplicate columns are summed
    /// and entries are sorted by column.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                debug_assert!(c < cols);
                if last == Some(c) {
                    *data.last_mut().expect("entry") += v;
                } else {
                    indices.push(c);
                    data.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|e| e.0 == c).map_or(0.0, |e| e.1)
    }

    /// `AᵀA` in banded form.
    pub fn gram(&self) -> BandedSpd {
        let bw = (0..self.rows)
            .filter(|&r| self.indptr[r + 1] > self.indptr[r])
            .map(|r| self.indices[self.indptr[r + 1] - 1] - self.indices[self.indptr[r]])
            .max()
            .unwrap_or(0);
        let mut g = BandedSpd::zeros(self.cols, bw);
        for r in 0..self.rows {
            for (a, va) in self.row(r) {
                for (b, vb) in self.row(r) {
                    if b <= a {
                        g.add_lower(a, b, va * vb);
                    }
                }
            }
        }
        g
    }

    pub fn mul_vec(&self, x: &[f64], exec: Execution) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        exec.map_range(self.rows, |r| self.row(r).map(|(c, v)| v * x[c]).sum())
    }

    pub fn transpose(&self) -> Csr {
        let mut rows = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                rows[c].push((r, v));
            }
        }
        Csr::from_rows(self.rows, rows)
    }

    /// Keeps the listed columns, renumbered in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Csr {
        let mut map = vec![usize::MAX; self.cols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let rows = (0..self.rows)
            .map(|r| {
                self.row(r)
                    .filter(|(c, _)| map[*c] != usize::MAX)
                    .map(|(c, v)| (map[c], v))
                    .collect()
            })
            .collect();
        Csr::from_rows(keep.len(), rows)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Csr {
        let rows = keep.iter().map(|&r| self.row(r).collect()).collect();
        Csr::from_rows(self.cols, rows)
    }

    /// Largest `|i − j|` over stored entries of a square matrix.
    pub fn bandwidth(&self) -> usize {
        (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|r| self.get(r, r)).collect()
    }

    /// Max-norm estimate of `‖A‖₂` via `sqrt(‖A‖₁‖A‖∞)`.
    pub fn norm_estimate(&self) -> f64 {
        let row_max = (0..self.rows)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut col = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                col[c] += v.abs();
            }
        }
        (row_max * col.into_iter().fold(0.0, f64::max)).sqrt()
    }
}

/// Symmetric positive definite banded matrix, lower band stored row-major.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
    factored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub row: usize,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
            factored: false,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Adds `v` to entry `(i, j)` of the lower triangle (`j ≤ i`).
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    pub fn add_diagonal(&mut self, shift: &[f64]) {
        for (i, s) in shift.iter().enumerate() {
            let k = self.slot(i, i);
            self.data[k] += s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[self.slot(i, i)]).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..i {
                let v = self.data[self.slot(i, j)];
                y[i] += v * x[j];
                y[j] += v * x[i];
            }
            y[i] += self.data[self.slot(i, i)] * x[i];
        }
        y
    }

    /// In-place Cholesky `A = LLᵀ`.
    pub fn factor(&mut self) -> Result<(), NotPositiveDefinite> {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let kl = lo.max(j.saturating_sub(self.bw));
                let mut s = self.data[self.slot(i, j)];
                if kl < j {
                    let ri = i * w + (kl + self.bw - i);
                    let rj = j * w + (kl + self.bw - j);
                    let len = j - kl;
                    let (a, b) = (&self.data[ri..ri + len], &self.data[rj..rj + len]);
                    s -= a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(NotPositiveDefinite { row: i });
                    }
                    let k = self.slot(i, i);
                    self.data[k] = s.sqrt();
                } else {
                    let d = self.data[self.slot(j, j)];
                    let k = self.slot(i, j);
                    self.data[k] = s / d;
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves with a factored matrix.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert!(self.factored, "factor() first");
        let mut y = b.to_vec();
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut s = y[i];
            for j in lo..i {
                s -= self.data[self.slot(i, j)] * y[j];
            }
            y[i] = s / self.data[self.slot(i, i)];
        }
        for i in (0..self.n).rev() {
            let v = y[i] / self.data[self.slot(i, i)];
            y[i] = v;
            let lo = i.saturating_sub(self.bw);
            for j in lo..i {
                y[j] -= self.data[self.slot(i, j)] * v;
            }
        }
        y
    }
}

/// Outcome of a conjugate gradient run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub converged: bool,
    /// Final recursive residual norm.
    pub residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator.
///
/// Stops once the residual drops below `tol` (absolute) or after `max_iter`.
pub fn pcg<A>(apply: A, diag: &[f64], b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> CgOutcome
where
    A: Fn(&[f64]) -> Vec<f64>,
{
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(diag)
            .map(|(v, d)| if *d != 0.0 { v / d } else { *v })
            .collect()
    };
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rn = dot(&r, &r).sqrt();
    for it in 0..max_iter {
        if rn <= tol {
            return CgOutcome {
                iterations: it,
                converged: true,
                residual: rn,
            };
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..x.len() {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        rn = dot(&r, &r).sqrt();
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..p.len() {
            p[k] = z[k] + beta * p[k];
        }
    }
    CgOutcome {
        iterations: max_iter,
        converged: rn <= tol,
        residual: rn,
    }
}
