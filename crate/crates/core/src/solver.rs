//! Power-mean minimisation along an exponent schedule.
//!
//! For each `p` the solver minimises the scaled objective
//! `G̃_p(u) = mean_r (F(x_r, L_h u)/m)^p` over the free values, where `m` is
//! the current maximum of `F`. This is a monotone transform of `E_p`, so the
//! minimiser is the same, and it never overflows. The dual field
//! `f_p = (F/e_p)^{p−1} F_ξ` is extracted at each exponent.

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::Supremand;
use crate::exec::Execution;
use crate::grid::{DofField, GridError};
use crate::linalg::BandedSpd;
use crate::operator::{DiscreteOperator, LinearSolveOptions, OperatorError};
use crate::verify::{active_cv, verify_system, VerifyError, VerifyReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("Newton did not converge at p = {p} after {iterations} iterations (decrement {decrement:e})")]
    NoConvergence { p: f64, iterations: usize, decrement: f64 },
    #[error("line search stalled at p = {p}, iteration {iteration} (decrement {decrement:e})")]
    LineSearchStall { p: f64, iteration: usize, decrement: f64 },
    #[error("energy {energy:e} is at or below the degeneracy threshold {threshold:e}")]
    DegenerateEnergy { energy: f64, threshold: f64 },
    #[error("invalid exponent schedule: {0}")]
    Schedule(String),
    #[error("dual field is not finite at p = {p}")]
    NonFiniteField { p: f64 },
    #[error("continuation stopped after {} completed exponents: {cause}", rows.len())]
    Interrupted {
        rows: Vec<SolveRow>,
        cause: Box<SolverError>,
    },
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Strictly increasing exponents `≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PSchedule {
    exponents: Vec<f64>,
}

impl PSchedule {
    pub fn new(exponents: Vec<f64>) -> Result<Self, SolverError> {
        if exponents.is_empty() {
            return Err(SolverError::Schedule("no exponents".into()));
        }
        for (k, &p) in exponents.iter().enumerate() {
            if !p.is_finite() || p < 1.0 {
                return Err(SolverError::Schedule(format!(
                    "exponent {p} must be finite and at least 1"
                )));
            }
            if k > 0 && p <= exponents[k - 1] {
                return Err(SolverError::Schedule(format!(
                    "exponents must increase strictly ({} then {p})",
                    exponents[k - 1]
                )));
            }
        }
        Ok(Self { exponents })
    }

    /// `2, 4, 8, …` up to `p_max`, with `p_max` itself appended if it is not
    /// a power of two.
    pub fn geometric(p_max: f64) -> Result<Self, SolverError> {
        if !p_max.is_finite() || p_max < 1.0 {
            return Err(SolverError::Schedule(format!(
                "p_max = {p_max} must be finite and at least 1"
            )));
        }
        let mut exps = Vec::new();
        let mut p = 2.0;
        while p <= p_max {
            exps.push(p);
            p *= 2.0;
        }
        if exps.last() != Some(&p_max) {
            exps.push(p_max);
        }
        Self::new(exps)
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn p_max(&self) -> f64 {
        *self.exponents.last().unwrap()
    }
}

impl Default for PSchedule {
    fn default() -> Self {
        Self::geometric(4096.0).unwrap()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Newton stops once `λ²/(2G̃) ≤ newton_tol`, `λ` the Newton decrement.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    /// Continuation stops once `M_p − e_p < bracket_stop·(M_p + e_p)/2`.
    /// Zero runs the whole schedule.
    pub bracket_stop: f64,
    /// Active-set threshold for the verifier.
    pub theta: f64,
    /// Energies below `degenerate_ratio·F_ref` select the `L_h u = 0` branch.
    pub degenerate_ratio: f64,
    #[serde(skip)]
    pub linear: LinearSolveOptions,
    pub execution: Execution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            newton_tol: 1e-15,
            max_newton: 200,
            max_halvings: 60,
            bracket_stop: 0.01,
            theta: 0.1,
            degenerate_ratio: 1e-10,
            linear: LinearSolveOptions::default(),
            execution: Execution::default(),
        }
    }
}

/// Below this decrement the objective is too noisy for Armijo, and steps are
/// judged by the gradient norm instead.
const NOISE_FLOOR: f64 = 1e-8;
const ARMIJO: f64 = 1e-4;

/// One exponent of a continuation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRow {
    pub p: f64,
    pub e_p: f64,
    /// `max_r F(x_r, L_h u_p)`
    pub m_p: f64,
    pub iterations: usize,
    /// `‖∇G̃_p‖/(p·G̃_p)` at the returned iterate.
    pub grad_norm: f64,
    /// Coefficient of variation of `F` over the active set of `f_p`.
    pub cv_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub rows: Vec<SolveRow>,
    pub u: DofField,
    pub f: DofField,
    pub e_inf_estimate: f64,
    pub bracket_width: f64,
    /// Energy fell below the degeneracy threshold and `L_h u = 0` was solved.
    pub degenerate: bool,
    pub verify: VerifyReport,
}

impl SolveReport {
    pub fn final_row(&self) -> &SolveRow {
        self.rows.last().expect("a report has at least one row")
    }

    /// Monotonicity of `e_p` and bracket containment of the estimate, with a
    /// relative slack. Returns the violated statements.
    pub fn invariant_violations(&self, slack: f64) -> Vec<String> {
        let mut out = Vec::new();
        let tol = |v: f64| slack * v.abs().max(1.0);
        for w in self.rows.windows(2) {
            if w[1].e_p < w[0].e_p - tol(w[0].e_p) {
                out.push(format!("e_p decreases from p = {} to p = {}", w[0].p, w[1].p));
            }
        }
        let e = self.e_inf_estimate;
        for r in &self.rows {
            if r.e_p > e + tol(e) || e > r.m_p + tol(r.m_p) {
                out.push(format!(
                    "p = {}: bracket [{}, {}] does not contain the estimate {e}",
                    r.p, r.e_p, r.m_p
                ));
            }
        }
        out
    }
}

/// Result of a single-exponent minimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub u: DofField,
    pub e_p: f64,
    pub m_p: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[inline]
fn ratio_pow(v: f64, m: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if v <= 0.0 {
        0.0
    } else {
        (e * (v / m).ln()).exp()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `F(x_r, z_r)` at every row node of a compact row vector.
fn nodal_values<S: Supremand + ?Sized>(op: &DiscreteOperator, f: &S, z: &[f64], exec: Execution) -> Vec<f64> {
    let nn = op.components();
    let grid = op.grid();
    let rows = op.row_nodes();
    exec.map_range(rows.len(), |r| f.value(&grid.coords(rows[r]), &z[r * nn..(r + 1) * nn]))
}

fn power_mean(values: &[f64], p: f64) -> f64 {
    let m = values.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        return 0.0;
    }
    let mean = values.iter().map(|&v| ratio_pow(v, m, p)).sum::<f64>() / values.len() as f64;
    m * mean.powf(1.0 / p)
}

/// Discrete power mean of `F(x, L_h u)` over the row nodes.
pub fn eval_ep<S: Supremand + ?Sized>(op: &DiscreteOperator, f: &S, u: &DofField, p: f64, exec: Execution) -> f64 {
    let z = op.apply_rows(u, exec);
    power_mean(&nodal_values(op, f, &z, exec), p)
}

/// `max_r F(x_r, L_h u)`.
pub fn max_supremand<S: Supremand + ?Sized>(op: &DiscreteOperator, f: &S, u: &DofField, exec: Execution) -> f64 {
    let z = op.apply_rows(u, exec);
    nodal_values(op, f, &z, exec).into_iter().fold(0.0, f64::max)
}

/// `G̃_p(u) = mean (F/m)^p` at a fixed scale.
pub fn scaled_objective<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    u: &DofField,
    p: f64,
    m: f64,
    exec: Execution,
) -> f64 {
    let z = op.apply_rows(u, exec);
    let v = nodal_values(op, f, &z, exec);
    v.iter().map(|&x| ratio_pow(x, m, p)).sum::<f64>() / v.len() as f64
}

/// Gradient of [`scaled_objective`] with respect to the free values.
pub fn grad_gp<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    u: &DofField,
    p: f64,
    m: f64,
    exec: Execution,
) -> Vec<f64> {
    let z = op.apply_rows(u, exec);
    let model = EnergyModel::new(op, f, u, exec);
    let values = nodal_values(op, f, &z, exec);
    model.gradient(&z, &values, m, p)
}

/// Scale `max_x F(x, s·e₁)` with `s = (1 + max|clamp|)/min(extent)²`, used to
/// decide when an energy counts as zero.
pub fn reference_scale<S: Supremand + ?Sized>(op: &DiscreteOperator, f: &S, clamp: &DofField) -> f64 {
    let grid = op.grid();
    let ext = grid.extents().iter().copied().fold(f64::INFINITY, f64::min);
    let s = (1.0 + clamp.sup_norm()) / (ext * ext);
    let mut xi = vec![0.0; op.components()];
    xi[0] = s;
    op.row_nodes()
        .iter()
        .map(|&k| f.value(&grid.coords(k), &xi))
        .fold(0.0, f64::max)
}

/// Nonzero coefficients of the `N` rows of `L_F` at one row node.
struct RowBlock {
    cols: Vec<usize>,
    /// `N × cols.len()`, row-major
    coef: Vec<f64>,
}

/// The map `u_F ↦ F(x, L_F u_F + offset)` with its derivatives.
pub struct EnergyModel<'a, S: ?Sized> {
    op: &'a DiscreteOperator,
    f: &'a S,
    exec: Execution,
    coords: Vec<Vec<f64>>,
    blocks: Vec<RowBlock>,
    bandwidth: usize,
    offset: Vec<f64>,
}

impl<'a, S: Supremand + ?Sized> EnergyModel<'a, S> {
    pub fn new(op: &'a DiscreteOperator, f: &'a S, clamp: &DofField, exec: Execution) -> Self {
        let nn = op.components();
        let lf = op.free_part();
        let mut bandwidth = 0;
        let blocks: Vec<RowBlock> = (0..op.row_count())
            .map(|r| {
                let mut cols: Vec<usize> = (0..nn).flat_map(|i| lf.row(r * nn + i).map(|(c, _)| c)).collect();
                cols.sort_unstable();
                cols.dedup();
                let k = cols.len();
                let mut coef = vec![0.0; nn * k];
                for i in 0..nn {
                    for (c, v) in lf.row(r * nn + i) {
                        let a = cols.binary_search(&c).unwrap();
                        coef[i * k + a] += v;
                    }
                }
                if let (Some(lo), Some(hi)) = (cols.first(), cols.last()) {
                    bandwidth = bandwidth.max(hi - lo);
                }
                RowBlock { cols, coef }
            })
            .collect();
        let grid = op.grid();
        Self {
            op,
            f,
            exec,
            coords: op.row_nodes().iter().map(|&k| grid.coords(k)).collect(),
            blocks,
            bandwidth,
            offset: op.clamp_offset(clamp, exec),
        }
    }

    /// Compact `L_h u` for free values `uf`.
    pub fn rows(&self, uf: &[f64]) -> Vec<f64> {
        let mut z = self.op.free_part().mul_vec(uf, self.exec);
        for (a, b) in z.iter_mut().zip(&self.offset) {
            *a += b;
        }
        z
    }

    pub fn values(&self, z: &[f64]) -> Vec<f64> {
        let nn = self.op.components();
        self.exec.map_range(self.coords.len(), |r| {
            self.f.value(&self.coords[r], &z[r * nn..(r + 1) * nn])
        })
    }

    fn scaled(&self, values: &[f64], m: f64, p: f64) -> f64 {
        values.iter().map(|&v| ratio_pow(v, m, p)).sum::<f64>() / values.len() as f64
    }

    /// `∇G̃ = L_Fᵀ w`, `w_r = (p/(mR))(F/m)^{p−1} F_ξ`.
    pub fn gradient(&self, z: &[f64], values: &[f64], m: f64, p: f64) -> Vec<f64> {
        let nn = self.op.components();
        let scale = p / (m * values.len() as f64);
        let mut w = vec![0.0; z.len()];
        self.exec.for_each_chunk_mut(&mut w, nn, |r, out| {
            let c = scale * ratio_pow(values[r], m, p - 1.0);
            if c != 0.0 {
                self.f.gradient(&self.coords[r], &z[r * nn..(r + 1) * nn], out);
                out.iter_mut().for_each(|o| *o *= c);
            }
        });
        self.op.adjoint_free(&w, self.exec)
    }

    /// `∇²G̃ = L_Fᵀ D L_F` with per-row blocks
    /// `D_r = (p/(mR))[(p−1)(F/m)^{p−2} F_ξF_ξᵀ/m + (F/m)^{p−1} F_ξξ]`.
    pub fn hessian(&self, z: &[f64], values: &[f64], m: f64, p: f64) -> BandedSpd {
        let nn = self.op.components();
        let scale = p / (m * values.len() as f64);
        let local: Vec<Vec<f64>> = self.exec.map_range(self.blocks.len(), |r| {
            let blk = &self.blocks[r];
            let k = blk.cols.len();
            let v = values[r];
            let t1 = if v > 0.0 {
                scale * (p - 1.0) * ratio_pow(v, m, p - 2.0) / m
            } else {
                0.0
            };
            let t2 = scale * ratio_pow(v, m, p - 1.0);
            if t1 == 0.0 && t2 == 0.0 {
                return Vec::new();
            }
            let xi = &z[r * nn..(r + 1) * nn];
            let mut g = vec![0.0; nn];
            let mut h = vec![0.0; nn * nn];
            self.f.gradient(&self.coords[r], xi, &mut g);
            self.f.hessian(&self.coords[r], xi, &mut h);
            let mut d = vec![0.0; nn * nn];
            for i in 0..nn {
                for j in 0..nn {
                    d[i * nn + j] = t1 * g[i] * g[j] + t2 * h[i * nn + j];
                }
            }
            // Cᵀ D C
            let mut dc = vec![0.0; nn * k];
            for i in 0..nn {
                for a in 0..k {
                    dc[i * k + a] = (0..nn).map(|j| d[i * nn + j] * blk.coef[j * k + a]).sum();
                }
            }
            let mut out = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..=a {
                    out[a * k + b] = (0..nn).map(|i| blk.coef[i * k + a] * dc[i * k + b]).sum();
                }
            }
            out
        });
        let mut h = BandedSpd::zeros(self.op.free_dof_count(), self.bandwidth);
        for (blk, vals) in self.blocks.iter().zip(&local) {
            if vals.is_empty() {
                continue;
            }
            let k = blk.cols.len();
            for a in 0..k {
                for b in 0..=a {
                    // cols are sorted, so cols[a] ≥ cols[b]
                    h.add_lower(blk.cols[a], blk.cols[b], vals[a * k + b]);
                }
            }
        }
        h
    }
}

/// Factors `h + δ·I`, raising `δ` until Cholesky succeeds.
fn factor_shifted(mut h: BandedSpd) -> BandedSpd {
    let diag = h.diagonal();
    let dmax = diag.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut shift = 1e-14 * dmax;
    loop {
        let mut trial = h.clone();
        trial.add_diagonal(&vec![shift; diag.len()]);
        if trial.factor().is_ok() {
            return trial;
        }
        shift *= 100.0;
        if shift > 1e6 * dmax {
            // identity scaled to the diagonal: steepest descent
            h = BandedSpd::zeros(diag.len(), 0);
            h.add_diagonal(&vec![dmax; diag.len()]);
            h.factor().expect("positive diagonal");
            return h;
        }
    }
}

/// A convex objective in the free values, linearised about an iterate.
trait NewtonObjective {
    fn linearize(&self, x: &[f64]) -> Linearization;
    /// Value at `x`, consistent with `lin.value` (same internal scale).
    fn value_at(&self, lin: &Linearization, x: &[f64]) -> f64;
    fn gradient_at(&self, lin: &Linearization, x: &[f64]) -> Vec<f64>;
}

struct Linearization {
    scale: f64,
    value: f64,
    grad: Vec<f64>,
    dir: Vec<f64>,
}

struct NewtonOutcome {
    iterations: usize,
}

fn newton<O: NewtonObjective>(
    obj: &O,
    x: &mut Vec<f64>,
    p: f64,
    opts: &SolverOptions,
) -> Result<NewtonOutcome, SolverError> {
    let mut last_dec = f64::INFINITY;
    for it in 0..opts.max_newton {
        let lin = obj.linearize(x);
        if lin.value == 0.0 || lin.grad.is_empty() {
            return Ok(NewtonOutcome { iterations: it });
        }
        let gd = dot(&lin.grad, &lin.dir);
        let dec = -gd / (2.0 * lin.value);
        last_dec = dec;
        debug!("p = {p}: iteration {it}, decrement {dec:e}");
        if !(dec > opts.newton_tol) {
            return Ok(NewtonOutcome { iterations: it });
        }
        if dec < NOISE_FLOOR {
            // rounding in the objective is now comparable to the predicted
            // decrease; judge the full step by the gradient instead
            let trial: Vec<f64> = x.iter().zip(&lin.dir).map(|(a, d)| a + d).collect();
            let g = obj.gradient_at(&lin, &trial);
            let (g_new, g_old) = (norm(&g), norm(&lin.grad));
            if g.iter().all(|v| v.is_finite()) && g_new < g_old {
                *x = trial;
                if g_new > 0.25 * g_old {
                    return Ok(NewtonOutcome { iterations: it + 1 });
                }
                continue;
            }
            return Ok(NewtonOutcome { iterations: it });
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&lin.dir).map(|(a, d)| a + t * d).collect();
            let v = obj.value_at(&lin, &trial);
            if v.is_finite() && v <= lin.value + ARMIJO * t * gd {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some(trial) => *x = trial,
            None => {
                return Err(SolverError::LineSearchStall {
                    p,
                    iteration: it,
                    decrement: dec,
                })
            }
        }
    }
    Err(SolverError::NoConvergence {
        p,
        iterations: opts.max_newton,
        decrement: last_dec,
    })
}

struct PowerObjective<'m, 'a, S: ?Sized> {
    model: &'m EnergyModel<'a, S>,
    p: f64,
    /// maxima at or below this count as zero energy
    zero: f64,
}

impl<S: Supremand + ?Sized> NewtonObjective for PowerObjective<'_, '_, S> {
    fn linearize(&self, x: &[f64]) -> Linearization {
        let z = self.model.rows(x);
        let values = self.model.values(&z);
        let m = values.iter().copied().fold(0.0, f64::max);
        if m <= self.zero {
            return Linearization {
                scale: m,
                value: 0.0,
                grad: Vec::new(),
                dir: Vec::new(),
            };
        }
        let value = self.model.scaled(&values, m, self.p);
        let grad = self.model.gradient(&z, &values, m, self.p);
        let h = factor_shifted(self.model.hessian(&z, &values, m, self.p));
        let dir = h.solve(&grad).into_iter().map(|v| -v).collect();
        Linearization {
            scale: m,
            value,
            grad,
            dir,
        }
    }

    fn value_at(&self, lin: &Linearization, x: &[f64]) -> f64 {
        let values = self.model.values(&self.model.rows(x));
        self.model.scaled(&values, lin.scale, self.p)
    }

    fn gradient_at(&self, lin: &Linearization, x: &[f64]) -> Vec<f64> {
        let z = self.model.rows(x);
        let values = self.model.values(&z);
        self.model.gradient(&z, &values, lin.scale, self.p)
    }
}

fn degenerate_threshold<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    clamp: &DofField,
    opts: &SolverOptions,
) -> f64 {
    opts.degenerate_ratio * reference_scale(op, f, clamp)
}

/// Minimises `E_p` over fields agreeing with `clamp` on the clamped band,
/// starting from the free values of `warm_start`.
pub fn minimize_ep<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    clamp: &DofField,
    p: f64,
    warm_start: &DofField,
    opts: &SolverOptions,
) -> Result<Minimizer, SolverError> {
    clamp.check(op.grid(), op.components())?;
    warm_start.check(op.grid(), op.components())?;
    let exec = opts.execution;
    let model = EnergyModel::new(op, f, clamp, exec);
    let obj = PowerObjective {
        model: &model,
        p,
        zero: degenerate_threshold(op, f, clamp, opts),
    };
    let mut x = op.gather_free(warm_start);
    let out = newton(&obj, &mut x, p, opts)?;
    let z = model.rows(&x);
    let values = model.values(&z);
    let m = values.iter().copied().fold(0.0, f64::max);
    let grad_norm = if m > 0.0 {
        let g = model.gradient(&z, &values, m, p);
        norm(&g) / (p * model.scaled(&values, m, p))
    } else {
        0.0
    };
    Ok(Minimizer {
        u: op.compose(clamp, &x),
        e_p: power_mean(&values, p),
        m_p: m,
        iterations: out.iterations,
        grad_norm,
    })
}

/// `f_p = (F/e_p)^{p−1} F_ξ` at the row nodes, zero elsewhere.
pub fn compute_fp<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    u: &DofField,
    p: f64,
    e_p: f64,
    exec: Execution,
) -> Result<DofField, SolverError> {
    if !(e_p > 0.0) {
        return Err(SolverError::DegenerateEnergy {
            energy: e_p,
            threshold: 0.0,
        });
    }
    let nn = op.components();
    let grid = op.grid();
    let rows = op.row_nodes();
    let z = op.apply_rows(u, exec);
    let mut w = vec![0.0; z.len()];
    exec.for_each_chunk_mut(&mut w, nn, |r, out| {
        let x = grid.coords(rows[r]);
        let xi = &z[r * nn..(r + 1) * nn];
        let c = ratio_pow(f.value(&x, xi), e_p, p - 1.0);
        if c != 0.0 {
            f.gradient(&x, xi, out);
            out.iter_mut().for_each(|o| *o *= c);
        }
    });
    if w.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteField { p });
    }
    Ok(op.scatter_rows(&w))
}

/// Mean of `|f|` over the row nodes.
pub fn mean_norm(op: &DiscreteOperator, f: &DofField) -> f64 {
    let rows = op.row_nodes();
    rows.iter().map(|&k| f.norm_at(k)).sum::<f64>() / rows.len() as f64
}

/// Runs [`minimize_ep`] along `schedule` with warm starts.
///
/// Without `start` the run begins from the `p = 1` minimiser, itself reached
/// from the clamp extension. Energies below the degeneracy threshold switch
/// to solving `L_h u = 0`.
pub fn continuation_solve<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    clamp: &DofField,
    schedule: &PSchedule,
    start: Option<&DofField>,
    opts: &SolverOptions,
) -> Result<SolveReport, SolverError> {
    let exec = opts.execution;
    let threshold = degenerate_threshold(op, f, clamp, opts);
    let mut rows: Vec<SolveRow> = Vec::new();
    let interrupted = |rows: &Vec<SolveRow>, e: SolverError| SolverError::Interrupted {
        rows: rows.clone(),
        cause: Box::new(e),
    };
    let mut u = match start {
        Some(s) => s.clone(),
        None => {
            minimize_ep(op, f, clamp, 1.0, clamp, opts)
                .map_err(|e| interrupted(&rows, e))?
                .u
        }
    };
    let mut last_f = None;
    for &p in schedule.exponents() {
        let mz = minimize_ep(op, f, clamp, p, &u, opts).map_err(|e| interrupted(&rows, e))?;
        u = mz.u;
        if mz.e_p <= threshold {
            info!("p = {p}: energy {:e} below {threshold:e}, solving L u = 0", mz.e_p);
            let zero = DofField::zeros(op.grid().node_count(), op.components());
            let h = op
                .dirichlet_solve(&zero, clamp, &opts.linear, exec)
                .map_err(|e| interrupted(&rows, e.into()))?;
            let e_p = eval_ep(op, f, &h, p, exec);
            let m_p = max_supremand(op, f, &h, exec);
            rows.push(SolveRow {
                p,
                e_p,
                m_p,
                iterations: mz.iterations,
                grad_norm: 0.0,
                cv_f: 0.0,
            });
            let fz = DofField::zeros(op.grid().node_count(), op.components());
            let e_hat = 0.5 * (e_p + m_p);
            let verify = verify_system(op, f, &h, &fz, 0.0, opts.theta, exec)?;
            return Ok(SolveReport {
                rows,
                u: h,
                f: fz,
                e_inf_estimate: e_hat,
                bracket_width: m_p - e_p,
                degenerate: true,
                verify,
            });
        }
        let fp = compute_fp(op, f, &u, p, mz.e_p, exec).map_err(|e| interrupted(&rows, e))?;
        let cv_f = active_cv(op, f, &u, &fp, opts.theta, exec);
        info!(
            "p = {p}: e_p = {}, M_p = {}, {} iterations, cv = {cv_f:.4}",
            mz.e_p, mz.m_p, mz.iterations
        );
        rows.push(SolveRow {
            p,
            e_p: mz.e_p,
            m_p: mz.m_p,
            iterations: mz.iterations,
            grad_norm: mz.grad_norm,
            cv_f,
        });
        last_f = Some(fp);
        let mid = 0.5 * (mz.e_p + mz.m_p);
        if mz.m_p - mz.e_p < opts.bracket_stop * mid {
            info!(
                "bracket below {} of its midpoint, stopping at p = {p}",
                opts.bracket_stop
            );
            break;
        }
    }
    let last = rows.last().expect("schedule is nonempty").clone();
    let f_field = last_f.expect("nondegenerate rows carry a field");
    let e_hat = 0.5 * (last.e_p + last.m_p);
    let verify = verify_system(op, f, &u, &f_field, e_hat, opts.theta, exec)?;
    Ok(SolveReport {
        rows,
        u,
        f: f_field,
        e_inf_estimate: e_hat,
        bracket_width: last.m_p - last.e_p,
        degenerate: false,
        verify,
    })
}

/// `E_p(v) + ½·mean_nodes |v − target|²`.
pub fn penalized_objective<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    v: &DofField,
    target: &DofField,
    p: f64,
    exec: Execution,
) -> f64 {
    let d: f64 = v
        .values
        .iter()
        .zip(&target.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    eval_ep(op, f, v, p, exec) + 0.5 * d / op.grid().node_count() as f64
}

struct PenalizedObjective<'m, 'a, S: ?Sized> {
    model: &'m EnergyModel<'a, S>,
    p: f64,
    target: Vec<f64>,
    inv_nodes: f64,
    zero: f64,
}

impl<S: Supremand + ?Sized> PenalizedObjective<'_, '_, S> {
    fn penalty(&self, x: &[f64]) -> f64 {
        0.5 * self.inv_nodes * x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn parts(&self, x: &[f64], m: f64) -> (Vec<f64>, Vec<f64>, f64) {
        let z = self.model.rows(x);
        let values = self.model.values(&z);
        let g = self.model.scaled(&values, m, self.p);
        (z, values, g)
    }
}

impl<S: Supremand + ?Sized> NewtonObjective for PenalizedObjective<'_, '_, S> {
    fn linearize(&self, x: &[f64]) -> Linearization {
        let p = self.p;
        let z = self.model.rows(x);
        let values = self.model.values(&z);
        let m = values.iter().copied().fold(0.0, f64::max);
        let pen_grad: Vec<f64> = x
            .iter()
            .zip(&self.target)
            .map(|(a, b)| self.inv_nodes * (a - b))
            .collect();
        if m <= self.zero {
            // E_p is negligible here; only the penalty acts
            let dir: Vec<f64> = pen_grad.iter().map(|g| -g / self.inv_nodes).collect();
            return Linearization {
                scale: 0.0,
                value: self.penalty(x),
                grad: pen_grad,
                dir,
            };
        }
        let gt = self.model.scaled(&values, m, p);
        let a = self.model.gradient(&z, &values, m, p);
        let c1 = m / p * gt.powf(1.0 / p - 1.0);
        let rho = c1 * (1.0 - 1.0 / p) / gt;
        let grad: Vec<f64> = a.iter().zip(&pen_grad).map(|(a, q)| c1 * a + q).collect();
        let mut b = self.model.hessian(&z, &values, m, p);
        // B = c1·∇²G̃ + I/n, assembled in place
        let mut scaled = BandedSpd::zeros(b.size(), b.bandwidth());
        for i in 0..b.size() {
            for j in i.saturating_sub(b.bandwidth())..=i {
                let v = b.get(i, j);
                if v != 0.0 {
                    scaled.add_lower(i, j, c1 * v);
                }
            }
        }
        scaled.add_diagonal(&vec![self.inv_nodes; b.size()]);
        b = factor_shifted(scaled);
        let bg = b.solve(&grad);
        let ba = b.solve(&a);
        let denom = 1.0 - rho * dot(&a, &ba);
        let coef = rho * dot(&a, &bg) / denom;
        let dir = bg.iter().zip(&ba).map(|(u, v)| -(u + coef * v)).collect();
        Linearization {
            scale: m,
            value: m * gt.powf(1.0 / p) + self.penalty(x),
            grad,
            dir,
        }
    }

    fn value_at(&self, lin: &Linearization, x: &[f64]) -> f64 {
        if lin.scale == 0.0 {
            let z = self.model.rows(x);
            return power_mean(&self.model.values(&z), self.p) + self.penalty(x);
        }
        let (_, _, g) = self.parts(x, lin.scale);
        lin.scale * g.powf(1.0 / self.p) + self.penalty(x)
    }

    fn gradient_at(&self, lin: &Linearization, x: &[f64]) -> Vec<f64> {
        let m = if lin.scale > 0.0 { lin.scale } else { 1.0 };
        let (z, values, gt) = self.parts(x, m);
        let pen = x.iter().zip(&self.target).map(|(a, b)| self.inv_nodes * (a - b));
        if gt == 0.0 {
            return pen.collect();
        }
        let c1 = m / self.p * gt.powf(1.0 / self.p - 1.0);
        let a = self.model.gradient(&z, &values, m, self.p);
        a.iter().zip(pen).map(|(a, q)| c1 * a + q).collect()
    }
}

/// Minimises `E_p(v) + ½·mean_nodes |v − target|²` over fields sharing the
/// clamped values of `clamp`, starting from `target`.
pub fn penalized_solve<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    f: &S,
    clamp: &DofField,
    p: f64,
    target: &DofField,
    opts: &SolverOptions,
) -> Result<DofField, SolverError> {
    clamp.check(op.grid(), op.components())?;
    target.check(op.grid(), op.components())?;
    let model = EnergyModel::new(op, f, clamp, opts.execution);
    let obj = PenalizedObjective {
        model: &model,
        p,
        target: op.gather_free(target),
        inv_nodes: 1.0 / op.grid().node_count() as f64,
        zero: degenerate_threshold(op, f, clamp, opts),
    };
    let mut x = obj.target.clone();
    newton(&obj, &mut x, p, opts)?;
    Ok(op.compose(clamp, &x))
}
