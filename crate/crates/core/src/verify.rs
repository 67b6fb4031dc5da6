//! Numerical checks of the limiting system
//! `Φ(x, L u) = e∞·f/|f|`, `L f = 0` and of the structural claims around it:
//! constancy of `F`, uniqueness, absolute minimality and scale invariance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{phi, Scaled, Supremand};
use crate::exec::Execution;
use crate::grid::{DofField, GridError, SubBox};
use crate::operator::DiscreteOperator;
use crate::solver::{continuation_solve, PSchedule, SolveReport, SolverError, SolverOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("dual field vanishes identically while the energy estimate is {e_hat}")]
    DegenerateField { e_hat: f64 },
    #[error("active-set threshold {0} must lie in (0, 1)")]
    InvalidTheta(f64),
    #[error("energy estimate {0} must be finite and nonnegative")]
    InvalidEnergy(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// `max |Φ(x, L_h u) − ê·f/|f||` over the active nodes.
    pub r_system: f64,
    /// Largest `|⟨f, L_h φ⟩|/(‖f‖·‖L_h φ‖)` over unknown-supported `φ`.
    pub r_harmonic: f64,
    /// Coefficient of variation of `F(x, L_h u)` over the active nodes.
    pub cv_f: f64,
    /// The same over every row node.
    pub cv_f_all: f64,
    pub active_fraction: f64,
    pub zero_set_fraction: f64,
    /// `max |L_h f|` on the second clamped layer, relative to
    /// `‖L_h‖_∞·max|f|`. The discrete identity does not constrain it.
    pub boundary_deviation: f64,
}

impl VerifyReport {
    pub fn is_finite(&self) -> bool {
        [
            self.r_system,
            self.r_harmonic,
            self.cv_f,
            self.cv_f_all,
            self.active_fraction,
            self.zero_set_fraction,
            self.boundary_deviation,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }
}

fn coefficient_of_variation(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt() / mean
}

/// Row nodes where `|f| > θ·max|f|`.
fn active_rows(op: &DiscreteOperator, f: &DofField, theta: f64) -> Vec<usize> {
    let rows = op.row_nodes();
    let fmax = rows.iter().map(|&k| f.norm_at(k)).fold(0.0, f64::max);
    if fmax == 0.0 {
        return Vec::new();
    }
    (0..rows.len()).filter(|&r| f.norm_at(rows[r]) > theta * fmax).collect()
}

fn row_values<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    u: &DofField,
    exec: Execution,
) -> (Vec<f64>, Vec<f64>) {
    let nn = op.components();
    let z = op.apply_rows(u, exec);
    let grid = op.grid();
    let rows = op.row_nodes();
    let vals = exec.map_range(rows.len(), |r| {
        sup.value(&grid.coords(rows[r]), &z[r * nn..(r + 1) * nn])
    });
    (z, vals)
}

/// Coefficient of variation of `F(x, L_h u)` over the active set of `f`.
pub fn active_cv<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    u: &DofField,
    f: &DofField,
    theta: f64,
    exec: Execution,
) -> f64 {
    let (_, vals) = row_values(op, sup, u, exec);
    let active = active_rows(op, f, theta);
    coefficient_of_variation(active.iter().map(|&r| vals[r]))
}

/// `‖P f‖/‖f‖` with `P` the orthogonal projection onto the range of `L_F`,
/// that is the largest cosine between `f` and any `L_h φ`.
pub fn harmonic_residual(op: &DiscreteOperator, f: &DofField, exec: Execution) -> f64 {
    let fr = op.gather_rows(f);
    let fnorm = fr.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm == 0.0 || op.free_dof_count() == 0 {
        return 0.0;
    }
    let g = op.adjoint_free(&fr, exec);
    let mut gram = op.free_part().gram();
    if gram.factor().is_err() {
        return f64::INFINITY;
    }
    let y = gram.solve(&g);
    let proj: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
    proj.max(0.0).sqrt() / fnorm
}

fn boundary_deviation(op: &DiscreteOperator, f: &DofField, exec: Execution) -> f64 {
    let grid = op.grid();
    let nn = op.components();
    let fmax = op.row_nodes().iter().map(|&k| f.norm_at(k)).fold(0.0, f64::max);
    if fmax == 0.0 {
        return 0.0;
    }
    let m = op.matrix();
    let lnorm = (0..m.rows)
        .map(|r| m.row(r).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let lf = op.apply_rows(f, exec);
    op.row_nodes()
        .iter()
        .enumerate()
        .filter(|(_, &k)| grid.layer(k) == 1)
        .map(|(r, _)| lf[r * nn..(r + 1) * nn].iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        / (lnorm * fmax)
}

/// Residuals of the limiting system for a candidate pair `(u, f)` with
/// energy `e_hat`.
pub fn verify_system<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    u: &DofField,
    f: &DofField,
    e_hat: f64,
    theta: f64,
    exec: Execution,
) -> Result<VerifyReport, VerifyError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(VerifyError::InvalidTheta(theta));
    }
    if !(e_hat >= 0.0) || !e_hat.is_finite() {
        return Err(VerifyError::InvalidEnergy(e_hat));
    }
    let nn = op.components();
    u.check(op.grid(), nn)?;
    f.check(op.grid(), nn)?;
    let grid = op.grid();
    let rows = op.row_nodes();
    let fmax = rows.iter().map(|&k| f.norm_at(k)).fold(0.0, f64::max);
    if fmax == 0.0 && e_hat > 0.0 {
        return Err(VerifyError::DegenerateField { e_hat });
    }
    let (z, vals) = row_values(op, sup, u, exec);
    let active = active_rows(op, f, theta);
    let residuals = exec.map_slice(&active, |&r| {
        let k = rows[r];
        let x = grid.coords(k);
        let ph = phi(sup, &x, &z[r * nn..(r + 1) * nn]);
        let fk = f.at(k);
        let fn_ = f.norm_at(k);
        ph.iter()
            .zip(fk)
            .map(|(a, b)| (a - e_hat * b / fn_).powi(2))
            .sum::<f64>()
            .sqrt()
    });
    let r_system = residuals.into_iter().fold(0.0, f64::max);
    let active_fraction = active.len() as f64 / rows.len() as f64;
    Ok(VerifyReport {
        r_system,
        r_harmonic: harmonic_residual(op, f, exec),
        cv_f: coefficient_of_variation(active.iter().map(|&r| vals[r])),
        cv_f_all: coefficient_of_variation(vals.iter().copied()),
        active_fraction,
        zero_set_fraction: 1.0 - active_fraction,
        boundary_deviation: boundary_deviation(op, f, exec),
    })
}

/// Number of active nodes where a scalar `Φ(x, L_h u)` and `f` have
/// opposite signs.
pub fn sign_mismatches<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    u: &DofField,
    f: &DofField,
    theta: f64,
    exec: Execution,
) -> usize {
    let (z, _) = row_values(op, sup, u, exec);
    let nn = op.components();
    let rows = op.row_nodes();
    let grid = op.grid();
    active_rows(op, f, theta)
        .into_iter()
        .filter(|&r| {
            let ph = phi(sup, &grid.coords(rows[r]), &z[r * nn..(r + 1) * nn]);
            ph.iter().zip(f.at(rows[r])).any(|(a, b)| a * b < 0.0)
        })
        .count()
}

/// Final fields of two continuation runs from different starts.
#[derive(Debug, Clone)]
pub struct UniquenessOutcome {
    pub distance: f64,
    pub first: SolveReport,
    pub second: SolveReport,
}

/// Runs [`continuation_solve`] from two starts and measures how far apart
/// the results end up.
pub fn uniqueness_check<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    clamp: &DofField,
    schedule: &PSchedule,
    start_a: &DofField,
    start_b: &DofField,
    opts: &SolverOptions,
) -> Result<UniquenessOutcome, SolverError> {
    let inner = SolverOptions {
        execution: Execution::Sequential,
        ..*opts
    };
    let (a, b) = opts.execution.join(
        || continuation_solve(op, sup, clamp, schedule, Some(start_a), &inner),
        || continuation_solve(op, sup, clamp, schedule, Some(start_b), &inner),
    );
    let (first, second) = (a?, b?);
    Ok(UniquenessOutcome {
        distance: first.u.sup_distance(&second.u),
        first,
        second,
    })
}

/// `start` plus uniform noise of the given amplitude on the unknowns.
pub fn randomized_start(op: &DiscreteOperator, start: &DofField, amplitude: f64, seed: u64) -> DofField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = start.clone();
    for &d in op.free_dofs() {
        out.values[d] += rng.random_range(-amplitude..=amplitude);
    }
    out
}

/// Tolerance on the increase of the sub-box maximum.
const SPOTCHECK_SLACK: f64 = 1e-6;

/// Perturbs `u` inside `sub` (zero on the sub-box's two outer layers) and
/// checks that the maximum of `F` over the sub-box rows never drops by more
/// than `1e-6`. Trial `t` draws from a stream seeded with `seed + t`; odd
/// trials use smooth low-mode bumps, even trials nodal noise.
#[allow(clippy::too_many_arguments)]
pub fn absolute_min_spotcheck<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    u: &DofField,
    sub: &SubBox,
    perturbations: usize,
    amplitude: f64,
    seed: u64,
    exec: Execution,
) -> Result<bool, VerifyError> {
    let grid = op.grid();
    sub.validate(grid)?;
    u.check(grid, op.components())?;
    let nn = op.components();
    let nodes: Vec<(usize, usize)> = (0..grid.node_count())
        .filter_map(|k| sub.layer(grid, k).map(|l| (k, l)))
        .collect();
    let sub_max = |v: &DofField| -> f64 {
        let (_, vals) = row_values(op, sup, v, Execution::Sequential);
        nodes
            .iter()
            .filter(|&&(_, l)| l >= 1)
            .map(|&(k, _)| vals[op.row_of(k).expect("sub-box rows are grid rows")])
            .fold(0.0, f64::max)
    };
    let base = sub_max(u);
    let dim = grid.dim();
    let violations = exec.map_range(perturbations, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let modes: Vec<[f64; 3]> = (0..nn)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut v = u.clone();
        for &(k, l) in &nodes {
            if l < 2 {
                continue;
            }
            let mi = grid.multi_index(k);
            // bump vanishing with its first difference at the sub-box edge
            let mut bump = 1.0;
            let mut s0 = 0.0;
            for a in 0..dim {
                let w = (sub.hi[a] - sub.lo[a]) as f64 - 2.0;
                let s = (mi[a] - sub.lo[a]) as f64 - 1.0;
                let st = (std::f64::consts::PI * s / w).sin();
                bump *= st * st;
                if a == 0 {
                    s0 = s / w;
                }
            }
            for c in 0..nn {
                let delta = if t % 2 == 1 {
                    let m = &modes[c];
                    bump * (m[0]
                        + m[1] * (std::f64::consts::PI * s0).cos()
                        + m[2] * (2.0 * std::f64::consts::PI * s0).cos())
                } else {
                    rng.random_range(-1.0..1.0)
                };
                v.at_mut(k)[c] += amplitude * delta;
            }
        }
        sub_max(&v) < base - SPOTCHECK_SLACK
    });
    Ok(!violations.into_iter().any(|v| v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescalingOutcome {
    pub argmin_distance: f64,
    /// `None` when the unscaled problem is degenerate.
    pub value_ratio: Option<f64>,
    pub e_base: f64,
    pub e_scaled: f64,
}

/// Solves with `F` and with `factor·F` and compares argmins and values.
pub fn rescaling_invariance_check<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    clamp: &DofField,
    schedule: &PSchedule,
    factor: f64,
    opts: &SolverOptions,
) -> Result<RescalingOutcome, SolverError> {
    let scaled = Scaled { inner: sup, factor };
    let base = continuation_solve(op, sup, clamp, schedule, None, opts)?;
    let other = continuation_solve(op, &scaled, clamp, schedule, None, opts)?;
    let (e_base, e_scaled) = (base.e_inf_estimate, other.e_inf_estimate);
    Ok(RescalingOutcome {
        argmin_distance: base.u.sup_distance(&other.u),
        value_ratio: (!base.degenerate && e_base > 0.0).then(|| e_scaled / e_base),
        e_base,
        e_scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::WeightedPowerNorm;
    use crate::grid::Grid;
    use crate::tensor::EllipticTensor;

    fn bang_bang_fields(nodes: usize) -> (DiscreteOperator, DofField, DofField) {
        let g = Grid::interval(nodes).unwrap();
        let op = DiscreteOperator::assemble(&g, &EllipticTensor::identity(1, 1), Execution::default()).unwrap();
        let u = g.sample(1, |x, o| {
            let t = x[0];
            o[0] = if t <= 0.5 {
                t - 2.0 * t * t
            } else {
                (t - 1.0) + 2.0 * (t - 1.0) * (t - 1.0)
            };
        });
        let f = g.sample(1, |x, o| o[0] = x[0] - 0.5);
        (op, u, f)
    }

    #[test]
    fn bang_bang_pair_solves_the_system() {
        let (op, u, f) = bang_bang_fields(201);
        let sup = WeightedPowerNorm::squared_euclidean(1);
        let r = verify_system(&op, &sup, &u, &f, 16.0, 0.1, Execution::default()).unwrap();
        assert!(r.is_finite());
        assert!(r.r_system <= 0.05 * 16.0, "{r:?}");
        assert!(r.cv_f <= 0.05, "{r:?}");
        assert_eq!(sign_mismatches(&op, &sup, &u, &f, 0.1, Execution::default()), 0);

        // a bump of amplitude 0.1 spoils both measures
        let mut v = u.clone();
        let g = op.grid().clone();
        for k in 0..g.node_count() {
            let t = g.coords(k)[0];
            if (0.2..=0.4).contains(&t) {
                let s = (std::f64::consts::PI * (t - 0.2) / 0.2).sin();
                v.at_mut(k)[0] += 0.1 * s * s;
            }
        }
        let q = verify_system(&op, &sup, &v, &f, 16.0, 0.1, Execution::default()).unwrap();
        assert!(q.r_system >= 10.0 * r.r_system.max(1e-3), "{q:?}");
        assert!(q.cv_f >= 10.0 * r.cv_f.max(1e-3), "{q:?}");
    }

    #[test]
    fn zero_energy_reduces_to_constancy() {
        let g = Grid::interval(21).unwrap();
        let op = DiscreteOperator::assemble(&g, &EllipticTensor::identity(1, 1), Execution::default()).unwrap();
        let u = g.sample(1, |x, o| o[0] = 1.0 + x[0]);
        let f = DofField::zeros(g.node_count(), 1);
        let sup = WeightedPowerNorm::squared_euclidean(1);
        let r = verify_system(&op, &sup, &u, &f, 0.0, 0.1, Execution::default()).unwrap();
        assert_eq!(r.r_system, 0.0);
        assert_eq!(r.active_fraction, 0.0);
        assert!(matches!(
            verify_system(&op, &sup, &u, &f, 1.0, 0.1, Execution::default()),
            Err(VerifyError::DegenerateField { .. })
        ));
        assert!(matches!(
            verify_system(&op, &sup, &u, &f, 0.0, 1.5, Execution::default()),
            Err(VerifyError::InvalidTheta(_))
        ));
    }

    #[test]
    fn harmonic_residual_separates_range_and_kernel() {
        let g = Grid::interval(41).unwrap();
        let op = DiscreteOperator::assemble(&g, &EllipticTensor::identity(1, 1), Execution::default()).unwrap();
        // affine fields on the rows are orthogonal to the range in 1D
        let f = g.sample(1, |x, o| o[0] = 2.0 * x[0] - 0.7);
        let mut f_rows = op.scatter_rows(&op.gather_rows(&f));
        assert!(harmonic_residual(&op, &f_rows, Execution::default()) < 1e-10);
        // L_h φ lies in the range
        let phi_field = op.compose(&DofField::zeros(g.node_count(), 1), &vec![1.0; op.free_dof_count()]);
        f_rows = op.apply(&phi_field, Execution::default()).unwrap();
        assert!((harmonic_residual(&op, &f_rows, Execution::default()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn spotcheck_holds_for_bang_bang_and_zero_amplitude() {
        let (op, u, _) = bang_bang_fields(101);
        let sup = WeightedPowerNorm::squared_euclidean(1);
        let sub = SubBox::centered(op.grid(), 0.5);
        assert!(absolute_min_spotcheck(&op, &sup, &u, &sub, 50, 0.01, 1, Execution::default()).unwrap());
        assert!(absolute_min_spotcheck(&op, &sup, &u, &sub, 5, 0.0, 1, Execution::default()).unwrap());
    }
}
