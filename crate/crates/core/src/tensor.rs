//! Symmetric 4-tensor fields `A^{αβ}_{ij}(x)` and ellipticity checks.
//!
//! Entries are stored with spatial indices outermost:
//! `A[((α·n + β)·N + i)·N + j]`. Acting on `X ∈ R^{N×n}` the tensor defines
//! the quadratic form `AX:X = A^{αβ}_{ij} X^i_α X^j_β`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("tensor is not symmetric at x = {x:?} (deviation {deviation:e})")]
    AsymmetricTensor { x: Vec<f64>, deviation: f64 },
    #[error("Legendre-Hadamard ellipticity needs a constant-coefficient tensor")]
    NotConstant,
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

/// Which ellipticity hypothesis the tensor is declared to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ellipticity {
    /// `AX:X ≥ λ|X|²` for all `X`; coefficients may vary in `x`.
    Legendre,
    /// `A(ξ⊗η):(ξ⊗η) ≥ λ|ξ|²|η|²`; coefficients must be constant.
    LegendreHadamard,
}

type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Entries {
    Constant(Vec<f64>),
    Field(Arc<FieldFn>),
}

#[derive(Clone)]
pub struct EllipticTensor {
    space_dim: usize,
    components: usize,
    entries: Entries,
    mode: Ellipticity,
    lambda_declared: f64,
}

impl fmt::Debug for EllipticTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EllipticTensor")
            .field("space_dim", &self.space_dim)
            .field("components", &self.components)
            .field("constant", &self.is_constant())
            .field("mode", &self.mode)
            .field("lambda_declared", &self.lambda_declared)
            .finish()
    }
}

impl EllipticTensor {
    /// Constant tensor from raw entries in the crate's index layout.
    pub fn constant(
        space_dim: usize,
        components: usize,
        entries: Vec<f64>,
        mode: Ellipticity,
        lambda_declared: f64,
    ) -> Result<Self, TensorError> {
        let len = space_dim * space_dim * components * components;
        if entries.len() != len {
            return Err(TensorError::Invalid(format!(
                "expected {len} entries for n = {space_dim}, N = {components}, got {}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Invalid("non-finite tensor entry".into()));
        }
        Ok(Self {
            space_dim,
            components,
            entries: Entries::Constant(entries),
            mode,
            lambda_declared,
        })
    }

    /// Variable-coefficient tensor; `field(x, out)` fills all entries.
    pub fn field<F>(space_dim: usize, components: usize, field: F, lambda_declared: f64) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            space_dim,
            components,
            entries: Entries::Field(Arc::new(field)),
            mode: Ellipticity::Legendre,
            lambda_declared,
        }
    }

    /// `A^{αβ}_{ij} = δ_{αβ}δ_{ij}`, i.e. `L = Δ` componentwise.
    pub fn identity(space_dim: usize, components: usize) -> Self {
        Self::scaled_identity(space_dim, components, 1.0)
    }

    pub fn scaled_identity(space_dim: usize, components: usize, scale: f64) -> Self {
        let mut e = vec![0.0; space_dim * space_dim * components * components];
        for a in 0..space_dim {
            for i in 0..components {
                e[idx(space_dim, components, a, a, i, i)] = scale;
            }
        }
        Self::constant(space_dim, components, e, Ellipticity::Legendre, scale).expect("sized")
    }

    /// `A = a(x)·δ_{αβ}δ_{ij}` with a scalar coefficient field.
    pub fn isotropic_field<F>(space_dim: usize, components: usize, coefficient: F, lambda_declared: f64) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::field(
            space_dim,
            components,
            move |x, out| {
                out.iter_mut().for_each(|v| *v = 0.0);
                let a = coefficient(x);
                for al in 0..space_dim {
                    for i in 0..components {
                        out[idx(space_dim, components, al, al, i, i)] = a;
                    }
                }
            },
            lambda_declared,
        )
    }

    /// `A = Σ_h e_h⊗e_h⊗B_h` for an orthonormal basis `{e_h}` of `R^N` and
    /// symmetric elliptic `n×n` blocks `B_h` (row-major).
    pub fn block_diagonal(basis: &[Vec<f64>], blocks: &[Vec<f64>]) -> Result<Self, TensorError> {
        let nn = basis.len();
        if nn == 0 || blocks.len() != nn {
            return Err(TensorError::Invalid("need one block per basis vector".into()));
        }
        if basis.iter().any(|e| e.len() != nn) {
            return Err(TensorError::Invalid("basis vectors must have N entries".into()));
        }
        for (a, ea) in basis.iter().enumerate() {
            for (b, eb) in basis.iter().enumerate() {
                let d: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-12 {
                    return Err(TensorError::Invalid("basis is not orthonormal".into()));
                }
            }
        }
        let n2 = blocks[0].len();
        let n = (n2 as f64).sqrt().round() as usize;
        if n * n != n2 || blocks.iter().any(|b| b.len() != n2) {
            return Err(TensorError::Invalid("blocks must all be n×n".into()));
        }
        let mut lambda = f64::INFINITY;
        for b in blocks {
            let m = DMatrix::from_row_slice(n, n, b);
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(TensorError::Invalid("blocks must be symmetric".into()));
            }
            lambda = lambda.min(SymmetricEigen::new(m).eigenvalues.min());
        }
        let mut e = vec![0.0; n * n * nn * nn];
        for (h, eh) in basis.iter().enumerate() {
            for al in 0..n {
                for be in 0..n {
                    for i in 0..nn {
                        for j in 0..nn {
                            e[idx(n, nn, al, be, i, j)] += eh[i] * eh[j] * blocks[h][al * n + be];
                        }
                    }
                }
            }
        }
        Self::constant(n, nn, e, Ellipticity::Legendre, lambda)
    }

    /// `n = N = 2` with `AX:X = |X|² + γ·det X`. The determinant is a null
    /// Lagrangian, so this is Legendre-Hadamard elliptic with `λ = 1` for every
    /// `γ`, but only Legendre elliptic for `|γ| < 2`.
    pub fn det_coupled(gamma: f64) -> Self {
        let mut e = vec![0.0; 16];
        for a in 0..2 {
            for i in 0..2 {
                e[idx(2, 2, a, a, i, i)] = 1.0;
            }
        }
        // det X = X¹₁X²₂ − X¹₂X²₁, split symmetrically.
        e[idx(2, 2, 0, 1, 0, 1)] += 0.5 * gamma;
        e[idx(2, 2, 1, 0, 1, 0)] += 0.5 * gamma;
        e[idx(2, 2, 1, 0, 0, 1)] -= 0.5 * gamma;
        e[idx(2, 2, 0, 1, 1, 0)] -= 0.5 * gamma;
        Self::constant(2, 2, e, Ellipticity::LegendreHadamard, 1.0).expect("sized")
    }

    pub fn space_dim(&self) -> usize {
        self.space_dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn mode(&self) -> Ellipticity {
        self.mode
    }

    pub fn lambda_declared(&self) -> f64 {
        self.lambda_declared
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.entries, Entries::Constant(_))
    }

    pub fn entry_count(&self) -> usize {
        self.space_dim * self.space_dim * self.components * self.components
    }

    /// All entries at `x`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.entries {
            Entries::Constant(e) => out.copy_from_slice(e),
            Entries::Field(f) => f(x, out),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.entry_count()];
        self.eval_into(x, &mut out);
        out
    }

    /// Position of `A^{αβ}_{ij}` in the entry buffer.
    pub fn index(&self, alpha: usize, beta: usize, i: usize, j: usize) -> usize {
        idx(self.space_dim, self.components, alpha, beta, i, j)
    }

    /// The `(N·n)×(N·n)` matrix of the quadratic form at `x`, rows indexed by
    /// `(i, α)` as `i·n + α`.
    pub fn form_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let e = self.eval(x);
        form_matrix(&e, self.space_dim, self.components)
    }
}

fn idx(n: usize, nn: usize, alpha: usize, beta: usize, i: usize, j: usize) -> usize {
    ((alpha * n + beta) * nn + i) * nn + j
}

fn form_matrix(e: &[f64], n: usize, nn: usize) -> DMatrix<f64> {
    let d = n * nn;
    DMatrix::from_fn(d, d, |r, c| {
        let (i, al) = (r / n, r % n);
        let (j, be) = (c / n, c % n);
        e[idx(n, nn, al, be, i, j)]
    })
}

/// Minimum over `sample_points` of the smallest eigenvalue of the quadratic
/// form `X ↦ AX:X`, i.e. the best Legendre constant on the samples.
pub fn check_legendre(a: &EllipticTensor, sample_points: &[Vec<f64>]) -> Result<f64, TensorError> {
    if sample_points.is_empty() {
        return Err(TensorError::Invalid("no sample points".into()));
    }
    let mut lambda = f64::INFINITY;
    for x in sample_points {
        let m = a.form_matrix(x);
        let deviation = (&m - m.transpose()).amax();
        if deviation > 1e-12 * m.amax().max(1.0) {
            return Err(TensorError::AsymmetricTensor {
                x: x.clone(),
                deviation,
            });
        }
        lambda = lambda.min(SymmetricEigen::new(m).eigenvalues.min());
    }
    Ok(lambda)
}

/// `M(η)_{ij} = A^{αβ}_{ij} η_α η_β`
fn acoustic(e: &[f64], n: usize, nn: usize, eta: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(nn, nn, |i, j| {
        let mut s = 0.0;
        for al in 0..n {
            for be in 0..n {
                s += e[idx(n, nn, al, be, i, j)] * eta[al] * eta[be];
            }
        }
        s
    })
}

/// `P(ξ)_{αβ} = A^{αβ}_{ij} ξ_i ξ_j`
fn dual_acoustic(e: &[f64], n: usize, nn: usize, xi: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |al, be| {
        let mut s = 0.0;
        for i in 0..nn {
            for j in 0..nn {
                s += e[idx(n, nn, al, be, i, j)] * xi[i] * xi[j];
            }
        }
        s
    })
}

fn min_eigenpair(m: DMatrix<f64>) -> (f64, Vec<f64>) {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let k = eig.eigenvalues.imin();
    (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect())
}

fn unit_samples(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0]],
        2 => (0..count)
            .map(|k| {
                // half circle suffices: the form is even in η
                let t = std::f64::consts::PI * k as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count.pow(dim as u32 - 1))
                .map(|_| {
                    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-300);
                    v.iter_mut().for_each(|t| *t /= n);
                    v
                })
                .collect()
        }
    }
}

/// Estimate of `min A(ξ⊗η):(ξ⊗η)` over unit `ξ ∈ R^N`, `η ∈ R^n`.
///
/// For fixed `η` the inner minimum over `ξ` is the smallest eigenvalue of
/// `A^{αβ}_{ij}η_αη_β`, so only `η` is sampled. The best sample is then
/// refined by alternating exact eigen-minimisations in `ξ` and `η`, which
/// decreases the form monotonically.
pub fn check_legendre_hadamard(a: &EllipticTensor, angular_samples: usize) -> Result<f64, TensorError> {
    if !a.is_constant() {
        return Err(TensorError::NotConstant);
    }
    let (n, nn) = (a.space_dim, a.components);
    let e = a.eval(&vec![0.0; n]);
    let samples = unit_samples(n, angular_samples.max(1), 0x5eed);
    let mut best = (f64::INFINITY, vec![], vec![]);
    for eta in samples {
        let (v, xi) = min_eigenpair(acoustic(&e, n, nn, &eta));
        if v < best.0 {
            best = (v, xi, eta);
        }
    }
    let (mut value, mut xi, _) = best;
    for _ in 0..200 {
        let (v_eta, eta) = min_eigenpair(dual_acoustic(&e, n, nn, &xi));
        let (v_xi, new_xi) = min_eigenpair(acoustic(&e, n, nn, &eta));
        xi = new_xi;
        let v = v_eta.min(v_xi);
        let done = value - v <= 1e-15 * value.abs().max(1.0);
        value = value.min(v);
        if done {
            break;
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_examples() {
        let pts = vec![vec![0.0, 0.0], vec![0.3, 0.7]];
        assert_relative_eq!(check_legendre(&EllipticTensor::identity(2, 2), &pts).unwrap(), 1.0);
        assert_relative_eq!(
            check_legendre(&EllipticTensor::scaled_identity(2, 2, 2.0), &pts).unwrap(),
            2.0
        );
        assert_relative_eq!(
            check_legendre(&EllipticTensor::det_coupled(3.0), &pts).unwrap(),
            -0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn det_coupling_is_the_determinant() {
        let a = EllipticTensor::det_coupled(3.0);
        let m = a.form_matrix(&[0.0, 0.0]);
        // X = [[1, 2], [3, 4]] in (i, α) order
        let x = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let q = x.dot(&(&m * &x));
        assert_relative_eq!(q, 30.0 + 3.0 * (1.0 * 4.0 - 2.0 * 3.0), epsilon = 1e-12);
    }

    #[test]
    fn hadamard_examples() {
        assert_relative_eq!(
            check_legendre_hadamard(&EllipticTensor::det_coupled(3.0), 64).unwrap(),
            1.0,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            check_legendre_hadamard(&EllipticTensor::identity(2, 3), 16).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn hadamard_matches_dense_torus_sampling() {
        // anisotropic constant tensor; oracle is brute force over both angles
        let mut e = EllipticTensor::det_coupled(1.0).eval(&[0.0, 0.0]);
        e[idx(2, 2, 0, 0, 0, 0)] = 2.0;
        e[idx(2, 2, 0, 1, 0, 0)] = 0.4;
        e[idx(2, 2, 1, 0, 0, 0)] = 0.4;
        let a = EllipticTensor::constant(2, 2, e.clone(), Ellipticity::LegendreHadamard, 0.5).unwrap();
        let mut brute = f64::INFINITY;
        let k = 2000;
        for s in 0..k {
            let t = std::f64::consts::PI * s as f64 / k as f64;
            let xi = [t.cos(), t.sin()];
            for r in 0..k {
                let u = std::f64::consts::PI * r as f64 / k as f64;
                let eta = [u.cos(), u.sin()];
                let mut v = 0.0;
                for al in 0..2 {
                    for be in 0..2 {
                        for i in 0..2 {
                            for j in 0..2 {
                                v += e[idx(2, 2, al, be, i, j)] * xi[i] * eta[al] * xi[j] * eta[be];
                            }
                        }
                    }
                }
                brute = brute.min(v);
            }
        }
        let est = check_legendre_hadamard(&a, 32).unwrap();
        assert!(est <= brute + 1e-12);
        assert_relative_eq!(est, brute, epsilon = 1e-5);
    }

    #[test]
    fn legendre_bounds_hadamard_from_below() {
        let tensors = [
            EllipticTensor::identity(2, 2),
            EllipticTensor::det_coupled(1.0),
            EllipticTensor::det_coupled(3.0),
            EllipticTensor::block_diagonal(
                &[vec![0.6, 0.8], vec![-0.8, 0.6]],
                &[vec![2.0, 0.5, 0.5, 1.0], vec![1.0, 0.0, 0.0, 3.0]],
            )
            .unwrap(),
        ];
        for a in &tensors {
            let l = check_legendre(a, &[vec![0.0, 0.0]]).unwrap();
            let lh = check_legendre_hadamard(a, 64).unwrap();
            assert!(l <= lh + 1e-12, "{l} > {lh}");
            assert!(lh >= a.lambda_declared() - 1e-6);
        }
    }

    #[test]
    fn asymmetry_is_rejected() {
        let mut e = EllipticTensor::identity(2, 1).eval(&[0.0, 0.0]);
        e[idx(2, 1, 0, 1, 0, 0)] = 0.3;
        let a = EllipticTensor::constant(2, 1, e, Ellipticity::Legendre, 1.0).unwrap();
        assert!(matches!(
            check_legendre(&a, &[vec![0.0, 0.0]]),
            Err(TensorError::AsymmetricTensor { .. })
        ));
    }

    #[test]
    fn hadamard_needs_constant_coefficients() {
        let a = EllipticTensor::isotropic_field(2, 1, |x| 1.0 + x[0], 1.0);
        assert_eq!(check_legendre_hadamard(&a, 8), Err(TensorError::NotConstant));
    }
}
