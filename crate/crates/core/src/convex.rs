//! Supremands `F(x, ξ)` and the direction map `Φ(x, ξ) = F·F_ξ/|F_ξ|`.
//!
//! A supremand is convex, `C²` and nonnegative in `ξ ∈ R^N`, vanishes only at
//! `ξ = 0` and obeys the two-sided growth bounds
//!
//! ```text
//! F(x, ξ) ≥ |ξ|²/c        |F_ξ(x, ξ)| ≤ c|ξ|
//! ```
//!
//! for a single constant `c > 0`. Under these assumptions `Φ(x, ·)` is a
//! homeomorphism of `R^N` whose Jacobian determinant is positive away from
//! the origin, which is what makes [`phi_inverse`] well posed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this Euclidean norm `ξ` is treated as the origin by [`phi`].
pub const PHI_ZERO_CUTOFF: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("Hessian of the supremand is numerically singular at xi = {xi:?}")]
    SingularHessian { xi: Vec<f64> },
    #[error("inverse of Phi did not converge for eta = {eta:?} (residual {residual:e})")]
    NoConvergence { eta: Vec<f64>, residual: f64 },
    #[error("growth bound violated at x = {x:?}, xi = {xi:?}: ratio {ratio} exceeds c = {c}")]
    GrowthViolation {
        x: Vec<f64>,
        xi: Vec<f64>,
        ratio: f64,
        c: f64,
    },
    #[error("invalid supremand parameter: {0}")]
    InvalidParameter(String),
}

/// A convex integrand-analog `F(x, ξ)` together with its first two
/// `ξ`-derivatives.
///
/// Hessians are written row-major into an `N×N` buffer.
pub trait Supremand: Send + Sync {
    /// Number of components `N` of `ξ`.
    fn components(&self) -> usize;
    fn value(&self, x: &[f64], xi: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]);
    fn hessian(&self, x: &[f64], xi: &[f64], out: &mut [f64]);
    /// The constant `c` of the growth bounds.
    fn growth_constant(&self) -> f64;
}

impl<S: Supremand + ?Sized> Supremand for &S {
    fn components(&self) -> usize {
        (**self).components()
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        (**self).value(x, xi)
    }
    fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (**self).gradient(x, xi, out)
    }
    fn hessian(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (**self).hessian(x, xi, out)
    }
    fn growth_constant(&self) -> f64 {
        (**self).growth_constant()
    }
}

impl<S: Supremand + ?Sized> Supremand for Box<S> {
    fn components(&self) -> usize {
        (**self).components()
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        (**self).value(x, xi)
    }
    fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (**self).gradient(x, xi, out)
    }
    fn hessian(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        (**self).hessian(x, xi, out)
    }
    fn growth_constant(&self) -> f64 {
        (**self).growth_constant()
    }
}

/// Spatial weight `α(x)`, bounded away from zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    Constant(f64),
    /// `α(x) = base + slope·x`, with bounds precomputed over the domain box.
    Affine {
        base: f64,
        slope: Vec<f64>,
        min: f64,
        max: f64,
    },
}

impl Weight {
    /// Affine weight on the box `[0, extents]`; extremes sit at the corners.
    pub fn affine_on_box(base: f64, slope: Vec<f64>, extents: &[f64]) -> Result<Self, KernelError> {
        if slope.len() != extents.len() {
            return Err(KernelError::InvalidParameter(format!(
                "alpha slope has {} entries, domain has {} axes",
                slope.len(),
                extents.len()
            )));
        }
        let mut min = base;
        let mut max = base;
        for (s, e) in slope.iter().zip(extents) {
            let d = s * e;
            if d < 0.0 {
                min += d;
            } else {
                max += d;
            }
        }
        if !(min > 0.0) || !max.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "alpha must stay positive on the domain (minimum {min})"
            )));
        }
        Ok(Weight::Affine { base, slope, min, max })
    }

    pub fn at(&self, x: &[f64]) -> f64 {
        match self {
            Weight::Constant(a) => *a,
            Weight::Affine { base, slope, .. } => base + slope.iter().zip(x).map(|(s, xi)| s * xi).sum::<f64>(),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Weight::Constant(a) => (*a, *a),
            Weight::Affine { min, max, .. } => (*min, *max),
        }
    }
}

/// `F(x, ξ) = α(x)·‖ξ‖²_{ℓq}`, optionally smoothed.
///
/// With `epsilon > 0` every `|ξ_i|` is replaced by `(ξ_i² + ε²)^{1/2}` and the
/// value at the origin is subtracted, which keeps `F(x, 0) = 0` and makes the
/// Hessian bounded on the coordinate hyperplanes when `q < 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPowerNorm {
    q: f64,
    alpha: Weight,
    epsilon: f64,
    components: usize,
    offset: f64,
}

impl WeightedPowerNorm {
    pub fn new(components: usize, q: f64, alpha: Weight, epsilon: f64) -> Result<Self, KernelError> {
        if components == 0 {
            return Err(KernelError::InvalidParameter("N must be at least 1".into()));
        }
        if !(q > 1.0) || !q.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "q must satisfy 1 < q < inf (got {q})"
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "epsilon must be finite and nonnegative (got {epsilon})"
            )));
        }
        let (lo, hi) = alpha.bounds();
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "alpha must lie in a positive bounded range (got [{lo}, {hi}])"
            )));
        }
        let offset = if epsilon > 0.0 {
            (components as f64 * epsilon.powf(q)).powf(2.0 / q)
        } else {
            0.0
        };
        Ok(Self {
            q,
            alpha,
            epsilon,
            components,
            offset,
        })
    }

    /// `|ξ|²`, i.e. `q = 2`, `α = 1`.
    pub fn squared_euclidean(components: usize) -> Self {
        Self::new(components, 2.0, Weight::Constant(1.0), 0.0).expect("valid parameters")
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn weight(&self) -> &Weight {
        &self.alpha
    }

    fn rho(&self, t: f64) -> f64 {
        if self.epsilon > 0.0 {
            t.hypot(self.epsilon)
        } else {
            t.abs()
        }
    }

    /// `‖ρ(ξ)‖_q`
    fn norm(&self, xi: &[f64]) -> f64 {
        if self.q == 2.0 {
            return xi
                .iter()
                .map(|&t| t * t + self.epsilon * self.epsilon)
                .sum::<f64>()
                .sqrt();
        }
        let scale = xi.iter().fold(0.0f64, |m, &t| m.max(self.rho(t)));
        if scale == 0.0 {
            return 0.0;
        }
        let s: f64 = xi.iter().map(|&t| (self.rho(t) / scale).powf(self.q)).sum();
        scale * s.powf(1.0 / self.q)
    }
}

impl Supremand for WeightedPowerNorm {
    fn components(&self) -> usize {
        self.components
    }

    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        let n = self.norm(xi);
        (self.alpha.at(x) * (n * n - self.offset)).max(0.0)
    }

    fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let a = self.alpha.at(x);
        let n = self.norm(xi);
        if n == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        // ∂_i ‖ρ‖_q² = 2 n^{2-q} ρ_i^{q-2} ξ_i
        let nq = n.powf(2.0 - self.q);
        for (o, &t) in out.iter_mut().zip(xi) {
            let r = self.rho(t);
            *o = if r == 0.0 {
                0.0
            } else {
                2.0 * a * nq * r.powf(self.q - 2.0) * t
            };
        }
    }

    fn hessian(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let dim = self.components;
        let a = self.alpha.at(x);
        let q = self.q;
        let n = self.norm(xi);
        out.iter_mut().for_each(|o| *o = 0.0);
        if n == 0.0 {
            // F is only C¹ at the origin when q ≠ 2; the q = 2 value is used.
            for i in 0..dim {
                out[i * dim + i] = 2.0 * a;
            }
            return;
        }
        // H = 2α[(2-q) n^{2-2q} t tᵀ + n^{2-q} diag(ρ_i^{q-4}(ε² + (q-1)ξ_i²))],
        // t_i = ρ_i^{q-2} ξ_i
        let t: Vec<f64> = xi
            .iter()
            .map(|&s| {
                let r = self.rho(s);
                if r == 0.0 {
                    0.0
                } else {
                    r.powf(q - 2.0) * s
                }
            })
            .collect();
        let outer = (2.0 - q) * n.powf(2.0 - 2.0 * q);
        let diag_scale = n.powf(2.0 - q);
        for i in 0..dim {
            for j in 0..dim {
                out[i * dim + j] = 2.0 * a * outer * t[i] * t[j];
            }
            let r = self.rho(xi[i]);
            let d = if r == 0.0 {
                match q.partial_cmp(&2.0) {
                    Some(std::cmp::Ordering::Greater) => 0.0,
                    Some(std::cmp::Ordering::Equal) => 1.0,
                    _ => f64::INFINITY,
                }
            } else {
                r.powf(q - 4.0) * (self.epsilon * self.epsilon + (q - 1.0) * xi[i] * xi[i])
            };
            out[i * dim + i] += 2.0 * a * diag_scale * d;
        }
    }

    fn growth_constant(&self) -> f64 {
        let (amin, amax) = self.alpha.bounds();
        let nn = self.components as f64;
        // ‖ξ‖_q² ≥ N^{min(0, 2/q-1)}|ξ|²  and  |∇‖ξ‖_q²| ≤ 2 N^{max(0, 2/q-1)}|ξ|
        let lower = nn.powf((1.0 - 2.0 / self.q).max(0.0)) / amin;
        let upper = 2.0 * amax * nn.powf((2.0 / self.q - 1.0).max(0.0));
        lower.max(upper)
    }
}

/// `factor·F`. Level sets, and hence minimisers of the supremal functional,
/// are unchanged.
#[derive(Debug, Clone)]
pub struct Scaled<S> {
    pub inner: S,
    pub factor: f64,
}

impl<S: Supremand> Supremand for Scaled<S> {
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.factor * self.inner.value(x, xi)
    }
    fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        self.inner.gradient(x, xi, out);
        out.iter_mut().for_each(|o| *o *= self.factor);
    }
    fn hessian(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        self.inner.hessian(x, xi, out);
        out.iter_mut().for_each(|o| *o *= self.factor);
    }
    fn growth_constant(&self) -> f64 {
        let c = self.inner.growth_constant();
        (c * self.factor).max(c / self.factor)
    }
}

/// Overrides the declared growth constant of a supremand.
#[derive(Debug, Clone)]
pub struct WithGrowthConstant<S> {
    pub inner: S,
    pub c: f64,
}

impl<S: Supremand> Supremand for WithGrowthConstant<S> {
    fn components(&self) -> usize {
        self.inner.components()
    }
    fn value(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.inner.value(x, xi)
    }
    fn gradient(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        self.inner.gradient(x, xi, out)
    }
    fn hessian(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        self.inner.hessian(x, xi, out)
    }
    fn growth_constant(&self) -> f64 {
        self.c
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

/// `F_ξ(x,ξ)·ξ − F(x,ξ)`, nonnegative for convex `F` with `F(x,0) = 0`.
pub fn convexity_gap<S: Supremand + ?Sized>(f: &S, x: &[f64], xi: &[f64]) -> f64 {
    let mut g = vec![0.0; xi.len()];
    f.gradient(x, xi, &mut g);
    g.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() - f.value(x, xi)
}

/// `Φ(x, ξ) = F·F_ξ/|F_ξ|`, extended by `Φ(x, 0) = 0`.
pub fn phi<S: Supremand + ?Sized>(f: &S, x: &[f64], xi: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; xi.len()];
    if norm2(xi) < PHI_ZERO_CUTOFF {
        return g;
    }
    f.gradient(x, xi, &mut g);
    let gn = norm2(&g);
    if gn == 0.0 {
        g.iter_mut().for_each(|v| *v = 0.0);
        return g;
    }
    let s = f.value(x, xi) / gn;
    g.iter_mut().for_each(|v| *v *= s);
    g
}

/// Jacobian `∂Φ_i/∂ξ_j = (F_i F_j + F·[(I − n̂n̂ᵀ)H]_{ij}) / |F_ξ|`, `n̂ = F_ξ/|F_ξ|`.
pub fn phi_jacobian<S: Supremand + ?Sized>(f: &S, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
    let dim = xi.len();
    let mut g = vec![0.0; dim];
    let mut h = vec![0.0; dim * dim];
    f.gradient(x, xi, &mut g);
    f.hessian(x, xi, &mut h);
    let fv = f.value(x, xi);
    let gn = norm2(&g);
    let g = DVector::from_vec(g);
    let h = DMatrix::from_row_slice(dim, dim, &h);
    let nhat = &g / gn;
    let proj = DMatrix::identity(dim, dim) - &nhat * nhat.transpose();
    (&g * g.transpose() + (proj * h) * fv) / gn
}

/// `det Φ_ξ` through the rank-one update identity
/// `det Φ_ξ = F^{N-1}/|F_ξ|^N · det F_ξξ · (F_ξξ^{-1}F_ξ·F_ξ)`.
pub fn phi_jacobian_det<S: Supremand + ?Sized>(f: &S, x: &[f64], xi: &[f64]) -> Result<f64, KernelError> {
    let dim = xi.len();
    let mut g = vec![0.0; dim];
    let mut h = vec![0.0; dim * dim];
    f.gradient(x, xi, &mut g);
    f.hessian(x, xi, &mut h);
    let singular = || KernelError::SingularHessian { xi: xi.to_vec() };
    if h.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let hm = DMatrix::from_row_slice(dim, dim, &h);
    let chol = hm.clone().cholesky().ok_or_else(singular)?;
    let ldiag = chol.l().diagonal();
    let det_h: f64 = ldiag.iter().map(|d| d * d).product();
    let scale = hm.amax().max(f64::MIN_POSITIVE);
    if ldiag.iter().any(|d| d * d <= 1e-14 * scale) {
        return Err(singular());
    }
    let gv = DVector::from_vec(g);
    let quad = chol.solve(&gv).dot(&gv);
    let fv = f.value(x, xi);
    let gn = gv.norm();
    Ok(fv.powi(dim as i32 - 1) / gn.powi(dim as i32) * det_h * quad)
}

/// Settings for [`phi_inverse`].
#[derive(Debug, Clone, Copy)]
pub struct InverseOptions {
    pub max_newton: usize,
    pub max_halvings: usize,
    pub homotopy_steps: usize,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            max_newton: 100,
            max_halvings: 60,
            homotopy_steps: 32,
        }
    }
}

/// Required residual `|Φ(ξ) − η| ≤ 1e-10·max(1, |η|)`.
const INVERSE_ACCEPT: f64 = 1e-10;

/// Solves `Φ(x, ξ) = η` for `ξ`.
///
/// The initial guess lies on the ray through `η` at the radius where `F`
/// matches `|η|`. Damped Newton with Armijo backtracking on `|Φ(ξ) − η|²`
/// follows; if it stalls, a homotopy in `|η|` is tried.
pub fn phi_inverse<S: Supremand + ?Sized>(
    f: &S,
    x: &[f64],
    eta: &[f64],
    opts: &InverseOptions,
) -> Result<Vec<f64>, KernelError> {
    let en = norm2(eta);
    if en == 0.0 {
        return Ok(vec![0.0; eta.len()]);
    }
    let start = ray_guess(f, x, eta);
    match newton_inverse(f, x, eta, start, opts) {
        Ok(xi) => Ok(xi),
        Err(_) => {
            let mut xi = ray_guess(
                f,
                x,
                &eta.iter().map(|e| e / opts.homotopy_steps as f64).collect::<Vec<_>>(),
            );
            for k in 1..=opts.homotopy_steps {
                let t = k as f64 / opts.homotopy_steps as f64;
                let target: Vec<f64> = eta.iter().map(|e| e * t).collect();
                xi = newton_inverse(f, x, &target, xi, opts)?;
            }
            Ok(xi)
        }
    }
}

fn ray_guess<S: Supremand + ?Sized>(f: &S, x: &[f64], eta: &[f64]) -> Vec<f64> {
    let en = norm2(eta);
    let dir: Vec<f64> = eta.iter().map(|e| e / en).collect();
    let at = |r: f64| f.value(x, &dir.iter().map(|d| d * r).collect::<Vec<_>>());
    // F is increasing along rays from the origin.
    let mut hi = 1.0;
    while at(hi) < en && hi < 1e150 {
        hi *= 2.0;
    }
    let mut lo = 1.0;
    while at(lo) > en && lo > 1e-150 {
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid) < en {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = 0.5 * (lo + hi);
    dir.iter().map(|d| d * r).collect()
}

fn newton_inverse<S: Supremand + ?Sized>(
    f: &S,
    x: &[f64],
    eta: &[f64],
    mut xi: Vec<f64>,
    opts: &InverseOptions,
) -> Result<Vec<f64>, KernelError> {
    let dim = eta.len();
    let en = norm2(eta);
    let accept = INVERSE_ACCEPT * en.max(1.0);
    let residual = |xi: &[f64]| -> Vec<f64> { phi(f, x, xi).iter().zip(eta).map(|(p, e)| p - e).collect() };
    let mut r = residual(&xi);
    let mut rn = norm2(&r);
    for _ in 0..opts.max_newton {
        if rn <= 4.0 * f64::EPSILON * en {
            break;
        }
        if norm2(&xi) < PHI_ZERO_CUTOFF {
            // Φ is not differentiable at the origin; step out along η.
            xi = ray_guess(f, x, eta);
            r = residual(&xi);
            rn = norm2(&r);
            continue;
        }
        let jac = phi_jacobian(f, x, &xi);
        let rhs = DVector::from_iterator(dim, r.iter().map(|v| -v));
        let Some(step) = jac.lu().solve(&rhs) else { break };
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = xi.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            let tr = residual(&trial);
            let tn = norm2(&tr);
            // Armijo on ½|R|², whose directional derivative along the Newton step is −|R|².
            if tn * tn <= (1.0 - 1e-4 * t) * rn * rn {
                xi = trial;
                r = tr;
                rn = tn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if rn <= accept {
        Ok(xi)
    } else {
        Err(KernelError::NoConvergence {
            eta: eta.to_vec(),
            residual: rn,
        })
    }
}

/// Maxima of `|ξ|²/F` and `|F_ξ|/|ξ|` over random samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthWitness {
    pub lower: f64,
    pub upper: f64,
}

/// Samples `ξ` with `|ξ|` log-uniform in `[radius·1e-3, radius]` at each of
/// `points` and checks both growth bounds against the declared constant.
pub fn check_growth<S: Supremand + ?Sized>(
    f: &S,
    points: &[Vec<f64>],
    sample_count: usize,
    radius: f64,
    seed: u64,
) -> Result<GrowthWitness, KernelError> {
    if sample_count == 0 || !(radius > 0.0) || points.is_empty() {
        return Err(KernelError::InvalidParameter(
            "growth check needs samples, points and a positive radius".into(),
        ));
    }
    let c = f.growth_constant();
    let dim = f.components();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![0.0; dim];
    let mut w = GrowthWitness { lower: 0.0, upper: 0.0 };
    let slack = 1.0 + 1e-12;
    for k in 0..sample_count {
        let x = &points[k % points.len()];
        let mut xi: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm2(&xi).max(1e-300);
        let r = radius * 10f64.powf(rng.random_range(-3.0..0.0));
        xi.iter_mut().for_each(|v| *v *= r / n);
        let nx = norm2(&xi);
        let fv = f.value(x, &xi);
        f.gradient(x, &xi, &mut g);
        let lower = nx * nx / fv;
        let upper = norm2(&g) / nx;
        for ratio in [lower, upper] {
            if !(ratio <= c * slack) {
                return Err(KernelError::GrowthViolation {
                    x: x.clone(),
                    xi,
                    ratio,
                    c,
                });
            }
        }
        w.lower = w.lower.max(lower);
        w.upper = w.upper.max(upper);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lq(n: usize, q: f64) -> WeightedPowerNorm {
        WeightedPowerNorm::new(n, q, Weight::Constant(1.0), 0.0).unwrap()
    }

    fn random_xi(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm2(&v);
        let r = 10f64.powf(rng.random_range(lo.log10()..hi.log10()));
        v.iter_mut().for_each(|t| *t *= r / n);
        v
    }

    #[test]
    fn gap_examples() {
        let f = WeightedPowerNorm::squared_euclidean(2);
        assert_relative_eq!(convexity_gap(&f, &[0.0], &[1.0, 0.0]), 1.0, epsilon = 1e-15);
        assert_eq!(convexity_gap(&f, &[0.0], &[0.0, 0.0]), 0.0);
        let f4 = lq(3, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let xi = random_xi(&mut rng, 3, 1e-3, 1e3);
            assert!(convexity_gap(&f4, &[0.0], &xi) >= -1e-12 * f4.value(&[0.0], &xi).max(1.0));
        }
    }

    #[test]
    fn phi_examples() {
        let f = WeightedPowerNorm::squared_euclidean(2);
        let p = phi(&f, &[0.0], &[3.0, 4.0]);
        assert_relative_eq!(p[0], 15.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 20.0, epsilon = 1e-12);
        assert_eq!(phi(&f, &[0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        let p = phi(&f, &[0.0], &[0.0, 2.0]);
        assert_relative_eq!(p[1], 4.0, epsilon = 1e-14);
        assert_eq!(p[0], 0.0);
    }

    fn fd_jacobian_det(f: &dyn Supremand, xi: &[f64]) -> f64 {
        let dim = xi.len();
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let h = 1e-6 * xi[j].abs().max(1e-3 * norm2(xi));
            let mut a = xi.to_vec();
            let mut b = xi.to_vec();
            a[j] += h;
            b[j] -= h;
            let pa = phi(f, &[0.0], &a);
            let pb = phi(f, &[0.0], &b);
            for i in 0..dim {
                m[(i, j)] = (pa[i] - pb[i]) / (2.0 * h);
            }
        }
        m.determinant()
    }

    #[test]
    fn jacobian_det_examples() {
        let f = WeightedPowerNorm::squared_euclidean(2);
        let d = phi_jacobian_det(&f, &[0.0], &[1.0, 2.0]).unwrap();
        assert_relative_eq!(d, fd_jacobian_det(&f, &[1.0, 2.0]), max_relative = 1e-6);
        // |ξ|ξ has det 2|ξ|²
        assert_relative_eq!(d, 10.0, max_relative = 1e-12);
        assert!(phi_jacobian_det(&f, &[0.0], &[1.0, 0.0]).unwrap() > 0.0);

        let f3 = lq(2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let xi = random_xi(&mut rng, 2, 1e-2, 1e2);
            let d = phi_jacobian_det(&f3, &[0.0], &xi).unwrap();
            assert!(d > 0.0);
            assert_relative_eq!(d, fd_jacobian_det(&f3, &xi), max_relative = 1e-5);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = lq(3, 3.0);
        let xi = [0.3, -1.2, 0.7];
        let j = phi_jacobian(&f, &[0.0], &xi);
        for c in 0..3 {
            let h = 1e-6;
            let mut a = xi;
            let mut b = xi;
            a[c] += h;
            b[c] -= h;
            let pa = phi(&f, &[0.0], &a);
            let pb = phi(&f, &[0.0], &b);
            for r in 0..3 {
                assert_relative_eq!(j[(r, c)], (pa[r] - pb[r]) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn singular_hessian_is_reported() {
        // q > 2 on a coordinate axis: the transverse curvature vanishes.
        let f = lq(2, 4.0);
        assert!(matches!(
            phi_jacobian_det(&f, &[0.0], &[1.0, 0.0]),
            Err(KernelError::SingularHessian { .. })
        ));
    }

    #[test]
    fn inverse_examples() {
        let f = WeightedPowerNorm::squared_euclidean(2);
        let opts = InverseOptions::default();
        let xi = phi_inverse(&f, &[0.0], &[15.0, 20.0], &opts).unwrap();
        assert_relative_eq!(xi[0], 3.0, epsilon = 1e-10);
        assert_relative_eq!(xi[1], 4.0, epsilon = 1e-10);
        assert_eq!(phi_inverse(&f, &[0.0], &[0.0, 0.0], &opts).unwrap(), vec![0.0, 0.0]);

        let f15 = lq(2, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let eta = random_xi(&mut rng, 2, 1e-3, 1e3);
            let xi = phi_inverse(&f15, &[0.0], &eta, &opts).unwrap();
            let back = phi(&f15, &[0.0], &xi);
            let err = norm2(&back.iter().zip(&eta).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-10 * norm2(&eta).max(1.0), "eta {eta:?} err {err:e}");
        }
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (q, eps) in [(2.0, 0.0), (3.0, 0.0), (4.0, 0.0), (1.5, 0.1)] {
            let f = WeightedPowerNorm::new(3, q, Weight::Constant(1.7), eps).unwrap();
            for _ in 0..20 {
                let xi = random_xi(&mut rng, 3, 0.1, 10.0);
                let mut g = vec![0.0; 3];
                let mut h = vec![0.0; 9];
                f.gradient(&[0.0], &xi, &mut g);
                f.hessian(&[0.0], &xi, &mut h);
                let step = 1e-5;
                for j in 0..3 {
                    let mut a = xi.clone();
                    let mut b = xi.clone();
                    a[j] += step;
                    b[j] -= step;
                    let fd = (f.value(&[0.0], &a) - f.value(&[0.0], &b)) / (2.0 * step);
                    assert!((fd - g[j]).abs() <= 1e-6 * norm2(&g).max(1e-300));
                    let mut ga = vec![0.0; 3];
                    let mut gb = vec![0.0; 3];
                    f.gradient(&[0.0], &a, &mut ga);
                    f.gradient(&[0.0], &b, &mut gb);
                    for i in 0..3 {
                        let fdh = (ga[i] - gb[i]) / (2.0 * step);
                        assert!((fdh - h[i * 3 + j]).abs() <= 1e-5 * (1.0 + h[i * 3 + j].abs()));
                        assert!((h[i * 3 + j] - h[j * 3 + i]).abs() <= 1e-12 * (1.0 + h[i * 3 + j].abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn growth_examples() {
        let pts = vec![vec![0.0], vec![0.5], vec![1.0]];
        let f = WeightedPowerNorm::squared_euclidean(2);
        let w = check_growth(&f, &pts, 200, 10.0, 0).unwrap();
        assert_relative_eq!(w.lower, 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.upper, 2.0, epsilon = 1e-12);

        let f2 = WeightedPowerNorm::new(2, 2.0, Weight::Constant(2.0), 0.0).unwrap();
        let f2 = WithGrowthConstant { inner: f2, c: 4.0 };
        assert!(check_growth(&f2, &pts, 200, 10.0, 0).is_ok());
        let f2 = Scaled {
            inner: WeightedPowerNorm::squared_euclidean(2),
            factor: 2.0,
        };
        assert_eq!(f2.growth_constant(), 4.0);
        assert!(check_growth(&f2, &pts, 200, 10.0, 0).is_ok());

        let bad = WithGrowthConstant {
            inner: WeightedPowerNorm::squared_euclidean(2),
            c: 0.5,
        };
        assert!(matches!(
            check_growth(&bad, &pts, 10, 1.0, 0),
            Err(KernelError::GrowthViolation { .. })
        ));
    }

    #[test]
    fn declared_constant_covers_power_norm_family() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        for q in [1.2, 1.5, 2.0, 3.0, 4.0, 7.0] {
            for n in [1, 2, 3] {
                for eps in [0.0, 0.3] {
                    let w = Weight::affine_on_box(1.0, vec![0.5, -0.25], &[1.0, 1.0]).unwrap();
                    let f = WeightedPowerNorm::new(n, q, w, eps).unwrap();
                    check_growth(&f, &pts, 400, 100.0, 5).unwrap_or_else(|e| panic!("q={q} N={n} eps={eps}: {e}"));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_exponent() {
        assert!(WeightedPowerNorm::new(1, 0.5, Weight::Constant(1.0), 0.0).is_err());
        assert!(WeightedPowerNorm::new(1, 1.0, Weight::Constant(1.0), 0.0).is_err());
        assert!(Weight::affine_on_box(0.1, vec![-1.0], &[1.0]).is_err());
    }
}
