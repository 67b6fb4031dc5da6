//! Run configuration: flat TOML with dotted section keys.
//!
//! ```toml
//! domain.dim = 1
//! domain.nodes = 201
//! supremand.q = 2.0
//! boundary.profile = "symmetric-velocity"
//! schedule.p_max = 4096
//! tol.theta = 0.1
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::convex::{Weight, WeightedPowerNorm};
use crate::grid::{DofField, Grid};
use crate::operator::LinearSolveOptions;
use crate::oracle::ClampedBC1D;
use crate::solver::{PSchedule, SolverOptions};
use crate::tensor::EllipticTensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(vec![FieldError {
        field: field.into(),
        message: message.into(),
    }])
}

/// A scalar or one value per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAxis<T> {
    One(T),
    Each(Vec<T>),
}

impl<T: Clone> PerAxis<T> {
    /// One value per axis.
    pub fn expand(&self, dim: usize) -> Vec<T> {
        match self {
            PerAxis::One(v) => vec![v.clone(); dim],
            PerAxis::Each(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dim: usize,
    pub nodes: PerAxis<usize>,
    #[serde(default = "unit_extent")]
    pub extent: PerAxis<f64>,
    #[serde(default = "one")]
    pub components: usize,
}

fn unit_extent() -> PerAxis<f64> {
    PerAxis::One(1.0)
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TensorSpec {
    Identity {
        #[serde(default = "unit")]
        scale: f64,
    },
    /// Raw entries, index `((α·n + β)·N + i)·N + j`.
    Constant {
        entries: Vec<f64>,
        #[serde(default)]
        hadamard: bool,
        lambda: f64,
    },
    /// `Σ_h e_h⊗e_h⊗B_h` with the basis of `R²` rotated by `basis_angle`
    /// (the standard basis for `N = 1`).
    BlockDiagonal {
        blocks: Vec<Vec<f64>>,
        #[serde(default)]
        basis_angle: f64,
    },
    /// `AX:X = |X|² + γ det X`, `n = N = 2`.
    DetCoupled { gamma: f64 },
    /// `a(x) = base + slope·x` times the identity.
    Isotropic { base: f64, slope: Vec<f64> },
}

fn unit() -> f64 {
    1.0
}

impl Default for TensorSpec {
    fn default() -> Self {
        TensorSpec::Identity { scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupremandSpec {
    #[serde(default = "two")]
    pub q: f64,
    #[serde(default = "unit")]
    pub alpha: f64,
    #[serde(default)]
    pub alpha_slope: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon: f64,
}

fn two() -> f64 {
    2.0
}

impl Default for SupremandSpec {
    fn default() -> Self {
        Self {
            q: 2.0,
            alpha: 1.0,
            alpha_slope: None,
            epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case")]
pub enum BoundarySpec {
    /// `u_c(x) = value[c] + Σ_a gradient[c·n + a]·x_a`.
    Affine { value: Vec<f64>, gradient: Vec<f64> },
    /// `u_c(x) = coefficient·|x|²`.
    Quadratic {
        #[serde(default = "unit")]
        coefficient: f64,
    },
    /// 1D: zero position and equal velocities at both ends.
    SymmetricVelocity {
        #[serde(default = "unit")]
        velocity: f64,
    },
    /// 1D cubic through the given positions and velocities.
    Hermite { x0: f64, v0: f64, x1: f64, v1: f64 },
    /// `u_c(x) = amplitude·sin(π·frequency·(x_0 + (c+1)·x_1) + c/2)`.
    Sinusoidal {
        #[serde(default = "unit")]
        amplitude: f64,
        #[serde(default = "unit")]
        frequency: f64,
    },
    /// Whitespace-separated node values, one node per line in linear order.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub p: Option<Vec<f64>>,
    #[serde(default)]
    pub p_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolSpec {
    pub newton: f64,
    pub linear: f64,
    pub bracket_stop: f64,
    pub theta: f64,
}

impl Default for TolSpec {
    fn default() -> Self {
        let s = SolverOptions::default();
        Self {
            newton: s.newton_tol,
            linear: s.linear.tol,
            bracket_stop: s.bracket_stop,
            theta: s.theta,
        }
    }
}

/// Thresholds that decide between success and verification failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    /// Relative to the energy estimate.
    pub max_r_system: f64,
    pub max_cv: f64,
    pub max_r_harmonic: f64,
    /// Relative slack on monotonicity and bracket containment.
    pub invariant_slack: f64,
    /// Perturbations for the absolute-minimality spot check; 0 skips it.
    pub spotcheck_trials: usize,
    pub spotcheck_amplitude: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            max_r_system: 0.05,
            max_cv: 0.05,
            max_r_harmonic: 1e-6,
            invariant_slack: 1e-8,
            spotcheck_trials: 0,
            spotcheck_amplitude: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    #[serde(default)]
    pub tensor: TensorSpec,
    #[serde(default)]
    pub supremand: SupremandSpec,
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub tol: TolSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub seed: u64,
}

/// Everything a run needs, built from a validated config.
pub struct Problem {
    pub grid: Grid,
    pub tensor: EllipticTensor,
    pub supremand: WeightedPowerNorm,
    pub clamp: DofField,
    pub schedule: PSchedule,
    pub options: SolverOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn set_nodes(&mut self, nodes: usize) {
        self.domain.nodes = PerAxis::One(nodes);
    }

    pub fn set_p_max(&mut self, p_max: f64) {
        self.schedule = ScheduleSpec {
            p: None,
            p_max: Some(p_max),
        };
    }

    pub fn extents(&self) -> Vec<f64> {
        self.domain.extent.expand(self.domain.dim)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, msg: String| {
            errs.push(FieldError {
                field: field.into(),
                message: msg,
            })
        };
        let d = &self.domain;
        let dim = d.dim;
        if !(1..=2).contains(&dim) {
            push("domain.dim", format!("must be 1 or 2 (got {dim})"));
        }
        let nodes = d.nodes.expand(dim);
        if nodes.len() != dim {
            push("domain.nodes", format!("needs {dim} entries (got {})", nodes.len()));
        }
        if let Some(n) = nodes.iter().find(|&&n| n < 5) {
            push("domain.nodes", format!("at least 5 nodes per axis (got {n})"));
        }
        let ext = self.extents();
        if ext.len() != dim {
            push("domain.extent", format!("needs {dim} entries (got {})", ext.len()));
        }
        if ext.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            push("domain.extent", "must be positive and finite".into());
        }
        let nn = d.components;
        if nn == 0 || nn > 2 {
            push("domain.components", format!("must be 1 or 2 (got {nn})"));
        }
        match &self.tensor {
            TensorSpec::Identity { scale } => {
                if !(*scale > 0.0) || !scale.is_finite() {
                    push("tensor.scale", format!("must be positive (got {scale})"));
                }
            }
            TensorSpec::Constant { entries, lambda, .. } => {
                let len = dim * dim * nn * nn;
                if entries.len() != len {
                    push(
                        "tensor.entries",
                        format!("needs n²N² = {len} values (got {})", entries.len()),
                    );
                }
                if !(*lambda > 0.0) {
                    push("tensor.lambda", format!("must be positive (got {lambda})"));
                }
            }
            TensorSpec::BlockDiagonal { blocks, basis_angle } => {
                if blocks.len() != nn {
                    push(
                        "tensor.blocks",
                        format!("needs one block per component ({nn}, got {})", blocks.len()),
                    );
                }
                if blocks.iter().any(|b| b.len() != dim * dim) {
                    push("tensor.blocks", format!("each block needs {} entries", dim * dim));
                }
                if !basis_angle.is_finite() {
                    push("tensor.basis_angle", "must be finite".into());
                }
            }
            TensorSpec::DetCoupled { gamma } => {
                if dim != 2 || nn != 2 {
                    push(
                        "tensor.kind",
                        "det-coupled needs domain.dim = 2 and domain.components = 2".into(),
                    );
                }
                if !gamma.is_finite() {
                    push("tensor.gamma", "must be finite".into());
                }
            }
            TensorSpec::Isotropic { base, slope } => {
                if slope.len() != dim {
                    push("tensor.slope", format!("needs {dim} entries (got {})", slope.len()));
                } else {
                    let lo: f64 = base + slope.iter().zip(&ext).map(|(s, e)| (s * e).min(0.0)).sum::<f64>();
                    if !(lo > 0.0) {
                        push("tensor.base", format!("coefficient must stay positive (minimum {lo})"));
                    }
                }
            }
        }
        let s = &self.supremand;
        if !(s.q > 1.0) || !s.q.is_finite() {
            push("supremand.q", format!("must exceed 1 (got {})", s.q));
        } else if s.q < 2.0 && nn >= 2 && s.epsilon == 0.0 {
            push(
                "supremand.epsilon",
                "q < 2 with several components needs a positive smoothing epsilon".into(),
            );
        }
        if !(s.alpha > 0.0) || !s.alpha.is_finite() {
            push("supremand.alpha", format!("must be positive (got {})", s.alpha));
        }
        if let Some(sl) = &s.alpha_slope {
            if sl.len() != dim {
                push(
                    "supremand.alpha_slope",
                    format!("needs {dim} entries (got {})", sl.len()),
                );
            } else if ext.len() == dim {
                let lo: f64 = s.alpha + sl.iter().zip(&ext).map(|(a, e)| (a * e).min(0.0)).sum::<f64>();
                if !(lo > 0.0) {
                    push(
                        "supremand.alpha_slope",
                        format!("alpha must stay positive (minimum {lo})"),
                    );
                }
            }
        }
        if !(s.epsilon >= 0.0) || !s.epsilon.is_finite() {
            push("supremand.epsilon", format!("must be nonnegative (got {})", s.epsilon));
        }
        match &self.boundary {
            BoundarySpec::Affine { value, gradient } => {
                if value.len() != nn {
                    push("boundary.value", format!("needs {nn} entries (got {})", value.len()));
                }
                if gradient.len() != nn * dim {
                    push(
                        "boundary.gradient",
                        format!("needs {} entries (got {})", nn * dim, gradient.len()),
                    );
                }
            }
            BoundarySpec::SymmetricVelocity { .. } | BoundarySpec::Hermite { .. } => {
                if dim != 1 || nn != 1 {
                    push(
                        "boundary.profile",
                        "this profile needs domain.dim = 1 and domain.components = 1".into(),
                    );
                }
            }
            BoundarySpec::File { path } => {
                if path.is_empty() {
                    push("boundary.path", "must name a file".into());
                }
            }
            BoundarySpec::Quadratic { .. } | BoundarySpec::Sinusoidal { .. } => {}
        }
        match (&self.schedule.p, self.schedule.p_max) {
            (Some(_), Some(_)) => push("schedule", "give either schedule.p or schedule.p_max".into()),
            (Some(p), None) => {
                if let Err(e) = PSchedule::new(p.clone()) {
                    push("schedule.p", e.to_string());
                }
            }
            (None, Some(pm)) => {
                if let Err(e) = PSchedule::geometric(pm) {
                    push("schedule.p_max", e.to_string());
                }
            }
            (None, None) => {}
        }
        let t = &self.tol;
        for (name, v) in [("tol.newton", t.newton), ("tol.linear", t.linear)] {
            if !(v > 0.0) || !v.is_finite() {
                push(name, format!("must be positive (got {v})"));
            }
        }
        if !(t.bracket_stop >= 0.0) {
            push(
                "tol.bracket_stop",
                format!("must be nonnegative (got {})", t.bracket_stop),
            );
        }
        if !(t.theta > 0.0 && t.theta < 1.0) {
            push("tol.theta", format!("must lie in (0, 1) (got {})", t.theta));
        }
        let v = &self.verify;
        for (name, x) in [
            ("verify.max_r_system", v.max_r_system),
            ("verify.max_cv", v.max_cv),
            ("verify.max_r_harmonic", v.max_r_harmonic),
            ("verify.invariant_slack", v.invariant_slack),
            ("verify.spotcheck_amplitude", v.spotcheck_amplitude),
        ] {
            if !(x >= 0.0) {
                push(name, format!("must be nonnegative (got {x})"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn schedule(&self) -> PSchedule {
        match (&self.schedule.p, self.schedule.p_max) {
            (Some(p), _) => PSchedule::new(p.clone()).expect("validated"),
            (None, Some(pm)) => PSchedule::geometric(pm).expect("validated"),
            (None, None) => PSchedule::default(),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        let d = SolverOptions::default();
        SolverOptions {
            newton_tol: self.tol.newton,
            linear: LinearSolveOptions {
                tol: self.tol.linear,
                ..d.linear
            },
            bracket_stop: self.tol.bracket_stop,
            theta: self.tol.theta,
            ..d
        }
    }

    pub fn build_grid(&self) -> Result<Grid, ConfigError> {
        Grid::new(self.domain.nodes.expand(self.domain.dim), self.extents())
            .map_err(|e| invalid("domain", e.to_string()))
    }

    pub fn build_tensor(&self) -> Result<EllipticTensor, ConfigError> {
        let (n, nn) = (self.domain.dim, self.domain.components);
        let t = match &self.tensor {
            TensorSpec::Identity { scale } => EllipticTensor::scaled_identity(n, nn, *scale),
            TensorSpec::Constant {
                entries,
                hadamard,
                lambda,
            } => {
                let mode = if *hadamard {
                    crate::tensor::Ellipticity::LegendreHadamard
                } else {
                    crate::tensor::Ellipticity::Legendre
                };
                EllipticTensor::constant(n, nn, entries.clone(), mode, *lambda)
                    .map_err(|e| invalid("tensor.entries", e.to_string()))?
            }
            TensorSpec::BlockDiagonal { blocks, basis_angle } => {
                let basis = if nn == 1 {
                    vec![vec![1.0]]
                } else {
                    let (s, c) = basis_angle.sin_cos();
                    vec![vec![c, s], vec![-s, c]]
                };
                EllipticTensor::block_diagonal(&basis, blocks).map_err(|e| invalid("tensor.blocks", e.to_string()))?
            }
            TensorSpec::DetCoupled { gamma } => EllipticTensor::det_coupled(*gamma),
            TensorSpec::Isotropic { base, slope } => {
                let ext = self.extents();
                let lo: f64 = base + slope.iter().zip(&ext).map(|(s, e)| (s * e).min(0.0)).sum::<f64>();
                let (b, sl) = (*base, slope.clone());
                EllipticTensor::isotropic_field(
                    n,
                    nn,
                    move |x| b + sl.iter().zip(x).map(|(s, v)| s * v).sum::<f64>(),
                    lo,
                )
            }
        };
        Ok(t)
    }

    pub fn build_supremand(&self) -> Result<WeightedPowerNorm, ConfigError> {
        let s = &self.supremand;
        let weight = match &s.alpha_slope {
            None => Weight::Constant(s.alpha),
            Some(sl) => Weight::affine_on_box(s.alpha, sl.clone(), &self.extents())
                .map_err(|e| invalid("supremand.alpha_slope", e.to_string()))?,
        };
        WeightedPowerNorm::new(self.domain.components, s.q, weight, s.epsilon)
            .map_err(|e| invalid("supremand", e.to_string()))
    }

    pub fn build_clamp(&self, grid: &Grid) -> Result<DofField, ConfigError> {
        let nn = self.domain.components;
        let field = match &self.boundary {
            BoundarySpec::Affine { value, gradient } => {
                let n = grid.dim();
                grid.sample(nn, |x, o| {
                    for c in 0..nn {
                        o[c] = value[c] + (0..n).map(|a| gradient[c * n + a] * x[a]).sum::<f64>();
                    }
                })
            }
            BoundarySpec::Quadratic { coefficient } => grid.sample(nn, |x, o| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                o.iter_mut().for_each(|v| *v = coefficient * r2);
            }),
            BoundarySpec::SymmetricVelocity { .. } | BoundarySpec::Hermite { .. } => {
                let bc = self.oracle_bc().expect("1D profile");
                let len = grid.extents()[0];
                grid.sample(1, |x, o| o[0] = hermite(&bc, x[0] / len))
            }
            BoundarySpec::Sinusoidal { amplitude, frequency } => grid.sample(nn, |x, o| {
                let y = if x.len() > 1 { x[1] } else { 0.0 };
                for (c, v) in o.iter_mut().enumerate() {
                    let arg = std::f64::consts::PI * frequency * (x[0] + (c + 1) as f64 * y) + 0.5 * c as f64;
                    *v = amplitude * arg.sin();
                }
            }),
            BoundarySpec::File { path } => read_field(Path::new(path), grid.node_count(), nn)?,
        };
        Ok(field)
    }

    /// Boundary data of a 1D scalar profile on `[0, 1]`, if it has a closed
    /// form.
    pub fn oracle_bc(&self) -> Option<ClampedBC1D> {
        if self.domain.dim != 1 || self.domain.components != 1 {
            return None;
        }
        match &self.boundary {
            BoundarySpec::SymmetricVelocity { velocity } => Some(ClampedBC1D::new(0.0, *velocity, 0.0, *velocity)),
            BoundarySpec::Hermite { x0, v0, x1, v1 } => Some(ClampedBC1D::new(*x0, *v0, *x1, *v1)),
            BoundarySpec::Affine { value, gradient } => Some(ClampedBC1D::new(
                value[0],
                gradient[0],
                value[0] + gradient[0],
                gradient[0],
            )),
            BoundarySpec::Quadratic { coefficient } => {
                Some(ClampedBC1D::new(0.0, 0.0, *coefficient, 2.0 * coefficient))
            }
            BoundarySpec::Sinusoidal { amplitude, frequency } => {
                let w = std::f64::consts::PI * frequency;
                Some(ClampedBC1D::new(
                    0.0,
                    amplitude * w,
                    amplitude * w.sin(),
                    amplitude * w * w.cos(),
                ))
            }
            BoundarySpec::File { .. } => None,
        }
    }

    /// Whether the closed-form oracle applies: 1D, unit interval, `A = 1`,
    /// `F = |ξ|²`.
    pub fn oracle_applies(&self) -> bool {
        let unit_tensor = matches!(self.tensor, TensorSpec::Identity { scale } if scale == 1.0);
        let s = &self.supremand;
        let plain = s.q == 2.0 && s.alpha == 1.0 && s.alpha_slope.is_none() && s.epsilon == 0.0;
        self.oracle_bc().is_some() && unit_tensor && plain && self.extents() == [1.0]
    }

    pub fn build(&self) -> Result<Problem, ConfigError> {
        self.validate()?;
        let grid = self.build_grid()?;
        let clamp = self.build_clamp(&grid)?;
        Ok(Problem {
            tensor: self.build_tensor()?,
            supremand: self.build_supremand()?,
            clamp,
            schedule: self.schedule(),
            options: self.solver_options(),
            grid,
        })
    }
}

/// Cubic Hermite interpolant of position/velocity data on `[0, 1]`.
fn hermite(bc: &ClampedBC1D, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    bc.x0 * (2.0 * t3 - 3.0 * t2 + 1.0)
        + bc.v0 * (t3 - 2.0 * t2 + t)
        + bc.x1 * (-2.0 * t3 + 3.0 * t2)
        + bc.v1 * (t3 - t2)
}

fn read_field(path: &Path, nodes: usize, components: usize) -> Result<DofField, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut values = Vec::with_capacity(nodes * components);
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match row {
            Ok(r) if r.len() == components && r.iter().all(|v| v.is_finite()) => values.extend(r),
            _ => {
                return Err(invalid(
                    "boundary.path",
                    format!("line {}: expected {components} finite numbers", ln + 1),
                ))
            }
        }
    }
    if values.len() != nodes * components {
        return Err(invalid(
            "boundary.path",
            format!("expected {nodes} node rows, found {}", values.len() / components),
        ));
    }
    Ok(DofField { components, values })
}
