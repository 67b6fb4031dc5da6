//! End-to-end runs: solve, verify, compare with the 1D oracle, write files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::convex::Supremand;
use crate::exec::Execution;
use crate::grid::{DofField, SubBox};
use crate::operator::DiscreteOperator;
use crate::oracle::{solve_bang_bang, BangBang, ClampedBC1D};
use crate::solver::{continuation_solve, SolveReport, SolveRow, SolverError};
use crate::verify::{absolute_min_spotcheck, VerifyReport};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) => 3,
            RunError::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Success,
    VerificationFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::VerificationFailure => 4,
        }
    }
}

/// One thresholded check of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

/// Closed-form comparison for 1D scalar runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub bc: ClampedBC1D,
    pub a: f64,
    pub s: f64,
    pub sigma: i8,
    pub e_inf: f64,
    pub e_inf_estimate: f64,
    pub relative_error: f64,
    /// Zero crossing of `L_h u`, linearly interpolated; `None` without a
    /// sign change.
    pub switch_location: Option<f64>,
    /// `max | |L_h u| − a |/a` over nodes farther than `5h` from the switch.
    pub far_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: RunConfig,
    pub rows: Vec<SolveRow>,
    pub e_inf_estimate: f64,
    pub bracket_width: f64,
    pub degenerate: bool,
    pub verify: VerifyReport,
    pub spotcheck: Option<bool>,
    pub oracle: Option<OracleComparison>,
    pub checks: Vec<Check>,
    pub invariant_violations: Vec<String>,
    pub status: RunStatus,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: RunReport,
    pub solution: SolveReport,
}

fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Sign change of a 1D row field, interpolated between nodes.
pub fn switch_location(op: &DiscreteOperator, lu: &[f64]) -> Option<f64> {
    let grid = op.grid();
    let rows = op.row_nodes();
    let mut found = None;
    for r in 1..rows.len() {
        let (a, b) = (lu[r - 1], lu[r]);
        let (xa, xb) = (grid.coords(rows[r - 1])[0], grid.coords(rows[r])[0]);
        if a == 0.0 && found.is_none() && r > 1 && lu[r - 2] * b < 0.0 {
            found = Some(xa);
        } else if a * b < 0.0 {
            found = Some(xa + (xb - xa) * a / (a - b));
        }
        if found.is_some() {
            break;
        }
    }
    found
}

fn compare_with_oracle(
    op: &DiscreteOperator,
    u: &DofField,
    bc: ClampedBC1D,
    e_hat: f64,
    exec: Execution,
) -> OracleComparison {
    let bb: BangBang = solve_bang_bang(&bc);
    let lu = op.apply_rows(u, exec);
    let sw = switch_location(op, &lu);
    let h = op.grid().spacing()[0];
    let far_deviation = if bb.a > 0.0 {
        op.row_nodes()
            .iter()
            .zip(&lu)
            .filter(|(&k, _)| sw.is_none_or(|s| (op.grid().coords(k)[0] - s).abs() > 5.0 * h))
            .map(|(_, v)| (v.abs() - bb.a).abs() / bb.a)
            .fold(0.0, f64::max)
    } else {
        lu.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let e_inf = bb.energy();
    OracleComparison {
        bc,
        a: bb.a,
        s: bb.s,
        sigma: bb.sigma,
        e_inf,
        e_inf_estimate: e_hat,
        relative_error: if e_inf > 0.0 {
            (e_hat - e_inf).abs() / e_inf
        } else {
            e_hat
        },
        switch_location: sw,
        far_deviation,
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Per-node table: coordinates, `u`, `L_h u`, `F`, `f`; `NaN` where the
/// operator has no row.
pub fn field_table<S: Supremand + ?Sized>(
    op: &DiscreteOperator,
    sup: &S,
    u: &DofField,
    f: &DofField,
    exec: Execution,
) -> String {
    let grid = op.grid();
    let nn = op.components();
    let lu = op.apply_rows(u, exec);
    let axes = ["x", "y"];
    let mut out = String::from("#");
    for a in axes.iter().take(grid.dim()) {
        write!(out, "\t{a}").unwrap();
    }
    for prefix in ["u", "Lu"] {
        for c in 0..nn {
            write!(out, "\t{prefix}{c}").unwrap();
        }
    }
    out.push_str("\tF");
    for c in 0..nn {
        write!(out, "\tf{c}").unwrap();
    }
    out.push('\n');
    for k in 0..grid.node_count() {
        let x = grid.coords(k);
        let mut cols: Vec<String> = x.iter().map(|v| fmt_num(*v)).collect();
        cols.extend(u.at(k).iter().map(|v| fmt_num(*v)));
        match op.row_of(k) {
            Some(r) => {
                let z = &lu[r * nn..(r + 1) * nn];
                cols.extend(z.iter().map(|v| fmt_num(*v)));
                cols.push(fmt_num(sup.value(&x, z)));
                cols.extend(f.at(k).iter().map(|v| fmt_num(*v)));
            }
            None => cols.extend(std::iter::repeat_n("NaN".to_string(), 2 * nn + 1)),
        }
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    out
}

/// Runs a validated config and writes `report.json`, `field.tsv` and, for
/// closed-form cases, `oracle.json` into `out`.
pub fn run(config: &RunConfig, out: &Path, exec: Execution) -> Result<RunOutput, RunError> {
    let problem = config.build()?;
    let mut opts = problem.options;
    opts.execution = exec;
    let op = DiscreteOperator::assemble(&problem.grid, &problem.tensor, exec)
        .map_err(|e| RunError::Solver(SolverError::Operator(e)))?;
    let sup = &problem.supremand;
    info!("run {}: {} nodes", config.hash(), problem.grid.node_count());
    let sol = continuation_solve(&op, sup, &problem.clamp, &problem.schedule, None, &opts)?;

    let v = &config.verify;
    let e_hat = sol.e_inf_estimate;
    let mut checks = Vec::new();
    if !sol.degenerate {
        checks.push(Check {
            name: "r_system".into(),
            value: sol.verify.r_system,
            limit: v.max_r_system * e_hat,
            pass: sol.verify.r_system <= v.max_r_system * e_hat,
        });
        checks.push(Check {
            name: "cv_f".into(),
            value: sol.verify.cv_f,
            limit: v.max_cv,
            pass: sol.verify.cv_f <= v.max_cv,
        });
        checks.push(Check {
            name: "r_harmonic".into(),
            value: sol.verify.r_harmonic,
            limit: v.max_r_harmonic,
            pass: sol.verify.r_harmonic <= v.max_r_harmonic,
        });
    }
    let violations = sol.invariant_violations(v.invariant_slack);
    let spotcheck = if v.spotcheck_trials > 0 {
        let sub = SubBox::centered(&problem.grid, 0.5);
        Some(
            absolute_min_spotcheck(
                &op,
                sup,
                &sol.u,
                &sub,
                v.spotcheck_trials,
                v.spotcheck_amplitude,
                config.seed,
                exec,
            )
            .map_err(|e| RunError::Solver(SolverError::Verify(e)))?,
        )
    } else {
        None
    };
    let oracle = config
        .oracle_applies()
        .then(|| compare_with_oracle(&op, &sol.u, config.oracle_bc().expect("1D"), e_hat, exec));
    let pass = checks.iter().all(|c| c.pass) && violations.is_empty() && spotcheck != Some(false);
    let status = if pass {
        RunStatus::Success
    } else {
        warn!("verification failed for {}", config.hash());
        RunStatus::VerificationFailure
    };
    let report = RunReport {
        config_hash: config.hash(),
        config: config.clone(),
        rows: sol.rows.clone(),
        e_inf_estimate: e_hat,
        bracket_width: sol.bracket_width,
        degenerate: sol.degenerate,
        verify: sol.verify.clone(),
        spotcheck,
        oracle: oracle.clone(),
        checks,
        invariant_violations: violations,
        status,
    };

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(
        &out.join("report.json"),
        &(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"),
    )?;
    write(&out.join("field.tsv"), &field_table(&op, sup, &sol.u, &sol.f, exec))?;
    if let Some(o) = &oracle {
        write(
            &out.join("oracle.json"),
            &(serde_json::to_string_pretty(o).expect("oracle serialises") + "\n"),
        )?;
    }
    Ok(RunOutput {
        dir: out.to_path_buf(),
        report,
        solution: sol,
    })
}

/// Outcome of one sweep entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub config_hash: String,
    pub status: Option<RunStatus>,
    pub e_inf_estimate: Option<f64>,
    pub bracket_width: Option<f64>,
    pub error: Option<String>,
    pub exit_code: i32,
}

/// Runs every config into `out/<hash>/` concurrently and writes
/// `out/sweep.json`. Entries keep the input order.
pub fn sweep(configs: &[RunConfig], out: &Path, exec: Execution) -> Result<Vec<SweepEntry>, RunError> {
    if configs.is_empty() {
        return Err(RunError::Config(ConfigError::Invalid(vec![
            crate::config::FieldError {
                field: "sweep".into(),
                message: "needs at least one config".into(),
            },
        ])));
    }
    for c in configs {
        c.validate()?;
    }
    let entries = exec.map_slice(configs, |c| {
        let hash = c.hash();
        match run(c, &out.join(&hash), Execution::Sequential) {
            Ok(o) => SweepEntry {
                config_hash: hash,
                status: Some(o.report.status),
                e_inf_estimate: Some(o.report.e_inf_estimate),
                bracket_width: Some(o.report.bracket_width),
                error: None,
                exit_code: o.report.status.exit_code(),
            },
            Err(e) => SweepEntry {
                config_hash: hash,
                status: None,
                e_inf_estimate: None,
                bracket_width: None,
                error: Some(e.to_string()),
                exit_code: e.exit_code(),
            },
        }
    });
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write(
        &out.join("sweep.json"),
        &(serde_json::to_string_pretty(&entries).expect("entries serialise") + "\n"),
    )?;
    Ok(entries)
}
