use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use linf_core::config::{ConfigError, RunConfig};
use linf_core::oracle::{solve_bang_bang, ClampedBC1D};
use linf_core::run::{run, sweep, RunError};
use linf_core::tensor::{check_legendre, check_legendre_hadamard};
use linf_core::Execution;

#[derive(Parser)]
#[command(
    name = "linf",
    version,
    about = "L-infinity minimisation of second-order supremal functionals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the schedule by 2, 4, … up to this exponent.
    #[arg(long)]
    p_max: Option<f64>,
    /// Nodes on every axis.
    #[arg(long)]
    nodes: Option<usize>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve, verify and write report.json, field.tsv and oracle.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several configs concurrently into <out>/<hash>/.
    Sweep {
        /// Config files; repeat the flag for more.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Expand each config over `nodes=a,b,…` or `p_max=a,b,…`.
        #[arg(long)]
        vary: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Closed-form 1D solution for a config or explicit boundary data.
    Oracle {
        #[arg(long, conflicts_with = "bc")]
        config: Option<PathBuf>,
        /// x0,v0,x1,v1
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bc: Option<Vec<f64>>,
    },
    /// Ellipticity constants of the configured tensor.
    CheckTensor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 720)]
        angular_samples: usize,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(p) = o.p_max {
        cfg.set_p_max(p);
    }
    if let Some(n) = o.nodes {
        cfg.set_nodes(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execution(o: &Overrides) -> Execution {
    if o.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn expand(base: RunConfig, vary: &Option<String>) -> Result<Vec<RunConfig>, ConfigError> {
    let Some(spec) = vary else {
        return Ok(vec![base]);
    };
    let bad = |m: &str| {
        ConfigError::Invalid(vec![linf_core::config::FieldError {
            field: "--vary".into(),
            message: m.into(),
        }])
    };
    let (key, values) = spec.split_once('=').ok_or_else(|| bad("expected key=v1,v2,…"))?;
    values
        .split(',')
        .map(|v| {
            let mut c = base.clone();
            match key {
                "nodes" => c.set_nodes(v.trim().parse().map_err(|_| bad("nodes must be integers"))?),
                "p_max" => c.set_p_max(v.trim().parse().map_err(|_| bad("p_max must be numbers"))?),
                _ => return Err(bad("key must be nodes or p_max")),
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

fn fail(e: RunError) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = match load(&config, &overrides) {
                Ok(c) => c,
                Err(e) => return fail(e.into()),
            };
            match run(&cfg, &overrides.out, execution(&overrides)) {
                Ok(out) => {
                    let r = &out.report;
                    println!("e_inf_estimate\t{}", r.e_inf_estimate);
                    println!("bracket_width\t{}", r.bracket_width);
                    for c in &r.checks {
                        println!(
                            "{}\t{}\t(limit {})\t{}",
                            c.name,
                            c.value,
                            c.limit,
                            if c.pass { "ok" } else { "FAIL" }
                        );
                    }
                    for v in &r.invariant_violations {
                        println!("violation\t{v}");
                    }
                    if let Some(o) = &r.oracle {
                        println!("oracle\ta = {}\ts = {}\te_inf = {}", o.a, o.s, o.e_inf);
                    }
                    println!("output\t{}", out.dir.display());
                    ExitCode::from(r.status.exit_code() as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep {
            configs,
            vary,
            overrides,
        } => {
            let mut all = Vec::new();
            for path in &configs {
                match load(path, &overrides).and_then(|c| expand(c, &vary)) {
                    Ok(mut cs) => all.append(&mut cs),
                    Err(e) => return fail(e.into()),
                }
            }
            match sweep(&all, &overrides.out, execution(&overrides)) {
                Ok(entries) => {
                    let mut code = 0;
                    for e in &entries {
                        match (&e.e_inf_estimate, &e.error) {
                            (Some(v), _) => println!("{}\t{}\texit {}", e.config_hash, v, e.exit_code),
                            (None, Some(err)) => println!("{}\terror: {}\texit {}", e.config_hash, err, e.exit_code),
                            _ => {}
                        }
                        code = code.max(e.exit_code);
                    }
                    ExitCode::from(code as u8)
                }
                Err(e) => fail(e),
            }
        }
        Command::Oracle { config, bc } => {
            let bc = match (config, bc) {
                (Some(path), _) => match RunConfig::load(&path) {
                    Ok(c) => match c.oracle_bc() {
                        Some(bc) => bc,
                        None => {
                            return fail(RunError::Config(ConfigError::Parse(
                                "config has no closed-form 1D boundary data".into(),
                            )))
                        }
                    },
                    Err(e) => return fail(e.into()),
                },
                (None, Some(v)) if v.len() == 4 => ClampedBC1D::new(v[0], v[1], v[2], v[3]),
                (None, Some(v)) => {
                    eprintln!("error: --bc takes four numbers, got {}", v.len());
                    return ExitCode::from(2);
                }
                (None, None) => {
                    eprintln!("error: give --config or --bc");
                    return ExitCode::from(2);
                }
            };
            let bb = solve_bang_bang(&bc);
            println!("a\t{}\ns\t{}\nsigma\t{}\ne_inf\t{}", bb.a, bb.s, bb.sigma, bb.energy());
            ExitCode::SUCCESS
        }
        Command::CheckTensor {
            config,
            angular_samples,
        } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e.into()),
            };
            let (tensor, grid) = match cfg.build_tensor().and_then(|t| cfg.build_grid().map(|g| (t, g))) {
                Ok(v) => v,
                Err(e) => return fail(e.into()),
            };
            let points: Vec<Vec<f64>> = (0..grid.node_count()).map(|k| grid.coords(k)).collect();
            match check_legendre(&tensor, &points) {
                Ok(v) => println!("legendre\t{v}"),
                Err(e) => println!("legendre\terror: {e}"),
            }
            if tensor.is_constant() {
                match check_legendre_hadamard(&tensor, angular_samples) {
                    Ok(v) => println!("legendre_hadamard\t{v}"),
                    Err(e) => println!("legendre_hadamard\terror: {e}"),
                }
            }
            println!("declared\t{}", tensor.lambda_declared());
            ExitCode::SUCCESS
        }
    }
}
