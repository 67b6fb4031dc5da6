use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use linf_core::config::RunConfig;
use linf_core::operator::LinearSolveOptions;
use linf_core::run::sweep;
use linf_core::{continuation_solve, DiscreteOperator, Execution, PSchedule};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn block_diagonal(nodes: usize) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
domain.dim = 2
domain.components = 2
tensor.kind = "block-diagonal"
tensor.blocks = [[1.0, 0.2, 0.2, 0.8], [0.6, 0.0, 0.0, 1.2]]
tensor.basis_angle = 0.4
boundary.profile = "sinusoidal"
domain.nodes = 41
"#,
    )
    .unwrap();
    cfg.set_nodes(nodes);
    cfg
}

fn assembly(c: &mut Criterion) {
    let pr = block_diagonal(161).build().unwrap();
    let mut g = c.benchmark_group("assemble_161x161");
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| DiscreteOperator::assemble(&pr.grid, &pr.tensor, m).unwrap())
        });
    }
    g.finish();
}

fn continuation(c: &mut Criterion) {
    let pr = block_diagonal(41).build().unwrap();
    let schedule = PSchedule::geometric(64.0).unwrap();
    let mut g = c.benchmark_group("continuation_41x41_p64");
    g.sample_size(10);
    for mode in MODES {
        let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, mode).unwrap();
        let mut opts = pr.options;
        opts.execution = mode;
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, _| {
            b.iter(|| continuation_solve(&op, &pr.supremand, &pr.clamp, &schedule, None, &opts).unwrap())
        });
    }
    g.finish();
}

fn zero_set(c: &mut Criterion) {
    let pr = block_diagonal(41).build().unwrap();
    let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::Sequential).unwrap();
    let mut g = c.benchmark_group("harmonic_zero_set_8_trials");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| {
                op.harmonic_zero_set_fraction(8, 1, &LinearSolveOptions::default(), m)
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn sweeps(c: &mut Criterion) {
    let configs: Vec<RunConfig> = [21, 25, 29, 33]
        .into_iter()
        .map(|n| {
            let mut cfg = block_diagonal(n);
            cfg.set_p_max(32.0);
            cfg
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let mut g = c.benchmark_group("sweep_4_configs");
    g.sample_size(10);
    for mode in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &m| {
            b.iter(|| sweep(&configs, dir.path(), m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, assembly, continuation, zero_set, sweeps);
criterion_main!(benches);
