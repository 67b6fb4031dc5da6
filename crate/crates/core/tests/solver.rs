use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use linf_core::config::RunConfig;
use linf_core::grid::SubBox;
use linf_core::operator::LinearSolveOptions;
use linf_core::run::switch_location;
use linf_core::solver::{compute_fp, mean_norm, minimize_ep};
use linf_core::tensor::{check_legendre, check_legendre_hadamard};
use linf_core::verify::{absolute_min_spotcheck, randomized_start, rescaling_invariance_check, uniqueness_check};
use linf_core::{
    continuation_solve, DiscreteOperator, DofField, EllipticTensor, Execution, Grid, PSchedule, SolverOptions,
    Supremand, WeightedPowerNorm,
};

fn shipped() -> Vec<RunConfig> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut paths: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths.iter().map(|p| RunConfig::load(p).unwrap()).collect()
}

fn dirichlet_error(nodes: usize) -> f64 {
    let g = Grid::square(nodes).unwrap();
    let a = EllipticTensor::block_diagonal(&[vec![1.0]], &[vec![1.0, 0.3, 0.3, 0.7]]).unwrap();
    let op = DiscreteOperator::assemble(&g, &a, Execution::default()).unwrap();
    let exact = g.sample(1, |x, o| o[0] = (PI * x[0]).sin() * (2.0 * PI * x[1]).cos());
    // continuum A:D²u for the manufactured field
    let rhs = g.sample(1, |x, o| {
        let (s, c) = ((PI * x[0]).sin(), (PI * x[0]).cos());
        let (s2, c2) = ((2.0 * PI * x[1]).sin(), (2.0 * PI * x[1]).cos());
        o[0] = -PI * PI * s * c2 - 0.7 * 4.0 * PI * PI * s * c2 - 2.0 * 0.3 * 2.0 * PI * PI * c * s2;
    });
    let u = op
        .dirichlet_solve(&rhs, &exact, &LinearSolveOptions::default(), Execution::default())
        .unwrap();
    u.sup_distance(&exact)
}

#[test]
fn dirichlet_solve_is_second_order() {
    let (e1, e2) = (dirichlet_error(21), dirichlet_error(41));
    let ratio = e1 / e2;
    assert!((3.5..=4.6).contains(&ratio), "errors {e1:e} {e2:e}, ratio {ratio}");
}

#[test]
fn dirichlet_contract_on_shipped_tensors() {
    for cfg in shipped() {
        let pr = cfg.build().unwrap();
        let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::default()).unwrap();
        let zero = DofField::zeros(pr.grid.node_count(), op.components());
        let u = op
            .dirichlet_solve(&zero, &pr.clamp, &LinearSolveOptions::default(), Execution::default())
            .unwrap();
        assert!(u.is_finite());
    }
}

#[test]
fn legendre_never_exceeds_rank_one_constant() {
    for cfg in shipped() {
        let pr = cfg.build().unwrap();
        if !pr.tensor.is_constant() {
            continue;
        }
        let pts: Vec<Vec<f64>> = (0..pr.grid.node_count())
            .step_by(97)
            .map(|k| pr.grid.coords(k))
            .collect();
        let l = check_legendre(&pr.tensor, &pts).unwrap();
        let lh = check_legendre_hadamard(&pr.tensor, 720).unwrap();
        assert!(l <= lh + 1e-12, "{l} > {lh}");
    }
}

fn vector_problem() -> (DiscreteOperator, WeightedPowerNorm, DofField) {
    let mut cfg = shipped()
        .into_iter()
        .find(|c| c.domain.components == 2 && c.domain.dim == 2)
        .unwrap();
    cfg.set_nodes(17);
    let pr = cfg.build().unwrap();
    let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::default()).unwrap();
    (op, pr.supremand, pr.clamp)
}

#[test]
fn dual_field_is_annihilated_by_the_operator() {
    let (op, sup, clamp) = vector_problem();
    let opts = SolverOptions::default();
    let p = 8.0;
    let m = minimize_ep(&op, &sup, &clamp, p, &clamp, &opts).unwrap();
    let f = compute_fp(&op, &sup, &m.u, p, m.e_p, Execution::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zero = DofField::zeros(op.grid().node_count(), op.components());
    for _ in 0..5 {
        let vals: Vec<f64> = (0..op.free_dof_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phi = op.compose(&zero, &vals);
        let lphi = op.apply(&phi, Execution::default()).unwrap();
        let pair: f64 = f.values.iter().zip(&lphi.values).map(|(a, b)| a * b).sum();
        let scale =
            f.values.iter().map(|v| v * v).sum::<f64>().sqrt() * lphi.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(pair.abs() <= 1e-8 * scale, "{pair} vs {scale}");
    }
}

#[test]
fn warm_start_is_no_worse_than_cold() {
    let (op, sup, clamp) = vector_problem();
    let opts = SolverOptions::default();
    let schedule = PSchedule::geometric(64.0).unwrap();
    let warm = continuation_solve(&op, &sup, &clamp, &schedule, None, &opts).unwrap();
    let cold = minimize_ep(&op, &sup, &clamp, 64.0, &clamp, &opts).unwrap();
    let w = warm.final_row();
    println!(
        "warm: {} iterations, grad {:e}; cold: {} iterations, grad {:e}",
        w.iterations, w.grad_norm, cold.iterations, cold.grad_norm
    );
    assert!((w.e_p - cold.e_p).abs() <= 1e-8 * cold.e_p);
    assert!(w.iterations <= cold.iterations);
    assert!(w.grad_norm <= cold.grad_norm);
}

#[test]
fn affine_rescaling_has_no_value_ratio() {
    let cfg = shipped().into_iter().find(|c| c.to_toml().contains("affine")).unwrap();
    let pr = cfg.build().unwrap();
    let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::default()).unwrap();
    for factor in [1.0, 0.5] {
        let r = rescaling_invariance_check(&op, &pr.supremand, &pr.clamp, &pr.schedule, factor, &pr.options).unwrap();
        assert!(r.value_ratio.is_none());
        assert!(r.argmin_distance <= 1e-9);
    }
}

#[test]
fn rescaling_by_one_is_exact() {
    let (op, sup, clamp) = vector_problem();
    let schedule = PSchedule::geometric(32.0).unwrap();
    let r = rescaling_invariance_check(&op, &sup, &clamp, &schedule, 1.0, &SolverOptions::default()).unwrap();
    assert_eq!(r.argmin_distance, 0.0);
    assert_eq!(r.value_ratio, Some(1.0));
}

#[test]
fn solver_output_passes_the_spotcheck() {
    let (op, sup, clamp) = vector_problem();
    let schedule = PSchedule::geometric(1024.0).unwrap();
    let opts = SolverOptions {
        bracket_stop: 0.0,
        ..SolverOptions::default()
    };
    let sol = continuation_solve(&op, &sup, &clamp, &schedule, None, &opts).unwrap();
    let sub = SubBox::centered(op.grid(), 0.5);
    assert!(absolute_min_spotcheck(&op, &sup, &sol.u, &sub, 16, 1e-3, 9, Execution::default()).unwrap());
}

#[test]
fn sequential_and_parallel_agree_exactly() {
    let (op, sup, clamp) = vector_problem();
    let schedule = PSchedule::geometric(128.0).unwrap();
    let solve = |execution| {
        let opts = SolverOptions {
            execution,
            ..SolverOptions::default()
        };
        continuation_solve(&op, &sup, &clamp, &schedule, None, &opts).unwrap()
    };
    let (a, b) = (solve(Execution::Sequential), solve(Execution::Parallel));
    assert_eq!(a.u.values, b.u.values);
    assert_eq!(a.rows, b.rows);
}

fn named(fragment: &str) -> RunConfig {
    shipped().into_iter().find(|c| c.to_toml().contains(fragment)).unwrap()
}

#[test]
fn bang_bang_minimiser_survives_local_perturbations() {
    let pr = named("symmetric-velocity").build().unwrap();
    let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::default()).unwrap();
    let sol = continuation_solve(&op, &pr.supremand, &pr.clamp, &pr.schedule, None, &pr.options).unwrap();
    let sub = SubBox::centered(&pr.grid, 0.5);
    let ex = Execution::default();
    assert!(absolute_min_spotcheck(&op, &pr.supremand, &sol.u, &sub, 50, 1e-3, 1, ex).unwrap());
    assert!(absolute_min_spotcheck(&op, &pr.supremand, &sol.u, &sub, 5, 0.0, 1, ex).unwrap());

    // the dual field stays bounded in mean
    let c = pr.supremand.growth_constant();
    let bound = c.powf(1.5) * sol.e_inf_estimate.sqrt();
    assert!(mean_norm(&op, &sol.f) <= bound, "{} > {bound}", mean_norm(&op, &sol.f));
}

#[test]
fn affine_data_is_start_independent() {
    let pr = named("affine").build().unwrap();
    let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::default()).unwrap();
    let b = randomized_start(&op, &pr.clamp, 0.3, 4);
    let r = uniqueness_check(&op, &pr.supremand, &pr.clamp, &pr.schedule, &pr.clamp, &b, &pr.options).unwrap();
    assert!(r.distance <= 1e-8, "{}", r.distance);
}

#[test]
fn midpoint_of_two_solutions_is_no_worse() {
    let (op, sup, clamp) = vector_problem();
    let schedule = PSchedule::geometric(16.0).unwrap();
    let opts = SolverOptions::default();
    let a = continuation_solve(&op, &sup, &clamp, &schedule, None, &opts).unwrap().u;
    let b = randomized_start(&op, &clamp, 0.2, 8);
    let mut mid = a.clone();
    mid.axpy(1.0, &b);
    mid.values.iter_mut().for_each(|v| *v *= 0.5);
    let ex = Execution::default();
    let (la, lb, lm) = (op.apply_rows(&a, ex), op.apply_rows(&b, ex), op.apply_rows(&mid, ex));
    let nn = op.components();
    let cap =
        linf_core::solver::max_supremand(&op, &sup, &a, ex).max(linf_core::solver::max_supremand(&op, &sup, &b, ex));
    for (r, &k) in op.row_nodes().iter().enumerate() {
        let x = op.grid().coords(k);
        let s = r * nn..(r + 1) * nn;
        let fm = sup.value(&x, &lm[s.clone()]);
        assert!(fm <= 0.5 * (sup.value(&x, &la[s.clone()]) + sup.value(&x, &lb[s])) + 1e-8);
        assert!(fm <= cap + 1e-8);
    }
}

#[test]
fn quadratic_data_keeps_its_constant_acceleration() {
    let pr = named("quadratic").build().unwrap();
    let op = DiscreteOperator::assemble(&pr.grid, &pr.tensor, Execution::default()).unwrap();
    let sol = continuation_solve(&op, &pr.supremand, &pr.clamp, &pr.schedule, None, &pr.options).unwrap();
    assert!((sol.e_inf_estimate - 4.0).abs() <= 0.02 * 4.0);
    let lu = op.apply_rows(&sol.u, Execution::default());
    assert!(switch_location(&op, &lu).is_none());
}
