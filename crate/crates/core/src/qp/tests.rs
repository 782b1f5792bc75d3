use super::*;
use nalgebra::{dmatrix, dvector};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_sys(a: f64, b: f64) -> SystemParams {
    SystemParams::new(dmatrix![a], dmatrix![b]).unwrap()
}

fn unit_cost(n: usize, m: usize) -> QuadCostSpec {
    QuadCostSpec::constant(DMatrix::identity(n, n), DMatrix::identity(m, m)).unwrap()
}

fn wide_box(m: usize) -> InputPolytope {
    InputPolytope::from_box(&vec![-1e6; m], &vec![1e6; m]).unwrap()
}

fn opts(backend: Backend) -> SolverOptions {
    SolverOptions { backend, ..SolverOptions::default() }
}

struct Instance {
    sys: SystemParams,
    cost: QuadCostSpec,
    x0: DVector<f64>,
}

fn random_instance(seed: u64, n: usize, m: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let rho = crate::linsys::spectral_radius(&a);
    if rho > 1.1 {
        a *= 1.1 / rho;
    }
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let lq = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let lr = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let q = &lq * lq.transpose() + DMatrix::identity(n, n) * 0.1;
    let r = &lr * lr.transpose() + DMatrix::identity(m, m) * 0.1;
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    Instance {
        sys: SystemParams::new(a, b).unwrap(),
        cost: QuadCostSpec::constant(q, r).unwrap(),
        x0,
    }
}

#[test]
fn horizon_one_interior() {
    let sys = scalar_sys(0.5, 1.0);
    let cost = unit_cost(1, 1);
    let u = wide_box(1);
    let p = HorizonProblem::new(&sys, InitialState::Fixed(dvector![0.1]), 1, 0, &cost, &u);
    let sol = solve_horizon(&p, &SolverOptions::default()).unwrap();
    assert!(sol.is_optimal());
    assert!(sol.inputs[0][0].abs() < 1e-14);
    assert!((sol.objective - 0.01).abs() < 1e-15);
}

#[test]
fn horizon_two_calculus_example() {
    let sys = scalar_sys(0.5, 1.0);
    let cost = unit_cost(1, 1);
    let u = InputPolytope::from_box(&[-10.0], &[10.0]).unwrap();
    for backend in [Backend::Dense, Backend::Structured] {
        let p = HorizonProblem::new(&sys, InitialState::Fixed(dvector![1.0]), 2, 0, &cost, &u);
        let sol = solve_horizon(&p, &opts(backend)).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.inputs[0][0] + 0.25).abs() < 1e-12, "{backend:?}");
        assert!(sol.inputs[1][0].abs() < 1e-12);
    }
}

#[test]
fn clipped_input_matches_grid_search() {
    let sys = scalar_sys(0.5, 1.0);
    let cost = unit_cost(1, 1);
    let u = InputPolytope::from_box(&[-0.1], &[0.1]).unwrap();
    let p = HorizonProblem::new(&sys, InitialState::Fixed(dvector![1.0]), 2, 0, &cost, &u);
    for backend in [Backend::Dense, Backend::Structured] {
        let sol = solve_horizon(&p, &opts(backend)).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.inputs[0][0] + 0.1).abs() < 1e-12);
        // grid oracle over both inputs at resolution 1e-4
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=2000 {
            let u0 = -0.1 + 1e-4 * i as f64;
            for j in 0..=2000 {
                let u1 = -0.1 + 1e-4 * j as f64;
                let c = horizon_cost(&p, &dvector![1.0], &[dvector![u0], dvector![u1]]);
                if c < best.0 {
                    best = (c, u0, u1);
                }
            }
        }
        assert!((best.1 - sol.inputs[0][0]).abs() <= 1e-4);
        assert!((best.2 - sol.inputs[1][0]).abs() <= 1e-4);
        assert!(sol.objective <= best.0 + 1e-12);
    }
}

#[test]
fn baseline_with_one_step_is_horizon_one() {
    let inst = random_instance(3, 2, 1);
    let u = InputPolytope::from_box(&[-0.2], &[0.2]).unwrap();
    let base = solve_full_horizon_baseline(&inst.sys, &inst.cost, &u, 1, &inst.x0, &SolverOptions::default()).unwrap();
    let p = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), 1, 1, &inst.cost, &u);
    let direct = solve_horizon(&p, &SolverOptions::default()).unwrap();
    assert_eq!(base.inputs, direct.inputs);
    assert_eq!(base.objective, direct.objective);
}

#[test]
fn tightening_the_polytope_never_lowers_the_optimum() {
    for seed in 0..20 {
        let inst = random_instance(seed, 2, 2);
        let mut last = f64::NEG_INFINITY;
        for half in [10.0, 1.0, 0.5, 0.2, 0.05] {
            let u = InputPolytope::from_box(&[-half, -half], &[half, half]).unwrap();
            let sol = solve_full_horizon_baseline(&inst.sys, &inst.cost, &u, 15, &inst.x0, &SolverOptions::default()).unwrap();
            assert!(sol.is_optimal());
            assert!(sol.objective >= last - 1e-9, "seed {seed}: {} < {last}", sol.objective);
            last = sol.objective;
        }
    }
}

#[test]
fn unconstrained_baseline_matches_riccati() {
    for seed in 0..30 {
        let inst = random_instance(seed, 3, 2);
        let u = wide_box(2);
        for backend in [Backend::Dense, Backend::Structured] {
            let sol = solve_full_horizon_baseline(&inst.sys, &inst.cost, &u, 12, &inst.x0, &opts(backend)).unwrap();
            let rr = riccati_reference(&inst.sys, &inst.cost, 12, 1, &inst.x0, None);
            for (a, b) in sol.inputs.iter().zip(&rr.inputs) {
                assert!((a - b).amax() <= 1e-6);
            }
            assert!((sol.objective - rr.cost).abs() <= 1e-8 * rr.cost.max(1.0));
        }
    }
}

#[test]
fn riccati_single_step_is_zero() {
    let sys = scalar_sys(0.5, 1.0);
    let rr = riccati_reference(&sys, &unit_cost(1, 1), 1, 0, &dvector![1.0], None);
    assert_eq!(rr.inputs[0][0], 0.0);
    assert_eq!(rr.cost, 1.0);
}

#[test]
fn riccati_terminal_step_identity() {
    let inst = random_instance(11, 2, 2);
    let (qt, _) = inst.cost.stage(0);
    let qt = qt.clone();
    let rr = riccati_reference(&inst.sys, &inst.cost, 6, 0, &inst.x0, Some(&qt));
    let (a, b) = (inst.sys.a(), inst.sys.b());
    let (_, r) = inst.cost.stage(5);
    let s = r + b.transpose() * &qt * b;
    let xt1 = &rr.states[5];
    let expect = -(s.try_inverse().unwrap() * b.transpose() * &qt * a * xt1);
    assert!((&rr.inputs[5] - expect).amax() < 1e-12);
    assert_eq!(rr.p[6], qt);
}

#[test]
fn riccati_cost_matches_grid_minimum() {
    let sys = scalar_sys(0.5, 1.0);
    let cost = unit_cost(1, 1);
    let rr = riccati_reference(&sys, &cost, 3, 0, &dvector![1.0], None);
    let eval = |u: [f64; 3]| {
        let mut x = 1.0;
        let mut c = 0.0;
        for ui in u {
            c += x * x + ui * ui;
            x = 0.5 * x + ui;
        }
        c
    };
    let mut best = (f64::INFINITY, [0.0; 3]);
    let coarse = |i: i32| -1.0 + 0.01 * i as f64;
    for i in 0..=200 {
        for j in 0..=200 {
            for k in 0..=200 {
                let u = [coarse(i), coarse(j), coarse(k)];
                let c = eval(u);
                if c < best.0 {
                    best = (c, u);
                }
            }
        }
    }
    let centre = best.1;
    let fine = |c: f64, i: i32| c - 0.01 + 0.0005 * i as f64;
    for i in 0..=40 {
        for j in 0..=40 {
            for k in 0..=40 {
                let u = [fine(centre[0], i), fine(centre[1], j), fine(centre[2], k)];
                let c = eval(u);
                if c < best.0 {
                    best = (c, u);
                }
            }
        }
    }
    assert!((rr.cost - best.0).abs() <= 1e-4, "{} vs {}", rr.cost, best.0);
}

#[test]
fn singular_r_is_regularized_and_reported() {
    let sys = scalar_sys(0.5, 1.0);
    let cost = QuadCostSpec::constant(dmatrix![1.0], dmatrix![0.0]).unwrap();
    let u = InputPolytope::from_box(&[-1.0], &[1.0]).unwrap();
    let p = HorizonProblem::new(&sys, InitialState::Fixed(dvector![1.0]), 4, 0, &cost, &u);
    let sol = solve_horizon(&p, &SolverOptions::default()).unwrap();
    assert_eq!(sol.regularization, R_REGULARIZATION);
    // deadbeat after one step: u0 = -0.5
    assert!((sol.inputs[0][0] + 0.5).abs() < 1e-6);
    // last input is uncharged except by the regularizer
    assert!(sol.inputs[3][0].abs() < 1e-8);
}

#[test]
fn free_initial_state_backends_agree() {
    for seed in 0..20 {
        let inst = random_instance(seed, 2, 1);
        // shift the box so that zero is infeasible and the free state is nontrivial
        let u = InputPolytope::from_box(&[0.3], &[1.0]).unwrap();
        let p = HorizonProblem::new(&inst.sys, InitialState::Free, 10, 0, &inst.cost, &u);
        let d = solve_horizon(&p, &opts(Backend::Dense)).unwrap();
        let s = solve_horizon(&p, &opts(Backend::Structured)).unwrap();
        assert!(d.is_optimal() && s.is_optimal());
        assert!((d.x0() - s.x0()).amax() < 1e-8);
        assert!((d.objective - s.objective).abs() < 1e-9 * d.objective.max(1.0));
    }
}

#[test]
fn warm_start_reaches_same_optimum() {
    let inst = random_instance(5, 2, 2);
    let u = InputPolytope::from_box(&[-0.3, -0.1], &[0.3, 0.2]).unwrap();
    let p = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), 12, 0, &inst.cost, &u);
    let cold = solve_horizon(&p, &SolverOptions::default()).unwrap();
    let warm = solve_horizon_warm(&p, &SolverOptions::default(), Some(&cold.inputs)).unwrap();
    assert!(warm.iterations <= cold.iterations);
    for (a, b) in cold.inputs.iter().zip(&warm.inputs) {
        assert!((a - b).amax() < 1e-10);
    }
}

#[test]
fn rejects_inconsistent_problem() {
    let sys = scalar_sys(0.5, 1.0);
    let cost = unit_cost(1, 1);
    let u = wide_box(1);
    let p = HorizonProblem::new(&sys, InitialState::Fixed(dvector![1.0, 2.0]), 3, 0, &cost, &u);
    assert!(matches!(solve_horizon(&p, &SolverOptions::default()), Err(Error::DimensionMismatch { .. })));
    let p = HorizonProblem::new(&sys, InitialState::Fixed(dvector![1.0]), 0, 0, &cost, &u);
    assert!(solve_horizon(&p, &SolverOptions::default()).is_err());
}

fn general_polytope(seed: u64, m: usize) -> InputPolytope {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // random cuts around the origin plus a bounding box
    let extra = 3;
    let p = 2 * m + extra;
    let mut f = DMatrix::zeros(p, m);
    let mut b = DVector::zeros(p);
    for k in 0..m {
        f[(2 * k, k)] = 1.0;
        f[(2 * k + 1, k)] = -1.0;
        b[2 * k] = rng.random_range(0.1..1.0);
        b[2 * k + 1] = rng.random_range(0.1..1.0);
    }
    for i in 2 * m..p {
        for k in 0..m {
            f[(i, k)] = rng.random_range(-1.0..1.0);
        }
        b[i] = rng.random_range(0.05..0.5);
    }
    InputPolytope::new(f, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kkt_certificate_holds(seed in 0u64..10_000, n in 1usize..4, m in 1usize..3, horizon in 1usize..25) {
        let inst = random_instance(seed, n, m);
        let u = general_polytope(seed, m);
        let p = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), horizon, 0, &inst.cost, &u);
        let sol = solve_horizon(&p, &SolverOptions::default()).unwrap();
        prop_assert!(sol.is_optimal(), "kkt {:e} feas {:e}", sol.kkt_residual, sol.feas_residual);
        for (w, mu) in sol.inputs.iter().zip(&sol.multipliers) {
            prop_assert!(u.contains(w, 1e-9));
            prop_assert!(mu.iter().all(|&v| v >= -1e-8));
        }
    }

    #[test]
    fn backends_agree_on_constrained_problems(seed in 0u64..10_000, n in 1usize..4, m in 1usize..3, horizon in 1usize..20) {
        let inst = random_instance(seed, n, m);
        let u = general_polytope(seed, m);
        let p = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), horizon, 0, &inst.cost, &u);
        let d = solve_horizon(&p, &opts(Backend::Dense)).unwrap();
        let s = solve_horizon(&p, &opts(Backend::Structured)).unwrap();
        prop_assert!((d.objective - s.objective).abs() <= 1e-9 * d.objective.max(1.0));
        for (a, b) in d.inputs.iter().zip(&s.inputs) {
            prop_assert!((a - b).amax() <= 1e-6);
        }
    }

    #[test]
    fn unconstrained_matches_riccati(seed in 0u64..10_000, n in 1usize..4, m in 1usize..3, horizon in 1usize..21) {
        let inst = random_instance(seed, n, m);
        let u = wide_box(m);
        let p = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), horizon, 0, &inst.cost, &u);
        let sol = solve_horizon(&p, &SolverOptions::default()).unwrap();
        let rr = riccati_reference(&inst.sys, &inst.cost, horizon, 0, &inst.x0, None);
        for (a, b) in sol.inputs.iter().zip(&rr.inputs) {
            prop_assert!((a - b).amax() <= 1e-6);
        }
        prop_assert!((sol.objective - rr.cost).abs() <= 1e-8 * rr.cost.max(1.0));
    }

    #[test]
    fn argmin_is_scale_invariant(seed in 0u64..10_000, s in 0.01f64..100.0) {
        let inst = random_instance(seed, 2, 2);
        let u = general_polytope(seed, 2);
        let scaled = inst.cost.scaled(s).unwrap();
        let p1 = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), 10, 0, &inst.cost, &u);
        let p2 = HorizonProblem::new(&inst.sys, InitialState::Fixed(inst.x0.clone()), 10, 0, &scaled, &u);
        let a = solve_horizon(&p1, &SolverOptions::default()).unwrap();
        let b = solve_horizon(&p2, &SolverOptions::default()).unwrap();
        for (x, y) in a.inputs.iter().zip(&b.inputs) {
            prop_assert!((x - y).amax() <= 1e-8);
        }
    }
}
