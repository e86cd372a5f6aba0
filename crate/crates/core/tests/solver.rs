//! Graph iteration, interpolation and the invariance checks on solved graphs.

mod common;

use common::{ball_point, rng};
use dichoman::cocycle::{example1_model, example1_product_model, DichotomyModel};
use dichoman::conditions::{check_conditions, ConditionConfig, ConditionReport};
use dichoman::rates::GrowthRate;
use dichoman::solver::{
    apply_phi_operator, builtin_perturbation, certify_seeded, initial_family, solve_manifold, trajectory, with_grid,
    GridSpec, PerturbationFamily, PerturbationKind, SolveConfig,
};
use dichoman::verify::{
    check_decay, check_invariance, check_perturbation_theorem, fixed_point_residual, iterate_system,
    perturbation_distance, ErrorModel, PerturbationCheckConfig,
};
use dichoman::cocycle::ProductPoint;
use dichoman::Error;
use rand::Rng;

fn small_cfg(nodes: usize) -> SolveConfig {
    SolveConfig {
        grid: GridSpec { nodes_per_axis: nodes },
        window: (1, 3),
        ..SolveConfig::default()
    }
}

fn exp_model(a: f64, b: f64, eps: f64) -> DichotomyModel {
    let e = GrowthRate::exponential();
    example1_model(e.clone(), e, a, b, eps).unwrap()
}

fn setup(model: &DichotomyModel, kind: PerturbationKind, c0: f64) -> (PerturbationFamily, ConditionReport) {
    let f = builtin_perturbation(kind, c0, 2.0, 2 * model.stable_dim()).unwrap();
    let report = check_conditions(model, f.c, f.q, &ConditionConfig::default()).unwrap();
    (f, report)
}

#[test]
fn measured_contraction_within_theory() {
    let mut r = rng(21);
    for _ in 0..6 {
        let a = r.random_range(-1.5..-0.4);
        let eps = r.random_range(0.0..-a / 2.0 * 0.9);
        let model = exp_model(a, r.random_range(0.0..1.5), eps);
        let (f, report) = setup(&model, PerturbationKind::RotatingPower, r.random_range(0.2..2.0));
        let (_, rep) = solve_manifold(&model, &f, &report, &small_cfg(33)).unwrap();
        let rho = report.ledger.rho;
        assert!(rep.ratios.iter().all(|&x| x <= 1.1 * rho), "{:?} vs {rho}", rep.ratios);
        assert!(rep.a_posteriori_error <= 1e-8);
    }
}

#[test]
fn converged_graph_is_a_fixed_point_up_to_budget() {
    let model = exp_model(-1.0, 0.5, 0.2);
    let (f, report) = setup(&model, PerturbationKind::RotatingPower, 1.0);
    let cfg = small_cfg(33);
    let (phi, rep) = solve_manifold(&model, &f, &report, &cfg).unwrap();
    let res = fixed_point_residual(&model, &f, &phi, cfg.escape_slack).unwrap();
    assert!(res <= rep.a_posteriori_error + rep.tail_metric + 1e-15, "{res}");
}

#[test]
fn zero_perturbation_gives_zero_operator_image() {
    let model = exp_model(-1.0, 1.0, 0.1);
    let (f, report) = setup(&model, PerturbationKind::RotatingPower, 1.0);
    let cfg = small_cfg(17);
    let (zero, _) = initial_family(&model, &f, &report, &cfg).unwrap();
    let nonzero = apply_phi_operator(&model, &f, &zero, cfg.escape_slack).unwrap();
    assert!(nonzero.graphs.iter().any(|g| g.values.iter().any(|&v| v != 0.0)));
    let g0 = builtin_perturbation(PerturbationKind::Zero, 1.0, 2.0, 2).unwrap();
    let image = apply_phi_operator(&model, &g0, &nonzero, cfg.escape_slack).unwrap();
    assert!(image.graphs.iter().all(|g| g.values.iter().all(|&v| v == 0.0)));
    for g in &nonzero.graphs {
        assert!(g.node_value(g.origin_node()).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn trajectories_respect_their_decay_bound() {
    let model = exp_model(-0.8, 0.3, 0.15);
    let (f, report) = setup(&model, PerturbationKind::RotatingPower, 1.5);
    let cfg = small_cfg(33);
    let (phi, _) = solve_manifold(&model, &f, &report, &cfg).unwrap();
    let mut r = rng(22);
    for _ in 0..100 {
        let n = r.random_range(1..=3);
        let xi = ball_point(&mut r, 1, phi.graph(n).unwrap().radius);
        let m = (n + r.random_range(0..20)).min(phi.last_index());
        trajectory(&model, &f, &phi, n, &xi, m, cfg.escape_slack).unwrap();
    }
    let zero = trajectory(&model, &f, &phi, 2, &[0.0], 12, cfg.escape_slack).unwrap();
    assert!(zero.iter().all(|x| x[0] == 0.0));
}

#[test]
fn linear_trajectory_is_the_transition() {
    let model = exp_model(-0.8, 0.3, 0.15);
    let (f, report) = setup(&model, PerturbationKind::Zero, 1.0);
    let cfg = small_cfg(9);
    let (phi, _) = solve_manifold(&model, &f, &report, &cfg).unwrap();
    let xs = trajectory(&model, &f, &phi, 2, &[0.01], 9, cfg.escape_slack).unwrap();
    for (k, x) in xs.iter().enumerate() {
        let t = model.transition(2 + k, 2).unwrap();
        assert!((x[0] - t.stable[(0, 0)] * 0.01).abs() <= 1e-18);
    }
    let v = ProductPoint::from_slices(&[0.01], &[0.02]);
    let w = iterate_system(&model, &f, 2, &v, 9).unwrap();
    let t = model.transition(9, 2).unwrap();
    assert!((w.unstable[0] - t.unstable[(0, 0)] * 0.02).abs() <= 1e-15);
}

#[test]
fn halving_the_spacing_moves_values_by_at_most_one_cell() {
    let model = exp_model(-1.0, 0.5, 0.2);
    let (f, report) = setup(&model, PerturbationKind::RotatingPower, 2.0);
    let coarse_cfg = small_cfg(17);
    let (coarse, _) = solve_manifold(&model, &f, &report, &coarse_cfg).unwrap();
    let (fine, _) = solve_manifold(&model, &f, &report, &with_grid(&coarse_cfg, 33)).unwrap();
    for n in 1..=3 {
        let (gc, gf) = (coarse.graph(n).unwrap(), fine.graph(n).unwrap());
        let mut xi = [0.0];
        let mut worst: f64 = 0.0;
        for node in 0..gf.node_count() {
            gf.node_coords(node, &mut xi);
            worst = worst.max((gc.evaluate(&xi)[0] - gf.node_value(node)[0]).abs());
        }
        assert!(worst <= gc.spacing(), "n = {n}: {worst} > {}", gc.spacing());
    }
}

#[test]
fn interpolation_is_one_lipschitz_and_radial_outside() {
    let model = example1_product_model(GrowthRate::exponential(), GrowthRate::exponential(), -1.0, 1.0, 0.2, 2)
        .unwrap();
    let (f, report) = setup(&model, PerturbationKind::RotatingPower, 2.0);
    let (phi, _) = solve_manifold(&model, &f, &report, &small_cfg(17)).unwrap();
    let g = phi.graph(2).unwrap();
    let mut r = rng(23);
    for _ in 0..500 {
        let x = ball_point(&mut r, 2, g.radius);
        let y = ball_point(&mut r, 2, g.radius);
        let gap = x.iter().zip(&y).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        let (vx, vy) = (g.evaluate(&x), g.evaluate(&y));
        let diff = vx.iter().zip(&vy).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        assert!(diff <= gap * (1.0 + 1e-9));
    }
    let mut xi = [0.0; 2];
    for node in 0..g.node_count() {
        g.node_coords(node, &mut xi);
        assert_eq!(g.evaluate(&xi), g.node_value(node));
        if xi.iter().any(|v| v.abs() == g.radius) {
            let out = [xi[0] * 2.0, xi[1] * 2.0];
            assert_eq!(g.evaluate(&out), g.node_value(node));
        }
    }
}

#[test]
fn certificate_is_stable_under_resampling() {
    let f = builtin_perturbation(PerturbationKind::RotatingPower, 1.0, 2.0, 4).unwrap();
    let sups: Vec<f64> = (0..4)
        .map(|seed| certify_seeded(f.map().as_ref(), 2.0, 4, 1000 + seed, 10_000).unwrap())
        .collect();
    let lo = sups.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sups.iter().cloned().fold(0.0, f64::max);
    assert!(hi <= 1.05 * lo, "{sups:?}");
    let zero = builtin_perturbation(PerturbationKind::Zero, 1.0, 2.0, 2).unwrap();
    assert_eq!(zero.certificate, 0.0);
}

#[test]
fn scaled_test_ball_is_flagged_or_escapes() {
    let model = exp_model(-1.0, 0.5, 0.2);
    let (f, report) = setup(&model, PerturbationKind::RotatingPower, 1.0);
    let (phi, rep) = solve_manifold(&model, &f, &report, &small_cfg(33)).unwrap();
    let errors = ErrorModel::from_report(&rep);
    let inside = check_invariance(&model, &f, &phi, &report, &errors, 1, 3, 200, 1.0).unwrap();
    assert!(!inside.outside_guarantee && inside.within_budget && inside.escapes == 0);
    match check_invariance(&model, &f, &phi, &report, &errors, 1, 3, 200, 1.5) {
        Ok(outside) => assert!(outside.outside_guarantee),
        Err(e) => assert!(matches!(e, Error::BallEscape { .. }), "{e}"),
    }
}

#[test]
fn linear_decay_ratio_is_at_most_half() {
    let model = exp_model(-0.6, 0.5, 0.25);
    let (f, report) = setup(&model, PerturbationKind::Zero, 1.0);
    let (phi, _) = solve_manifold(&model, &f, &report, &small_cfg(9)).unwrap();
    let d = check_decay(&model, &f, &phi, &report, 1, 300, 8).unwrap();
    assert!(d.worst_ratio <= model.d / (2.0 * report.ledger.big_c) * (1.0 + 1e-12));
    assert!(d.worst_ratio > 0.0);
}

#[test]
fn distance_between_builtin_kinds() {
    let p = |c0| builtin_perturbation(PerturbationKind::Power, c0, 2.0, 2).unwrap();
    let z = builtin_perturbation(PerturbationKind::Zero, 1.0, 2.0, 2).unwrap();
    let d = perturbation_distance(&p(0.3), &p(0.5), (1, 3), 500, 0.1).unwrap();
    assert!((d - 0.2).abs() <= 1e-12, "{d}");
    let d = perturbation_distance(&z, &p(0.7), (1, 3), 500, 0.1).unwrap();
    assert!((d - 0.7).abs() <= 1e-12, "{d}");
    assert_eq!(perturbation_distance(&p(0.7), &p(0.7), (1, 3), 500, 0.1).unwrap(), 0.0);
}

#[test]
fn graph_distance_grows_at_most_linearly_in_the_constant() {
    let model = exp_model(-1.0, 1.0, 0.2);
    let cfg = PerturbationCheckConfig {
        solve: small_cfg(17),
        ..PerturbationCheckConfig::default()
    };
    let base = builtin_perturbation(PerturbationKind::RotatingPower, 0.5, 2.0, 2).unwrap();
    for h in [0.2, 0.1, 0.05] {
        let g = builtin_perturbation(PerturbationKind::RotatingPower, 0.5 + h, 2.0, 2).unwrap();
        let rep = check_perturbation_theorem(&model, &base, &g, &cfg).unwrap();
        assert!(rep.pass);
        assert!(rep.lhs <= h + rep.budget, "h = {h}: {}", rep.lhs);
    }
    let same = check_perturbation_theorem(&model, &base, &base, &cfg).unwrap();
    assert_eq!(same.lhs, 0.0);
}
