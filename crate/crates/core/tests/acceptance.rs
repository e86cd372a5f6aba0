//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so that every line is printed; exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use dichoman::cli::{run_sweep, RunConfig, SweepAxis};
use dichoman::cocycle::{example1_model, example1_product_model, parity_exponent, op_norm, verify_dichotomy};
use dichoman::conditions::{check_conditions, compute_beta, ln_k_ratio, ConditionConfig};
use dichoman::rates::{GrowthRate, SumConfig};
use dichoman::solver::{
    apply_phi_operator, builtin_perturbation, solve_manifold, trajectory, PerturbationKind, SolveConfig,
};
use dichoman::verify::{
    check_decay, check_invariance, check_perturbation_theorem, iterate_system, ErrorModel, PerturbationCheckConfig,
};
use dichoman::cocycle::ProductPoint;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Product formulas of the built-in example and the dichotomy with `D = 1`.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst_formula: f64 = 0.0;
    let mut d1_failures = 0;
    let mut worst_diag: f64 = 0.0;
    let mut worst_off: f64 = 0.0;
    for draw in 0..10 {
        let a: f64 = r.random_range(-1.0..-0.05);
        let b: f64 = r.random_range(0.0..1.5);
        let eps: f64 = r.random_range(0.0..1.0);
        let pick = |i: usize| if i == 0 { GrowthRate::exponential() } else { GrowthRate::polynomial() };
        let (mu, nu) = (pick(draw % 2), pick((draw / 2) % 2));
        let model = example1_model(mu.clone(), nu.clone(), a, b, eps).unwrap();
        let lm = |k: usize| mu.ln_value(k);
        let nu_part = |m: usize, n: usize| {
            0.5 * eps * (parity_exponent(m - 1) * nu.ln_value(m - 1) - parity_exponent(n - 1) * nu.ln_value(n - 1))
        };
        for n in 1..=200 {
            for m in n..=200 {
                let stable = a * (lm(m - 1) - lm(n) + lm(m) - lm(n - 1)) + nu_part(m, n);
                let unstable = -b * (lm(m) - lm(m - 1) + lm(m - 1) - lm(n)) - nu_part(m, n);
                let t = model.transition(m, n).unwrap();
                worst_formula = worst_formula.max(rel(op_norm(&t.stable), stable.exp()));
                let inv = model.unstable_inverse(m, n).unwrap();
                worst_formula = worst_formula.max(rel(op_norm(&inv), unstable.exp()));
            }
        }
        let cert = verify_dichotomy(&model.with_claimed_d(1.0).unwrap(), (1, 200)).unwrap();
        if !cert.pass {
            d1_failures += 1;
        }
        worst_diag = worst_diag.max(cert.sup_stable_ratio);
        worst_off = worst_off.max(cert.sup_stable_ratio_off_diagonal.max(cert.sup_unstable_ratio));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_formula <= 1e-12 && d1_failures == 0 && elapsed < 5.0;
    outcome(
        pass,
        format!(
            "formula rel err {worst_formula:.2e}; D = 1 rejected for {d1_failures}/10 models \
             (worst ratio {worst_diag:.4} at m = n, off-diagonal sup {worst_off:.4}); {elapsed:.2}s"
        ),
    )
}

/// Exponential beta and K ratio closed forms.
fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let e = GrowthRate::exponential();
    let (mut beta_err, mut k_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let q: f64 = r.random_range(1.2..4.0);
        let a: f64 = r.random_range(-2.0..-0.2);
        let eps: f64 = r.random_range(0.0..(-a * q) * 0.95);
        let beta = compute_beta(&e, &e, a, q, eps, (1, 100), &SumConfig::default()).unwrap();
        for m in 1..=100 {
            let printed = (-a + eps * (1.0 + 1.0 / q)).exp()
                * (1.0 - (a * q + eps).exp()).powf(1.0 / q)
                * (-eps * (1.0 + 2.0 / q) * m as f64).exp();
            beta_err = beta_err.max(rel(beta.beta(m), printed));
        }
        for n in 1..=100 {
            for m in n..=100 {
                let printed = a.exp() * ((a + eps * (1.0 + 2.0 / q)) * (m - n) as f64).exp();
                k_err = k_err.max(rel(ln_k_ratio(&beta, &e, m, n).exp(), printed));
            }
        }
    }
    outcome(
        beta_err <= 1e-10 && k_err <= 1e-10,
        format!("beta rel err {beta_err:.2e}, K ratio rel err {k_err:.2e}"),
    )
}

/// Polynomial bracket and the poly-log boundary.
fn criterion_3() -> Outcome {
    let p = GrowthRate::polynomial();
    let mut outside = 0;
    let mut checked = 0;
    for (a, q, eps) in [(-1.0, 2.0, 0.0), (-1.5, 2.0, 0.3), (-2.0, 3.0, 0.5), (-0.8, 2.5, 0.2), (-3.0, 1.5, 1.0)] {
        let s: f64 = a * q + eps + 1.0;
        assert!(s < 0.0);
        let beta = compute_beta(&p, &p, a, q, eps, (1, 1000), &SumConfig::default()).unwrap();
        for m in 1..=1000 {
            let shape = (1.0 + m as f64).powf(-eps * (1.0 + 2.0 / q) - 1.0 / q);
            let lower = 2f64.powf(a + eps / q + 1.0 / q) * s.abs().powf(1.0 / q) * shape;
            let upper = s.abs().powf(1.0 / q) / 2f64.powf(a - eps * (1.0 + 1.0 / q)) * shape;
            let b = beta.beta(m);
            checked += 1;
            if !(lower <= b * (1.0 + 1e-12) && b <= upper * (1.0 + 1e-12)) {
                outside += 1;
            }
        }
    }
    let cfg = RunConfig::from_json(
        r#"{
          "model": {
            "stable_dim": 1, "unstable_dim": 1,
            "mu": { "family": "poly-log", "lambda": 2.0 },
            "nu": { "family": "log" },
            "a": -0.5, "b": 1.0, "eps": 0.1,
            "cocycle": { "kind": "example1" }
          },
          "perturbation": { "kind": "power", "c0": 1.0, "q": 2.0 },
          "sweep": {
            "axis": "lambda",
            "x": { "min": 0.5, "max": 4.5, "steps": 41 },
            "eps": { "min": 0.0, "max": 0.6, "steps": 7 }
          }
        }"#,
    )
    .unwrap();
    let sweep = run_sweep(&cfg).unwrap();
    assert_eq!(sweep.axis, SweepAxis::Lambda);
    let rows = sweep.boundary.len();
    let matched = sweep.boundary.iter().filter(|b| b.within_one_cell == Some(true)).count();
    outcome(
        outside == 0 && matched == rows,
        format!("{outside}/{checked} beta values outside the bracket; boundary matched in {matched}/{rows} rows"),
    )
}

/// Normalization identity on a matrix of admissible built-in configurations.
fn criterion_4() -> Outcome {
    let e = GrowthRate::exponential();
    let p = GrowthRate::polynomial();
    let lg = GrowthRate::log();
    let mut configs: Vec<(GrowthRate, GrowthRate, f64, f64, f64)> = Vec::new();
    for (a, q, eps) in [(-1.0, 2.0, 0.0), (-1.0, 2.0, 0.5), (-0.5, 3.0, 0.3), (-2.0, 1.5, 1.0), (-0.3, 2.0, 0.1)] {
        configs.push((e.clone(), e.clone(), a, q, eps));
    }
    for (a, q, eps) in [(-1.0, 2.0, 0.0), (-1.5, 2.0, 0.3), (-2.0, 3.0, 0.5), (-0.8, 2.5, 0.2), (-3.0, 1.5, 1.0)] {
        configs.push((p.clone(), p.clone(), a, q, eps));
    }
    for lambda in [0.0, 1.0, 2.5] {
        for (a, q, eps) in [(-1.0, 2.0, 0.0), (-1.0, 2.0, 0.7), (-2.0, 3.0, 0.4)] {
            configs.push((GrowthRate::poly_log(lambda).unwrap(), lg.clone(), a, q, eps));
        }
    }
    for (lambda, eps) in [(2.0, 0.0), (2.0, 0.5), (3.0, 1.5), (4.0, 0.2)] {
        configs.push((GrowthRate::poly_log(lambda).unwrap(), lg.clone(), -0.5, 2.0, eps));
    }
    for (a, q, eps) in [(-1.0, 2.0, 0.5), (-0.5, 2.0, 0.3), (-2.0, 3.0, 2.0)] {
        configs.push((e.clone(), p.clone(), a, q, eps));
    }
    for (a, q, eps) in [(-1.0, 2.0, 0.4), (-0.7, 3.0, 1.0), (-1.2, 2.0, 0.0), (-2.0, 4.0, 2.5)] {
        configs.push((p.clone(), lg.clone(), a, q, eps));
    }
    let mut worst: f64 = 0.0;
    for (mu, nu, a, q, eps) in &configs {
        let beta = compute_beta(mu, nu, *a, *q, *eps, (1, 200), &SumConfig::default()).unwrap();
        for m in 1..=200 {
            worst = worst.max((beta.normalization(mu, nu, m) - 1.0).abs());
        }
    }
    outcome(
        configs.len() >= 30 && worst <= 1e-8,
        format!("{} configurations, worst |identity - 1| = {worst:.2e}", configs.len()),
    )
}

fn example1_exp_product(copies: usize) -> dichoman::cocycle::DichotomyModel {
    let e = GrowthRate::exponential();
    example1_product_model(e.clone(), e, -1.0, 1.0, 0.2, copies).unwrap()
}

/// Contraction on the cubic perturbation at 65 x 65.
fn criterion_5() -> Outcome {
    let model = example1_exp_product(2);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [PerturbationKind::Power, PerturbationKind::RotatingPower] {
        let start = Instant::now();
        let f = builtin_perturbation(kind, 1.0, 2.0, 4).unwrap();
        let report = check_conditions(&model, f.c, f.q, &ConditionConfig::default()).unwrap();
        let rho = report.ledger.rho;
        let closed = 2.0 * f.c * report.ledger.big_c.powf(3.0) * model.d * (6.0 * report.ledger.delta).powi(2);
        let (_, rep) = solve_manifold(&model, &f, &report, &SolveConfig::default()).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        let ok = (rho - closed).abs() <= 1e-12 * closed
            && rep.ratios.iter().all(|&r| r <= rho)
            && rep.iterations < 30
            && rep.a_posteriori_error <= 1e-8
            && elapsed < 60.0;
        pass &= ok;
        lines.push(format!(
            "{}: {} iterations, max ratio {:.2e} <= rho {:.3}, a-post {:.1e}, {:.2}s",
            f.name, rep.iterations, rep.contraction_factor_measured, rho, rep.a_posteriori_error, elapsed
        ));
    }
    outcome(pass, lines.join("; "))
}

/// Invariance and decay on the solved manifolds.
fn criterion_6() -> Outcome {
    let model = example1_exp_product(2);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [PerturbationKind::Power, PerturbationKind::RotatingPower] {
        let f = builtin_perturbation(kind, 1.0, 2.0, 4).unwrap();
        let report = check_conditions(&model, f.c, f.q, &ConditionConfig::default()).unwrap();
        let (family, rep) = solve_manifold(&model, &f, &report, &SolveConfig::default()).unwrap();
        let inv = check_invariance(&model, &f, &family, &report, &ErrorModel::from_report(&rep), 1, 5, 1000, 1.0);
        let decay = check_decay(&model, &f, &family, &report, 1, 1000, 5).unwrap();
        match inv {
            Ok(inv) => {
                let ok = inv.within_budget && decay.worst_ratio <= 1.0 + 1e-6 && decay.pairs_tested >= 1000;
                pass &= ok;
                lines.push(format!(
                    "{}: residual {:.2e} ({:.1e} of budget), decay worst {:.4} over {} pairs",
                    f.name, inv.max_residual, inv.max_budget_ratio, decay.worst_ratio, decay.pairs_tested
                ));
            }
            Err(e) => {
                pass = false;
                lines.push(format!("{}: {e}", f.name));
            }
        }
    }
    outcome(pass, lines.join("; "))
}

/// Perturbation estimate for nearby power perturbations.
fn criterion_7() -> Outcome {
    let model = example1_exp_product(2);
    let cfg = PerturbationCheckConfig::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in [PerturbationKind::Power, PerturbationKind::RotatingPower] {
        let f = builtin_perturbation(kind, 0.01, 2.0, 4).unwrap();
        let g = builtin_perturbation(kind, 0.012, 2.0, 4).unwrap();
        let pair = check_perturbation_theorem(&model, &f, &g, &cfg).unwrap();
        let same = check_perturbation_theorem(&model, &f, &f, &cfg).unwrap();
        let ok = pair.pass && same.lhs <= cfg.solve.tol;
        pass &= ok;
        lines.push(format!(
            "{}: lhs {:.2e} <= rhs {:.2e} + budget {:.1e}; self distance {:.1e}",
            f.name, pair.lhs, pair.rhs, pair.budget, same.lhs
        ));
    }
    outcome(pass, lines.join("; "))
}

/// The three oracle equivalences on random small instances.
fn criterion_8() -> Outcome {
    let (mut rec, mut phi, mut comp): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let instances = 20;
    for seed in 0..instances {
        let mut r = rng(800 + seed);
        let inst = random_instance(&mut r);
        let (de, df) = (inst.model.stable_dim(), inst.model.unstable_dim());
        let n = 1 + seed as usize % 3;
        let xi = ball_point(&mut r, de, inst.family.graph(n).unwrap().radius);
        let fast = trajectory(&inst.model, &inst.f, &inst.family, n, &xi, n + 6, inst.cfg.escape_slack).unwrap();
        let slow = split_sum_trajectory(&inst.model, &inst.f, &inst.family, n, &xi, n + 6);
        for (a, b) in fast.iter().zip(&slow) {
            rec = rec.max(sup_diff(a, b) / sup(b).max(f64::MIN_POSITIVE));
        }

        let next = apply_phi_operator(&inst.model, &inst.f, &inst.family, inst.cfg.escape_slack).unwrap();
        let g = next.graph(n).unwrap();
        let scale = sup(&g.values).max(f64::MIN_POSITIVE);
        let mut node_xi = [0.0; 2];
        for node in (0..g.node_count()).step_by(7) {
            g.node_coords(node, &mut node_xi);
            let oracle = direct_phi(&inst.model, &inst.f, &inst.family, n, &node_xi[..de]);
            phi = phi.max(sup_diff(g.node_value(node), &oracle) / scale);
        }

        let v = ProductPoint::from_slices(&ball_point(&mut r, de, 0.05), &ball_point(&mut r, df, 0.05));
        let (k, m) = (n + 2, n + 5);
        let direct = iterate_system(&inst.model, &inst.f, n, &v, m).unwrap().to_vec();
        let mid = iterate_system(&inst.model, &inst.f, n, &v, k).unwrap();
        let composed = iterate_system(&inst.model, &inst.f, k, &mid, m).unwrap().to_vec();
        comp = comp.max(sup_diff(&direct, &composed) / sup(&direct));
    }
    outcome(
        rec <= 1e-10 && phi <= 1e-8 && comp <= 1e-10,
        format!(
            "{instances} instances: recursion {rec:.1e}, operator {phi:.1e}, composition {comp:.1e} (relative)"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 built-in example exactness", criterion_1),
        ("2 exponential closed forms", criterion_2),
        ("3 polynomial and poly-log brackets", criterion_3),
        ("4 normalization identity", criterion_4),
        ("5 contraction", criterion_5),
        ("6 invariance and decay", criterion_6),
        ("7 perturbation estimate", criterion_7),
        ("8 oracle equivalences", criterion_8),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
