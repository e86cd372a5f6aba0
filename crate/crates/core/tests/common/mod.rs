//! Independent oracles and random instances shared by the integration tests.
#![allow(dead_code)]

use dichoman::cocycle::{example1_model, example1_product_model, DichotomyModel};
use dichoman::conditions::{check_conditions, ConditionConfig, ConditionReport};
use dichoman::rates::GrowthRate;
use dichoman::solver::{
    apply_phi_operator, builtin_perturbation, initial_family, GridSpec, ManifoldFamily, PerturbationFamily,
    PerturbationKind, SolveConfig,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small admissible problem with a nonzero first iterate.
pub struct Instance {
    pub model: DichotomyModel,
    pub f: PerturbationFamily,
    pub report: ConditionReport,
    pub family: ManifoldFamily,
    pub cfg: SolveConfig,
}

/// Random built-in example model with exponential or polynomial rates, admissible
/// for `q = 2`, perturbed by a rotating power map, with the graph family
/// after one operator application from zero.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let q = 2.0;
    let poly = rng.random_bool(0.5);
    let (rate, a, eps) = if poly {
        let a: f64 = rng.random_range(-2.5..-1.2);
        // a + eps (1 + 2/q) + 1/q <= 0
        let eps_max = (-a - 0.5) / 2.0;
        (GrowthRate::polynomial(), a, rng.random_range(0.0..eps_max * 0.9))
    } else {
        let a: f64 = rng.random_range(-1.5..-0.3);
        (GrowthRate::exponential(), a, rng.random_range(0.0..(-a / 2.0) * 0.9))
    };
    let b: f64 = rng.random_range(0.0..1.5);
    let copies = if rng.random_bool(0.5) { 1 } else { 2 };
    let model = if copies == 1 {
        example1_model(rate.clone(), rate, a, b, eps).unwrap()
    } else {
        example1_product_model(rate.clone(), rate, a, b, eps, 2).unwrap()
    };
    let c0: f64 = rng.random_range(0.2..2.0);
    let f = builtin_perturbation(PerturbationKind::RotatingPower, c0, q, 2 * copies).unwrap();
    let report = check_conditions(&model, f.c, q, &ConditionConfig::default()).unwrap();
    let cfg = SolveConfig {
        grid: GridSpec {
            nodes_per_axis: if copies == 1 { 17 } else { 9 },
        },
        window: (1, 3),
        // polynomial tails decay slowly; the oracles do not depend on it
        tol: if poly { 1e-5 } else { 1e-8 },
        ..SolveConfig::default()
    };
    let (zero, _) = initial_family(&model, &f, &report, &cfg).unwrap();
    let family = apply_phi_operator(&model, &f, &zero, cfg.escape_slack).unwrap();
    Instance {
        model,
        f,
        report,
        family,
        cfg,
    }
}

/// `f_k(x, phi_k(x))` split into its two components.
fn f_on_graph(model: &DichotomyModel, f: &PerturbationFamily, phi: &ManifoldFamily, k: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let de = model.stable_dim();
    let mut u = x.to_vec();
    u.extend(phi.evaluate(k, x).unwrap());
    let mut w = vec![0.0; u.len()];
    f.apply(k, &u, &mut w);
    (w[..de].to_vec(), w[de..].to_vec())
}

/// Stable components `x_n, ..., x_m` from the variation-of-constants sum
/// `x_m = A_{m,n} xi + sum_{k=n}^{m-1} A_{m,k+1} P f_k(x_k, phi_k(x_k))`,
/// every transition recomputed from scratch.
pub fn split_sum_trajectory(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    phi: &ManifoldFamily,
    n: usize,
    xi: &[f64],
    m: usize,
) -> Vec<Vec<f64>> {
    let mut xs: Vec<Vec<f64>> = vec![xi.to_vec()];
    let mut forcing: Vec<Vec<f64>> = Vec::new();
    for mm in n + 1..=m {
        let k = mm - 1;
        forcing.push(f_on_graph(model, f, phi, k, &xs[k - n]).0);
        let t = model.transition(mm, n).unwrap();
        let mut x = &t.stable * DVector::from_column_slice(xi);
        for kk in n..mm {
            let w = model.transition(mm, kk + 1).unwrap();
            x += &w.stable * DVector::from_column_slice(&forcing[kk - n]);
        }
        xs.push(x.iter().copied().collect());
    }
    xs
}

/// `-(sum_{k=j}^{end} A_{k+1,j}^{-1} Q f_k(x_k, phi_k(x_k)))` with the
/// trajectory from [`split_sum_trajectory`].
pub fn direct_phi(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    phi: &ManifoldFamily,
    j: usize,
    xi: &[f64],
) -> Vec<f64> {
    let end = (j + phi.horizon).min(phi.last_index());
    let xs = split_sum_trajectory(model, f, phi, j, xi, end);
    let mut acc = DVector::zeros(model.unstable_dim());
    for k in j..=end {
        let fk = f_on_graph(model, f, phi, k, &xs[k - j]).1;
        let inv = model.unstable_inverse(k + 1, j).unwrap();
        acc += inv * DVector::from_column_slice(&fk);
    }
    acc.iter().map(|v| -v).collect()
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |s, (x, y)| s.max((x - y).abs()))
}

pub fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |s, x| s.max(x.abs()))
}

/// A random point of the sup-norm ball of radius `r` in dimension `d`.
pub fn ball_point(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-r..r)).collect()
}
