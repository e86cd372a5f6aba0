//! Forward recursion, the graph operator and the nonlinear flow against
//! independent reimplementations.

mod common;

use common::*;
use dichoman::cocycle::ProductPoint;
use dichoman::solver::{apply_phi_operator, trajectory};
use dichoman::verify::iterate_system;

const INSTANCES: u64 = 20;

#[test]
fn recursion_matches_variation_of_constants_sum() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let inst = random_instance(&mut r);
        let de = inst.model.stable_dim();
        let n = 1 + seed as usize % 3;
        let radius = inst.family.graph(n).unwrap().radius;
        for _ in 0..5 {
            let xi = ball_point(&mut r, de, radius);
            let m = n + 6;
            let fast = trajectory(&inst.model, &inst.f, &inst.family, n, &xi, m, inst.cfg.escape_slack).unwrap();
            let slow = split_sum_trajectory(&inst.model, &inst.f, &inst.family, n, &xi, m);
            for (k, (a, b)) in fast.iter().zip(&slow).enumerate() {
                let scale = sup(b).max(f64::MIN_POSITIVE);
                assert!(
                    sup_diff(a, b) <= 1e-10 * scale,
                    "seed {seed}, step {k}: {a:?} vs {b:?}"
                );
            }
        }
    }
}

#[test]
fn operator_matches_direct_summation() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let inst = random_instance(&mut r);
        let next = apply_phi_operator(&inst.model, &inst.f, &inst.family, inst.cfg.escape_slack).unwrap();
        let mut xi = [0.0; 2];
        for j in inst.family.window.0..=inst.family.window.1 {
            let g = next.graph(j).unwrap();
            let de = g.stable_dim;
            let scale = sup(&g.values).max(f64::MIN_POSITIVE);
            for node in (0..g.node_count()).step_by(3) {
                g.node_coords(node, &mut xi);
                let oracle = direct_phi(&inst.model, &inst.f, &inst.family, j, &xi[..de]);
                let d = sup_diff(g.node_value(node), &oracle);
                assert!(d <= 1e-8 * scale, "seed {seed}, index {j}, node {node}: {d:e} vs scale {scale:e}");
            }
        }
    }
}

#[test]
fn flow_composition_law() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let inst = random_instance(&mut r);
        let (de, df) = (inst.model.stable_dim(), inst.model.unstable_dim());
        let n = 1 + seed as usize % 4;
        let k = n + 1 + seed as usize % 3;
        let m = k + 2;
        let v = ProductPoint::from_slices(&ball_point(&mut r, de, 0.05), &ball_point(&mut r, df, 0.05));
        let direct = iterate_system(&inst.model, &inst.f, n, &v, m).unwrap();
        let mid = iterate_system(&inst.model, &inst.f, n, &v, k).unwrap();
        let composed = iterate_system(&inst.model, &inst.f, k, &mid, m).unwrap();
        let (a, b) = (direct.to_vec(), composed.to_vec());
        assert!(sup_diff(&a, &b) <= 1e-10 * sup(&a), "seed {seed}: {a:?} vs {b:?}");
    }
}
