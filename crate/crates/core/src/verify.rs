//! Empirical checks of the conclusions of the manifold theorem.
//!
//! Given solved graphs, orbits of points on the graph are pushed forward by
//! the full nonlinear system and compared with the graph at later times
//! (invariance), pairs of such orbits are compared with the decay bound,
//! and two perturbations are compared with the distance of their manifolds.
//! Every verdict comes with the error budget it was measured against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{mat_vec, op_norm, sup_norm, DichotomyModel, ProductPoint};
use crate::conditions::{check_conditions, ConditionConfig, ConditionReport};
use crate::error::{Error, Result};
use crate::solver::{solve_manifold, ManifoldFamily, PerturbationFamily, SolveConfig, SolveReport};

const PRIMES: [u32; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical inverse of `i` in base `p`.
fn radical_inverse(mut i: u64, p: u32) -> f64 {
    let p = p as u64;
    let mut inv = 1.0 / p as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % p) as f64 * inv;
        i /= p;
        inv /= p as f64;
    }
    out
}

/// Halton points in `(-1, 1)^dim`, skipping the first index.
pub fn halton_cube(count: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "Halton sampling supports at most {} dimensions", PRIMES.len());
    (1..=count as u64)
        .map(|i| (0..dim).map(|d| 2.0 * radical_inverse(i, PRIMES[d]) - 1.0).collect())
        .collect()
}

/// `F_{m,n}(v)`: the composition of `A_k + f_k` for `k = n, ..., m - 1`.
pub fn iterate_system(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    n: usize,
    v: &ProductPoint,
    m: usize,
) -> Result<ProductPoint> {
    assert!(m >= n, "iterate_system needs m >= n");
    let de = model.stable_dim();
    let mut cur = v.to_vec();
    let mut w = vec![0.0; cur.len()];
    let mut next = vec![0.0; cur.len()];
    for k in n..m {
        let step = model.step(k)?;
        f.apply(k, &cur, &mut w);
        mat_vec(&step.stable, &cur[..de], &mut next[..de]);
        mat_vec(&step.unstable, &cur[de..], &mut next[de..]);
        for (x, d) in next.iter_mut().zip(&w) {
            *x += d;
        }
        if !next.iter().all(|x| x.is_finite()) {
            return Err(Error::Overflow { from: n, to: k + 1 });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(ProductPoint::from_concat(&cur, de))
}

/// Radius `delta tilde_beta_n / (C K)` of the ball on which the theorem
/// guarantees invariance and decay.
pub fn guaranteed_radius(report: &ConditionReport, n: usize) -> Result<f64> {
    let beta = report.beta()?;
    if !beta.contains(n) {
        return Err(Error::IndexOutOfWindow {
            index: n,
            lo: beta.window.0,
            hi: beta.window.1,
        });
    }
    Ok(report.ledger.delta * beta.beta_tilde(n) / (report.ledger.big_c * report.k))
}

/// Per-index error model for the solved graphs: the error of `phi_m` at
/// `x` is at most `(a_post + tail_metric) |x| + spacing_m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub a_posteriori: f64,
    pub tail_metric: f64,
}

impl ErrorModel {
    pub fn from_report(r: &SolveReport) -> Self {
        Self {
            a_posteriori: r.a_posteriori_error,
            tail_metric: r.tail_metric,
        }
    }

    fn at(&self, family: &ManifoldFamily, m: usize, x_norm: f64) -> Result<f64> {
        Ok((self.a_posteriori + self.tail_metric) * x_norm + family.graph(m)?.spacing())
    }
}

/// One sampled orbit step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRow {
    pub sample: usize,
    pub m: usize,
    pub stable_norm: f64,
    pub ball_radius: f64,
    pub residual: f64,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n: usize,
    pub m_max: usize,
    pub test_ball_radius: f64,
    /// Factor applied to the guaranteed radius; above one the test leaves
    /// the theorem's scope.
    pub radius_scale: f64,
    pub outside_guarantee: bool,
    pub points_tested: usize,
    pub max_residual: f64,
    /// Largest residual divided by its budget.
    pub max_budget_ratio: f64,
    pub within_budget: bool,
    /// Orbit points found outside `B_m(delta beta_m)`; only possible outside
    /// the guarantee, since inside it an escape is an error.
    pub escapes: usize,
    /// Per-sample rows; written as CSV rather than JSON.
    #[serde(skip)]
    pub rows: Vec<InvarianceRow>,
}

/// Test points: Halton samples in the ball of radius `radius` together with
/// the lattice nodes of `phi_n` lying strictly inside it.
fn test_points(family: &ManifoldFamily, n: usize, radius: f64, samples: usize) -> Result<Vec<Vec<f64>>> {
    let g = family.graph(n)?;
    let de = g.stable_dim;
    let inner = radius * (1.0 - 1e-9);
    let mut pts: Vec<Vec<f64>> = halton_cube(samples, de)
        .into_iter()
        .map(|p| p.into_iter().map(|x| x * inner).collect())
        .collect();
    let mut xi = [0.0; 2];
    for node in 0..g.node_count() {
        g.node_coords(node, &mut xi);
        if sup_norm(&xi[..de]) < radius {
            pts.push(xi[..de].to_vec());
        }
    }
    Ok(pts)
}

/// Pushes points of the graph over the guaranteed ball forward and measures
/// how far they land from the graph.
#[allow(clippy::too_many_arguments)]
pub fn check_invariance(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    family: &ManifoldFamily,
    report: &ConditionReport,
    errors: &ErrorModel,
    n: usize,
    m_max: usize,
    samples: usize,
    radius_scale: f64,
) -> Result<InvarianceReport> {
    family.graph(m_max)?;
    let radius = guaranteed_radius(report, n)? * radius_scale;
    let outside = radius_scale > 1.0;
    let points = test_points(family, n, radius, samples)?;
    // linear growth of graph errors at the base index along F
    let growth: Vec<f64> = (n..=m_max)
        .map(|m| Ok(op_norm(&model.transition(m, n)?.unstable)))
        .collect::<Result<_>>()?;
    let per_point: Vec<Vec<InvarianceRow>> = points
        .par_iter()
        .enumerate()
        .map(|(i, xi)| -> Result<Vec<InvarianceRow>> {
            let eta = family.evaluate(n, xi)?;
            let base_err = errors.at(family, n, sup_norm(xi))?;
            let mut v = ProductPoint::from_slices(xi, &eta);
            let mut rows = Vec::with_capacity(m_max - n + 1);
            for m in n..=m_max {
                if m > n {
                    v = iterate_system(model, f, m - 1, &v, m)?;
                }
                let x = v.stable.as_slice();
                let x_norm = sup_norm(x);
                let ball = family.graph(m)?.radius;
                if x_norm >= ball && !outside {
                    return Err(Error::BallEscape {
                        start: n,
                        index: m,
                        norm: x_norm,
                        radius: ball,
                    });
                }
                let on_graph = family.evaluate(m, x)?;
                let residual = v
                    .unstable
                    .iter()
                    .zip(&on_graph)
                    .fold(0.0f64, |s, (y, p)| s.max((y - p).abs()));
                let budget = 1.1 * growth[m - n] * base_err + errors.at(family, m, x_norm)?;
                rows.push(InvarianceRow {
                    sample: i,
                    m,
                    stable_norm: x_norm,
                    ball_radius: ball,
                    residual,
                    budget,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<InvarianceRow> = per_point.into_iter().flatten().collect();
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let max_budget_ratio = rows.iter().map(|r| r.residual / r.budget).fold(0.0, f64::max);
    let escapes = rows.iter().filter(|r| r.stable_norm >= r.ball_radius).count();
    Ok(InvarianceReport {
        n,
        m_max,
        test_ball_radius: radius,
        radius_scale,
        outside_guarantee: outside,
        points_tested: points.len(),
        max_residual,
        max_budget_ratio,
        within_budget: max_budget_ratio <= 1.0,
        escapes,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub n: usize,
    pub m_max: usize,
    pub pairs_tested: usize,
    /// Sup of `|F(xi, phi(xi)) - F(xi', phi(xi'))| / (2 C rate |xi - xi'|)`.
    pub worst_ratio: f64,
    pub worst_at_m: usize,
}

/// Compares pairs of orbits on the graph with the decay bound.
pub fn check_decay(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    family: &ManifoldFamily,
    report: &ConditionReport,
    n: usize,
    pairs: usize,
    m_max: usize,
) -> Result<DecayReport> {
    family.graph(m_max)?;
    let radius = guaranteed_radius(report, n)? * (1.0 - 1e-9);
    let de = model.stable_dim();
    let big_c = report.ledger.big_c;
    let pts = halton_cube(pairs, 2 * de);
    let worst: Vec<(f64, usize)> = pts
        .par_iter()
        .map(|p| -> Result<(f64, usize)> {
            let xi: Vec<f64> = p[..de].iter().map(|x| x * radius).collect();
            let xj: Vec<f64> = p[de..].iter().map(|x| x * radius).collect();
            let dist = xi.iter().zip(&xj).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
            if dist == 0.0 {
                return Ok((0.0, n));
            }
            let mut u = ProductPoint::from_slices(&xi, &family.evaluate(n, &xi)?);
            let mut v = ProductPoint::from_slices(&xj, &family.evaluate(n, &xj)?);
            let mut best = (0.0, n);
            for m in n..=m_max {
                if m > n {
                    u = iterate_system(model, f, m - 1, &u, m)?;
                    v = iterate_system(model, f, m - 1, &v, m)?;
                }
                let gap = ProductPoint::new(&u.stable - &v.stable, &u.unstable - &v.unstable).norm();
                let bound = 2.0 * big_c * model.ln_stable_rate(m, n).exp() * dist;
                let r = gap / bound;
                if r > best.0 {
                    best = (r, m);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let (worst_ratio, worst_at_m) = worst
        .into_iter()
        .fold((0.0, n), |a, b| if b.0 > a.0 { b } else { a });
    Ok(DecayReport {
        n,
        m_max,
        pairs_tested: pairs,
        worst_ratio,
        worst_at_m,
    })
}

/// Sampled sup of `|f_n(u) - g_n(u)| / |u|^{q+1}` over `n` in `indices` and
/// Halton points `u` of the ball of radius `radius`.
pub fn perturbation_distance(
    f: &PerturbationFamily,
    g: &PerturbationFamily,
    indices: (usize, usize),
    samples: usize,
    radius: f64,
) -> Result<f64> {
    if f.dim != g.dim || (f.q - g.q).abs() > 1e-12 {
        return Err(Error::InvalidParameter("perturbations must share dimension and q".into()));
    }
    let q = f.q;
    let pts = halton_cube(samples, f.dim);
    let mut fu = vec![0.0; f.dim];
    let mut gu = vec![0.0; f.dim];
    let mut worst: f64 = 0.0;
    for n in indices.0..=indices.1 {
        for p in &pts {
            let u: Vec<f64> = p.iter().map(|x| x * radius).collect();
            let norm = sup_norm(&u);
            if norm == 0.0 {
                continue;
            }
            f.apply(n, &u, &mut fu);
            g.apply(n, &u, &mut gu);
            let d = fu.iter().zip(&gu).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
            worst = worst.max(d / norm.powf(q + 1.0));
        }
    }
    Ok(worst)
}

/// Settings for [`check_perturbation_theorem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCheckConfig {
    pub conditions: ConditionConfig,
    pub solve: SolveConfig,
    pub distance_samples: usize,
}

impl Default for PerturbationCheckConfig {
    fn default() -> Self {
        Self {
            conditions: ConditionConfig::default(),
            solve: SolveConfig::default(),
            distance_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// Common constant both families are claimed with.
    pub c: f64,
    pub q: f64,
    pub delta: f64,
    /// Grid metric distance of the two manifolds.
    pub lhs: f64,
    /// Sampled distance of the two perturbations.
    pub rhs: f64,
    pub budget: f64,
    pub pass: bool,
    /// `eps = 0` lies outside the literal hypothesis of the estimate.
    pub eps_zero: bool,
    pub solve_f: SolveReport,
    pub solve_g: SolveReport,
}

/// Solves for both perturbations with shared `(c, q, C, delta)` and compares
/// the manifold distance with the perturbation distance.
pub fn check_perturbation_theorem(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    g: &PerturbationFamily,
    cfg: &PerturbationCheckConfig,
) -> Result<PerturbationReport> {
    if (f.q - g.q).abs() > 1e-12 {
        return Err(Error::InvalidParameter("perturbations must share q".into()));
    }
    let c = f.c.max(g.c);
    let (f, g) = (f.with_c(c)?, g.with_c(c)?);
    let report = check_conditions(model, c, f.q, &cfg.conditions)?;
    let (phi, rf) = solve_manifold(model, &f, &report, &cfg.solve)?;
    let (psi, rg) = solve_manifold(model, &g, &report, &cfg.solve)?;
    let lhs = phi.grid_distance(&psi, cfg.solve.window)?;
    let radius = phi.graphs.iter().map(|h| h.radius).fold(0.0, f64::max);
    let rhs = perturbation_distance(&f, &g, cfg.solve.window, cfg.distance_samples, radius)?;
    let budget = rf.a_posteriori_error + rg.a_posteriori_error + rf.tail_metric + rg.tail_metric;
    Ok(PerturbationReport {
        c,
        q: f.q,
        delta: report.ledger.delta,
        lhs,
        rhs,
        budget,
        pass: lhs <= rhs + budget,
        eps_zero: model.eps == 0.0,
        solve_f: rf,
        solve_g: rg,
    })
}

/// `|Phi(phi) - phi|'` on the requested window, after convergence.
pub fn fixed_point_residual(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    family: &ManifoldFamily,
    escape_slack: f64,
) -> Result<f64> {
    let next = crate::solver::apply_phi_operator(model, f, family, escape_slack)?;
    next.grid_distance(family, family.window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::example1_model;
    use crate::rates::GrowthRate;
    use crate::solver::{builtin_perturbation, GridSpec, PerturbationKind};

    #[test]
    fn halton_points_are_in_the_cube() {
        let pts = halton_cube(500, 3);
        assert!(pts.iter().flatten().all(|x| x.abs() < 1.0));
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }

    #[test]
    fn identity_when_m_equals_n() {
        let e = GrowthRate::exponential();
        let model = example1_model(e.clone(), e, -1.0, 1.0, 0.2).unwrap();
        let f = builtin_perturbation(PerturbationKind::Power, 1.0, 2.0, 2).unwrap();
        let v = ProductPoint::from_slices(&[0.1], &[-0.2]);
        assert_eq!(iterate_system(&model, &f, 3, &v, 3).unwrap(), v);
    }

    #[test]
    fn distance_between_power_kinds() {
        let f = builtin_perturbation(PerturbationKind::Power, 0.01, 2.0, 2).unwrap();
        let g = builtin_perturbation(PerturbationKind::Power, 0.012, 2.0, 2).unwrap();
        let z = builtin_perturbation(PerturbationKind::Zero, 0.01, 2.0, 2).unwrap();
        let d = perturbation_distance(&f, &g, (1, 3), 200, 0.5).unwrap();
        assert!((d - 0.002).abs() < 1e-12, "{d}");
        assert!((perturbation_distance(&z, &f, (1, 3), 200, 0.5).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(perturbation_distance(&f, &f, (1, 3), 200, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn linear_case_is_trivial() {
        let e = GrowthRate::exponential();
        let model = example1_model(e.clone(), e, -1.0, 1.0, 0.2).unwrap();
        let f = builtin_perturbation(PerturbationKind::Zero, 1.0, 2.0, 2).unwrap();
        let report = check_conditions(&model, f.c, f.q, &ConditionConfig::default()).unwrap();
        let cfg = SolveConfig {
            grid: GridSpec { nodes_per_axis: 9 },
            window: (1, 3),
            ..SolveConfig::default()
        };
        let (family, rep) = solve_manifold(&model, &f, &report, &cfg).unwrap();
        let inv = check_invariance(&model, &f, &family, &report, &ErrorModel::from_report(&rep), 1, 4, 50, 1.0)
            .unwrap();
        assert_eq!(inv.max_residual, 0.0);
        let decay = check_decay(&model, &f, &family, &report, 1, 100, 4).unwrap();
        assert!(decay.worst_ratio <= model.d / (2.0 * report.ledger.big_c) + 1e-12);
    }
}
