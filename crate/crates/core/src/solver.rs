//! Stable manifolds as fixed points of the graph operator.
//!
//! A candidate manifold is a family of functions `phi_n` from the ball
//! `B_n(delta beta_n)` of `E_n` into `F_n`, sampled on a uniform lattice and
//! extended by multilinear interpolation inside the ball and radially
//! outside it. One application of the operator runs, for each base index `n`
//! and lattice node `xi`, the forward recursion
//!
//! ```text
//! x_n = xi,   x_{k+1} = A_k x_k + P f_k(x_k, phi_k(x_k))
//! ```
//!
//! and sets `phi_n(xi) = - sum_{k=n}^{n+M} A_{k+1,n}^{-1} Q f_k(x_k, phi_k(x_k))`.
//! The horizon `M` is the smallest one whose neglected tail is certified to
//! be below a tenth of the tolerance.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{mat_vec, sup_norm, DichotomyModel};
use crate::conditions::{compute_beta, ln_power_tail, ConditionReport};
use crate::error::{Error, Result};
use crate::rates::SumConfig;

/// Seed of the sampler behind perturbation certificates.
pub const CERTIFICATE_SEED: u64 = 0x5eed_0f_c0c1;

/// Number of sampled pairs in a perturbation certificate.
pub const CERTIFICATE_SAMPLES: usize = 10_000;

/// Margin applied to the empirical Lipschitz ratio to obtain `c`.
pub const CERTIFICATE_MARGIN: f64 = 1.05;

/// A sequence of maps `f_m` on the product space, taking and returning
/// concatenated `(xi, eta)` coordinates.
pub trait Perturbation: Send + Sync {
    fn apply(&self, m: usize, point: &[f64], out: &mut [f64]);
}

impl<F> Perturbation for F
where
    F: Fn(usize, &[f64], &mut [f64]) + Send + Sync,
{
    fn apply(&self, m: usize, point: &[f64], out: &mut [f64]) {
        self(m, point, out)
    }
}

/// Built-in perturbation shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// `f = 0`.
    Zero,
    /// `f_m(u) = c0 u |u|^q`.
    Power,
    /// `f_m(u) = c0 R_m(u) |u|^q` with `R_m` reversing the coordinates for odd `m`.
    RotatingPower,
}

/// Perturbation section of a run configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub c0: f64,
    pub q: f64,
}

struct PowerMap {
    c0: f64,
    q: f64,
    rotating: bool,
}

impl Perturbation for PowerMap {
    fn apply(&self, m: usize, point: &[f64], out: &mut [f64]) {
        let scale = self.c0 * sup_norm(point).powf(self.q);
        let len = point.len();
        for (i, o) in out.iter_mut().enumerate() {
            let src = if self.rotating && m % 2 == 1 { len - 1 - i } else { i };
            *o = scale * point[src];
        }
    }
}

struct ZeroMap;

impl Perturbation for ZeroMap {
    fn apply(&self, _: usize, _: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// A perturbation with its constants and the empirical evidence for them.
#[derive(Clone)]
pub struct PerturbationFamily {
    pub name: String,
    pub c: f64,
    pub q: f64,
    /// Largest sampled `|f(u) - f(v)| / (|u - v| (|u| + |v|)^q)`.
    pub certificate: f64,
    pub dim: usize,
    /// Nominal amplitude, when the family has one.
    pub c0: Option<f64>,
    map: Arc<dyn Perturbation>,
}

impl fmt::Debug for PerturbationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationFamily")
            .field("name", &self.name)
            .field("c", &self.c)
            .field("q", &self.q)
            .field("certificate", &self.certificate)
            .field("dim", &self.dim)
            .finish()
    }
}

impl PerturbationFamily {
    /// Wraps an arbitrary map and certifies it on sampled pairs. `c` is set
    /// to the margin times the empirical sup, or to `fallback_c` when the
    /// map is identically zero on the samples.
    pub fn certified(
        name: impl Into<String>,
        map: Arc<dyn Perturbation>,
        q: f64,
        dim: usize,
        fallback_c: f64,
    ) -> Result<Self> {
        if !(q > 1.0) {
            return Err(Error::InvalidParameter(format!("need q > 1, got {q}")));
        }
        let certificate = certify(map.as_ref(), q, dim)?;
        let c = if certificate > 0.0 {
            CERTIFICATE_MARGIN * certificate
        } else {
            fallback_c
        };
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::CertificateFailure(format!("constant c = {c} is not positive")));
        }
        Ok(Self {
            name: name.into(),
            c,
            q,
            certificate,
            dim,
            c0: None,
            map,
        })
    }

    pub fn apply(&self, m: usize, point: &[f64], out: &mut [f64]) {
        self.map.apply(m, point, out);
    }

    pub fn map(&self) -> Arc<dyn Perturbation> {
        self.map.clone()
    }

    /// Same maps, but claimed with a larger constant `c`.
    pub fn with_c(&self, c: f64) -> Result<Self> {
        if c < self.certificate * CERTIFICATE_MARGIN && self.certificate > 0.0 {
            return Err(Error::CertificateFailure(format!(
                "c = {c} is below the certified {}",
                self.certificate * CERTIFICATE_MARGIN
            )));
        }
        Ok(Self { c, ..self.clone() })
    }
}

/// Empirical sup of the Lipschitz-type ratio over deterministic samples
/// from the unit ball. Every tenth pair has `v = 0` and every tenth pair
/// after that has `v` on the ray through `u`.
pub fn certify(map: &dyn Perturbation, q: f64, dim: usize) -> Result<f64> {
    certify_seeded(map, q, dim, CERTIFICATE_SEED, CERTIFICATE_SAMPLES)
}

/// [`certify`] with an explicit seed and sample count.
pub fn certify_seeded(map: &dyn Perturbation, q: f64, dim: usize, seed: u64, samples: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let (mut fu, mut fv) = (vec![0.0; dim], vec![0.0; dim]);
    let mut zero_out = vec![0.0; dim];
    let mut sup: f64 = 0.0;
    for i in 0..samples {
        let m = 1 + i % 4;
        for x in u.iter_mut() {
            *x = rng.random_range(-1.0..=1.0);
        }
        match i % 10 {
            0 => v.fill(0.0),
            1 => {
                let t: f64 = rng.random_range(-1.0..=1.0);
                for (y, x) in v.iter_mut().zip(&u) {
                    *y = t * x;
                }
            }
            _ => {
                for y in v.iter_mut() {
                    *y = rng.random_range(-1.0..=1.0);
                }
            }
        }
        if i < 4 {
            map.apply(m, &vec![0.0; dim], &mut zero_out);
            if sup_norm(&zero_out) != 0.0 {
                return Err(Error::CertificateFailure(format!("f_{m}(0) != 0")));
            }
        }
        map.apply(m, &u, &mut fu);
        map.apply(m, &v, &mut fv);
        let num = fu.iter().zip(&fv).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        let du = u.iter().zip(&v).fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        if du == 0.0 {
            continue;
        }
        let ratio = num / (du * (sup_norm(&u) + sup_norm(&v)).powf(q));
        if !ratio.is_finite() {
            return Err(Error::CertificateFailure(format!("unbounded ratio at sample {i}")));
        }
        sup = sup.max(ratio);
    }
    Ok(sup)
}

/// One of the built-in perturbations on a space of dimension `dim`.
pub fn builtin_perturbation(kind: PerturbationKind, c0: f64, q: f64, dim: usize) -> Result<PerturbationFamily> {
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(Error::InvalidParameter(format!("need c0 > 0, got {c0}")));
    }
    let (name, map): (&str, Arc<dyn Perturbation>) = match kind {
        PerturbationKind::Zero => ("zero", Arc::new(ZeroMap)),
        PerturbationKind::Power => ("power", Arc::new(PowerMap { c0, q, rotating: false })),
        PerturbationKind::RotatingPower => {
            ("rotating-power", Arc::new(PowerMap { c0, q, rotating: true }))
        }
    };
    let mut family = PerturbationFamily::certified(name, map, q, dim, c0)?;
    family.c0 = Some(if kind == PerturbationKind::Zero { 0.0 } else { c0 });
    Ok(family)
}

impl PerturbationSpec {
    pub fn build(&self, dim: usize) -> Result<PerturbationFamily> {
        builtin_perturbation(self.kind, self.c0, self.q, dim)
    }
}

/// Lattice resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Odd, so that the origin is a node.
    pub nodes_per_axis: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nodes_per_axis: 65 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_axis < 3 || self.nodes_per_axis % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "nodes per axis must be odd and at least 3, got {}",
                self.nodes_per_axis
            )));
        }
        Ok(())
    }
}

/// `phi_n` sampled on a uniform lattice of the sup-norm ball of radius
/// `delta beta_n` in `E_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldGraph {
    pub index: usize,
    pub radius: f64,
    pub stable_dim: usize,
    pub unstable_dim: usize,
    pub nodes_per_axis: usize,
    /// Node-major: the `F` components of node `i` are
    /// `values[i * unstable_dim..(i + 1) * unstable_dim]`. Node `i` has lattice
    /// coordinates given by the base-`nodes_per_axis` digits of `i`, first
    /// axis least significant.
    pub values: Vec<f64>,
}

impl ManifoldGraph {
    pub fn zero(index: usize, radius: f64, stable_dim: usize, unstable_dim: usize, grid: GridSpec) -> Self {
        let nodes = grid.nodes_per_axis.pow(stable_dim as u32);
        Self {
            index,
            radius,
            stable_dim,
            unstable_dim,
            nodes_per_axis: grid.nodes_per_axis,
            values: vec![0.0; nodes * unstable_dim],
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis.pow(self.stable_dim as u32)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.nodes_per_axis - 1) as f64
    }

    pub fn origin_node(&self) -> usize {
        let c = (self.nodes_per_axis - 1) / 2;
        (0..self.stable_dim).map(|ax| c * self.nodes_per_axis.pow(ax as u32)).sum()
    }

    pub fn node_coords(&self, node: usize, out: &mut [f64]) {
        let n = self.nodes_per_axis;
        let mut rest = node;
        for x in out.iter_mut().take(self.stable_dim) {
            let i = rest % n;
            rest /= n;
            *x = self.radius * (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64;
        }
    }

    pub fn node_value(&self, node: usize) -> &[f64] {
        &self.values[node * self.unstable_dim..(node + 1) * self.unstable_dim]
    }

    /// Interpolated value, with the radial rule outside the ball.
    pub fn evaluate_into(&self, xi: &[f64], out: &mut [f64]) {
        let n = self.nodes_per_axis;
        let norm = sup_norm(&xi[..self.stable_dim]);
        let scale = if norm > self.radius { self.radius / norm } else { 1.0 };
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for ax in 0..self.stable_dim {
            let mut t = (xi[ax] * scale + self.radius) / (2.0 * self.radius) * (n - 1) as f64;
            if (t - t.round()).abs() < 1e-9 {
                t = t.round();
            }
            let t = t.clamp(0.0, (n - 1) as f64);
            let i0 = (t.floor() as usize).min(n - 2);
            base[ax] = i0;
            frac[ax] = t - i0 as f64;
        }
        out.fill(0.0);
        for corner in 0..(1usize << self.stable_dim) {
            let mut w = 1.0;
            let mut node = 0;
            let mut stride = 1;
            for ax in 0..self.stable_dim {
                let bit = (corner >> ax) & 1;
                w *= if bit == 1 { frac[ax] } else { 1.0 - frac[ax] };
                node += (base[ax] + bit) * stride;
                stride *= n;
            }
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.node_value(node)) {
                *o += w * v;
            }
        }
    }

    pub fn evaluate(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.unstable_dim];
        self.evaluate_into(xi, &mut out);
        out
    }

    /// Largest `|phi(xi) - phi(xi')| / |xi - xi'|` over lattice neighbours,
    /// diagonal ones included.
    pub fn discrete_lipschitz(&self) -> f64 {
        let n = self.nodes_per_axis;
        let h = self.spacing();
        let diff = |p: usize, r: usize| {
            self.node_value(p)
                .iter()
                .zip(self.node_value(r))
                .fold(0.0f64, |s, (x, y)| s.max((x - y).abs()))
        };
        let mut worst: f64 = 0.0;
        match self.stable_dim {
            1 => {
                for i in 0..n - 1 {
                    worst = worst.max(diff(i, i + 1));
                }
            }
            _ => {
                for j in 0..n {
                    for i in 0..n {
                        let p = i + n * j;
                        if i + 1 < n {
                            worst = worst.max(diff(p, p + 1));
                        }
                        if j + 1 < n {
                            worst = worst.max(diff(p, p + n));
                            if i + 1 < n {
                                worst = worst.max(diff(p, p + n + 1));
                            }
                            if i > 0 {
                                worst = worst.max(diff(p, p + n - 1));
                            }
                        }
                    }
                }
            }
        }
        worst / h
    }
}

/// Graphs for consecutive base indices together with the constants used to
/// build them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldFamily {
    /// Requested base indices.
    pub window: (usize, usize),
    pub delta: f64,
    #[serde(rename = "C")]
    pub big_c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub horizon: usize,
    pub grid: GridSpec,
    /// Graphs for `window.0, window.0 + 1, ...`; the ones past `window.1`
    /// are auxiliary and less accurate.
    pub graphs: Vec<ManifoldGraph>,
}

impl ManifoldFamily {
    pub fn first_index(&self) -> usize {
        self.window.0
    }

    pub fn last_index(&self) -> usize {
        self.window.0 + self.graphs.len() - 1
    }

    pub fn graph(&self, n: usize) -> Result<&ManifoldGraph> {
        if n < self.first_index() || n > self.last_index() {
            return Err(Error::IndexOutOfWindow {
                index: n,
                lo: self.first_index(),
                hi: self.last_index(),
            });
        }
        Ok(&self.graphs[n - self.first_index()])
    }

    pub fn evaluate(&self, n: usize, xi: &[f64]) -> Result<Vec<f64>> {
        Ok(self.graph(n)?.evaluate(xi))
    }

    /// Grid version of the sup metric: `max |phi_n(xi) - psi_n(xi)| / |xi|`
    /// over nodes other than the origin of the base indices in `range`.
    pub fn grid_distance(&self, other: &ManifoldFamily, range: (usize, usize)) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for n in range.0..=range.1 {
            let (g, h) = (self.graph(n)?, other.graph(n)?);
            if g.values.len() != h.values.len() || g.radius != h.radius {
                return Err(Error::InvalidParameter(format!("graphs at index {n} use different lattices")));
            }
            worst = worst.max(graph_distance(g, h));
        }
        Ok(worst)
    }
}

fn graph_distance(g: &ManifoldGraph, h: &ManifoldGraph) -> f64 {
    let origin = g.origin_node();
    let mut xi = [0.0; 2];
    let mut worst: f64 = 0.0;
    for node in 0..g.node_count() {
        if node == origin {
            continue;
        }
        g.node_coords(node, &mut xi);
        let d = g
            .node_value(node)
            .iter()
            .zip(h.node_value(node))
            .fold(0.0f64, |s, (x, y)| s.max((x - y).abs()));
        worst = worst.max(d / sup_norm(&xi[..g.stable_dim]));
    }
    worst
}

/// Settings for [`solve_manifold`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub grid: GridSpec,
    /// Base indices `[n_min, n_max]` to solve for.
    pub window: (usize, usize),
    /// Target a-posteriori error in the grid metric.
    pub tol: f64,
    pub horizon_cap: usize,
    pub max_iterations: usize,
    /// Relative slack in the trajectory decay check.
    pub escape_slack: f64,
    /// Slack in the discrete Lipschitz check.
    pub lipschitz_tol: f64,
    pub sum: SumConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            window: (1, 5),
            tol: 1e-8,
            horizon_cap: 256,
            max_iterations: 200,
            escape_slack: 1e-6,
            lipschitz_tol: 1e-9,
            sum: SumConfig::default(),
        }
    }
}

/// Convergence record of a solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Grid-metric distance between consecutive iterates.
    pub differences: Vec<f64>,
    /// Ratios of consecutive differences.
    pub ratios: Vec<f64>,
    pub contraction_factor_measured: f64,
    pub contraction_factor_theoretical: f64,
    pub a_posteriori_error: f64,
    /// Largest absolute bound on the neglected series tail.
    pub tail_bound: f64,
    /// The same bound divided by the ball radius, comparable with the grid metric.
    pub tail_metric: f64,
    pub horizon: usize,
    pub delta: f64,
    #[serde(rename = "C")]
    pub big_c: f64,
    #[serde(rename = "K")]
    pub k: f64,
    /// All base indices carried by the iteration.
    pub solved_range: (usize, usize),
    pub max_discrete_lipschitz: f64,
    pub max_spacing: f64,
}

/// Certified tail of the graph series for each base index.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonChoice {
    pub horizon: usize,
    pub tail_metric: f64,
    pub tail_bound: f64,
}

/// `ln` of the tail bound divided by `delta beta_n`, for horizon `m_steps`.
#[allow(clippy::too_many_arguments)]
fn ln_tail_metric(
    model: &DichotomyModel,
    c: f64,
    q: f64,
    big_c: f64,
    delta: f64,
    ln_beta_n: f64,
    n: usize,
    m_steps: usize,
    sum: &SumConfig,
) -> Result<f64> {
    let (mu, nu, a, b, eps) = (&model.mu, &model.nu, model.a, model.b, model.eps);
    let mut ln = c.ln() + (q + 1.0) * (3.0 * big_c).ln() + model.d.ln() + q * delta.ln();
    ln += b * mu.ln_value(n) - (a * q + a) * mu.ln_value(n - 1) + q * ln_beta_n;
    if eps != 0.0 {
        ln += eps * (q + 1.0) * nu.ln_value(n - 1);
    }
    ln += ln_power_tail(mu, nu, a * q + a - b, eps, n + m_steps + 1, sum)?;
    Ok(ln)
}

/// Smallest horizon whose tail metric is at most `tol / 10` on every base
/// index of `window`.
pub fn choose_horizon(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    report: &ConditionReport,
    window: (usize, usize),
    tol: f64,
    cap: usize,
    sum: &SumConfig,
) -> Result<HorizonChoice> {
    let ledger = &report.ledger;
    let beta = compute_beta(&model.mu, &model.nu, model.a, f.q, model.eps, window, sum)?;
    let worst = |m_steps: usize| -> Result<(f64, f64, usize)> {
        let mut out = (f64::NEG_INFINITY, 0.0, window.0);
        for n in window.0..=window.1 {
            let ln = ln_tail_metric(model, f.c, f.q, ledger.big_c, ledger.delta, beta.ln_beta(n), n, m_steps, sum)?;
            if ln > out.0 {
                out = (ln, (ln + ledger.delta.ln() + beta.ln_beta(n)).exp(), n);
            }
        }
        Ok((out.0.exp(), out.1, out.2))
    };
    let target = tol / 10.0;
    let (at_cap, abs_cap, n_cap) = worst(cap)?;
    if at_cap > target {
        if at_cap > tol {
            return Err(Error::TailTooLarge {
                index: n_cap,
                horizon: cap,
                bound: at_cap,
                tol,
            });
        }
        return Ok(HorizonChoice {
            horizon: cap,
            tail_metric: at_cap,
            tail_bound: abs_cap,
        });
    }
    let (mut lo, mut hi) = (0usize, cap);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if worst(mid)?.0 <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let m = if worst(lo)?.0 <= target { lo } else { hi };
    let (tail_metric, tail_bound, _) = worst(m)?;
    Ok(HorizonChoice {
        horizon: m,
        tail_metric,
        tail_bound,
    })
}

/// Precomputed linear data for repeated operator applications.
struct Operator<'a> {
    f: &'a PerturbationFamily,
    lo: usize,
    top: usize,
    horizon: usize,
    de: usize,
    df: usize,
    /// `A_k` on `E`, flattened, for `k` in `lo..top`.
    stable: Vec<Vec<f64>>,
    /// `[j - lo][k - j]`: `A_{k+1,j}^{-1} Q` flattened.
    weights: Vec<Vec<Vec<f64>>>,
    /// `[j - lo][k - j]`: `ln(C (mu_k / mu_{j-1})^a nu_{j-1}^eps)`.
    ln_escape: Vec<Vec<f64>>,
    escape_slack: f64,
}

fn flat(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn flat_mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

impl<'a> Operator<'a> {
    fn new(
        model: &DichotomyModel,
        f: &'a PerturbationFamily,
        lo: usize,
        top: usize,
        horizon: usize,
        big_c: f64,
        escape_slack: f64,
    ) -> Result<Self> {
        let (de, df) = (model.stable_dim(), model.unstable_dim());
        if f.dim != de + df {
            return Err(Error::InvalidParameter(format!(
                "perturbation acts on dimension {}, model has {}",
                f.dim,
                de + df
            )));
        }
        let mut stable = Vec::with_capacity(top - lo);
        for k in lo..top {
            stable.push(flat(&model.step(k)?.stable));
        }
        let mut weights = Vec::with_capacity(top - lo + 1);
        let mut ln_escape = Vec::with_capacity(top - lo + 1);
        for j in lo..=top {
            let end = (j + horizon).min(top);
            let mut w = nalgebra::DMatrix::identity(df, df);
            let mut row = Vec::with_capacity(end - j + 1);
            let mut esc = Vec::with_capacity(end - j + 1);
            for k in j..=end {
                w = &w * &model.step(k)?.unstable_inv;
                if !w.iter().all(|x| x.is_finite()) {
                    return Err(Error::Overflow { from: j, to: k + 1 });
                }
                row.push(flat(&w));
                esc.push(big_c.ln() + model.ln_stable_rate(k, j));
            }
            weights.push(row);
            ln_escape.push(esc);
        }
        Ok(Self {
            f,
            lo,
            top,
            horizon,
            de,
            df,
            stable,
            weights,
            ln_escape,
            escape_slack,
        })
    }

    fn end(&self, j: usize) -> usize {
        (j + self.horizon).min(self.top)
    }

    /// `(Phi phi)_j(xi)` written into `out`.
    fn apply_at(&self, graphs: &[ManifoldGraph], j: usize, xi: &[f64], out: &mut [f64]) -> Result<()> {
        let (de, df) = (self.de, self.df);
        let xi_norm = sup_norm(xi);
        let mut x = [0.0f64; 8];
        let mut u = [0.0f64; 8];
        let mut w = [0.0f64; 8];
        let mut tmp = [0.0f64; 8];
        let mut acc = [0.0f64; 4];
        x[..de].copy_from_slice(xi);
        for k in j..=self.end(j) {
            if k > j && xi_norm > 0.0 {
                let bound = self.ln_escape[j - self.lo][k - j].exp() * xi_norm;
                let norm = sup_norm(&x[..de]);
                if norm > bound * (1.0 + self.escape_slack) {
                    return Err(Error::Escape {
                        start: j,
                        index: k,
                        norm,
                        bound,
                    });
                }
            }
            u[..de].copy_from_slice(&x[..de]);
            graphs[k - self.lo].evaluate_into(&x[..de], &mut u[de..de + df]);
            self.f.apply(k, &u[..de + df], &mut w[..de + df]);
            flat_mat_vec(&self.weights[j - self.lo][k - j], &w[de..de + df], &mut tmp[..df]);
            for (a, t) in acc.iter_mut().zip(&tmp[..df]) {
                *a += t;
            }
            if k < self.end(j) {
                flat_mat_vec(&self.stable[k - self.lo], &x[..de], &mut tmp[..de]);
                for i in 0..de {
                    x[i] = tmp[i] + w[i];
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&acc[..df]) {
            *o = -a;
        }
        Ok(())
    }

    fn apply(&self, current: &[ManifoldGraph]) -> Result<Vec<ManifoldGraph>> {
        current
            .par_iter()
            .enumerate()
            .map(|(slot, g)| {
                let j = self.lo + slot;
                let nodes = g.node_count();
                let origin = g.origin_node();
                let values: Vec<Vec<f64>> = (0..nodes)
                    .into_par_iter()
                    .map(|node| {
                        let mut xi = [0.0; 2];
                        let mut out = vec![0.0; self.df];
                        if node != origin {
                            g.node_coords(node, &mut xi);
                            self.apply_at(current, j, &xi[..self.de], &mut out)?;
                        }
                        Ok(out)
                    })
                    .collect::<Result<_>>()?;
                Ok(ManifoldGraph {
                    values: values.concat(),
                    ..g.clone()
                })
            })
            .collect()
    }
}

fn check_graph_invariants(graphs: &[ManifoldGraph], tol: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for g in graphs {
        if g.node_value(g.origin_node()).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidParameter(format!("graph {} is nonzero at the origin", g.index)));
        }
        let lip = g.discrete_lipschitz();
        if lip > 1.0 + tol {
            return Err(Error::LipschitzViolation {
                index: g.index,
                constant: lip,
            });
        }
        worst = worst.max(lip);
    }
    Ok(worst)
}

fn validate_inputs(model: &DichotomyModel, f: &PerturbationFamily, report: &ConditionReport) -> Result<()> {
    report.require_admissible()?;
    if model.stable_dim() > 2 || model.unstable_dim() > 2 {
        return Err(Error::Unsupported("gridded solving needs both blocks of dimension at most 2".into()));
    }
    let ledger = &report.ledger;
    if (ledger.c - f.c).abs() > 1e-12 * f.c || (ledger.q - f.q).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "conditions were checked with (c, q) = ({}, {}) but the perturbation has ({}, {})",
            ledger.c, ledger.q, f.c, f.q
        )));
    }
    Ok(())
}

/// Zero graphs on `[lo, top]` with radii `delta beta_n`.
fn zero_family(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    report: &ConditionReport,
    cfg: &SolveConfig,
    horizon: usize,
) -> Result<ManifoldFamily> {
    let (lo, hi) = cfg.window;
    let top = hi + 2 * horizon;
    let beta = compute_beta(&model.mu, &model.nu, model.a, f.q, model.eps, (lo, top), &cfg.sum)?;
    let delta = report.ledger.delta;
    let graphs = (lo..=top)
        .map(|n| {
            ManifoldGraph::zero(n, delta * beta.beta(n), model.stable_dim(), model.unstable_dim(), cfg.grid)
        })
        .collect();
    Ok(ManifoldFamily {
        window: cfg.window,
        delta,
        big_c: report.ledger.big_c,
        k: report.k,
        horizon,
        grid: cfg.grid,
        graphs,
    })
}

/// One application of the graph operator to `current` with its stored
/// horizon.
pub fn apply_phi_operator(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    current: &ManifoldFamily,
    escape_slack: f64,
) -> Result<ManifoldFamily> {
    let op = Operator::new(
        model,
        f,
        current.first_index(),
        current.last_index(),
        current.horizon,
        current.big_c,
        escape_slack,
    )?;
    Ok(ManifoldFamily {
        graphs: op.apply(&current.graphs)?,
        ..current.clone()
    })
}

/// Zero initial family sized for `report` and `cfg`, with the horizon chosen
/// by [`choose_horizon`].
pub fn initial_family(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    report: &ConditionReport,
    cfg: &SolveConfig,
) -> Result<(ManifoldFamily, HorizonChoice)> {
    validate_inputs(model, f, report)?;
    cfg.grid.validate()?;
    if cfg.window.0 < 1 || cfg.window.1 < cfg.window.0 {
        return Err(Error::InvalidParameter(format!("bad solve window {:?}", cfg.window)));
    }
    let choice = choose_horizon(model, f, report, cfg.window, cfg.tol, cfg.horizon_cap, &cfg.sum)?;
    Ok((zero_family(model, f, report, cfg, choice.horizon)?, choice))
}

/// Iterates the graph operator from zero until the a-posteriori error is
/// below `cfg.tol`.
pub fn solve_manifold(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    report: &ConditionReport,
    cfg: &SolveConfig,
) -> Result<(ManifoldFamily, SolveReport)> {
    let (mut family, choice) = initial_family(model, f, report, cfg)?;
    let rho = report.ledger.rho;
    let op = Operator::new(
        model,
        f,
        family.first_index(),
        family.last_index(),
        family.horizon,
        family.big_c,
        cfg.escape_slack,
    )?;
    let range = (family.first_index(), family.last_index());
    let threshold = cfg.tol * (1.0 - rho) / rho;
    let mut differences = Vec::new();
    let mut ratios = Vec::new();
    let mut above_one = 0;
    let mut lipschitz: f64 = 0.0;
    loop {
        let next = ManifoldFamily {
            graphs: op.apply(&family.graphs)?,
            ..family.clone()
        };
        lipschitz = lipschitz.max(check_graph_invariants(&next.graphs, cfg.lipschitz_tol)?);
        let diff = next.grid_distance(&family, range)?;
        if let Some(&prev) = differences.last() {
            let ratio = if prev > 0.0 { diff / prev } else { 0.0 };
            ratios.push(ratio);
            above_one = if ratio > 1.0 { above_one + 1 } else { 0 };
            if above_one >= 3 {
                return Err(Error::NoContraction {
                    iteration: differences.len() + 1,
                    ratio,
                });
            }
        }
        differences.push(diff);
        family = next;
        if diff <= threshold {
            break;
        }
        if differences.len() >= cfg.max_iterations {
            return Err(Error::IterationLimit {
                iterations: differences.len(),
                difference: diff,
            });
        }
    }
    let last = *differences.last().unwrap();
    let report = SolveReport {
        iterations: differences.len(),
        contraction_factor_measured: ratios.iter().copied().fold(0.0, f64::max),
        contraction_factor_theoretical: rho,
        a_posteriori_error: rho / (1.0 - rho) * last,
        tail_bound: choice.tail_bound,
        tail_metric: choice.tail_metric,
        horizon: family.horizon,
        delta: family.delta,
        big_c: family.big_c,
        k: family.k,
        solved_range: range,
        max_discrete_lipschitz: lipschitz,
        max_spacing: family.graphs.iter().map(|g| g.spacing()).fold(0.0, f64::max),
        differences,
        ratios,
    };
    Ok((family, report))
}

/// Stable components `x_n, ..., x_m` of the orbit through
/// `(xi, phi_n(xi))`, by forward recursion.
pub fn trajectory(
    model: &DichotomyModel,
    f: &PerturbationFamily,
    phi: &ManifoldFamily,
    n: usize,
    xi: &[f64],
    m: usize,
    escape_slack: f64,
) -> Result<Vec<Vec<f64>>> {
    assert!(m >= n, "trajectory needs m >= n");
    let (de, df) = (model.stable_dim(), model.unstable_dim());
    let xi_norm = sup_norm(xi);
    let mut out = vec![xi.to_vec()];
    let mut u = vec![0.0; de + df];
    let mut w = vec![0.0; de + df];
    let mut next = vec![0.0; de];
    for k in n..m {
        let x = out.last().unwrap();
        u[..de].copy_from_slice(x);
        phi.graph(k)?.evaluate_into(x, &mut u[de..]);
        f.apply(k, &u, &mut w);
        mat_vec(&model.step(k)?.stable, x, &mut next);
        for (y, d) in next.iter_mut().zip(&w[..de]) {
            *y += d;
        }
        let bound = phi.big_c * model.ln_stable_rate(k + 1, n).exp() * xi_norm;
        let norm = sup_norm(&next);
        if norm > bound * (1.0 + escape_slack) {
            return Err(Error::Escape {
                start: n,
                index: k + 1,
                norm,
                bound,
            });
        }
        out.push(next.clone());
    }
    Ok(out)
}

/// Solves with the same lattice but a coarser or finer resolution, for
/// self-consistency checks.
pub fn with_grid(cfg: &SolveConfig, nodes_per_axis: usize) -> SolveConfig {
    SolveConfig {
        grid: GridSpec { nodes_per_axis },
        ..cfg.clone()
    }
}
