//! Block-diagonal linear cocycles and their dichotomy bounds.
//!
//! A model is a rule `n -> A_n` (for `n >= 1`) whose matrices are block
//! diagonal with respect to a fixed splitting `E x F`, together with the
//! claimed dichotomy constants. Because the splitting is fixed, the
//! projections `P_n` and `Q_n` are the coordinate projections and commute
//! with every transition by construction.
//!
//! All norms are sup norms: the max-abs row sum on each block and the max of
//! the two block norms on the product space.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rates::{GrowthRate, RateKind};

/// Largest admissible sup-norm condition number of an unstable block.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Relative rounding slack allowed when comparing a norm with its bound.
pub const RATIO_SLACK: f64 = 1e-12;

/// A point `(xi, eta)` of `E_n x F_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductPoint {
    pub stable: DVector<f64>,
    pub unstable: DVector<f64>,
}

impl ProductPoint {
    pub fn new(stable: DVector<f64>, unstable: DVector<f64>) -> Self {
        Self { stable, unstable }
    }

    pub fn from_slices(stable: &[f64], unstable: &[f64]) -> Self {
        Self::new(
            DVector::from_column_slice(stable),
            DVector::from_column_slice(unstable),
        )
    }

    pub fn zeros(stable_dim: usize, unstable_dim: usize) -> Self {
        Self::new(DVector::zeros(stable_dim), DVector::zeros(unstable_dim))
    }

    pub fn norm(&self) -> f64 {
        self.stable.amax().max(self.unstable.amax())
    }

    /// Concatenation `(xi, eta)` as one vector.
    pub fn to_vec(&self) -> Vec<f64> {
        self.stable.iter().chain(self.unstable.iter()).copied().collect()
    }

    pub fn from_concat(v: &[f64], stable_dim: usize) -> Self {
        Self::from_slices(&v[..stable_dim], &v[stable_dim..])
    }
}

/// Sup norm of a vector slice.
pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Operator norm induced by the sup norm: the max-abs row sum.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `out = m x` for slices, without allocating.
pub fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

/// A linear map that is block diagonal with respect to `E x F`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiag {
    pub stable: DMatrix<f64>,
    pub unstable: DMatrix<f64>,
}

impl BlockDiag {
    pub fn identity(stable_dim: usize, unstable_dim: usize) -> Self {
        Self {
            stable: DMatrix::identity(stable_dim, stable_dim),
            unstable: DMatrix::identity(unstable_dim, unstable_dim),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (p, r) = (self.stable.nrows(), self.unstable.nrows());
        let mut out = DMatrix::zeros(p + r, p + r);
        out.view_mut((0, 0), (p, p)).copy_from(&self.stable);
        out.view_mut((p, p), (r, r)).copy_from(&self.unstable);
        out
    }

    pub fn apply(&self, v: &ProductPoint) -> ProductPoint {
        ProductPoint::new(&self.stable * &v.stable, &self.unstable * &v.unstable)
    }

    fn is_finite(&self) -> bool {
        self.stable.iter().chain(self.unstable.iter()).all(|x| x.is_finite())
    }
}

/// Dense coordinate projection onto `E` in a space of dimension `p + r`.
pub fn stable_projection(stable_dim: usize, unstable_dim: usize) -> DMatrix<f64> {
    let n = stable_dim + unstable_dim;
    DMatrix::from_fn(n, n, |i, j| if i == j && i < stable_dim { 1.0 } else { 0.0 })
}

/// One step `A_n` with the inverse of its unstable block.
#[derive(Clone, Debug)]
pub struct Step {
    pub stable: DMatrix<f64>,
    pub unstable: DMatrix<f64>,
    pub unstable_inv: DMatrix<f64>,
}

type StepFn = dyn Fn(usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> + Send + Sync;

/// How the matrices `A_n` are produced.
#[derive(Clone)]
pub enum CocycleRule {
    /// The diagonal family with scalar blocks `s_n I` and `u_n I` of equal
    /// size; with one stable and one unstable direction it is 2x2.
    Example1,
    /// The same diagonal matrix at every step.
    AutonomousDiagonal { stable: Vec<f64>, unstable: Vec<f64> },
    /// Per-step diagonal entries; entry `i` is `A_{i+1}`.
    Tabulated(Arc<[DiagStep]>),
    /// Arbitrary rule returning the stable and unstable blocks of `A_n`.
    Custom(Arc<StepFn>),
}

impl fmt::Debug for CocycleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Example1 => f.write_str("Example1"),
            Self::AutonomousDiagonal { stable, unstable } => f
                .debug_struct("AutonomousDiagonal")
                .field("stable", stable)
                .field("unstable", unstable)
                .finish(),
            Self::Tabulated(steps) => write!(f, "Tabulated({} steps)", steps.len()),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Diagonal entries of one tabulated step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagStep {
    pub stable: Vec<f64>,
    pub unstable: Vec<f64>,
}

/// `cos(n pi) - 1`, evaluated exactly by parity.
pub fn parity_exponent(n: usize) -> f64 {
    if n % 2 == 0 {
        0.0
    } else {
        -2.0
    }
}

/// A linear cocycle with claimed `(mu, nu)`-dichotomy constants.
pub struct DichotomyModel {
    stable_dim: usize,
    unstable_dim: usize,
    pub mu: GrowthRate,
    pub nu: GrowthRate,
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub d: f64,
    rule: CocycleRule,
    condition_cap: f64,
    steps: RwLock<BTreeMap<usize, Arc<Step>>>,
}

impl fmt::Debug for DichotomyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DichotomyModel")
            .field("stable_dim", &self.stable_dim)
            .field("unstable_dim", &self.unstable_dim)
            .field("mu", &self.mu)
            .field("nu", &self.nu)
            .field("a", &self.a)
            .field("b", &self.b)
            .field("eps", &self.eps)
            .field("d", &self.d)
            .field("rule", &self.rule)
            .finish()
    }
}

impl Clone for DichotomyModel {
    fn clone(&self) -> Self {
        Self {
            stable_dim: self.stable_dim,
            unstable_dim: self.unstable_dim,
            mu: self.mu.clone(),
            nu: self.nu.clone(),
            a: self.a,
            b: self.b,
            eps: self.eps,
            d: self.d,
            rule: self.rule.clone(),
            condition_cap: self.condition_cap,
            steps: RwLock::new(self.steps.read().unwrap().clone()),
        }
    }
}

fn check_constants(a: f64, b: f64, eps: f64) -> Result<()> {
    if !(a < 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidParameter(format!("need a < 0 <= b, got a = {a}, b = {b}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("need eps >= 0, got {eps}")));
    }
    Ok(())
}

impl DichotomyModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stable_dim: usize,
        unstable_dim: usize,
        mu: GrowthRate,
        nu: GrowthRate,
        a: f64,
        b: f64,
        eps: f64,
        d: f64,
        rule: CocycleRule,
    ) -> Result<Self> {
        check_constants(a, b, eps)?;
        if stable_dim == 0 || unstable_dim == 0 {
            return Err(Error::InvalidParameter("both blocks need positive dimension".into()));
        }
        if !(d >= 1.0 && d.is_finite()) {
            return Err(Error::InvalidParameter(format!("need D >= 1, got {d}")));
        }
        match &rule {
            CocycleRule::Example1 if stable_dim != unstable_dim => {
                return Err(Error::InvalidParameter(
                    "the built-in example needs blocks of equal dimension".into(),
                ));
            }
            CocycleRule::AutonomousDiagonal { stable, unstable }
                if stable.len() != stable_dim || unstable.len() != unstable_dim =>
            {
                return Err(Error::InvalidParameter("diagonal length does not match dimensions".into()));
            }
            CocycleRule::Tabulated(steps)
                if steps
                    .iter()
                    .any(|s| s.stable.len() != stable_dim || s.unstable.len() != unstable_dim) =>
            {
                return Err(Error::InvalidParameter("tabulated step does not match dimensions".into()));
            }
            _ => {}
        }
        Ok(Self {
            stable_dim,
            unstable_dim,
            mu,
            nu,
            a,
            b,
            eps,
            d,
            rule,
            condition_cap: DEFAULT_CONDITION_CAP,
            steps: RwLock::new(BTreeMap::new()),
        })
    }

    /// Same cocycle with a different claimed `D`.
    pub fn with_claimed_d(&self, d: f64) -> Result<Self> {
        Self::new(
            self.stable_dim,
            self.unstable_dim,
            self.mu.clone(),
            self.nu.clone(),
            self.a,
            self.b,
            self.eps,
            d,
            self.rule.clone(),
        )
        .map(|m| m.with_condition_cap(self.condition_cap))
    }

    pub fn with_condition_cap(mut self, cap: f64) -> Self {
        self.condition_cap = cap;
        self
    }

    pub fn stable_dim(&self) -> usize {
        self.stable_dim
    }

    pub fn unstable_dim(&self) -> usize {
        self.unstable_dim
    }

    pub fn rule(&self) -> &CocycleRule {
        &self.rule
    }

    fn raw_blocks(&self, n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match &self.rule {
            CocycleRule::Example1 => {
                self.mu.ensure_defined(n + 1)?;
                self.nu.ensure_defined(n)?;
                let nu_part = if self.eps == 0.0 {
                    0.0
                } else {
                    0.5 * self.eps
                        * (parity_exponent(n) * self.nu.ln_value(n)
                            - parity_exponent(n - 1) * self.nu.ln_value(n - 1))
                };
                let lm = |k| self.mu.ln_value(k);
                let s = (self.a * (lm(n + 1) - lm(n - 1)) + nu_part).exp();
                let u = (self.b * (lm(n + 1) - lm(n)) + nu_part).exp();
                let k = self.stable_dim;
                Ok((DMatrix::identity(k, k) * s, DMatrix::identity(k, k) * u))
            }
            CocycleRule::AutonomousDiagonal { stable, unstable } => Ok((
                DMatrix::from_diagonal(&DVector::from_column_slice(stable)),
                DMatrix::from_diagonal(&DVector::from_column_slice(unstable)),
            )),
            CocycleRule::Tabulated(steps) => {
                let s = steps.get(n - 1).ok_or(Error::OutOfTable {
                    index: n,
                    len: steps.len() + 1,
                })?;
                Ok((
                    DMatrix::from_diagonal(&DVector::from_column_slice(&s.stable)),
                    DMatrix::from_diagonal(&DVector::from_column_slice(&s.unstable)),
                ))
            }
            CocycleRule::Custom(f) => {
                let (s, u) = f(n)?;
                if s.shape() != (self.stable_dim, self.stable_dim)
                    || u.shape() != (self.unstable_dim, self.unstable_dim)
                {
                    return Err(Error::InvalidParameter(format!(
                        "custom step {n} has the wrong block shapes"
                    )));
                }
                Ok((s, u))
            }
        }
    }

    /// The step `A_n`, `n >= 1`, memoized.
    pub fn step(&self, n: usize) -> Result<Arc<Step>> {
        assert!(n >= 1, "steps are indexed from 1");
        if let Some(s) = self.steps.read().unwrap().get(&n) {
            return Ok(s.clone());
        }
        let (stable, unstable) = self.raw_blocks(n)?;
        if !(stable.iter().chain(unstable.iter()).all(|x| x.is_finite())) {
            return Err(Error::Overflow { from: n, to: n + 1 });
        }
        let singular = |condition| Error::SingularBlock {
            index: n,
            condition,
        };
        let unstable_inv = unstable
            .clone()
            .try_inverse()
            .ok_or_else(|| singular(f64::INFINITY))?;
        let condition = op_norm(&unstable) * op_norm(&unstable_inv);
        if !(condition <= self.condition_cap) {
            return Err(singular(condition));
        }
        let step = Arc::new(Step {
            stable,
            unstable,
            unstable_inv,
        });
        self.steps.write().unwrap().insert(n, step.clone());
        Ok(step)
    }

    /// Dense `A_n`.
    pub fn step_dense(&self, n: usize) -> Result<DMatrix<f64>> {
        let s = self.step(n)?;
        Ok(BlockDiag {
            stable: s.stable.clone(),
            unstable: s.unstable.clone(),
        }
        .to_dense())
    }

    /// `A_{m-1} ... A_n` computed blockwise, identity when `m = n`.
    pub fn transition(&self, m: usize, n: usize) -> Result<BlockDiag> {
        assert!(m >= n && n >= 1, "transition needs m >= n >= 1");
        let mut out = BlockDiag::identity(self.stable_dim, self.unstable_dim);
        for k in n..m {
            let s = self.step(k)?;
            out.stable = &s.stable * &out.stable;
            out.unstable = &s.unstable * &out.unstable;
        }
        if !out.is_finite() {
            return Err(Error::Overflow { from: n, to: m });
        }
        Ok(out)
    }

    /// `(A_{m-1} ... A_n)^{-1}` restricted to `F_m`, as a product of the
    /// individual unstable inverses.
    pub fn unstable_inverse(&self, m: usize, n: usize) -> Result<DMatrix<f64>> {
        assert!(m >= n && n >= 1, "transition needs m >= n >= 1");
        let mut out = DMatrix::identity(self.unstable_dim, self.unstable_dim);
        for k in n..m {
            out = &out * &self.step(k)?.unstable_inv;
        }
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Overflow { from: n, to: m });
        }
        Ok(out)
    }

    /// `ln` of `(mu_m / mu_{n-1})^a nu_{n-1}^eps`, without `D`.
    pub fn ln_stable_rate(&self, m: usize, n: usize) -> f64 {
        self.a * (self.mu.ln_value(m) - self.mu.ln_value(n - 1)) + self.eps * self.nu.ln_value(n - 1)
    }

    /// `ln` of `(mu_{m-1} / mu_n)^{-b} nu_{m-1}^eps`, without `D`.
    pub fn ln_unstable_rate(&self, m: usize, n: usize) -> f64 {
        -self.b * (self.mu.ln_value(m - 1) - self.mu.ln_value(n)) + self.eps * self.nu.ln_value(m - 1)
    }

    /// Right-hand side of the stable dichotomy bound.
    pub fn stable_bound(&self, m: usize, n: usize) -> f64 {
        self.d * self.ln_stable_rate(m, n).exp()
    }

    /// Right-hand side of the unstable dichotomy bound.
    pub fn unstable_bound(&self, m: usize, n: usize) -> f64 {
        self.d * self.ln_unstable_rate(m, n).exp()
    }
}

/// The built-in 1+1 dimensional model with its smallest valid `D`.
pub fn example1_model(mu: GrowthRate, nu: GrowthRate, a: f64, b: f64, eps: f64) -> Result<DichotomyModel> {
    check_constants(a, b, eps)?;
    let d = example1_min_d(&mu, &nu, a, eps);
    DichotomyModel::new(1, 1, mu, nu, a, b, eps, d, CocycleRule::Example1)
}

/// `copies` independent copies of the built-in example, acting on
/// `E = F = R^copies`. Sup norms of scalar blocks equal the scalar, so the
/// dichotomy constants are those of a single copy.
pub fn example1_product_model(
    mu: GrowthRate,
    nu: GrowthRate,
    a: f64,
    b: f64,
    eps: f64,
    copies: usize,
) -> Result<DichotomyModel> {
    check_constants(a, b, eps)?;
    let d = example1_min_d(&mu, &nu, a, eps);
    DichotomyModel::new(copies, copies, mu, nu, a, b, eps, d, CocycleRule::Example1)
}

/// Smallest `D` for which the built-in example satisfies both dichotomy
/// bounds for all `m >= n >= 1`.
///
/// Off the diagonal both bounds hold with `D = 1`. At `m = n` the stable
/// transition is the identity while the bound is
/// `(mu_n / mu_{n-1})^a nu_{n-1}^eps < 1`, so `D` must be at least the sup
/// over `n` of `(mu_n / mu_{n-1})^{-a} nu_{n-1}^{-eps}`. Both factors are
/// largest at `n = 1` for the built-in families, whose log increments are
/// nonincreasing; tabulated rates are scanned.
pub fn example1_min_d(mu: &GrowthRate, nu: &GrowthRate, a: f64, eps: f64) -> f64 {
    let term = |n: usize| -a * (mu.ln_value(n) - mu.ln_value(n - 1)) - eps * nu.ln_value(n - 1);
    let last = match (mu.defined_up_to(), nu.defined_up_to()) {
        (None, _) => 1,
        (Some(m), None) => m,
        (Some(m), Some(v)) => m.min(v + 1),
    };
    let sup = (1..=last.max(1)).map(term).fold(f64::NEG_INFINITY, f64::max);
    sup.exp().max(1.0)
}

/// Windowed evidence for the two dichotomy bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomyCertificate {
    pub window: (usize, usize),
    pub claimed_d: f64,
    /// Sup over `n <= m` of the stable norm divided by its bound.
    pub sup_stable_ratio: f64,
    pub sup_stable_at: (usize, usize),
    /// The same sup restricted to `m > n`.
    pub sup_stable_ratio_off_diagonal: f64,
    pub sup_unstable_ratio: f64,
    pub sup_unstable_at: (usize, usize),
    pub min_feasible_d: f64,
    /// Both sups are at most `1 + RATIO_SLACK`.
    pub pass: bool,
}

#[derive(Clone, Copy)]
struct Sup {
    value: f64,
    at: (usize, usize),
}

impl Sup {
    const EMPTY: Sup = Sup {
        value: 0.0,
        at: (0, 0),
    };

    fn merge(self, other: Sup) -> Sup {
        if other.value > self.value {
            other
        } else {
            self
        }
    }
}

/// Checks both dichotomy bounds for all `n_min <= n <= m <= m_max`.
pub fn verify_dichotomy(model: &DichotomyModel, window: (usize, usize)) -> Result<DichotomyCertificate> {
    let (lo, hi) = window;
    if lo < 1 || hi < lo {
        return Err(Error::InvalidParameter(format!("bad window [{lo}, {hi}]")));
    }
    for k in lo..hi {
        model.step(k)?;
    }
    let per_start: Vec<(Sup, Sup, Sup)> = (lo..=hi)
        .into_par_iter()
        .map(|n| -> Result<(Sup, Sup, Sup)> {
            let mut stable = DMatrix::identity(model.stable_dim, model.stable_dim);
            let mut inv = DMatrix::identity(model.unstable_dim, model.unstable_dim);
            let (mut s_all, mut s_off, mut u_all) = (Sup::EMPTY, Sup::EMPTY, Sup::EMPTY);
            for m in n..=hi {
                if m > n {
                    let step = model.step(m - 1)?;
                    stable = &step.stable * &stable;
                    inv = &inv * &step.unstable_inv;
                }
                let sr = op_norm(&stable) / model.stable_bound(m, n);
                let ur = op_norm(&inv) / model.unstable_bound(m, n);
                if !(sr.is_finite() && ur.is_finite()) {
                    return Err(Error::Overflow { from: n, to: m });
                }
                let s = Sup { value: sr, at: (m, n) };
                s_all = s_all.merge(s);
                if m > n {
                    s_off = s_off.merge(s);
                }
                u_all = u_all.merge(Sup { value: ur, at: (m, n) });
            }
            Ok((s_all, s_off, u_all))
        })
        .collect::<Result<_>>()?;
    let (s, s_off, u) = per_start.into_iter().fold(
        (Sup::EMPTY, Sup::EMPTY, Sup::EMPTY),
        |(a, b, c), (x, y, z)| (a.merge(x), b.merge(y), c.merge(z)),
    );
    let worst = s.value.max(u.value);
    Ok(DichotomyCertificate {
        window,
        claimed_d: model.d,
        sup_stable_ratio: s.value,
        sup_stable_at: s.at,
        sup_stable_ratio_off_diagonal: s_off.value,
        sup_unstable_ratio: u.value,
        sup_unstable_at: u.at,
        min_feasible_d: model.d * worst.max(1.0 / model.d),
        pass: s.value <= 1.0 + RATIO_SLACK && u.value <= 1.0 + RATIO_SLACK,
    })
}

/// Claimed `D`: a number, or `"auto"` for the smallest feasible value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClaimedD {
    Fixed(f64),
    Auto(AutoKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

impl Default for ClaimedD {
    fn default() -> Self {
        ClaimedD::Auto(AutoKeyword::Auto)
    }
}

/// Cocycle section of a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CocycleSpec {
    Example1,
    AutonomousDiagonal { stable: Vec<f64>, unstable: Vec<f64> },
    Tabulated { steps: Vec<DiagStep> },
}

fn default_auto_window() -> usize {
    100
}

/// JSON description of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stable_dim: usize,
    pub unstable_dim: usize,
    pub mu: RateKind,
    pub nu: RateKind,
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    #[serde(default, rename = "D")]
    pub d: ClaimedD,
    pub cocycle: CocycleSpec,
    /// Last index used when `D` is determined numerically.
    #[serde(default = "default_auto_window")]
    pub auto_d_window: usize,
}

impl ModelSpec {
    pub fn build(&self) -> Result<DichotomyModel> {
        let mu = GrowthRate::new(self.mu.clone())?;
        let nu = GrowthRate::new(self.nu.clone())?;
        let rule = match &self.cocycle {
            CocycleSpec::Example1 => CocycleRule::Example1,
            CocycleSpec::AutonomousDiagonal { stable, unstable } => CocycleRule::AutonomousDiagonal {
                stable: stable.clone(),
                unstable: unstable.clone(),
            },
            CocycleSpec::Tabulated { steps } => CocycleRule::Tabulated(steps.clone().into()),
        };
        let model = DichotomyModel::new(
            self.stable_dim,
            self.unstable_dim,
            mu,
            nu,
            self.a,
            self.b,
            self.eps,
            1.0,
            rule,
        )?;
        let d = match (&self.d, &self.cocycle) {
            (ClaimedD::Fixed(d), _) => *d,
            (ClaimedD::Auto(_), CocycleSpec::Example1) => {
                example1_min_d(&model.mu, &model.nu, self.a, self.eps)
            }
            (ClaimedD::Auto(_), CocycleSpec::Tabulated { steps }) => {
                let hi = self.auto_d_window.min(steps.len() + 1);
                verify_dichotomy(&model, (1, hi))?.min_feasible_d
            }
            (ClaimedD::Auto(_), _) => verify_dichotomy(&model, (1, self.auto_d_window))?.min_feasible_d,
        };
        model.with_claimed_d(d)
    }
}
