//! Hypotheses of the stable manifold theorem.
//!
//! Three conditions are checked for a model: the limit
//! `mu_m^a mu_{m-1}^{-b} nu_{m-1}^eps -> 0`, convergence of
//! `sum mu_k^{aq} nu_k^eps`, and boundedness of
//! `(mu_m^a / beta_m) / (mu_{n-1}^a / beta_n)` over `m >= n` by a constant `K`.
//! Limits and suprema over all `m` cannot be decided from finite data, so
//! every verdict combines window evidence with an asymptotic criterion read
//! off the [`LogProfile`]s of the rates whenever those are available.
//!
//! The module also collects the smallness inequalities on `delta` used in
//! the construction into a [`DeltaLedger`].

use serde::{Deserialize, Serialize};

use crate::cocycle::DichotomyModel;
use crate::error::{Error, Result};
use crate::rates::{
    power_tail, power_tail_window, tail_sum, GrowthRate, LogProfile, PowerSeries, SumConfig,
    TailSum,
};

/// Outcome of one hypothesis check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Window evidence and the asymptotic criterion disagree.
    Inconclusive,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }
}

/// `beta_m` and `tilde beta_m` on a window of indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSequences {
    pub window: (usize, usize),
    pub beta: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub ln_beta: Vec<f64>,
    /// `ln sum_{k >= m} mu_k^{aq} nu_k^eps`.
    pub ln_tail: Vec<f64>,
    /// Relative truncation error shared by all tails.
    pub tail_rel_error: f64,
    pub a: f64,
    pub q: f64,
    pub eps: f64,
}

impl BetaSequences {
    fn slot(&self, m: usize) -> usize {
        let (lo, hi) = self.window;
        assert!(lo <= m && m <= hi, "index {m} outside beta window [{lo}, {hi}]");
        m - lo
    }

    pub fn beta(&self, m: usize) -> f64 {
        self.beta[self.slot(m)]
    }

    pub fn ln_beta(&self, m: usize) -> f64 {
        self.ln_beta[self.slot(m)]
    }

    pub fn beta_tilde(&self, m: usize) -> f64 {
        self.beta_tilde[self.slot(m)]
    }

    pub fn contains(&self, m: usize) -> bool {
        self.window.0 <= m && m <= self.window.1
    }

    /// `mu_{m-1}^{-aq} nu_{m-1}^{eps(q+1)} beta_m^q sum_{k>=m} mu_k^{aq} nu_k^eps`,
    /// which equals one by construction.
    pub fn normalization(&self, mu: &GrowthRate, nu: &GrowthRate, m: usize) -> f64 {
        let (a, q, eps) = (self.a, self.q, self.eps);
        let mut ln = -a * q * mu.ln_value(m - 1) + q * self.ln_beta(m) + self.ln_tail[self.slot(m)];
        if eps != 0.0 {
            ln += eps * (q + 1.0) * nu.ln_value(m - 1);
        }
        ln.exp()
    }
}

/// `beta_m` and `tilde beta_m` for every `m` in `window`.
pub fn compute_beta(
    mu: &GrowthRate,
    nu: &GrowthRate,
    a: f64,
    q: f64,
    eps: f64,
    window: (usize, usize),
    cfg: &SumConfig,
) -> Result<BetaSequences> {
    let (lo, hi) = window;
    if lo < 1 || hi < lo {
        return Err(Error::InvalidParameter(format!("bad beta window [{lo}, {hi}]")));
    }
    // validates a, q, eps and the series once
    tail_sum(mu, nu, a, q, eps, hi, cfg)?;
    let series = PowerSeries::integrability(mu, nu, a, q, eps);
    let tails = power_tail_window(&series, lo, hi, cfg)?;
    let mut out = BetaSequences {
        window,
        beta: Vec::with_capacity(tails.len()),
        beta_tilde: Vec::with_capacity(tails.len()),
        ln_beta: Vec::with_capacity(tails.len()),
        ln_tail: Vec::with_capacity(tails.len()),
        tail_rel_error: tails.last().map_or(0.0, |t| t.rel_error),
        a,
        q,
        eps,
    };
    for t in &tails {
        let m = t.start;
        let ln_nu = if eps == 0.0 { 0.0 } else { nu.ln_value(m - 1) };
        let ln_beta = a * mu.ln_value(m - 1) - eps * (1.0 + 1.0 / q) * ln_nu - t.ln_value / q;
        out.ln_beta.push(ln_beta);
        out.beta.push(ln_beta.exp());
        out.beta_tilde.push(if eps == 0.0 {
            ln_beta.exp()
        } else {
            (ln_beta - eps * ln_nu).exp()
        });
        out.ln_tail.push(t.ln_value);
    }
    Ok(out)
}

fn profile_of(rate: &GrowthRate, exponent: f64) -> Option<LogProfile> {
    if exponent == 0.0 {
        Some(LogProfile::default())
    } else {
        rate.profile().map(|p| p.scale(exponent))
    }
}

/// Evidence for `mu_m^a mu_{m-1}^{-b} nu_{m-1}^eps -> 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitCheck {
    pub verdict: Verdict,
    pub numeric: bool,
    pub analytic: Option<bool>,
    /// `(m, g(m))` over the window followed by far probes.
    pub curve: Vec<(usize, f64)>,
    pub tol: f64,
}

/// Asymptotic criterion for the limit condition: the log profile of
/// `mu^{a-b} nu^eps` must be lexicographically negative.
pub fn limit_criterion(mu: &GrowthRate, nu: &GrowthRate, a: f64, b: f64, eps: f64) -> Option<bool> {
    let p = profile_of(mu, a - b)?.add(profile_of(nu, eps)?);
    Some(p.leading_sign(1e-12) < 0)
}

/// Checks the limit condition on `window` and, for rates with a closed form,
/// at far probes `m_max * 10^k` up to `1e15`.
pub fn check_limit_condition(
    mu: &GrowthRate,
    nu: &GrowthRate,
    a: f64,
    b: f64,
    eps: f64,
    window: (usize, usize),
    tol: f64,
) -> Result<LimitCheck> {
    let (lo, hi) = window;
    if lo < 1 || hi < lo + 9 {
        return Err(Error::InvalidParameter(format!(
            "limit check needs at least 10 indices, got [{lo}, {hi}]"
        )));
    }
    mu.ensure_defined(hi)?;
    if eps != 0.0 {
        nu.ensure_defined(hi)?;
    }
    let g = |m: usize| {
        let mut ln = a * mu.ln_value(m) - b * mu.ln_value(m - 1);
        if eps != 0.0 {
            ln += eps * nu.ln_value(m - 1);
        }
        ln.exp()
    };
    let mut curve: Vec<(usize, f64)> = (lo..=hi).map(|m| (m, g(m))).collect();
    let probe_far = !mu.is_tabulated() && (eps == 0.0 || !nu.is_tabulated());
    if probe_far {
        let mut m = hi as f64 * 10.0;
        while m <= 1e15 {
            curve.push((m as usize, g(m as usize)));
            m *= 10.0;
        }
    }
    let tail_start = (hi - lo + 1) / 2;
    let decreasing = curve[tail_start..].windows(2).all(|w| w[1].1 <= w[0].1);
    let numeric = decreasing && curve.last().unwrap().1 < tol;
    let analytic = limit_criterion(mu, nu, a, b, eps);
    let verdict = match analytic {
        None => Verdict::from_bool(numeric),
        Some(x) if x == numeric => Verdict::from_bool(x),
        Some(_) => Verdict::Inconclusive,
    };
    Ok(LimitCheck {
        verdict,
        numeric,
        analytic,
        curve,
        tol,
    })
}

/// Convergence of the integrability series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesCheck {
    pub verdict: Verdict,
    pub tail: Option<TailSum>,
    pub message: Option<String>,
}

pub fn check_series_condition(
    mu: &GrowthRate,
    nu: &GrowthRate,
    a: f64,
    q: f64,
    eps: f64,
    cfg: &SumConfig,
) -> Result<SeriesCheck> {
    match tail_sum(mu, nu, a, q, eps, 1, cfg) {
        Ok(t) => Ok(SeriesCheck {
            verdict: Verdict::Pass,
            tail: Some(t),
            message: None,
        }),
        Err(Error::Divergence(msg)) => Ok(SeriesCheck {
            verdict: Verdict::Fail,
            tail: None,
            message: Some(msg),
        }),
        Err(e) => Err(e),
    }
}

/// Asymptotic profile of `ln sum_{k >= m} g(k)` for a convergent profile `g`.
fn tail_profile(p: LogProfile) -> LogProfile {
    if p.linear < 0.0 {
        p
    } else if p.power < -1.0 {
        LogProfile::new(0.0, p.power + 1.0, p.loglog)
    } else {
        LogProfile::new(0.0, 0.0, p.loglog + 1.0)
    }
}

/// Profile of `ln(mu_m^a / beta_m)` up to a bounded term. The supremum in
/// the decreasing condition is finite iff it is lexicographically `<= 0`.
pub fn decreasing_profile(
    mu: &GrowthRate,
    nu: &GrowthRate,
    a: f64,
    q: f64,
    eps: f64,
) -> Option<LogProfile> {
    let series = PowerSeries::integrability(mu, nu, a, q, eps);
    let p = series.profile()?;
    if !series.converges().ok()? {
        return None;
    }
    let ln_nu = profile_of(nu, eps * (1.0 + 1.0 / q))?;
    Some(ln_nu.add(tail_profile(p).scale(1.0 / q)).snapped())
}

/// Closed form of `K` for the exponential and polynomial families.
pub fn closed_form_k(mu: &GrowthRate, nu: &GrowthRate, a: f64, q: f64, eps: f64) -> Option<f64> {
    use crate::rates::RateKind::*;
    let same = |k: crate::rates::RateKind| mu.kind() == k && (eps == 0.0 || nu.kind() == k);
    let rate = a + eps * (1.0 + 2.0 / q);
    if same(Exponential) && a * q + eps < 0.0 {
        return (rate <= 1e-12).then_some(1.0);
    }
    if same(Polynomial) && a * q + eps + 1.0 < 0.0 {
        return (rate + 1.0 / q <= 1e-12).then(|| 2f64.powf(-2.0 * a + eps - 1.0 / q).max(1.0));
    }
    None
}

/// Window estimate and closed form of the constant `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    /// Sup over `n <= m` in the window of the ratio.
    pub window_sup: f64,
    pub window_sup_at: (usize, usize),
    /// The same sup over the first half of the window.
    pub half_window_sup: f64,
    /// `log2(window_sup / half_window_sup)`.
    pub growth_exponent: f64,
    pub closed_form: Option<f64>,
    /// True when no closed form is available and `K` rests on window data.
    pub window_bounded: bool,
}

impl KReport {
    /// Value used downstream: the closed form when known, otherwise the
    /// window sup, and at least one.
    pub fn value(&self) -> f64 {
        self.closed_form.unwrap_or(self.window_sup).max(1.0)
    }

    pub fn grows(&self, threshold: f64) -> bool {
        self.growth_exponent > threshold
    }
}

/// `ln` of the ratio `(mu_m^a / beta_m) / (mu_{n-1}^a / beta_n)`.
pub fn ln_k_ratio(beta: &BetaSequences, mu: &GrowthRate, m: usize, n: usize) -> f64 {
    let a = beta.a;
    (a * mu.ln_value(m) - beta.ln_beta(m)) - (a * mu.ln_value(n - 1) - beta.ln_beta(n))
}

fn window_sup(beta: &BetaSequences, mu: &GrowthRate, hi: usize) -> (f64, (usize, usize)) {
    let a = beta.a;
    let lo = beta.window.0;
    let mut best_start = f64::NEG_INFINITY;
    let mut best_n = lo;
    let mut sup = f64::NEG_INFINITY;
    let mut at = (lo, lo);
    for m in lo..=hi {
        let h = beta.ln_beta(m) - a * mu.ln_value(m - 1);
        if h > best_start {
            best_start = h;
            best_n = m;
        }
        let v = a * mu.ln_value(m) - beta.ln_beta(m) + best_start;
        if v > sup {
            sup = v;
            at = (m, best_n);
        }
    }
    (sup.exp(), at)
}

/// `K` estimate from precomputed `beta` sequences. Never fails.
pub fn k_from_beta(beta: &BetaSequences, mu: &GrowthRate, nu: &GrowthRate) -> KReport {
    let (lo, hi) = beta.window;
    let (sup, at) = window_sup(beta, mu, hi);
    let mid = lo + (hi - lo) / 2;
    let (half, _) = window_sup(beta, mu, mid);
    let closed_form = closed_form_k(mu, nu, beta.a, beta.q, beta.eps);
    KReport {
        window_sup: sup,
        window_sup_at: at,
        half_window_sup: half,
        growth_exponent: (sup / half).ln() / std::f64::consts::LN_2,
        window_bounded: closed_form.is_none(),
        closed_form,
    }
}

/// Default growth-exponent threshold above which the window sup of the `K`
/// ratio is taken to be unbounded.
pub const DEFAULT_K_GROWTH_THRESHOLD: f64 = 0.05;

/// Computes `K` on `window`, failing when the sup visibly grows with the
/// window size.
pub fn compute_k(
    mu: &GrowthRate,
    nu: &GrowthRate,
    a: f64,
    q: f64,
    eps: f64,
    window: (usize, usize),
    cfg: &SumConfig,
) -> Result<KReport> {
    let beta = compute_beta(mu, nu, a, q, eps, window, cfg)?;
    let k = k_from_beta(&beta, mu, nu);
    if k.grows(DEFAULT_K_GROWTH_THRESHOLD) {
        return Err(Error::AdmissibilityFailure(format!(
            "sup of the K ratio grows like window^{:.3} (sup {:e} on [{}, {}])",
            k.growth_exponent, k.window_sup, window.0, window.1
        )));
    }
    Ok(k)
}

/// One smallness inequality `coefficient * delta^q (< or <=) bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub inequality: String,
    pub coefficient: f64,
    pub bound: f64,
    pub strict: bool,
    pub delta_max: f64,
}

impl LedgerEntry {
    pub fn holds(&self, delta: f64, q: f64) -> bool {
        let lhs = self.coefficient * delta.powf(q);
        if self.strict {
            lhs < self.bound
        } else {
            lhs <= self.bound
        }
    }
}

/// The smallness conditions on `delta` and the value chosen from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaLedger {
    pub c: f64,
    pub q: f64,
    #[serde(rename = "C")]
    pub big_c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub safety: f64,
    pub entries: Vec<LedgerEntry>,
    pub delta: f64,
    pub binding: String,
    /// Contraction factor `2 c C^{q+1} D (6 delta)^q` of the graph operator.
    pub rho: f64,
}

impl DeltaLedger {
    pub fn entry(&self, name: &str) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Default fraction of the largest admissible `delta` that is used.
pub const DEFAULT_SAFETY: f64 = 0.9;

/// Builds the ledger and picks `delta = safety * min delta_max`.
pub fn delta_ledger(c: f64, q: f64, big_c: f64, d: f64, safety: f64) -> Result<DeltaLedger> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("need c > 0, got {c}")));
    }
    if !(q > 1.0) {
        return Err(Error::InvalidParameter(format!("need q > 1, got {q}")));
    }
    if !(d >= 1.0) {
        return Err(Error::InvalidParameter(format!("need D >= 1, got {d}")));
    }
    if !(big_c > d) {
        return Err(Error::InvalidParameter(format!("need C > D, got C = {big_c}, D = {d}")));
    }
    if !(safety > 0.0 && safety < 1.0) {
        return Err(Error::InvalidParameter(format!("safety must lie in (0, 1), got {safety}")));
    }
    let cc = big_c;
    let rows: [(&str, &str, f64, f64, bool); 8] = [
        ("J-self-map", "c(3C)^(q+1) D (2 delta)^q <= C - D",
            c * (3.0 * cc).powf(q + 1.0) * d * 2f64.powf(q), cc - d, false),
        ("J-contraction", "3^(q+1) c (2 C delta)^q D < 1",
            3f64.powf(q + 1.0) * c * (2.0 * cc).powf(q) * d, 1.0, true),
        ("x-stability", "c (6 C delta)^q D < 1/6",
            c * (6.0 * cc).powf(q) * d, 1.0 / 6.0, true),
        ("phi-self-map", "c(3C)^(q+1) D (2 delta)^q <= 1",
            c * (3.0 * cc).powf(q + 1.0) * d * 2f64.powf(q), 1.0, false),
        ("phi-contraction", "2 c C^(q+1) D (6 delta)^q < 1",
            2.0 * c * cc.powf(q + 1.0) * d * 6f64.powf(q), 1.0, true),
        ("perturb-1", "2^q 3^(q+1) c C^q D delta^q < 1/2",
            2f64.powf(q) * 3f64.powf(q + 1.0) * c * cc.powf(q) * d, 0.5, true),
        ("perturb-2", "2^(q+1) 3^q c C^(q+1) D delta^q < 1/2",
            2f64.powf(q + 1.0) * 3f64.powf(q) * c * cc.powf(q + 1.0) * d, 0.5, true),
        ("perturb-3", "4 3^(q+1) C^(q+1) D delta^q <= 1",
            4.0 * 3f64.powf(q + 1.0) * cc.powf(q + 1.0) * d, 1.0, false),
    ];
    let entries: Vec<LedgerEntry> = rows
        .iter()
        .map(|&(name, inequality, coefficient, bound, strict)| LedgerEntry {
            name: name.into(),
            inequality: inequality.into(),
            coefficient,
            bound,
            strict,
            delta_max: (bound / coefficient).powf(1.0 / q),
        })
        .collect();
    let binding = entries
        .iter()
        .min_by(|x, y| x.delta_max.total_cmp(&y.delta_max))
        .unwrap();
    let delta = safety * binding.delta_max;
    let binding = binding.name.clone();
    for e in &entries {
        if !e.holds(delta, q) {
            return Err(Error::AdmissibilityFailure(format!(
                "ledger entry {} fails at delta = {delta:e}",
                e.name
            )));
        }
    }
    Ok(DeltaLedger {
        c,
        q,
        big_c,
        d,
        safety,
        rho: 2.0 * c * cc.powf(q + 1.0) * d * (6.0 * delta).powf(q),
        entries,
        delta,
        binding,
    })
}

/// Decreasing condition evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreasingCheck {
    pub verdict: Verdict,
    pub analytic: Option<bool>,
    pub analytic_profile: Option<LogProfile>,
    pub k: Option<KReport>,
}

/// Settings for [`check_conditions`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub window: (usize, usize),
    pub limit_tol: f64,
    pub safety: f64,
    /// `C`; `None` means `2 D`.
    pub big_c: Option<f64>,
    pub sum: SumConfig,
    pub k_growth_threshold: f64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            window: (1, 200),
            limit_tol: 1e-6,
            safety: DEFAULT_SAFETY,
            big_c: None,
            sum: SumConfig::default(),
            k_growth_threshold: DEFAULT_K_GROWTH_THRESHOLD,
        }
    }
}

/// Everything needed to decide admissibility and to size the manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub limit: LimitCheck,
    pub series: SeriesCheck,
    pub decreasing: DecreasingCheck,
    /// `K` used downstream, at least one.
    #[serde(rename = "K")]
    pub k: f64,
    pub beta: Option<BetaSequences>,
    pub ledger: DeltaLedger,
    pub admissible: bool,
    /// Set when `eps = 0`, which the perturbation estimate does not cover
    /// literally.
    pub eps_zero: bool,
}

impl ConditionReport {
    pub fn beta(&self) -> Result<&BetaSequences> {
        self.beta
            .as_ref()
            .ok_or_else(|| Error::AdmissibilityFailure("beta is undefined: the series diverges".into()))
    }

    /// Fails with a message naming the first failed hypothesis.
    pub fn require_admissible(&self) -> Result<()> {
        let named = [
            ("limit condition", self.limit.verdict),
            ("series condition", self.series.verdict),
            ("decreasing condition", self.decreasing.verdict),
        ];
        match named.iter().find(|(_, v)| !v.is_pass()) {
            None => Ok(()),
            Some((name, v)) => Err(Error::AdmissibilityFailure(format!("{name}: {v:?}"))),
        }
    }
}

/// Runs every hypothesis check and the ledger for `model` perturbed by a
/// family with constants `(c, q)`.
pub fn check_conditions(model: &DichotomyModel, c: f64, q: f64, cfg: &ConditionConfig) -> Result<ConditionReport> {
    let (mu, nu) = (&model.mu, &model.nu);
    let (a, b, eps) = (model.a, model.b, model.eps);
    let limit = check_limit_condition(mu, nu, a, b, eps, cfg.window, cfg.limit_tol)?;
    let series = check_series_condition(mu, nu, a, q, eps, &cfg.sum)?;
    let big_c = cfg.big_c.unwrap_or(2.0 * model.d);
    let ledger = delta_ledger(c, q, big_c, model.d, cfg.safety)?;

    let analytic_profile = decreasing_profile(mu, nu, a, q, eps);
    let analytic = analytic_profile.map(|p| p.leading_sign(1e-12) <= 0);
    let (beta, k) = if series.verdict.is_pass() {
        let beta = compute_beta(mu, nu, a, q, eps, cfg.window, &cfg.sum)?;
        let k = k_from_beta(&beta, mu, nu);
        (Some(beta), Some(k))
    } else {
        (None, None)
    };
    let verdict = match (&k, analytic) {
        (None, _) => Verdict::Fail,
        (Some(_), Some(false)) => Verdict::Fail,
        (Some(k), Some(true)) if k.grows(cfg.k_growth_threshold) => Verdict::Inconclusive,
        (Some(_), Some(true)) => Verdict::Pass,
        (Some(k), None) => Verdict::from_bool(!k.grows(cfg.k_growth_threshold)),
    };
    let decreasing = DecreasingCheck {
        verdict,
        analytic,
        analytic_profile,
        k: k.clone(),
    };
    let admissible =
        limit.verdict.is_pass() && series.verdict.is_pass() && decreasing.verdict.is_pass();
    Ok(ConditionReport {
        k: k.map_or(1.0, |k| k.value()),
        limit,
        series,
        decreasing,
        beta,
        ledger,
        admissible,
        eps_zero: eps == 0.0,
    })
}

/// Tail `sum_{k >= m} mu_k^s nu_k^t`, used by the solver for its horizon.
pub(crate) fn ln_power_tail(
    mu: &GrowthRate,
    nu: &GrowthRate,
    mu_exp: f64,
    nu_exp: f64,
    m: usize,
    cfg: &SumConfig,
) -> Result<f64> {
    Ok(power_tail(&PowerSeries::new(mu, nu, mu_exp, nu_exp), m, cfg)?.ln_value)
}
