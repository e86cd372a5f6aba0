//! Growth rates and certified tail sums.
//!
//! A growth rate is an increasing sequence `mu_n` with `mu_0 >= 1` that
//! diverges to infinity. Every built-in family has a logarithm of the form
//!
//! ```text
//! ln mu_n = linear * n + power * ln(1 + n) + loglog * ln(1 + ln(1 + n))
//! ```
//!
//! and this [`LogProfile`] is what the rest of the crate uses to classify
//! convergence of `sum mu_k^s nu_k^t` exactly and to bracket its remainder.
//! Tabulated rates carry no profile and never get tail sums.

use std::sync::{Arc, OnceLock};

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default factor by which a tabulated rate must grow across its table.
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 10.0;

/// Description of a growth-rate family, as it appears in model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum RateKind {
    /// `e^n`
    Exponential,
    /// `1 + n`
    Polynomial,
    /// `(1 + n) (1 + ln(1 + n))^lambda`
    PolyLog { lambda: f64 },
    /// `1 + ln(1 + n)`
    Log,
    /// Explicit values `mu_0, mu_1, ...`.
    Tabulated { values: Vec<f64> },
}

/// Coefficients of `ln mu_n` in the basis `n`, `ln(1+n)`, `ln(1+ln(1+n))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogProfile {
    pub linear: f64,
    pub power: f64,
    pub loglog: f64,
}

impl LogProfile {
    pub const fn new(linear: f64, power: f64, loglog: f64) -> Self {
        Self {
            linear,
            power,
            loglog,
        }
    }

    /// Evaluates the profile at a real argument `t >= 0`.
    pub fn eval(&self, t: f64) -> f64 {
        let mut out = 0.0;
        if self.linear != 0.0 {
            out += self.linear * t;
        }
        if self.power != 0.0 || self.loglog != 0.0 {
            let l = t.ln_1p();
            out += self.power * l;
            if self.loglog != 0.0 {
                out += self.loglog * l.ln_1p();
            }
        }
        out
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.linear * s, self.power * s, self.loglog * s)
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(
            self.linear + other.linear,
            self.power + other.power,
            self.loglog + other.loglog,
        )
    }

    /// Rounds coefficients lying within `1e-12` of the convergence
    /// thresholds `linear = 0`, `power = -1` and `loglog = -1` onto them, so
    /// that parameters like `aq = -1` classify the same way after rounding.
    pub fn snapped(self) -> Self {
        let snap = |x: f64, to: f64| if (x - to).abs() <= 1e-12 { to } else { x };
        Self::new(
            snap(self.linear, 0.0),
            snap(snap(self.power, -1.0), 0.0),
            snap(snap(self.loglog, -1.0), 0.0),
        )
    }

    /// Sign of the lexicographically leading nonzero coefficient, i.e. the
    /// sign of `ln f(n)` for large `n` when it is unbounded.
    pub fn leading_sign(&self, tol: f64) -> i8 {
        for c in [self.linear, self.power, self.loglog] {
            if c > tol {
                return 1;
            }
            if c < -tol {
                return -1;
            }
        }
        0
    }
}

#[derive(Clone, Debug)]
enum Repr {
    Exponential,
    Polynomial,
    PolyLog(f64),
    Log,
    Tabulated(Arc<[f64]>),
}

/// A validated growth rate. Immutable and cheap to clone.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RateKind", into = "RateKind")]
pub struct GrowthRate {
    repr: Repr,
}

impl GrowthRate {
    /// Builds a rate from its description, validating tabulated data with
    /// [`DEFAULT_DIVERGENCE_FACTOR`].
    pub fn new(kind: RateKind) -> Result<Self> {
        match kind {
            RateKind::Exponential => Ok(Self::exponential()),
            RateKind::Polynomial => Ok(Self::polynomial()),
            RateKind::PolyLog { lambda } => Self::poly_log(lambda),
            RateKind::Log => Ok(Self::log()),
            RateKind::Tabulated { values } => {
                Self::tabulated_with_factor(values, DEFAULT_DIVERGENCE_FACTOR)
            }
        }
    }

    pub fn exponential() -> Self {
        Self {
            repr: Repr::Exponential,
        }
    }

    pub fn polynomial() -> Self {
        Self {
            repr: Repr::Polynomial,
        }
    }

    pub fn poly_log(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidRate(format!(
                "poly-log exponent must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self {
            repr: Repr::PolyLog(lambda),
        })
    }

    pub fn log() -> Self {
        Self { repr: Repr::Log }
    }

    pub fn tabulated(values: Vec<f64>) -> Result<Self> {
        Self::tabulated_with_factor(values, DEFAULT_DIVERGENCE_FACTOR)
    }

    /// Tabulated rate whose last value must exceed the first by `factor`.
    pub fn tabulated_with_factor(values: Vec<f64>, factor: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidRate(
                "tabulated rate needs at least two values".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRate("tabulated rate has non-finite values".into()));
        }
        if values[0] < 1.0 {
            return Err(Error::InvalidRate(format!(
                "first tabulated value must be >= 1, got {}",
                values[0]
            )));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRate(format!(
                "tabulated values not strictly increasing at index {}",
                i + 1
            )));
        }
        let last = *values.last().unwrap();
        if last < factor * values[0] {
            return Err(Error::InvalidRate(format!(
                "tabulated rate grows only from {} to {last}; need a factor of {factor}",
                values[0]
            )));
        }
        Ok(Self {
            repr: Repr::Tabulated(values.into()),
        })
    }

    pub fn kind(&self) -> RateKind {
        match &self.repr {
            Repr::Exponential => RateKind::Exponential,
            Repr::Polynomial => RateKind::Polynomial,
            Repr::PolyLog(lambda) => RateKind::PolyLog { lambda: *lambda },
            Repr::Log => RateKind::Log,
            Repr::Tabulated(v) => RateKind::Tabulated { values: v.to_vec() },
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self.repr {
            Repr::Exponential => "exponential",
            Repr::Polynomial => "polynomial",
            Repr::PolyLog(_) => "poly-log",
            Repr::Log => "log",
            Repr::Tabulated(_) => "tabulated",
        }
    }

    pub fn is_tabulated(&self) -> bool {
        matches!(self.repr, Repr::Tabulated(_))
    }

    /// Largest index with a value, or `None` for the closed-form families.
    pub fn defined_up_to(&self) -> Option<usize> {
        match &self.repr {
            Repr::Tabulated(v) => Some(v.len() - 1),
            _ => None,
        }
    }

    /// Fails with [`Error::OutOfTable`] if some index up to `n` has no value.
    pub fn ensure_defined(&self, n: usize) -> Result<()> {
        match self.defined_up_to() {
            Some(last) if n > last => Err(Error::OutOfTable {
                index: n,
                len: last + 1,
            }),
            _ => Ok(()),
        }
    }

    pub fn profile(&self) -> Option<LogProfile> {
        match self.repr {
            Repr::Exponential => Some(LogProfile::new(1.0, 0.0, 0.0)),
            Repr::Polynomial => Some(LogProfile::new(0.0, 1.0, 0.0)),
            Repr::PolyLog(lambda) => Some(LogProfile::new(0.0, 1.0, lambda)),
            Repr::Log => Some(LogProfile::new(0.0, 0.0, 1.0)),
            Repr::Tabulated(_) => None,
        }
    }

    /// `ln mu_n`.
    ///
    /// # Panics
    ///
    /// For tabulated rates queried past the end of their table; call
    /// [`GrowthRate::ensure_defined`] first.
    pub fn ln_value(&self, n: usize) -> f64 {
        let t = n as f64;
        match &self.repr {
            Repr::Exponential => t,
            Repr::Polynomial => t.ln_1p(),
            Repr::PolyLog(lambda) => {
                let l = t.ln_1p();
                if *lambda == 0.0 {
                    l
                } else {
                    l + lambda * l.ln_1p()
                }
            }
            Repr::Log => t.ln_1p().ln_1p(),
            Repr::Tabulated(v) => match v.get(n) {
                Some(x) => x.ln(),
                None => panic!("tabulated growth rate has no value at index {n}"),
            },
        }
    }

    pub fn value(&self, n: usize) -> f64 {
        match &self.repr {
            Repr::Tabulated(v) => v[n],
            _ => self.ln_value(n).exp(),
        }
    }

    /// `mu_n / mu_{n-1}` for `n >= 1`.
    pub fn ratio(&self, n: usize) -> f64 {
        assert!(n >= 1, "ratio needs n >= 1");
        (self.ln_value(n) - self.ln_value(n - 1)).exp()
    }
}

impl TryFrom<RateKind> for GrowthRate {
    type Error = Error;

    fn try_from(kind: RateKind) -> Result<Self> {
        GrowthRate::new(kind)
    }
}

impl From<GrowthRate> for RateKind {
    fn from(rate: GrowthRate) -> Self {
        rate.kind()
    }
}

/// Series `sum_k mu_k^{mu_exp} nu_k^{nu_exp}`.
#[derive(Clone, Copy, Debug)]
pub struct PowerSeries<'a> {
    pub mu: &'a GrowthRate,
    pub nu: &'a GrowthRate,
    pub mu_exp: f64,
    pub nu_exp: f64,
}

impl<'a> PowerSeries<'a> {
    pub fn new(mu: &'a GrowthRate, nu: &'a GrowthRate, mu_exp: f64, nu_exp: f64) -> Self {
        Self {
            mu,
            nu,
            mu_exp,
            nu_exp,
        }
    }

    /// The series `sum mu_k^{aq} nu_k^eps` of the integrability condition.
    pub fn integrability(mu: &'a GrowthRate, nu: &'a GrowthRate, a: f64, q: f64, eps: f64) -> Self {
        Self::new(mu, nu, a * q, eps)
    }

    pub fn ln_term(&self, k: usize) -> f64 {
        let mut out = 0.0;
        if self.mu_exp != 0.0 {
            out += self.mu_exp * self.mu.ln_value(k);
        }
        if self.nu_exp != 0.0 {
            out += self.nu_exp * self.nu.ln_value(k);
        }
        out
    }

    /// Profile of `ln` of the general term, if both rates with a nonzero
    /// exponent are built-in families.
    pub fn profile(&self) -> Option<LogProfile> {
        let part = |rate: &GrowthRate, e: f64| -> Option<LogProfile> {
            if e == 0.0 {
                Some(LogProfile::default())
            } else {
                rate.profile().map(|p| p.scale(e))
            }
        };
        Some(
            part(self.mu, self.mu_exp)?
                .add(part(self.nu, self.nu_exp)?)
                .snapped(),
        )
    }

    fn require_profile(&self) -> Result<LogProfile> {
        self.profile().ok_or_else(|| {
            Error::Unsupported(
                "tail sums are not defined for tabulated rates beyond their data".into(),
            )
        })
    }

    /// Exact convergence classification for profiled series.
    pub fn converges(&self) -> Result<bool> {
        Ok(classify(self.require_profile()?).is_ok())
    }
}

fn classify(p: LogProfile) -> Result<()> {
    let diverges = |why: String| Err(Error::Divergence(why));
    if p.linear < 0.0 {
        return Ok(());
    }
    if p.linear > 0.0 {
        return diverges(format!(
            "terms grow like exp({} k)",
            p.linear
        ));
    }
    if p.power < -1.0 {
        return Ok(());
    }
    if p.power > -1.0 {
        return diverges(format!(
            "terms decay like k^{}, exponent must be < -1",
            p.power
        ));
    }
    if p.loglog < -1.0 {
        Ok(())
    } else {
        diverges(format!(
            "terms decay like k^-1 (log k)^{}, log exponent must be < -1",
            p.loglog
        ))
    }
}

/// Tolerances for the adaptive tail summation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SumConfig {
    pub rel_tol: f64,
    pub max_terms: usize,
}

impl Default for SumConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_terms: 10_000_000,
        }
    }
}

/// How a remainder was enclosed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumMethod {
    /// Exact geometric closed form.
    Geometric,
    /// Direct summation plus a geometric ratio bound on the remainder.
    RatioBound,
    /// Direct summation plus the convex midpoint/trapezoid integral bracket.
    IntegralBracket,
}

/// `sum_{k >= start} mu_k^{mu_exp} nu_k^{nu_exp}` with an enclosure of the
/// truncation error, kept in log space so that far tails do not underflow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerTail {
    pub start: usize,
    pub ln_value: f64,
    pub rel_error: f64,
    pub terms_summed: usize,
    pub method: SumMethod,
}

impl PowerTail {
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }
}

/// `sum_{k=m}^inf mu_k^{aq} nu_k^eps` together with its truncation error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailSum {
    pub start_index: usize,
    pub exponent_a: f64,
    pub exponent_q: f64,
    pub exponent_eps: f64,
    pub value: f64,
    pub ln_value: f64,
    pub error_bound: f64,
    pub rel_error: f64,
    pub terms_summed: usize,
    pub method: SumMethod,
}

fn check_exponents(a: f64, q: f64, eps: f64) -> Result<()> {
    if !(a < 0.0) {
        return Err(Error::InvalidParameter(format!("need a < 0, got {a}")));
    }
    if !(q > 1.0) {
        return Err(Error::InvalidParameter(format!("need q > 1, got {q}")));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("need eps >= 0, got {eps}")));
    }
    Ok(())
}

/// Tail of the integrability series `sum_{k=m}^inf mu_k^{aq} nu_k^eps`.
pub fn tail_sum(
    mu: &GrowthRate,
    nu: &GrowthRate,
    a: f64,
    q: f64,
    eps: f64,
    m: usize,
    cfg: &SumConfig,
) -> Result<TailSum> {
    check_exponents(a, q, eps)?;
    let tail = power_tail(&PowerSeries::integrability(mu, nu, a, q, eps), m, cfg)?;
    let value = tail.value();
    Ok(TailSum {
        start_index: m,
        exponent_a: a,
        exponent_q: q,
        exponent_eps: eps,
        value,
        ln_value: tail.ln_value,
        error_bound: value * tail.rel_error,
        rel_error: tail.rel_error,
        terms_summed: tail.terms_summed,
        method: tail.method,
    })
}

/// Tail of an arbitrary power series starting at `m`.
pub fn power_tail(series: &PowerSeries<'_>, m: usize, cfg: &SumConfig) -> Result<PowerTail> {
    let profile = series.require_profile()?;
    classify(profile)?;
    if profile.power == 0.0 && profile.loglog == 0.0 {
        let rate = profile.linear;
        return Ok(PowerTail {
            start: m,
            ln_value: rate * m as f64 - (-rate.exp_m1()).ln(),
            rel_error: 0.0,
            terms_summed: 0,
            method: SumMethod::Geometric,
        });
    }
    summed_tail(series, profile, m, cfg)
}

/// Tails starting at every index of `lo..=hi`, obtained from one certified
/// tail at `hi` by backward accumulation. The relative error of every entry
/// is bounded by that of the last one.
pub fn power_tail_window(
    series: &PowerSeries<'_>,
    lo: usize,
    hi: usize,
    cfg: &SumConfig,
) -> Result<Vec<PowerTail>> {
    assert!(lo <= hi, "empty tail window");
    let top = power_tail(series, hi, cfg)?;
    let mut out = vec![top; hi - lo + 1];
    let mut ln_acc = top.ln_value;
    for k in (lo..hi).rev() {
        ln_acc = log_add_exp(series.ln_term(k), ln_acc);
        out[k - lo] = PowerTail {
            start: k,
            ln_value: ln_acc,
            ..top
        };
    }
    Ok(out)
}

pub(crate) fn log_add_exp(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let (hi, lo) = if x > y { (x, y) } else { (y, x) };
    hi + (lo - hi).exp().ln_1p()
}

fn summed_tail(
    series: &PowerSeries<'_>,
    profile: LogProfile,
    m: usize,
    cfg: &SumConfig,
) -> Result<PowerTail> {
    let reference = series.ln_term(m);
    let method = if profile.linear < 0.0 {
        SumMethod::RatioBound
    } else {
        SumMethod::IntegralBracket
    };
    let mut partial = 0.0;
    let mut next = m;
    let mut target = m.saturating_add(32);
    loop {
        while next < target {
            partial += (series.ln_term(next) - reference).exp();
            next += 1;
        }
        if let Some((lo, hi)) = remainder_bracket(profile, next, reference) {
            let half = 0.5 * (hi - lo);
            let total = partial + lo + half;
            if half <= cfg.rel_tol * total {
                return Ok(PowerTail {
                    start: m,
                    ln_value: reference + total.ln(),
                    rel_error: half / total,
                    terms_summed: next - m,
                    method,
                });
            }
        }
        let used = next - m;
        if used >= cfg.max_terms {
            return Err(Error::NonConvergence {
                start: m,
                rel_tol: cfg.rel_tol,
                terms: used,
            });
        }
        target = m + (2 * used).min(cfg.max_terms);
    }
}

/// Enclosure of `sum_{k >= from} g(k)` scaled by `exp(-reference)`, where
/// `ln g = profile`. Returns `None` while the enclosure is not yet valid at
/// this index.
fn remainder_bracket(profile: LogProfile, from: usize, reference: f64) -> Option<(f64, f64)> {
    let x = from as f64;
    let g = (profile.eval(x) - reference).exp();
    if profile.linear < 0.0 {
        let step = |c: f64, ratio: f64| if c == 0.0 { 1.0 } else { ratio.powf(c).max(1.0) };
        let poly_ratio = (2.0 + x) / (1.0 + x);
        let log_ratio = (1.0 + (2.0 + x).ln()) / (1.0 + (1.0 + x).ln());
        let r = profile.linear.exp() * step(profile.power, poly_ratio) * step(profile.loglog, log_ratio);
        if r >= 1.0 {
            return None;
        }
        return Some((g, g / (1.0 - r)));
    }
    if from == 0 || !convex_decreasing_from(profile, x - 0.5) {
        return None;
    }
    let lo = (ln_integral(profile.power, profile.loglog, x) - reference).exp() + 0.5 * g;
    let hi = (ln_integral(profile.power, profile.loglog, x - 0.5) - reference).exp();
    Some((lo, hi.max(lo)))
}

/// Checks that `g(t) = (1+t)^P (1+ln(1+t))^R` is decreasing and convex on
/// `[t0, inf)`.
fn convex_decreasing_from(p: LogProfile, t0: f64) -> bool {
    let l0 = t0.ln_1p();
    let shift = p.loglog.abs() / (1.0 + l0);
    let w = p.power + shift;
    w < 0.0 && w * w - w >= p.loglog.abs() / (1.0 + l0).powi(2)
}

/// `ln int_x^inf (1+t)^P (1+ln(1+t))^R dt` for a convergent integrand.
pub(crate) fn ln_integral(power: f64, loglog: f64, x: f64) -> f64 {
    let u0 = x.ln_1p();
    if loglog == 0.0 {
        return (power + 1.0) * u0 - (-(power + 1.0)).ln();
    }
    if power == -1.0 {
        return (loglog + 1.0) * u0.ln_1p() - (-(loglog + 1.0)).ln();
    }
    // u = ln(1+t), then w = s (u - u0).
    let s = -(power + 1.0);
    let kappa = 1.0 / (s * (1.0 + u0));
    -s * u0 + loglog * u0.ln_1p() - s.ln() + laplace_power(kappa, loglog).ln()
}

/// `int_0^inf e^{-w} (1 + kappa w)^r dw` by composite Gauss-Legendre.
fn laplace_power(kappa: f64, r: f64) -> f64 {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    let rule = RULE.get_or_init(|| GaussLegendre::new(24.try_into().unwrap()));
    let f = |w: f64| (-w + r * (kappa * w).ln_1p()).exp();
    let mut edges = vec![0.0, 0.25, 0.5, 1.0];
    while *edges.last().unwrap() < 512.0 {
        let e = edges.last().unwrap() * 2.0;
        edges.push(e);
    }
    edges
        .windows(2)
        .map(|w| rule.integrate(w[0], w[1], f))
        .sum()
}

/// Integral-test enclosure `[int_m^inf g, int_{m-1}^inf g]` of
/// `sum_{k >= m} g(k)` for non-exponential profiled series whose terms
/// decrease on `[m-1, inf)`.
pub fn integral_test_bracket(series: &PowerSeries<'_>, m: usize) -> Result<Option<(f64, f64)>> {
    let p = series.require_profile()?;
    classify(p)?;
    if p.linear != 0.0 || m == 0 {
        return Ok(None);
    }
    let t0 = (m - 1) as f64;
    let l0 = t0.ln_1p();
    if p.power + p.loglog.abs() / (1.0 + l0) >= 0.0 {
        return Ok(None);
    }
    Ok(Some((
        ln_integral(p.power, p.loglog, m as f64).exp(),
        ln_integral(p.power, p.loglog, t0).exp(),
    )))
}

/// Printed closed form of `beta_m`, or a two-sided bracket for it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum BetaClosedForm {
    Exact { value: f64 },
    Bracket { lower: f64, upper: f64 },
}

/// Closed form of `beta_m` for `mu = nu` in the exponential and polynomial
/// families.
pub fn closed_form_beta(kind: &RateKind, a: f64, q: f64, eps: f64, m: usize) -> Result<BetaClosedForm> {
    check_exponents(a, q, eps)?;
    if m == 0 {
        return Err(Error::InvalidParameter("beta is indexed from m = 1".into()));
    }
    let mf = m as f64;
    match kind {
        RateKind::Exponential => {
            let s = a * q + eps;
            if s >= 0.0 {
                return Err(Error::Divergence(format!("aq + eps = {s} >= 0 for exponential rates")));
            }
            let ln_beta = -a + eps * (1.0 + 1.0 / q) + (-s.exp_m1()).ln() / q
                - eps * (1.0 + 2.0 / q) * mf;
            Ok(BetaClosedForm::Exact {
                value: ln_beta.exp(),
            })
        }
        RateKind::Polynomial => {
            let s = a * q + eps + 1.0;
            if s >= 0.0 {
                return Err(Error::Divergence(format!(
                    "aq + eps + 1 = {s} >= 0 for polynomial rates"
                )));
            }
            let decay = (1.0 + mf).powf(-eps * (1.0 + 2.0 / q) - 1.0 / q);
            let scale = s.abs().powf(1.0 / q);
            Ok(BetaClosedForm::Bracket {
                lower: 2f64.powf(a + eps / q + 1.0 / q) * scale * decay,
                upper: scale / 2f64.powf(a - eps * (1.0 + 1.0 / q)) * decay,
            })
        }
        other => Err(Error::Unsupported(format!(
            "no printed beta closed form for {other:?}"
        ))),
    }
}
