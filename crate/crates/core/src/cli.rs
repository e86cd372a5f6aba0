//! Command-line workflows.
//!
//! A run is described by one JSON document ([`RunConfig`]). Every command
//! writes its tables as CSV and its reports as JSON into the output
//! directory; each JSON file repeats the fully defaulted configuration so
//! that runs are self-describing.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 inadmissible,
//! 3 numerical failure, 4 bound violation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{verify_dichotomy, ClaimedD, DichotomyCertificate, DichotomyModel, ModelSpec};
use crate::conditions::{check_conditions, compute_beta, ConditionConfig, ConditionReport, Verdict};
use crate::error::{Error, Result};
use crate::rates::{closed_form_beta, BetaClosedForm, GrowthRate, RateKind, SumConfig};
use crate::solver::{
    solve_manifold, GridSpec, ManifoldFamily, PerturbationFamily, PerturbationKind, PerturbationSpec, SolveConfig,
    SolveReport,
};
use crate::verify::{
    check_decay, check_invariance, check_perturbation_theorem, fixed_point_residual, DecayReport, ErrorModel,
    InvarianceReport, PerturbationCheckConfig, PerturbationReport,
};

/// Version tag of every JSON document written.
pub const SCHEMA: &str = "dichoman/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INADMISSIBLE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_BOUND_VIOLATION: i32 = 4;

/// Decay ratios up to this value count as within the bound.
pub const DECAY_SLACK: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "dichoman", version, about = "Stable manifolds of nonuniform dichotomies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir` of the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Tabulate the growth rates, beta, tilde beta and the tail sums.
    Rates(CommonArgs),
    /// Check the dichotomy and every admissibility condition.
    Check(CommonArgs),
    /// Solve for the stable manifold graphs.
    Solve(CommonArgs),
    /// Check invariance and decay on the solved graphs.
    Verify(CommonArgs),
    /// Compare the manifolds of the perturbation and its comparison.
    Perturb(CommonArgs),
    /// Map the admissible region over a parameter grid.
    Sweep(CommonArgs),
}

impl Command {
    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Rates(a)
            | Command::Check(a)
            | Command::Solve(a)
            | Command::Verify(a)
            | Command::Perturb(a)
            | Command::Sweep(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Rates(_) => "rates",
            Command::Check(_) => "check",
            Command::Solve(_) => "solve",
            Command::Verify(_) => "verify",
            Command::Perturb(_) => "perturb",
            Command::Sweep(_) => "sweep",
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

fn default_perturbation() -> PerturbationSpec {
    PerturbationSpec {
        kind: PerturbationKind::Power,
        c0: 1.0,
        q: 2.0,
    }
}

/// Numerical constants shared by the commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constants {
    /// `C`, or `"auto"` for `2 D`.
    #[serde(rename = "C")]
    pub big_c: ClaimedD,
    pub safety: f64,
    /// Indices on which the rates, beta, `K` and the dichotomy are checked.
    pub check_window: (usize, usize),
    pub limit_tol: f64,
    pub k_growth_threshold: f64,
    pub sum: SumConfig,
    /// Base indices of the solved graphs.
    pub solve_window: (usize, usize),
    pub tol: f64,
    pub grid: GridSpec,
    pub horizon_cap: usize,
    pub max_iterations: usize,
    pub escape_slack: f64,
    pub lipschitz_tol: f64,
}

impl Default for Constants {
    fn default() -> Self {
        let cond = ConditionConfig::default();
        let solve = SolveConfig::default();
        Self {
            big_c: ClaimedD::default(),
            safety: cond.safety,
            check_window: cond.window,
            limit_tol: cond.limit_tol,
            k_growth_threshold: cond.k_growth_threshold,
            sum: cond.sum,
            solve_window: solve.window,
            tol: solve.tol,
            grid: solve.grid,
            horizon_cap: solve.horizon_cap,
            max_iterations: solve.max_iterations,
            escape_slack: solve.escape_slack,
            lipschitz_tol: solve.lipschitz_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySettings {
    /// Base index of the tested orbits; defaults to the first solved index.
    pub base_index: Option<usize>,
    /// Orbit length, capped by the solve window.
    pub steps: usize,
    pub samples: usize,
    pub pairs: usize,
    /// Multiplier of the guaranteed radius; above one the invariance test
    /// leaves the theorem's scope and escapes are counted instead of fatal.
    pub radius_scale: f64,
    /// Samples for the perturbation distance.
    pub distance_samples: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            base_index: None,
            steps: 4,
            samples: 1000,
            pairs: 1000,
            radius_scale: 1.0,
            distance_samples: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Range {
    pub fn points(&self) -> Vec<f64> {
        if self.steps <= 1 {
            return vec![self.min];
        }
        let h = self.spacing();
        (0..self.steps).map(|i| self.min + i as f64 * h).collect()
    }

    pub fn spacing(&self) -> f64 {
        if self.steps <= 1 {
            0.0
        } else {
            (self.max - self.min) / (self.steps - 1) as f64
        }
    }
}

/// Swept parameter besides `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// The stable exponent `a`.
    A,
    /// The log exponent of a poly-log `mu`, at `a q = -1`.
    Lambda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    pub x: Range,
    pub eps: Range,
    pub window: (usize, usize),
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            axis: SweepAxis::A,
            x: Range {
                min: -3.0,
                max: 0.0,
                steps: 31,
            },
            eps: Range {
                min: 0.0,
                max: 1.0,
                steps: 11,
            },
            window: (1, 100),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSettings {
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// One JSON document describing a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default = "default_perturbation")]
    pub perturbation: PerturbationSpec,
    /// Second perturbation for `perturb`.
    #[serde(default)]
    pub comparison: Option<PerturbationSpec>,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub output: OutputSettings,
}

fn check_window(name: &str, w: (usize, usize)) -> Result<()> {
    if w.0 < 1 || w.1 < w.0 {
        return Err(Error::Config(format!("{name} [{}, {}] must satisfy 1 <= lo <= hi", w.0, w.1)));
    }
    Ok(())
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {x}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.constants;
        check_window("check_window", k.check_window)?;
        check_window("solve_window", k.solve_window)?;
        check_window("sweep.window", self.sweep.window)?;
        if k.solve_window.1 >= k.check_window.1 {
            return Err(Error::Config("solve_window must end before check_window".into()));
        }
        check_positive("tol", k.tol)?;
        check_positive("limit_tol", k.limit_tol)?;
        check_positive("sum.rel_tol", k.sum.rel_tol)?;
        check_positive("k_growth_threshold", k.k_growth_threshold)?;
        check_positive("escape_slack", k.escape_slack)?;
        check_positive("lipschitz_tol", k.lipschitz_tol)?;
        check_positive("verify.radius_scale", self.verify.radius_scale)?;
        if !(k.safety > 0.0 && k.safety <= 1.0) {
            return Err(Error::Config(format!("safety must lie in (0, 1], got {}", k.safety)));
        }
        if let ClaimedD::Fixed(c) = k.big_c {
            check_positive("C", c)?;
        }
        k.grid.validate().map_err(|e| Error::Config(e.to_string()))?;
        for spec in std::iter::once(&self.perturbation).chain(&self.comparison) {
            if !(spec.q > 1.0) {
                return Err(Error::Config(format!("perturbation q must exceed 1, got {}", spec.q)));
            }
        }
        // rate families must exist
        GrowthRate::new(self.model.mu.clone()).map_err(|e| Error::Config(e.to_string()))?;
        GrowthRate::new(self.model.nu.clone()).map_err(|e| Error::Config(e.to_string()))?;
        for r in [&self.sweep.x, &self.sweep.eps] {
            if r.steps == 0 || !(r.min <= r.max) {
                return Err(Error::Config("sweep ranges need min <= max and at least one step".into()));
            }
        }
        Ok(())
    }

    pub fn condition_config(&self) -> ConditionConfig {
        let k = &self.constants;
        ConditionConfig {
            window: k.check_window,
            limit_tol: k.limit_tol,
            safety: k.safety,
            big_c: match k.big_c {
                ClaimedD::Fixed(c) => Some(c),
                ClaimedD::Auto(_) => None,
            },
            sum: k.sum,
            k_growth_threshold: k.k_growth_threshold,
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        let k = &self.constants;
        SolveConfig {
            grid: k.grid,
            window: k.solve_window,
            tol: k.tol,
            horizon_cap: k.horizon_cap,
            max_iterations: k.max_iterations,
            escape_slack: k.escape_slack,
            lipschitz_tol: k.lipschitz_tol,
            sum: k.sum,
        }
    }

    pub fn perturbation(&self, model: &DichotomyModel) -> Result<PerturbationFamily> {
        self.perturbation.build(model.stable_dim() + model.unstable_dim())
    }

    fn comparison(&self, model: &DichotomyModel) -> Result<PerturbationFamily> {
        self.comparison
            .ok_or_else(|| Error::Config("`perturb` needs a `comparison` perturbation".into()))?
            .build(model.stable_dim() + model.unstable_dim())
    }
}

// ---------------------------------------------------------------------------
// output

/// One CSV cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(x as i64)
    }
}

/// 17 significant digits.
pub fn format_float(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{x}")));
    }
    Ok(format!("{x:.16e}"))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<Cell>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    w.write_record(header)?;
    for (i, row) in rows.iter().enumerate() {
        let rec = row
            .iter()
            .zip(header)
            .map(|(c, h)| match c {
                Cell::Int(v) => Ok(v.to_string()),
                Cell::Num(v) => format_float(*v)
                    .map_err(|_| Error::NonFinite(format!("{} row {} column {h}: {v}", path.display(), i + 1))),
                Cell::Text(s) => Ok(s.clone()),
                Cell::Empty => Ok(String::new()),
            })
            .collect::<Result<Vec<_>>>()?;
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    report: &'a T,
}

fn write_json<T: Serialize>(path: &Path, command: &str, config: &RunConfig, report: &T) -> Result<()> {
    let env = Envelope {
        schema: SCHEMA,
        command,
        config,
        report,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::InvalidParameter(_) | Error::InvalidRate(_) => {
            EXIT_USAGE
        }
        Error::AdmissibilityFailure(_) | Error::Divergence(_) | Error::CertificateFailure(_) => EXIT_INADMISSIBLE,
        Error::Escape { .. } | Error::BallEscape { .. } | Error::LipschitzViolation { .. } => EXIT_BOUND_VIOLATION,
        _ => EXIT_NUMERICAL,
    }
}

/// Result of a command: the exit code and what was written.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub files: Vec<PathBuf>,
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

// ---------------------------------------------------------------------------
// rates

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatesSummary {
    pub window: (usize, usize),
    pub a: f64,
    pub q: f64,
    pub eps: f64,
    pub tail_rel_error: f64,
    pub max_normalization_error: f64,
    pub closed_form: bool,
}

pub fn cmd_rates(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Outcome> {
    let model = cfg.model.build()?;
    let (mu, nu) = (&model.mu, &model.nu);
    let (a, q, eps) = (model.a, cfg.perturbation.q, model.eps);
    let window = cfg.constants.check_window;
    let beta = compute_beta(mu, nu, a, q, eps, window, &cfg.constants.sum)?;
    let kind = (mu.kind() == nu.kind()).then(|| mu.kind());
    let closed = |m: usize| -> Option<(f64, f64)> {
        match closed_form_beta(kind.as_ref()?, a, q, eps, m).ok()? {
            BetaClosedForm::Exact { value } => Some((value, value)),
            BetaClosedForm::Bracket { lower, upper } => Some((lower, upper)),
        }
    };
    let has_closed = closed(window.0).is_some();
    let mut cols = vec![
        "n",
        "ln_mu",
        "ln_nu",
        "beta",
        "beta_tilde",
        "ln_beta",
        "ln_tail",
        "tail_rel_error",
        "normalization",
    ];
    if has_closed {
        cols.extend(["closed_lower", "closed_upper"]);
    }
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for m in window.0..=window.1 {
        let norm = beta.normalization(mu, nu, m);
        worst = worst.max((norm - 1.0).abs());
        let mut row: Vec<Cell> = vec![
            m.into(),
            mu.ln_value(m).into(),
            nu.ln_value(m).into(),
            beta.beta(m).into(),
            beta.beta_tilde(m).into(),
            beta.ln_beta(m).into(),
            beta.ln_tail[m - window.0].into(),
            beta.tail_rel_error.into(),
            norm.into(),
        ];
        if has_closed {
            let (lo, hi) = closed(m).map_or((None, None), |(l, h)| (Some(l), Some(h)));
            row.push(lo.into());
            row.push(hi.into());
        }
        rows.push(row);
    }
    fs::create_dir_all(out)?;
    let csv_path = out.join("rates.csv");
    write_csv(&csv_path, &header(&cols), &rows)?;
    let summary = RatesSummary {
        window,
        a,
        q,
        eps,
        tail_rel_error: beta.tail_rel_error,
        max_normalization_error: worst,
        closed_form: has_closed,
    };
    let json_path = out.join("rates.json");
    write_json(&json_path, "rates", cfg, &summary)?;
    writeln!(
        log,
        "rates: {} on [{}, {}], beta_{} = {:.6e}, beta_{} = {:.6e}",
        mu.family_name(),
        window.0,
        window.1,
        window.0,
        beta.beta(window.0),
        window.1,
        beta.beta(window.1)
    )?;
    writeln!(log, "  tail relative error {:.2e}, normalization error {:.2e}", beta.tail_rel_error, worst)?;
    writeln!(log, "  wrote {}", csv_path.display())?;
    Ok(Outcome {
        code: EXIT_OK,
        files: vec![csv_path, json_path],
    })
}

// ---------------------------------------------------------------------------
// check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationInfo {
    pub name: String,
    pub c: f64,
    pub q: f64,
    pub certificate: f64,
}

impl From<&PerturbationFamily> for PerturbationInfo {
    fn from(f: &PerturbationFamily) -> Self {
        Self {
            name: f.name.clone(),
            c: f.c,
            q: f.q,
            certificate: f.certificate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub dichotomy: DichotomyCertificate,
    pub perturbation: PerturbationInfo,
    pub conditions: ConditionReport,
}

pub fn run_check(cfg: &RunConfig) -> Result<CheckReport> {
    let model = cfg.model.build()?;
    let f = cfg.perturbation(&model)?;
    let dichotomy = verify_dichotomy(&model, cfg.constants.check_window)?;
    let conditions = check_conditions(&model, f.c, f.q, &cfg.condition_config())?;
    Ok(CheckReport {
        dichotomy,
        perturbation: (&f).into(),
        conditions,
    })
}

pub fn cmd_check(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Outcome> {
    let report = run_check(cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join("check.json");
    write_json(&path, "check", cfg, &report)?;
    let (d, c) = (&report.dichotomy, &report.conditions);
    writeln!(
        log,
        "{:<12} {:<13} D = {:.6}, stable ratio {:.6}, unstable ratio {:.6}, minimal D {:.6}",
        "dichotomy",
        if d.pass { "pass" } else { "fail" },
        d.claimed_d,
        d.sup_stable_ratio,
        d.sup_unstable_ratio,
        d.min_feasible_d
    )?;
    writeln!(log, "{:<12} {}", "limit", verdict_word(c.limit.verdict))?;
    writeln!(log, "{:<12} {:<13} {}", "series", verdict_word(c.series.verdict), c.series.message.as_deref().unwrap_or(""))?;
    writeln!(log, "{:<12} {:<13} K = {:.6}", "decreasing", verdict_word(c.decreasing.verdict), c.k)?;
    writeln!(
        log,
        "{:<12} delta = {:.6e} (binding {}), rho = {:.6}, c = {:.6}, C = {:.6}",
        "ledger", c.ledger.delta, c.ledger.binding, c.ledger.rho, c.ledger.c, c.ledger.big_c
    )?;
    let inconclusive = [c.limit.verdict, c.series.verdict, c.decreasing.verdict].contains(&Verdict::Inconclusive);
    let failed = [c.limit.verdict, c.series.verdict, c.decreasing.verdict].contains(&Verdict::Fail);
    let code = if !d.pass || failed {
        writeln!(log, "inadmissible: a hypothesis fails")?;
        EXIT_INADMISSIBLE
    } else if inconclusive {
        writeln!(log, "inadmissible: the evidence on the window is inconclusive")?;
        EXIT_INADMISSIBLE
    } else {
        writeln!(log, "admissible")?;
        EXIT_OK
    };
    Ok(Outcome { code, files: vec![path] })
}

// ---------------------------------------------------------------------------
// solve

/// Contents of `manifold.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldFile {
    pub schema: String,
    pub config: RunConfig,
    pub perturbation: PerturbationInfo,
    /// `beta_n` for every stored graph.
    pub beta: Vec<f64>,
    pub report: SolveReport,
    pub family: ManifoldFamily,
}

/// The full pipeline: model, perturbation, conditions, solve.
pub fn run_solve(cfg: &RunConfig) -> Result<(ConditionReport, ManifoldFamily, SolveReport)> {
    let model = cfg.model.build()?;
    let f = cfg.perturbation(&model)?;
    let conditions = check_conditions(&model, f.c, f.q, &cfg.condition_config())?;
    conditions.require_admissible()?;
    let (family, report) = solve_manifold(&model, &f, &conditions, &cfg.solve_config())?;
    Ok((conditions, family, report))
}

fn manifold_rows(family: &ManifoldFamily, beta: &[f64]) -> (Vec<String>, Vec<Vec<Cell>>) {
    let g0 = &family.graphs[0];
    let (de, df) = (g0.stable_dim, g0.unstable_dim);
    let mut cols = vec!["n".to_string(), "delta".into(), "beta_n".into(), "nodes_per_axis".into(), "node".into()];
    cols.extend((1..=de).map(|i| format!("xi_{i}")));
    cols.extend((1..=df).map(|i| format!("eta_{i}")));
    let mut rows = Vec::new();
    let mut xi = [0.0; 2];
    for (g, b) in family.graphs.iter().zip(beta) {
        for node in 0..g.node_count() {
            g.node_coords(node, &mut xi);
            let mut row: Vec<Cell> = vec![
                g.index.into(),
                family.delta.into(),
                (*b).into(),
                g.nodes_per_axis.into(),
                node.into(),
            ];
            row.extend(xi[..de].iter().map(|&x| Cell::Num(x)));
            row.extend(g.node_value(node).iter().map(|&x| Cell::Num(x)));
            rows.push(row);
        }
    }
    (cols, rows)
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Outcome> {
    let model = cfg.model.build()?;
    let f = cfg.perturbation(&model)?;
    let (_, family, report) = run_solve(cfg)?;
    let files = write_manifold(cfg, out, &model, &f, &family, &report)?;
    writeln!(
        log,
        "solve: {} iterations, a-posteriori error {:.3e}, measured ratio {:.3e} (theoretical {:.3e})",
        report.iterations, report.a_posteriori_error, report.contraction_factor_measured, report.contraction_factor_theoretical
    )?;
    writeln!(
        log,
        "  delta = {:.6e}, C = {:.6}, K = {:.6}, horizon {}, tail bound {:.3e}",
        report.delta, report.big_c, report.k, report.horizon, report.tail_bound
    )?;
    writeln!(log, "  wrote {}", files[0].display())?;
    Ok(Outcome { code: EXIT_OK, files })
}

fn write_manifold(
    cfg: &RunConfig,
    out: &Path,
    model: &DichotomyModel,
    f: &PerturbationFamily,
    family: &ManifoldFamily,
    report: &SolveReport,
) -> Result<Vec<PathBuf>> {
    let range = (family.first_index(), family.last_index());
    let beta = compute_beta(&model.mu, &model.nu, model.a, f.q, model.eps, range, &cfg.constants.sum)?.beta;
    fs::create_dir_all(out)?;
    let (cols, rows) = manifold_rows(family, &beta);
    let csv_path = out.join("manifold.csv");
    write_csv(&csv_path, &cols, &rows)?;
    let file = ManifoldFile {
        schema: SCHEMA.into(),
        config: cfg.clone(),
        perturbation: f.into(),
        beta,
        report: report.clone(),
        family: family.clone(),
    };
    let json_path = out.join("manifold.json");
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    fs::write(&json_path, text)?;
    let report_path = out.join("solve.json");
    write_json(&report_path, "solve", cfg, report)?;
    Ok(vec![json_path, csv_path, report_path])
}

/// Reads `manifold.json` from `out` when it was produced by the same
/// configuration.
pub fn load_manifold(cfg: &RunConfig, out: &Path) -> Result<Option<ManifoldFile>> {
    let path = out.join("manifold.json");
    if !path.exists() {
        return Ok(None);
    }
    let file: ManifoldFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if file.schema != SCHEMA {
        return Err(Error::Config(format!("{} has schema {}, expected {SCHEMA}", path.display(), file.schema)));
    }
    let same = file.config.model == cfg.model
        && file.config.perturbation == cfg.perturbation
        && file.config.constants == cfg.constants;
    Ok(same.then_some(file))
}

// ---------------------------------------------------------------------------
// verify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub invariance: InvarianceReport,
    pub decay: DecayReport,
    pub decay_within_bound: bool,
    pub fixed_point_residual: f64,
    pub fixed_point_budget: f64,
    pub solve: SolveReport,
    pub pass: bool,
}

pub fn run_verify(cfg: &RunConfig, out: Option<&Path>) -> Result<VerifyReport> {
    let model = cfg.model.build()?;
    let f = cfg.perturbation(&model)?;
    let conditions = check_conditions(&model, f.c, f.q, &cfg.condition_config())?;
    conditions.require_admissible()?;
    let stored = match out {
        Some(dir) => load_manifold(cfg, dir)?,
        None => None,
    };
    let (family, solve) = match stored {
        Some(file) => (file.family, file.report),
        None => {
            let (family, report) = solve_manifold(&model, &f, &conditions, &cfg.solve_config())?;
            if let Some(dir) = out {
                write_manifold(cfg, dir, &model, &f, &family, &report)?;
            }
            (family, report)
        }
    };
    let v = &cfg.verify;
    let window = family.window;
    let n = v.base_index.unwrap_or(window.0);
    if n < window.0 || n > window.1 {
        return Err(Error::Config(format!("verify.base_index {n} is outside the solve window")));
    }
    let m_max = (n + v.steps).min(window.1);
    let errors = ErrorModel::from_report(&solve);
    let invariance = check_invariance(&model, &f, &family, &conditions, &errors, n, m_max, v.samples, v.radius_scale)?;
    let decay = check_decay(&model, &f, &family, &conditions, n, v.pairs, m_max)?;
    let residual = fixed_point_residual(&model, &f, &family, cfg.constants.escape_slack)?;
    let budget = solve.a_posteriori_error + solve.tail_metric;
    let decay_within_bound = decay.worst_ratio <= 1.0 + DECAY_SLACK;
    let pass = invariance.within_budget && decay_within_bound && residual <= budget;
    Ok(VerifyReport {
        invariance,
        decay,
        decay_within_bound,
        fixed_point_residual: residual,
        fixed_point_budget: budget,
        solve,
        pass,
    })
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Outcome> {
    let report = run_verify(cfg, Some(out))?;
    fs::create_dir_all(out)?;
    let inv = &report.invariance;
    let rows: Vec<Vec<Cell>> = inv
        .rows
        .iter()
        .map(|r| {
            vec![
                r.sample.into(),
                r.m.into(),
                r.stable_norm.into(),
                r.ball_radius.into(),
                r.residual.into(),
                r.budget.into(),
            ]
        })
        .collect();
    let csv_path = out.join("invariance.csv");
    write_csv(
        &csv_path,
        &header(&["sample", "m", "stable_norm", "ball_radius", "residual", "budget"]),
        &rows,
    )?;
    let json_path = out.join("verify.json");
    write_json(&json_path, "verify", cfg, &report)?;
    writeln!(
        log,
        "invariance: {} points, n = {}, m <= {}, max residual {:.3e}, worst residual/budget {:.3e}{}",
        inv.points_tested,
        inv.n,
        inv.m_max,
        inv.max_residual,
        inv.max_budget_ratio,
        if inv.outside_guarantee {
            format!(" (outside the guarantee, {} escapes)", inv.escapes)
        } else {
            String::new()
        }
    )?;
    writeln!(
        log,
        "decay: {} pairs, worst ratio {:.6} at m = {}",
        report.decay.pairs_tested, report.decay.worst_ratio, report.decay.worst_at_m
    )?;
    writeln!(
        log,
        "fixed point residual {:.3e} (budget {:.3e})",
        report.fixed_point_residual, report.fixed_point_budget
    )?;
    writeln!(log, "{}", if report.pass { "all bounds hold" } else { "bound violation" })?;
    Ok(Outcome {
        code: if report.pass { EXIT_OK } else { EXIT_BOUND_VIOLATION },
        files: vec![json_path, csv_path],
    })
}

// ---------------------------------------------------------------------------
// perturb

pub fn run_perturb(cfg: &RunConfig) -> Result<PerturbationReport> {
    let model = cfg.model.build()?;
    let f = cfg.perturbation(&model)?;
    let g = cfg.comparison(&model)?;
    let check = PerturbationCheckConfig {
        conditions: cfg.condition_config(),
        solve: cfg.solve_config(),
        distance_samples: cfg.verify.distance_samples,
    };
    check_perturbation_theorem(&model, &f, &g, &check)
}

pub fn cmd_perturb(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Outcome> {
    let report = run_perturb(cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join("perturb.json");
    write_json(&path, "perturb", cfg, &report)?;
    writeln!(
        log,
        "perturb: |phi - psi|' = {:.6e} (grid metric), |f - g|''' = {:.6e}, budget {:.3e}: {}",
        report.lhs,
        report.rhs,
        report.budget,
        if report.pass { "holds" } else { "violated" }
    )?;
    if report.eps_zero {
        writeln!(log, "  note: eps = 0 lies outside the estimate's stated hypothesis")?;
    }
    Ok(Outcome {
        code: if report.pass { EXIT_OK } else { EXIT_BOUND_VIOLATION },
        files: vec![path],
    })
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub a: f64,
    pub lambda: Option<f64>,
    pub eps: f64,
    /// `None` when the cell could not be evaluated.
    pub limit: Option<Verdict>,
    pub series: Option<Verdict>,
    pub decreasing: Option<Verdict>,
    pub admissible: bool,
    /// First hypothesis that does not pass, or `"none"`.
    pub binding: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub eps: f64,
    /// Swept coordinate of the printed admissibility boundary.
    pub analytic: Option<f64>,
    /// Grid neighbours across which admissibility flips.
    pub transition_lo: Option<f64>,
    pub transition_hi: Option<f64>,
    pub within_one_cell: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub cell_width: f64,
    pub cells: Vec<SweepCell>,
    pub boundary: Vec<BoundaryRow>,
}

/// Swept coordinate of the admissibility boundary for built-in families.
pub fn analytic_boundary(axis: SweepAxis, mu: &RateKind, nu: &RateKind, q: f64, eps: f64) -> Option<f64> {
    match (axis, mu, nu) {
        (SweepAxis::A, RateKind::Exponential, RateKind::Exponential) => Some(-eps * (1.0 + 2.0 / q)),
        (SweepAxis::A, RateKind::Polynomial, RateKind::Polynomial) => Some(-eps * (1.0 + 2.0 / q) - 1.0 / q),
        (SweepAxis::A, RateKind::PolyLog { .. }, RateKind::Log) => Some(-1.0 / q),
        (SweepAxis::Lambda, RateKind::PolyLog { .. }, RateKind::Log) => Some(1.0 + eps * (q + 2.0)),
        _ => None,
    }
}

fn sweep_cell(cfg: &RunConfig, f: &PerturbationFamily, x: f64, eps: f64) -> SweepCell {
    let q = cfg.perturbation.q;
    let mut spec = cfg.model.clone();
    spec.eps = eps;
    let lambda = match cfg.sweep.axis {
        SweepAxis::A => {
            spec.a = x;
            None
        }
        SweepAxis::Lambda => {
            spec.a = -1.0 / q;
            spec.mu = RateKind::PolyLog { lambda: x };
            Some(x)
        }
    };
    let cond_cfg = ConditionConfig {
        window: cfg.sweep.window,
        ..cfg.condition_config()
    };
    let result = spec.build().and_then(|m| check_conditions(&m, f.c, f.q, &cond_cfg));
    match result {
        Ok(r) => {
            let named = [
                ("limit", r.limit.verdict),
                ("series", r.series.verdict),
                ("decreasing", r.decreasing.verdict),
            ];
            let binding = named
                .iter()
                .find(|(_, v)| !v.is_pass())
                .map_or("none", |(n, _)| n)
                .to_string();
            SweepCell {
                a: spec.a,
                lambda,
                eps,
                limit: Some(r.limit.verdict),
                series: Some(r.series.verdict),
                decreasing: Some(r.decreasing.verdict),
                admissible: r.admissible,
                binding,
                error: None,
            }
        }
        Err(e) => SweepCell {
            a: spec.a,
            lambda,
            eps,
            limit: None,
            series: None,
            decreasing: None,
            admissible: false,
            binding: "error".into(),
            error: Some(e.to_string()),
        },
    }
}

pub fn run_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    let s = &cfg.sweep;
    if s.axis == SweepAxis::Lambda && !matches!(cfg.model.mu, RateKind::PolyLog { .. }) {
        return Err(Error::Config("a lambda sweep needs a poly-log mu".into()));
    }
    let model = cfg.model.build()?;
    let f = cfg.perturbation(&model)?;
    let xs = s.x.points();
    let es = s.eps.points();
    let grid: Vec<(f64, f64)> = es.iter().flat_map(|&e| xs.iter().map(move |&x| (x, e))).collect();
    let cells: Vec<SweepCell> = grid.par_iter().map(|&(x, e)| sweep_cell(cfg, &f, x, e)).collect();
    let h = s.x.spacing();
    let q = cfg.perturbation.q;
    let boundary = es
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let row = &cells[j * xs.len()..(j + 1) * xs.len()];
            let flip = (1..row.len()).find(|&i| row[i].admissible != row[i - 1].admissible);
            let (lo, hi) = flip.map_or((None, None), |i| (Some(xs[i - 1]), Some(xs[i])));
            let analytic = analytic_boundary(s.axis, &cfg.model.mu, &cfg.model.nu, q, eps);
            let within = match (analytic, lo, hi) {
                (Some(b), Some(l), Some(u)) => Some(b >= l - 1e-9 * h.max(1.0) && b <= u + 1e-9 * h.max(1.0)),
                _ => None,
            };
            BoundaryRow {
                eps,
                analytic,
                transition_lo: lo,
                transition_hi: hi,
                within_one_cell: within,
            }
        })
        .collect();
    Ok(SweepResult {
        axis: s.axis,
        cell_width: h,
        cells,
        boundary,
    })
}

fn verdict_cell(v: Option<Verdict>) -> Cell {
    v.map_or(Cell::Text("error".into()), |v| Cell::Text(verdict_word(v).into()))
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Outcome> {
    let result = run_sweep(cfg)?;
    fs::create_dir_all(out)?;
    let lambda_axis = result.axis == SweepAxis::Lambda;
    let mut cols = vec!["a"];
    if lambda_axis {
        cols.push("lambda");
    }
    cols.extend(["eps", "limit", "series", "decreasing", "admissible", "binding"]);
    let rows: Vec<Vec<Cell>> = result
        .cells
        .iter()
        .map(|c| {
            let mut row: Vec<Cell> = vec![c.a.into()];
            if lambda_axis {
                row.push(c.lambda.into());
            }
            row.extend([
                c.eps.into(),
                verdict_cell(c.limit),
                verdict_cell(c.series),
                verdict_cell(c.decreasing),
                c.admissible.into(),
                c.binding.as_str().into(),
            ]);
            row
        })
        .collect();
    let sweep_path = out.join("sweep.csv");
    write_csv(&sweep_path, &header(&cols), &rows)?;
    let mut files = vec![sweep_path];
    if result.boundary.iter().any(|b| b.analytic.is_some()) {
        let rows: Vec<Vec<Cell>> = result
            .boundary
            .iter()
            .map(|b| {
                vec![
                    b.eps.into(),
                    b.analytic.into(),
                    b.transition_lo.into(),
                    b.transition_hi.into(),
                    b.within_one_cell.map_or(Cell::Empty, Cell::from),
                ]
            })
            .collect();
        let path = out.join("boundary.csv");
        write_csv(
            &path,
            &header(&["eps", "analytic", "transition_lo", "transition_hi", "within_one_cell"]),
            &rows,
        )?;
        files.push(path);
    }
    let json_path = out.join("sweep.json");
    write_json(&json_path, "sweep", cfg, &result)?;
    files.push(json_path);
    let admissible = result.cells.iter().filter(|c| c.admissible).count();
    writeln!(log, "sweep: {} of {} cells admissible", admissible, result.cells.len())?;
    for b in &result.boundary {
        if let (Some(a), Some(w)) = (b.analytic, b.within_one_cell) {
            writeln!(
                log,
                "  eps = {:.4}: boundary {:.6} {} grid transition [{:.6}, {:.6}]",
                b.eps,
                a,
                if w { "inside" } else { "outside" },
                b.transition_lo.unwrap_or(f64::NAN),
                b.transition_hi.unwrap_or(f64::NAN)
            )?;
        }
    }
    Ok(Outcome { code: EXIT_OK, files })
}

// ---------------------------------------------------------------------------

/// Runs a parsed command and returns its exit code; errors are reported on
/// `err`.
pub fn run(cli: &Cli, log: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = cli.command.args();
    let outcome = RunConfig::load(&args.config).and_then(|cfg| {
        let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        match &cli.command {
            Command::Rates(_) => cmd_rates(&cfg, &out, log),
            Command::Check(_) => cmd_check(&cfg, &out, log),
            Command::Solve(_) => cmd_solve(&cfg, &out, log),
            Command::Verify(_) => cmd_verify(&cfg, &out, log),
            Command::Perturb(_) => cmd_perturb(&cfg, &out, log),
            Command::Sweep(_) => cmd_sweep(&cfg, &out, log),
        }
    });
    match outcome {
        Ok(o) => o.code,
        Err(e) => {
            let _ = writeln!(err, "dichoman {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Entry point of the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    run(&cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
