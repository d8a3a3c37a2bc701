//! Command-line runner: a JSON configuration in, `report.json` and CSV
//! tables out.
//!
//! Every command reads an optional JSON file whose keys all have defaults,
//! so `{}` (or no `--config` at all) runs the stock experiment. Unknown keys
//! are rejected. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | invalid configuration or arguments; nothing is written |
//! | 3 | numerical failure; `report.json` carries `error.kind` |
//! | 4 | a verdict failed under `--assert` |
//!
//! Tables depend only on the configuration: samples use pre-assigned stream
//! ids and parallel results are collected in index order, so the CSV bytes
//! do not change with `workers`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blowup::{self, ContrastConfig, DriftProfile, Verdict};
use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::fields::{
    BlowupSeed, BumpTestFunction, ConstantDatum, ConstantField, CounterexampleField, DriftField, GaussianBumpField,
    GaussianDatum, InitialDatum, OffsetDatum, RotationField, ZeroField,
};
use crate::flow::{self, FlowOptions, Noise, Scheme};
use crate::grid::GridSpec;
use crate::report::{io_error, write_json, Cell, Table};
use crate::stats::{self, McOptions, MomentEstimate, Quantity, TailOptions};
use crate::transport::{self, GradientMeasure, MASK_WARNING_FRACTION};
use crate::zvonkin::{self, ZvonkinConfig, STEP_RESIDUAL_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ASSERT: i32 = 4;

/// Environment variable naming the output directory when neither `--out`
/// nor `output.dir` is given.
pub const OUT_DIR_ENV: &str = "STLAB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "stlab-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    EulerIdentity,
    Solve,
    WeakForm,
    Compare,
    Zvonkin,
    Moments,
    Tail,
    BlowupDet,
    BlowupStoch,
    Contrast,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EulerIdentity => "euler-identity",
            Command::Solve => "solve",
            Command::WeakForm => "weak-form",
            Command::Compare => "compare",
            Command::Zvonkin => "zvonkin",
            Command::Moments => "moments",
            Command::Tail => "tail",
            Command::BlowupDet => "blowup-det",
            Command::BlowupStoch => "blowup-stoch",
            Command::Contrast => "contrast",
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "stlab", version, about = "Stochastic transport numerical laboratory")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exit with status 4 when any verdict fails.
    #[arg(long)]
    pub assert: bool,
    /// Output directory (overrides `output.dir` and the environment).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

impl OutputSpec {
    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

// ---------------------------------------------------------------------------
// Fields and data as written in configurations.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero { dim: usize },
    Constant { value: Vec<f64> },
    Rotation { inner: f64, outer: f64 },
    GaussianBump { direction: Vec<f64>, center: Vec<f64>, width: f64 },
    StandardBump { dim: usize },
    Counterexample,
}

impl FieldSpec {
    pub fn build(&self) -> Result<Box<dyn DriftField>> {
        Ok(match self {
            FieldSpec::Zero { dim } => {
                check_dim(*dim)?;
                Box::new(ZeroField::new(*dim))
            }
            FieldSpec::Constant { value } => {
                check_dim(value.len())?;
                check_finite("constant field", value)?;
                Box::new(ConstantField::new(value.clone()))
            }
            FieldSpec::Rotation { inner, outer } => {
                if !(*inner > 0.0 && inner < outer && outer.is_finite()) {
                    return Err(Error::Argument("rotation needs 0 < inner < outer".into()));
                }
                Box::new(RotationField {
                    inner: *inner,
                    outer: *outer,
                })
            }
            FieldSpec::GaussianBump {
                direction,
                center,
                width,
            } => {
                check_dim(direction.len())?;
                if center.len() != direction.len() {
                    return Err(Error::Argument("bump direction and center differ in length".into()));
                }
                check_finite("bump direction", direction)?;
                check_finite("bump center", center)?;
                positive("bump width", *width)?;
                Box::new(GaussianBumpField::new(direction.clone(), center.clone(), *width))
            }
            FieldSpec::StandardBump { dim } => {
                check_dim(*dim)?;
                Box::new(GaussianBumpField::standard(*dim))
            }
            FieldSpec::Counterexample => Box::new(CounterexampleField),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatumSpec {
    Gaussian { center: Vec<f64>, width: f64, amplitude: f64 },
    Constant { dim: usize, value: f64 },
    BlowupSeed,
    Offset { inner: Box<DatumSpec>, offset: f64 },
}

impl DatumSpec {
    fn gaussian(amplitude: f64) -> Self {
        DatumSpec::Gaussian {
            center: vec![0.0, 0.0],
            width: 0.5,
            amplitude,
        }
    }

    pub fn build(&self) -> Result<Box<dyn InitialDatum>> {
        Ok(match self {
            DatumSpec::Gaussian {
                center,
                width,
                amplitude,
            } => {
                check_dim(center.len())?;
                check_finite("datum center", center)?;
                positive("datum width", *width)?;
                check_finite("datum amplitude", &[*amplitude])?;
                Box::new(GaussianDatum::new(center.clone(), *width, *amplitude))
            }
            DatumSpec::Constant { dim, value } => {
                check_dim(*dim)?;
                check_finite("datum value", &[*value])?;
                Box::new(ConstantDatum {
                    dim: *dim,
                    value: *value,
                })
            }
            DatumSpec::BlowupSeed => Box::new(BlowupSeed),
            DatumSpec::Offset { inner, offset } => {
                check_finite("datum offset", &[*offset])?;
                Box::new(OffsetDatum {
                    inner: inner.build()?,
                    offset: *offset,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Default for TestFunctionSpec {
    fn default() -> Self {
        Self {
            center: vec![0.0, 0.0],
            radius: 1.0,
        }
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d > 3 {
        return Err(Error::Argument(format!("dimension must be 1, 2 or 3, got {d}")));
    }
    Ok(())
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument(format!("{what} must be finite")));
    }
    Ok(())
}

fn positive(what: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Argument(format!("{what} must be positive, got {v}")));
    }
    Ok(())
}

fn nonzero(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Argument(format!("{what} must be positive")));
    }
    Ok(())
}

fn check_points(what: &str, points: &[Vec<f64>], dim: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Argument(format!("{what} must not be empty")));
    }
    for p in points {
        if p.len() != dim {
            return Err(Error::Argument(format!(
                "{what}: point {p:?} does not have dimension {dim}"
            )));
        }
        check_finite(what, p)?;
    }
    Ok(())
}

fn check_dims(b: &dyn DriftField, u0: &dyn InitialDatum, grid_dim: usize) -> Result<()> {
    if u0.dim() != b.dim() || grid_dim != b.dim() {
        return Err(Error::Argument(format!(
            "field, datum and grid dimensions differ ({}, {}, {grid_dim})",
            b.dim(),
            u0.dim()
        )));
    }
    Ok(())
}

fn fine_path(seed: u64, stream: u64, dim: usize, horizon: f64, base: usize, level: usize) -> Result<BrownianPath> {
    BrownianPath::generate_refined(seed, stream, dim, horizon, base, level as u32)
}

// ---------------------------------------------------------------------------
// Outcomes and reports.

/// One pass/fail statement about a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub results: Value,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

trait CommandConfig: DeserializeOwned + Serialize + Default + Sync {
    fn workers(&self) -> usize;
    fn output(&self) -> &OutputSpec;
    /// Cheap checks run before any computation.
    fn validate(&self) -> Result<()>;
    fn execute(&self) -> Result<Outcome>;
}

macro_rules! envelope {
    () => {
        fn workers(&self) -> usize {
            self.workers
        }
        fn output(&self) -> &OutputSpec {
            &self.output
        }
    };
}

/// Parse `args`, run the command and write its artifacts; returns the exit
/// status.
pub fn run(args: &Args) -> i32 {
    let text = match &args.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return EXIT_VALIDATION;
            }
        },
        None => "{}".to_string(),
    };
    match args.command {
        Command::EulerIdentity => run_typed::<EulerIdentityConfig>(args, &text),
        Command::Solve => run_typed::<SolveConfig>(args, &text),
        Command::WeakForm => run_typed::<WeakFormConfig>(args, &text),
        Command::Compare => run_typed::<CompareConfig>(args, &text),
        Command::Zvonkin => run_typed::<ZvonkinCommandConfig>(args, &text),
        Command::Moments => run_typed::<MomentsConfig>(args, &text),
        Command::Tail => run_typed::<TailConfig>(args, &text),
        Command::BlowupDet => run_typed::<BlowupDetConfig>(args, &text),
        Command::BlowupStoch => run_typed::<BlowupStochConfig>(args, &text),
        Command::Contrast => run_typed::<ContrastCommandConfig>(args, &text),
    }
}

fn output_dir(args: &Args, output: &OutputSpec) -> PathBuf {
    args.out
        .clone()
        .or_else(|| output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn run_typed<C: CommandConfig>(args: &Args, text: &str) -> i32 {
    let cfg: C = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return EXIT_VALIDATION;
        }
    };
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_VALIDATION;
        }
    };
    let dir = output_dir(args, cfg.output());
    let started = Instant::now();
    let outcome = pool.install(|| cfg.execute());
    let wall_time = started.elapsed().as_secs_f64();
    let resolved = serde_json::to_value(&cfg).unwrap_or(Value::Null);
    let mut report = json!({
        "command": args.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": resolved,
        "output_dir": dir.display().to_string(),
        "wall_time_s": wall_time,
    });
    match outcome {
        Err(e) if e.is_validation() => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
        Err(e) => {
            eprintln!("error: {e}");
            report["status"] = json!("error");
            report["results"] = Value::Null;
            report["verdicts"] = json!([]);
            report["warnings"] = json!([]);
            report["error"] = json!({ "kind": e.kind(), "message": e.to_string() });
            if let Err(w) = write_report(&dir, &report) {
                eprintln!("error: {w}");
            }
            EXIT_NUMERIC
        }
        Ok(out) => {
            let passed = out.checks.iter().all(|c| c.passed);
            for c in &out.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            report["status"] = json!(if passed { "ok" } else { "verdict_failed" });
            report["results"] = out.results;
            report["verdicts"] = serde_json::to_value(&out.checks).unwrap_or(Value::Null);
            report["warnings"] = json!(out.warnings);
            report["error"] = Value::Null;
            let written = write_artifacts(&dir, cfg.output(), &out.tables, &report);
            if let Err(e) = written {
                eprintln!("error: {e}");
                return EXIT_VALIDATION;
            }
            if args.assert && !passed {
                EXIT_ASSERT
            } else {
                EXIT_OK
            }
        }
    }
}

fn write_report(dir: &Path, report: &Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_json(&dir.join("report.json"), report)
}

fn write_artifacts(dir: &Path, output: &OutputSpec, tables: &[Table], report: &Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    if output.wants(Format::Csv) {
        for t in tables {
            t.write(dir)?;
        }
    }
    if output.wants(Format::Json) {
        write_json(&dir.join("report.json"), report)?;
    }
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

fn float_cells(v: &[f64]) -> Vec<Cell> {
    v.iter().map(|x| Cell::from(*x)).collect()
}

// ---------------------------------------------------------------------------
// euler-identity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EulerIdentityConfig {
    pub field: FieldSpec,
    pub scheme: Scheme,
    pub points: Vec<Vec<f64>>,
    pub horizon: f64,
    pub n_steps: usize,
    /// Number of step halvings; level `l` uses `n_steps * 2^l` steps.
    pub levels: usize,
    /// Drive the flow with Brownian paths (stream = point index).
    pub noise: bool,
    pub seed: u64,
    /// Bound on the largest residual at the finest level.
    pub tolerance: f64,
    /// Accepted range of the residual ratio between successive levels.
    pub ratio_range: Option<[f64; 2]>,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for EulerIdentityConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::Rotation { inner: 3.0, outer: 4.0 },
            scheme: Scheme::Heun,
            points: vec![vec![0.5, 0.2], vec![-0.3, 0.7], vec![1.0, -1.0]],
            horizon: 1.0,
            n_steps: 1000,
            levels: 1,
            noise: false,
            seed: 1,
            tolerance: 1e-4,
            ratio_range: None,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for EulerIdentityConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        let b = self.field.build()?;
        check_points("points", &self.points, b.dim())?;
        positive("horizon", self.horizon)?;
        nonzero("n_steps", self.n_steps)?;
        nonzero("levels", self.levels)?;
        positive("tolerance", self.tolerance)?;
        if let Some([lo, hi]) = self.ratio_range {
            if !(lo <= hi) {
                return Err(Error::Argument("ratio_range must be ordered".into()));
            }
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let d = b.dim();
        let opts = FlowOptions::with_scheme(self.scheme);
        let mut header = vec!["level".to_string(), "n_steps".into(), "point".into()];
        header.extend(coord_header("x", d));
        header.push("residual".into());
        let mut table = Table::with_header("euler_identity", header);
        let mut max_per_level = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            let n = self.n_steps << level;
            let residuals: Vec<f64> = self
                .points
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    if self.noise {
                        let p = fine_path(self.seed, i as u64, d, self.horizon, self.n_steps, level)?;
                        flow::euler_identity_residual(&*b, x, &Noise::Path(&p), self.horizon, &opts)
                    } else {
                        let noise = Noise::deterministic(self.horizon, n)?;
                        flow::euler_identity_residual(&*b, x, &noise, self.horizon, &opts)
                    }
                })
                .collect::<Result<_>>()?;
            for (i, (x, r)) in self.points.iter().zip(&residuals).enumerate() {
                let mut row: Vec<Cell> = vec![level.into(), n.into(), i.into()];
                row.extend(float_cells(x));
                row.push((*r).into());
                table.push(row);
            }
            max_per_level.push(residuals.iter().cloned().fold(0.0f64, f64::max));
        }
        let ratios: Vec<f64> = max_per_level.windows(2).map(|w| w[0] / w[1]).collect();
        let finest = *max_per_level.last().expect("at least one level");
        let mut checks = vec![Check::new(
            "residual_within_tolerance",
            finest <= self.tolerance,
            format!("max residual {finest:.3e} <= {:.1e}", self.tolerance),
        )];
        if let Some([lo, hi]) = self.ratio_range {
            let ok = !ratios.is_empty() && ratios.iter().all(|r| *r >= lo && *r <= hi);
            checks.push(Check::new(
                "ratio_in_range",
                ok,
                format!("ratios {ratios:?} within [{lo}, {hi}]"),
            ));
        }
        Ok(Outcome {
            results: json!({
                "field": b.name(),
                "max_residual_per_level": max_per_level,
                "ratios": ratios,
            }),
            tables: vec![table],
            checks,
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// solve

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub field: FieldSpec,
    pub datum: DatumSpec,
    pub t: f64,
    pub n_steps: usize,
    pub grid: GridSpec,
    pub noise: bool,
    pub seed: u64,
    pub stream: u64,
    pub scheme: Scheme,
    pub sobolev_exponents: Vec<f64>,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::StandardBump { dim: 2 },
            datum: DatumSpec::gaussian(1.0),
            t: 1.0,
            n_steps: 100,
            grid: GridSpec::cube(2, 2.0, 21),
            noise: true,
            seed: 1,
            stream: 0,
            scheme: Scheme::EulerMaruyama,
            sobolev_exponents: vec![2.0, 3.0],
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for SolveConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        let b = self.field.build()?;
        let u0 = self.datum.build()?;
        let grid = self.grid.build()?;
        check_dims(&*b, &*u0, grid.dim())?;
        positive("t", self.t)?;
        nonzero("n_steps", self.n_steps)?;
        if self.sobolev_exponents.iter().any(|r| !(*r >= 1.0)) {
            return Err(Error::Argument("sobolev exponents must be >= 1".into()));
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let u0 = self.datum.build()?;
        let grid = self.grid.build()?;
        let opts = FlowOptions::with_scheme(self.scheme);
        let path;
        let noise = if self.noise {
            path = BrownianPath::generate(self.seed, self.stream, b.dim(), self.t, self.n_steps)?;
            Noise::Path(&path)
        } else {
            Noise::deterministic(self.t, self.n_steps)?
        };
        let sol = transport::solve(&*b, &*u0, self.t, &grid, &noise, &opts)?;
        let axis_weights: Vec<Vec<f64>> = grid.axes().iter().map(|a| a.weights()).collect();
        let weights = grid.tensor_weights(&axis_weights);
        let mut norms = Table::new("norms", &["exponent", "measure", "value", "masked_fraction"]);
        let mut norm_values = Vec::new();
        let mut warnings = Vec::new();
        for r in &self.sobolev_exponents {
            for (label, m) in [
                ("chain_rule", GradientMeasure::ChainRule),
                ("majorant", GradientMeasure::Majorant),
                ("shear", GradientMeasure::Shear),
            ] {
                let n = transport::weighted_sobolev_norm(&sol, &weights, *r, m)?;
                norms.push(vec![(*r).into(), label.into(), n.value.into(), n.masked_fraction.into()]);
                if let Some(w) = &n.warning {
                    warnings.push(w.clone());
                }
                norm_values.push(json!({ "exponent": r, "measure": label, "value": n.value }));
            }
        }
        warnings.dedup();
        let masked_fraction = sol.masked_count() as f64 / sol.len() as f64;
        Ok(Outcome {
            results: json!({
                "field": b.name(),
                "datum": u0.name(),
                "points": sol.len(),
                "masked": sol.masked_count(),
                "masked_fraction": masked_fraction,
                "norms": norm_values,
            }),
            tables: vec![sol.to_table("solution"), norms],
            checks: vec![Check::new(
                "masked_fraction",
                masked_fraction <= MASK_WARNING_FRACTION,
                format!("{masked_fraction:.3} <= {MASK_WARNING_FRACTION}"),
            )],
            warnings,
        })
    }
}

// ---------------------------------------------------------------------------
// weak-form

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakFormConfig {
    pub field: FieldSpec,
    pub datum: DatumSpec,
    pub test_function: TestFunctionSpec,
    pub t: f64,
    /// Quadrature grid in the initial configuration.
    pub grid: GridSpec,
    pub base_steps: usize,
    /// Number of refinement levels; level `l` uses `base_steps * 2^l` steps.
    pub levels: usize,
    pub noise: bool,
    pub seed: u64,
    pub stream: u64,
    pub scheme: Scheme,
    /// Required residual ratio between successive levels.
    pub min_ratio: f64,
    /// Residuals at or below this count as exact, so no decay is required.
    pub zero_tolerance: f64,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for WeakFormConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::StandardBump { dim: 2 },
            datum: DatumSpec::gaussian(1.0),
            test_function: TestFunctionSpec::default(),
            t: 1.0,
            grid: GridSpec::cube(2, 4.0, 81),
            base_steps: 50,
            levels: 3,
            noise: true,
            seed: 1,
            stream: 0,
            scheme: Scheme::EulerMaruyama,
            min_ratio: 1.3,
            zero_tolerance: 1e-6,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for WeakFormConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        let b = self.field.build()?;
        let u0 = self.datum.build()?;
        let grid = self.grid.build()?;
        check_dims(&*b, &*u0, grid.dim())?;
        check_points("test_function.center", std::slice::from_ref(&self.test_function.center), b.dim())?;
        positive("test_function.radius", self.test_function.radius)?;
        positive("t", self.t)?;
        nonzero("base_steps", self.base_steps)?;
        nonzero("levels", self.levels)?;
        positive("min_ratio", self.min_ratio)?;
        positive("zero_tolerance", self.zero_tolerance)?;
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let u0 = self.datum.build()?;
        let grid = self.grid.build()?;
        let phi = BumpTestFunction::new(self.test_function.center.clone(), self.test_function.radius);
        let opts = FlowOptions::with_scheme(self.scheme);
        let mut table = Table::new("weak_form", &["level", "n_steps", "time_step", "residual"]);
        let mut residuals = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            let n = self.base_steps << level;
            let report = if self.noise {
                let p = fine_path(self.seed, self.stream, b.dim(), self.t, self.base_steps, level)?;
                transport::weak_form_residual(&*b, &*u0, &phi, self.t, &Noise::Path(&p), &grid, &opts)?
            } else {
                let noise = Noise::deterministic(self.t, n)?;
                transport::weak_form_residual(&*b, &*u0, &phi, self.t, &noise, &grid, &opts)?
            };
            let r = report.residual.abs();
            table.push(vec![level.into(), n.into(), report.time_step.into(), r.into()]);
            residuals.push(r);
        }
        let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
        let exact = residuals.iter().all(|r| *r <= self.zero_tolerance);
        let decays = ratios.iter().all(|q| *q >= self.min_ratio);
        Ok(Outcome {
            results: json!({
                "test_function": phi.id(),
                "residuals": residuals,
                "ratios": ratios,
                "exact": exact,
            }),
            tables: vec![table],
            checks: vec![Check::new(
                "residual_decay",
                exact || decays,
                format!(
                    "residuals {residuals:?}: all <= {:.0e} or every ratio >= {}",
                    self.zero_tolerance, self.min_ratio
                ),
            )],
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub field: FieldSpec,
    pub low: DatumSpec,
    pub high: DatumSpec,
    pub t: f64,
    pub n_steps: usize,
    pub grid: GridSpec,
    /// Run `r` uses Brownian stream `r`.
    pub runs: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub tolerance: f64,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::StandardBump { dim: 2 },
            low: DatumSpec::gaussian(1.0),
            high: DatumSpec::gaussian(1.5),
            t: 1.0,
            n_steps: 100,
            grid: GridSpec::cube(2, 2.0, 21),
            runs: 20,
            seed: 1,
            scheme: Scheme::EulerMaruyama,
            tolerance: 1e-12,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for CompareConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        let b = self.field.build()?;
        let low = self.low.build()?;
        let high = self.high.build()?;
        let grid = self.grid.build()?;
        check_dims(&*b, &*low, grid.dim())?;
        check_dims(&*b, &*high, grid.dim())?;
        positive("t", self.t)?;
        nonzero("n_steps", self.n_steps)?;
        nonzero("runs", self.runs)?;
        if !(self.tolerance >= 0.0) {
            return Err(Error::Argument("tolerance must be nonnegative".into()));
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let low = self.low.build()?;
        let high = self.high.build()?;
        let grid = self.grid.build()?;
        let opts = FlowOptions::with_scheme(self.scheme);
        let mut table = Table::new("compare", &["run", "violations", "max_gap", "masked"]);
        let mut total = 0;
        let mut worst = f64::NEG_INFINITY;
        for run in 0..self.runs {
            let p = BrownianPath::generate(self.seed, run as u64, b.dim(), self.t, self.n_steps)?;
            let r = transport::comparison_check(&*b, &*low, &*high, self.t, &Noise::Path(&p), &grid, &opts, self.tolerance)?;
            table.push(vec![run.into(), r.violations.into(), r.max_gap.into(), r.masked.into()]);
            total += r.violations;
            worst = worst.max(r.max_gap);
        }
        Ok(Outcome {
            results: json!({ "runs": self.runs, "violations": total, "max_gap": worst }),
            tables: vec![table],
            checks: vec![Check::new(
                "no_violations",
                total == 0,
                format!("{total} violations over {} runs", self.runs),
            )],
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// zvonkin

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceSpec {
    pub x: Vec<f64>,
    pub n_paths: usize,
    pub base_steps: usize,
    /// Number of halvings after the base level.
    pub levels: usize,
    pub min_ratio: f64,
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        Self {
            x: vec![0.2],
            n_paths: 128,
            base_steps: 1000,
            levels: 2,
            min_ratio: 1.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZvonkinCommandConfig {
    pub field: FieldSpec,
    pub pde: ZvonkinConfig,
    /// Mean `sup |gamma^{-1}(Y) - X|` under step halving; `null` skips it.
    pub equivalence: Option<EquivalenceSpec>,
    pub seed: u64,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for ZvonkinCommandConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::StandardBump { dim: 1 },
            pde: ZvonkinConfig::default(),
            equivalence: Some(EquivalenceSpec::default()),
            seed: 1,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for ZvonkinCommandConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        let b = self.field.build()?;
        self.pde.validate(b.dim())?;
        if let Some(eq) = &self.equivalence {
            check_points("equivalence.x", std::slice::from_ref(&eq.x), b.dim())?;
            nonzero("equivalence.n_paths", eq.n_paths)?;
            nonzero("equivalence.base_steps", eq.base_steps)?;
            nonzero("equivalence.levels", eq.levels)?;
            positive("equivalence.min_ratio", eq.min_ratio)?;
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let sol = zvonkin::solve_backward_pde(&*b, &self.pde)?;
        let d = sol.dim;
        let norms = sol.norms();
        let diffeo = zvonkin::gamma_diffeo_check(&sol);

        let mut header = coord_header("x", d);
        header.extend(coord_header("u", d));
        for i in 0..d {
            for j in 0..d {
                header.push(format!("grad{i}{j}"));
            }
        }
        let mut slice = Table::with_header("zvonkin_slice", header);
        for node in 0..sol.node_count() {
            let mut row = float_cells(&sol.node_coords(node));
            row.extend(float_cells(&sol.u[0][node * d..(node + 1) * d]));
            row.extend(float_cells(&sol.grad[0][node * d * d..(node + 1) * d * d]));
            slice.push(row);
        }

        let mut checks = vec![
            Check::new(
                "diffeomorphic",
                diffeo.diffeomorphic,
                format!("min det(I + grad U) = {:.4}", diffeo.min_det),
            ),
            Check::new(
                "step_residual",
                sol.max_step_residual <= STEP_RESIDUAL_TOL,
                format!("{:.2e} <= {STEP_RESIDUAL_TOL:.0e}", sol.max_step_residual),
            ),
        ];
        let mut tables = vec![slice];
        let mut equivalence = Value::Null;
        if let Some(eq) = &self.equivalence {
            let means = zvonkin::equivalence_study(&*b, &sol, &eq.x, self.seed, eq.n_paths, eq.base_steps, eq.levels)?;
            let ratios: Vec<f64> = means.windows(2).map(|w| w[0] / w[1]).collect();
            let mut t = Table::new("zvonkin_equivalence", &["level", "n_steps", "mean_discrepancy"]);
            for (level, m) in means.iter().enumerate() {
                t.push(vec![level.into(), (eq.base_steps << level).into(), (*m).into()]);
            }
            tables.push(t);
            checks.push(Check::new(
                "equivalence_decay",
                ratios.iter().all(|r| *r >= eq.min_ratio),
                format!("ratios {ratios:?} >= {}", eq.min_ratio),
            ));
            equivalence = json!({ "mean_discrepancy": means, "ratios": ratios });
        }
        Ok(Outcome {
            results: json!({
                "field": sol.field_name,
                "lambda": sol.lambda,
                "norms": to_value(&norms),
                "diffeomorphism": to_value(&diffeo),
                "max_step_residual": sol.max_step_residual,
                "equivalence": equivalence,
            }),
            tables,
            checks,
            warnings: sol.warnings.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// moments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsConfig {
    pub field: FieldSpec,
    pub mc: McOptions,
    pub quantities: Vec<Quantity>,
    /// Moment orders `m`.
    pub orders: Vec<f64>,
    /// Starting pairs for the pair and Jacobian-difference moments.
    pub pairs: Vec<PairSpec>,
    /// Space grid for the Jacobian sup moment.
    pub points: Vec<Vec<f64>>,
    /// Time grid for the Jacobian sup moment.
    pub times: Vec<f64>,
    /// Hölder exponent for the Jacobian difference; defaults by regularity.
    pub alpha: Option<f64>,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::StandardBump { dim: 2 },
            mc: McOptions::default(),
            quantities: vec![Quantity::PairMoment, Quantity::JacSupMoment, Quantity::JacDiffMoment],
            orders: vec![2.0, 4.0],
            pairs: vec![PairSpec {
                x: vec![0.0, 0.0],
                y: vec![0.1, 0.0],
            }],
            points: vec![vec![0.0, 0.0], vec![0.5, 0.5]],
            times: vec![0.5, 1.0],
            alpha: None,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for MomentsConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        let b = self.field.build()?;
        let d = b.dim();
        self.mc.validate()?;
        // Pair moments are defined for m >= 2, the Jacobian moments for m >= 1.
        let min_order = if self.quantities.contains(&Quantity::PairMoment) { 2.0 } else { 1.0 };
        if self.orders.is_empty() || self.orders.iter().any(|m| !(*m >= min_order && m.is_finite())) {
            return Err(Error::Argument(format!("orders must be non-empty and >= {min_order}")));
        }
        for p in &self.pairs {
            check_points("pairs", &[p.x.clone(), p.y.clone()], d)?;
        }
        if self.quantities.contains(&Quantity::JacSupMoment) {
            check_points("points", &self.points, d)?;
            if self.times.is_empty() || self.times.iter().any(|t| !(*t > 0.0 && *t <= self.mc.horizon)) {
                return Err(Error::Argument("times must be non-empty and lie in (0, horizon]".into()));
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Argument(format!("alpha must lie in (0, 1], got {a}")));
            }
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let alpha = self.alpha.unwrap_or_else(|| stats::default_holder_exponent(b.regularity()));
        let mut table = Table::new(
            "moments",
            &[
                "quantity",
                "m",
                "pair",
                "samples",
                "excluded",
                "value",
                "std_dev",
                "ci_halfwidth",
                "ratio",
            ],
        );
        let mut estimates: Vec<Value> = Vec::new();
        let mut push = |q: &str, pair: i64, e: &MomentEstimate| {
            table.push(vec![
                q.into(),
                e.m.into(),
                pair.into(),
                e.samples.into(),
                e.excluded.into(),
                e.value.into(),
                e.std_dev.into(),
                e.ci_halfwidth.into(),
                e.ratio.unwrap_or(f64::NAN).into(),
            ]);
            let mut v = to_value(e);
            v["pair"] = json!(pair);
            estimates.push(v);
        };
        for q in &self.quantities {
            for m in &self.orders {
                match q {
                    Quantity::PairMoment => {
                        for (i, p) in self.pairs.iter().enumerate() {
                            let e = stats::pair_moment(&*b, &p.x, &p.y, *m, &self.mc)?;
                            push("pair_moment", i as i64, &e);
                        }
                    }
                    Quantity::JacDiffMoment => {
                        for (i, p) in self.pairs.iter().enumerate() {
                            let e = stats::holder_jacobian_diff(&*b, &p.x, &p.y, *m, alpha, &self.mc)?;
                            push("jac_diff_moment", i as i64, &e);
                        }
                    }
                    Quantity::JacSupMoment => {
                        let e = stats::jacobian_sup_moment(&*b, &self.points, &self.times, *m, &self.mc)?;
                        push("jac_sup_moment", -1, &e);
                    }
                }
            }
        }
        let finite = estimates
            .iter()
            .all(|e| e["value"].as_f64().is_some() && e["ci_halfwidth"].as_f64().is_some());
        Ok(Outcome {
            results: json!({ "field": b.name(), "alpha": alpha, "estimates": estimates }),
            tables: vec![table],
            checks: vec![Check::new(
                "finite_estimates",
                finite,
                "every estimate and half-width is finite".into(),
            )],
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// tail

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailConfig {
    pub field: FieldSpec,
    pub mc: McOptions,
    pub tail: TailOptions,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            field: FieldSpec::StandardBump { dim: 2 },
            mc: McOptions {
                n_samples: 200,
                ..McOptions::default()
            },
            tail: TailOptions {
                n_max: 4,
                ..TailOptions::default()
            },
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for TailConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        self.field.build()?;
        self.mc.validate()?;
        if self.tail.thresholds.is_empty() || self.tail.thresholds.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::Argument("thresholds must be non-empty and positive".into()));
        }
        positive("tail.alpha", self.tail.alpha)?;
        positive("tail.budget", self.tail.budget)?;
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let b = self.field.build()?;
        let r = stats::dyadic_tail(&*b, &self.tail, &self.mc)?;
        let mut freq = Table::new("tail", &["threshold", "frequency"]);
        for (k, f) in r.thresholds.iter().zip(&r.frequencies) {
            freq.push(vec![(*k).into(), (*f).into()]);
        }
        let mut sup = Table::new("tail_suprema", &["sample", "supremum"]);
        for (i, s) in r.suprema.iter().enumerate() {
            sup.push(vec![i.into(), (*s).into()]);
        }
        // Pair frequencies with their thresholds in increasing order.
        let mut by_k: Vec<(f64, f64)> = r.thresholds.iter().cloned().zip(r.frequencies.iter().cloned()).collect();
        by_k.sort_by(|a, b| a.0.total_cmp(&b.0));
        let monotone = by_k.windows(2).all(|w| w[1].1 <= w[0].1);
        Ok(Outcome {
            results: json!({
                "field": b.name(),
                "thresholds": r.thresholds,
                "frequencies": r.frequencies,
                "fitted_exponent": r.fitted_exponent,
                "samples": r.samples,
                "excluded": r.excluded,
                "n_max": r.n_max,
                "tau": r.tau,
            }),
            tables: vec![freq, sup],
            checks: vec![Check::new(
                "frequencies_non_increasing",
                monotone,
                "exceedance frequency does not grow with the threshold".into(),
            )],
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// blowup-det

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlowupDetConfig {
    pub radius: f64,
    pub t: f64,
    /// Strictly decreasing, inside `(0, min(radius, 1))`.
    pub cutoffs: Vec<f64>,
    pub profile: DriftProfile,
    /// Expected `d log I / d log eps` for the singular profile.
    pub slope_target: f64,
    pub slope_tolerance: f64,
    /// Relative tolerance of the `int_eps^1 x^{-3/2} dx` quadrature check.
    pub power_law_tolerance: f64,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for BlowupDetConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            t: 1.0,
            cutoffs: vec![1e-2, 1e-3, 1e-4, 1e-5],
            profile: DriftProfile::Counterexample,
            slope_target: -0.5,
            slope_tolerance: 0.05,
            power_law_tolerance: 1e-6,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for BlowupDetConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        positive("radius", self.radius)?;
        positive("t", self.t)?;
        positive("slope_tolerance", self.slope_tolerance)?;
        positive("power_law_tolerance", self.power_law_tolerance)?;
        if self.cutoffs.len() < 2 || self.cutoffs.iter().any(|e| !(*e > 0.0 && *e < self.radius.min(1.0))) {
            return Err(Error::Argument("need at least two cutoffs in (0, min(radius, 1))".into()));
        }
        if self.cutoffs.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Argument("cutoffs must be strictly decreasing".into()));
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let cert = blowup::deterministic_blowup(self.radius, self.t, &self.cutoffs, self.profile)?;
        let mut table = Table::new(
            "blowup_det",
            &[
                "eps",
                "x_integral",
                "truncated_integral",
                "power_law_quadrature",
                "power_law_exact",
            ],
        );
        let mut worst_rel: f64 = 0.0;
        for (i, eps) in self.cutoffs.iter().enumerate() {
            let (q, exact) = blowup::power_law_check(*eps)?;
            worst_rel = worst_rel.max(((q - exact) / exact).abs());
            table.push(vec![
                (*eps).into(),
                cert.x_integrals[i].into(),
                cert.truncated_integrals[i].into(),
                q.into(),
                exact.into(),
            ]);
        }
        let mut checks = vec![Check::new(
            "power_law_quadrature",
            worst_rel <= self.power_law_tolerance,
            format!("relative error {worst_rel:.2e} <= {:.0e}", self.power_law_tolerance),
        )];
        match self.profile {
            DriftProfile::Counterexample => checks.push(Check::new(
                "slope",
                (cert.fitted_slope - self.slope_target).abs() <= self.slope_tolerance,
                format!(
                    "fitted slope {:.4} within {} +- {}",
                    cert.fitted_slope, self.slope_target, self.slope_tolerance
                ),
            )),
            DriftProfile::Lipschitz => checks.push(Check::new(
                "bounded",
                cert.verdict == Verdict::Bounded,
                format!("fitted slope {:.4}, verdict {:?}", cert.fitted_slope, cert.verdict),
            )),
        }
        Ok(Outcome {
            results: json!({ "certificate": to_value(&cert), "power_law_max_relative_error": worst_rel }),
            tables: vec![table],
            checks,
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// blowup-stoch

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlowupStochConfig {
    pub t: f64,
    pub cutoffs: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Largest accepted `|mc - reference| / ci` at the smallest cutoff.
    pub agreement_factor: f64,
    /// Largest accepted change of the estimate between cutoffs, in CI units.
    pub drift_factor: f64,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for BlowupStochConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            cutoffs: vec![1e-4, 1e-5, 1e-6],
            n_samples: 10_000,
            seed: 1,
            agreement_factor: 3.0,
            drift_factor: blowup::STABILITY_CI_FACTOR,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for BlowupStochConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        positive("t", self.t)?;
        positive("agreement_factor", self.agreement_factor)?;
        positive("drift_factor", self.drift_factor)?;
        if self.n_samples < 1000 {
            return Err(Error::Argument("n_samples must be at least 1000".into()));
        }
        if self.cutoffs.len() < 2 || self.cutoffs.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::Argument("need at least two cutoffs in (0, 1)".into()));
        }
        if self.cutoffs.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Argument("cutoffs must be strictly decreasing".into()));
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let r = blowup::stochastic_finiteness(self.t, &self.cutoffs, self.n_samples, self.seed)?;
        let mut table = Table::new("blowup_stoch", &["eps", "mc_estimate", "ci_halfwidth", "quadrature_reference"]);
        for (i, eps) in r.cutoffs.iter().enumerate() {
            table.push(vec![
                (*eps).into(),
                r.mc_estimates[i].into(),
                r.ci_halfwidths[i].into(),
                r.quadrature_reference[i].into(),
            ]);
        }
        let top = r
            .mc_estimates
            .iter()
            .chain(&r.quadrature_reference)
            .chain(std::iter::once(&r.reference_untruncated))
            .cloned()
            .fold(0.0f64, f64::max);
        let checks = vec![
            Check::new(
                "agreement",
                r.agreement_in_ci <= self.agreement_factor,
                format!("|mc - reference| = {:.3} CI <= {}", r.agreement_in_ci, self.agreement_factor),
            ),
            Check::new(
                "stability",
                r.max_drift_in_ci < self.drift_factor,
                format!("largest drift {:.3} CI < {}", r.max_drift_in_ci, self.drift_factor),
            ),
            Check::new(
                "majorant_dominates",
                r.majorant.value >= top,
                format!("majorant {:.4} >= {top:.4}", r.majorant.value),
            ),
        ];
        Ok(Outcome {
            results: to_value(&r),
            tables: vec![table],
            checks,
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// contrast

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastCommandConfig {
    pub contrast: ContrastConfig,
    pub slope_target: f64,
    pub slope_tolerance: f64,
    pub min_plateau_fraction: f64,
    pub workers: usize,
    pub output: OutputSpec,
}

impl Default for ContrastCommandConfig {
    fn default() -> Self {
        Self {
            contrast: ContrastConfig::default(),
            slope_target: -0.5,
            slope_tolerance: 0.1,
            min_plateau_fraction: 0.95,
            workers: 1,
            output: OutputSpec::default(),
        }
    }
}

impl CommandConfig for ContrastCommandConfig {
    envelope!();

    fn validate(&self) -> Result<()> {
        self.contrast.validate()?;
        positive("slope_tolerance", self.slope_tolerance)?;
        if !(0.0..=1.0).contains(&self.min_plateau_fraction) {
            return Err(Error::Argument("min_plateau_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn execute(&self) -> Result<Outcome> {
        let r = blowup::end_to_end_contrast(&self.contrast)?;
        let mut curves = Table::new("contrast", &["eps", "det_shear", "det_chain_rule"]);
        for (i, eps) in r.cutoffs.iter().enumerate() {
            curves.push(vec![
                (*eps).into(),
                r.deterministic.shear[i].into(),
                r.deterministic.chain_rule[i].into(),
            ]);
        }
        let mut paths = Table::new("contrast_paths", &["path", "eps", "shear", "chain_rule"]);
        let mut slopes = Table::new("contrast_slopes", &["path", "slope", "masked_fraction"]);
        for (p, c) in r.stochastic.iter().enumerate() {
            for (i, eps) in r.cutoffs.iter().enumerate() {
                paths.push(vec![p.into(), (*eps).into(), c.shear[i].into(), c.chain_rule[i].into()]);
            }
            slopes.push(vec![p.into(), r.stochastic_slopes[p].into(), c.masked_fraction.into()]);
        }
        let checks = vec![
            Check::new(
                "det_slope",
                (r.det_slope - self.slope_target).abs() <= self.slope_tolerance,
                format!(
                    "deterministic slope {:.4} within {} +- {}",
                    r.det_slope, self.slope_target, self.slope_tolerance
                ),
            ),
            Check::new(
                "plateau",
                r.plateau_fraction >= self.min_plateau_fraction,
                format!("plateau fraction {:.3} >= {}", r.plateau_fraction, self.min_plateau_fraction),
            ),
        ];
        Ok(Outcome {
            results: json!({
                "t": r.t,
                "cutoffs": r.cutoffs,
                "det_slope": r.det_slope,
                "det_solution_slope": r.det_solution_slope,
                "plateau_fraction": r.plateau_fraction,
                "verdict_deterministic": r.verdict_deterministic,
                "deterministic": to_value(&r.deterministic),
                "stochastic_slopes": r.stochastic_slopes,
            }),
            tables: vec![curves, paths, slopes],
            checks,
            warnings: Vec::new(),
        })
    }
}
