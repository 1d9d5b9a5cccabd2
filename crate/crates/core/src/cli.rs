//! Command-line front end: JSON run configs, overrides, artifacts and exit codes.
//!
//! Exit status is 0 on success, 2 when a solve did not converge and 1 on any
//! input or configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counterexamples::{self, WitnessFamily, DEFAULT_LADDER};
use crate::densities::{self, DensitySpec};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::format::{self, AxisSpec, Encoding};
use crate::grid::{self, GridSpec, MarginalSet, ScalarField, Scheme};
use crate::json;
use crate::oracle;
use crate::solver::{self, Init, SolveOptions, SolveReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;
pub const THREADS_ENV: &str = "LPMARG_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Bound,
    OracleCompare,
    CheckWeight,
    Counterexample,
    DemoP2Hypercube,
    Sweep,
}

/// Either explicit axes or a uniform cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<AxisSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default)]
    pub scheme: Scheme,
}

impl GridConfig {
    pub fn uniform(dims: usize, lower: f64, upper: f64, nodes: usize) -> Self {
        GridConfig {
            axes: None,
            dims: Some(dims),
            lower: Some(lower),
            upper: Some(upper),
            nodes: Some(nodes),
            scheme: Scheme::Midpoint,
        }
    }

    pub fn build(&self) -> Result<GridSpec> {
        let axes = match &self.axes {
            Some(specs) => format::build_axes(specs).map_err(|e| keyed("grid.axes", e))?,
            None => {
                let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::config(k, "required without grid.axes"));
                let dims = self.dims.ok_or_else(|| Error::config("grid.dims", "required without grid.axes"))?;
                let nodes = self.nodes.ok_or_else(|| Error::config("grid.nodes", "required without grid.axes"))?;
                let lower = need(self.lower, "grid.lower")?;
                let upper = need(self.upper, "grid.upper")?;
                let axis = grid::Axis::new(lower, upper, nodes, self.scheme).map_err(|e| keyed("grid", e))?;
                vec![axis; dims]
            }
        };
        GridSpec::new(axes).map_err(|e| keyed("grid", e))
    }
}

/// Source of the prescribed marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalSpec {
    /// Marginals of a closed-form `g` against the density.
    Expr { expr: Expr },
    /// Marginals of a tabulated `g` field (same grid).
    Field { path: PathBuf },
    /// Marginal tables read directly from a marginals file.
    File { path: PathBuf },
    /// Marginals of a seeded smooth positive field; `seed` defaults to the run seed.
    Smooth {
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDensity {
    pub name: String,
    pub density: DensitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub p_values: Vec<f64>,
    pub densities: Vec<NamedDensity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CounterexampleKind {
    Smirnov,
    Uniqueness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub kind: CounterexampleKind,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<usize>,
    /// Grid nodes per unit block.
    #[serde(default = "default_per_block")]
    pub per_block: usize,
    /// Run the p = 2 solver on the uniqueness instance.
    #[serde(default = "default_true")]
    pub solve: bool,
}

fn default_q() -> f64 {
    2.0
}
fn default_k() -> usize {
    512
}
fn default_ladder() -> Vec<usize> {
    DEFAULT_LADDER.to_vec()
}
fn default_per_block() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_p() -> f64 {
    2.0
}
fn default_oracle_tol() -> f64 {
    1e-12
}
fn default_threshold() -> f64 {
    densities::DEFAULT_RATIO_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypercubeConfig {
    pub n: usize,
    #[serde(rename = "N")]
    pub nodes: usize,
}

/// A complete, reproducible run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<MarginalSpec>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
    #[serde(default = "default_threshold")]
    pub ratio_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<CounterexampleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypercube: Option<HypercubeConfig>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            grid: None,
            density: None,
            marginals: None,
            p: default_p(),
            solver: SolveOptions::default(),
            oracle_tol: default_oracle_tol(),
            ratio_threshold: default_threshold(),
            output: None,
            seed: 0,
            sweep: None,
            counterexample: None,
            hypercube: None,
        }
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(DensitySpec::Tabulated { path }) = &mut self.density {
            fix(path);
        }
        match &mut self.marginals {
            Some(MarginalSpec::Field { path }) | Some(MarginalSpec::File { path }) => fix(path),
            _ => {}
        }
        if let Some(out) = &mut self.output {
            fix(out);
        }
        if let Some(s) = &mut self.sweep {
            for d in &mut s.densities {
                if let DensitySpec::Tabulated { path } = &mut d.density {
                    fix(path);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::config("p", format!("need finite p > 1, got {}", self.p)));
        }
        self.solver.validate()?;
        if !(self.oracle_tol > 0.0) {
            return Err(Error::config("oracle_tol", "must be positive"));
        }
        if let Some(DensitySpec::Tabulated { path }) = &self.density {
            if !path.exists() {
                return Err(Error::config("density.path", format!("{} does not exist", path.display())));
            }
        }
        if let Some(MarginalSpec::Field { path } | MarginalSpec::File { path }) = &self.marginals {
            if !path.exists() {
                return Err(Error::config("marginals.path", format!("{} does not exist", path.display())));
            }
        }
        let needs_problem = matches!(
            self.command,
            Command::Solve | Command::Bound | Command::OracleCompare | Command::Sweep
        );
        if needs_problem {
            if self.grid.is_none() {
                return Err(Error::config("grid", "required for this command"));
            }
            if self.marginals.is_none() {
                return Err(Error::config("marginals", "required for this command"));
            }
        }
        if matches!(self.command, Command::Solve | Command::Bound | Command::OracleCompare | Command::CheckWeight)
            && self.density.is_none()
        {
            return Err(Error::config("density", "required for this command"));
        }
        if self.command == Command::CheckWeight && self.grid.is_none() {
            return Err(Error::config("grid", "required for this command"));
        }
        if self.command == Command::Sweep {
            let s = self.sweep.as_ref().ok_or_else(|| Error::config("sweep", "required for sweep"))?;
            if s.p_values.is_empty() || s.densities.is_empty() {
                return Err(Error::config("sweep", "need at least one p and one density"));
            }
            if let Some(p) = s.p_values.iter().find(|p| !(**p > 1.0 && p.is_finite())) {
                return Err(Error::config("sweep.p_values", format!("need p > 1, got {p}")));
            }
        }
        if self.command == Command::Counterexample && self.counterexample.is_none() {
            return Err(Error::config("counterexample", "required for counterexample"));
        }
        if self.command == Command::DemoP2Hypercube {
            let h = self
                .hypercube
                .as_ref()
                .ok_or_else(|| Error::config("hypercube", "required for demo-p2-hypercube"))?;
            if h.n < 2 {
                return Err(Error::config("hypercube.n", "need n >= 2"));
            }
            if h.nodes < 1 {
                return Err(Error::config("hypercube.N", "need N >= 1"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let text = json::to_string(self)?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

/// Rewrites an error as a config error under `key`, keeping its message.
pub fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    }
}

/// Weighted marginals of the configured `g` against `w`.
pub fn generate_marginals(spec: &MarginalSpec, w: &ScalarField, seed: u64) -> Result<MarginalSet> {
    let grid = w.grid();
    match spec {
        MarginalSpec::Expr { expr } => {
            expr.check_dims(grid.dims(), "marginals.expr")?;
            let g = ScalarField::from_fn(grid.clone(), |x| expr.eval(x)).map_err(|e| keyed("marginals.expr", e))?;
            MarginalSet::from_field(&g, w).map_err(|e| keyed("marginals.expr", e))
        }
        MarginalSpec::Field { path } => {
            let g = format::read_field(path).map_err(|e| keyed("marginals.path", e))?;
            if **g.grid() != **grid {
                return Err(Error::config("marginals.path", "field grid differs from the problem grid"));
            }
            let g = ScalarField::new(grid.clone(), g.into_values())?;
            MarginalSet::from_field(&g, w).map_err(|e| keyed("marginals.path", e))
        }
        MarginalSpec::File { path } => {
            let tables = format::read_marginals(path, grid).map_err(|e| keyed("marginals.path", e))?;
            MarginalSet::new(grid, tables).map_err(|e| keyed("marginals.path", e))
        }
        MarginalSpec::Smooth { seed: s } => {
            let g = oracle::smooth_positive_field(grid, s.unwrap_or(seed))?;
            MarginalSet::from_field(&g, w)
        }
    }
}

/// Common envelope of every JSON artifact.
#[derive(Debug, Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    pub config_hash: &'a str,
    pub seed: u64,
    pub truncated: bool,
    pub truncated_axes: Vec<bool>,
    pub result: T,
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub converged: bool,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            EXIT_OK
        } else {
            EXIT_NONCONVERGED
        }
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    hash: String,
    out: Option<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let out = cfg.output.clone();
        if let Some(dir) = &out {
            fs::create_dir_all(dir).map_err(|e| keyed("output", Error::io(dir, e)))?;
        }
        Ok(Ctx {
            cfg,
            hash: cfg.hash()?,
            out,
            artifacts: Vec::new(),
        })
    }

    fn write_json<T: Serialize>(&mut self, name: &str, grid: Option<&GridSpec>, result: T) -> Result<String> {
        let truncated_axes: Vec<bool> = grid.map(|g| g.axes().iter().map(|a| a.truncated()).collect()).unwrap_or_default();
        let art = Artifact {
            tool: "lpmarg",
            version: env!("CARGO_PKG_VERSION"),
            command: self.cfg.command,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            truncated: truncated_axes.iter().any(|t| *t),
            truncated_axes,
            result,
        };
        let text = json::to_string(&art)?;
        if let Some(dir) = &self.out {
            let path = dir.join(name);
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            self.artifacts.push(path);
        }
        Ok(text)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            self.artifacts.push(path);
        }
        Ok(())
    }

    fn write_field(&mut self, name: &str, field: &ScalarField) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(name);
            format::write_field(field, &path, Encoding::Csv)?;
            self.artifacts.push(path.with_extension("csv"));
            self.artifacts.push(path);
        }
        Ok(())
    }
}

struct Problem {
    grid: Arc<GridSpec>,
    density: densities::Density,
    marginals: MarginalSet,
}

fn build_problem(cfg: &RunConfig, density: &DensitySpec) -> Result<Problem> {
    let grid = Arc::new(cfg.grid.as_ref().ok_or_else(|| Error::config("grid", "missing"))?.build()?);
    let density = density.assemble(&grid).map_err(|e| keyed("density", e))?;
    let spec = cfg.marginals.as_ref().ok_or_else(|| Error::config("marginals", "missing"))?;
    let marginals = generate_marginals(spec, &density.field, cfg.seed)?;
    Ok(Problem {
        grid,
        density,
        marginals,
    })
}

fn solve(cfg: &RunConfig, pb: &Problem, p: f64) -> Result<(solver::MultiplierSet, SolveReport)> {
    let r = if p == 2.0 && matches!(cfg.solver.init, Init::FromP2) {
        solver::solve_p2(&pb.density.field, &pb.marginals)
    } else {
        solver::solve_newton(&pb.density.field, &pb.marginals, p, &cfg.solver)
    };
    r.map_err(|e| match e {
        Error::Input(m) => Error::config("marginals", m),
        other => keyed("solver", other),
    })
}

fn report_summary(rep: &SolveReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "p                 {}", rep.p);
    let _ = writeln!(s, "converged         {}", rep.converged);
    let _ = writeln!(s, "iterations        {}", rep.iterations);
    let _ = writeln!(s, "residual (sup)    {:.3e}", rep.final_residual_inf);
    let _ = writeln!(s, "bound ||h||_p^p   {}", json::fmt_f64(rep.bound_value));
    for w in &rep.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[derive(Serialize)]
struct SolveArtifact<'a> {
    report: &'a SolveReport,
    multipliers: &'a solver::MultiplierSet,
}

fn cmd_solve(cfg: &RunConfig, ctx: &mut Ctx, full: bool) -> Result<Outcome> {
    let density = cfg.density.as_ref().ok_or_else(|| Error::config("density", "missing"))?;
    let pb = build_problem(cfg, density)?;
    let (phi, rep) = solve(cfg, &pb, cfg.p)?;
    let summary = report_summary(&rep);
    if full {
        ctx.write_json("report.json", Some(&pb.grid), SolveArtifact { report: &rep, multipliers: &phi })?;
        let h = solver::reconstruct_minimizer(&phi, &pb.grid)?;
        ctx.write_field("h_star.json", &h)?;
        if let Some(dir) = &ctx.out {
            let path = dir.join("marginals.json");
            format::write_marginals(&pb.grid, pb.marginals.tables(), &path)?;
            ctx.artifacts.push(path);
        }
    } else {
        #[derive(Serialize)]
        struct Bound<'a> {
            bound_value: f64,
            norm: f64,
            converged: bool,
            final_residual_inf: f64,
            warnings: &'a [String],
        }
        ctx.write_json(
            "bound.json",
            Some(&pb.grid),
            Bound {
                bound_value: rep.bound_value,
                norm: rep.bound_value.powf(1.0 / cfg.p),
                converged: rep.converged,
                final_residual_inf: rep.final_residual_inf,
                warnings: &rep.warnings,
            },
        )?;
    }
    ctx.write_text("summary.txt", &summary)?;
    Ok(Outcome {
        converged: rep.converged,
        summary,
        artifacts: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub p: f64,
    pub oracle_value: f64,
    pub solver_value: f64,
    pub abs_diff: f64,
    pub rel_diff: f64,
    pub solver_converged: bool,
    pub oracle_converged: bool,
    pub solver_iterations: usize,
    pub oracle_iterations: usize,
}

fn compare(cfg: &RunConfig, pb: &Problem, p: f64) -> Result<OracleComparison> {
    let (_, rep) = solve(cfg, pb, p)?;
    let (_, o) = oracle::min_norm_direct(&pb.density.field, &pb.marginals, p, cfg.oracle_tol)
        .map_err(|e| keyed("oracle_tol", e))?;
    let abs_diff = (o.value - rep.bound_value).abs();
    Ok(OracleComparison {
        p,
        oracle_value: o.value,
        solver_value: rep.bound_value,
        abs_diff,
        rel_diff: abs_diff / (1.0 + o.value.abs()),
        solver_converged: rep.converged,
        oracle_converged: o.converged,
        solver_iterations: rep.iterations,
        oracle_iterations: o.iterations,
    })
}

fn cmd_oracle_compare(cfg: &RunConfig, ctx: &mut Ctx) -> Result<Outcome> {
    let density = cfg.density.as_ref().ok_or_else(|| Error::config("density", "missing"))?;
    let pb = build_problem(cfg, density)?;
    let c = compare(cfg, &pb, cfg.p)?;
    let summary = format!(
        "oracle {}  solver {}  abs diff {:.3e}  rel diff {:.3e}\n",
        json::fmt_f64(c.oracle_value),
        json::fmt_f64(c.solver_value),
        c.abs_diff,
        c.rel_diff
    );
    ctx.write_json("oracle_compare.json", Some(&pb.grid), &c)?;
    ctx.write_text("summary.txt", &summary)?;
    Ok(Outcome {
        converged: c.solver_converged && c.oracle_converged,
        summary,
        artifacts: Vec::new(),
    })
}

fn cmd_check_weight(cfg: &RunConfig, ctx: &mut Ctx) -> Result<Outcome> {
    let spec = cfg.density.as_ref().ok_or_else(|| Error::config("density", "missing"))?;
    let grid = Arc::new(cfg.grid.as_ref().ok_or_else(|| Error::config("grid", "missing"))?.build()?);
    let mut report = densities::check_weight_conditions(spec, &grid, cfg.p, cfg.ratio_threshold)
        .map_err(|e| keyed("density", e))?;
    let density = spec.assemble(&grid).map_err(|e| keyed("density", e))?;
    if let DensitySpec::Diagonal(d) = spec {
        if d.alpha > 0.0 && d.theta.is_none() && d.background.is_none() {
            let per_block = densities::check_block_alignment(&grid, d.k).map_err(|e| keyed("grid", e))?;
            let ks: Vec<usize> = [d.k / 4, d.k / 2, d.k].into_iter().filter(|k| *k >= 1).collect();
            report = report.with_growth(densities::diagonal_ratio_growth(d.alpha, &ks, per_block)?);
        }
    }
    let class = densities::classify_smirnov(&density, Some(&report), None);
    #[derive(Serialize)]
    struct CheckWeight<'a> {
        report: &'a densities::WeightConditionReport,
        classification: densities::SmirnovClass,
    }
    let mut summary = String::new();
    for a in &report.axes {
        let _ = writeln!(
            summary,
            "axis {}: ||ratio||_p = {:.6}  max ratio = {:.6}  (refined {:.6})",
            a.axis, a.lp_norm, a.max_ratio, a.max_ratio_refined
        );
    }
    let _ = writeln!(summary, "classification: {class:?}");
    ctx.write_json("weight_report.json", Some(&grid), CheckWeight { report: &report, classification: class })?;
    ctx.write_text("summary.txt", &summary)?;
    Ok(Outcome {
        converged: true,
        summary,
        artifacts: Vec::new(),
    })
}

fn cmd_counterexample(cfg: &RunConfig, ctx: &mut Ctx) -> Result<Outcome> {
    let ce = cfg.counterexample.as_ref().ok_or_else(|| Error::config("counterexample", "missing"))?;
    let ws = counterexamples::build_witness(ce.q, ce.k, WitnessFamily::PowerLaw).map_err(|e| keyed("counterexample.q", e))?;
    if ce.per_block < 1 {
        return Err(Error::config("counterexample.per_block", "need at least one node per block"));
    }
    let grid = Arc::new(densities::block_grid(ce.k, ce.per_block).map_err(|e| keyed("counterexample.K", e))?);
    let mut summary = String::new();
    match ce.kind {
        CounterexampleKind::Smirnov => {
            if !(0.0..1.0).contains(&ce.alpha) {
                return Err(Error::config("counterexample.alpha", "must lie in [0, 1)"));
            }
            let r = counterexamples::smirnov_violation_report(&ws, ce.alpha, None, &grid, &ce.ladder)
                .map_err(|e| keyed("counterexample.ladder", e))?;
            let _ = writeln!(summary, "{}", r.witness.summary());
            if r.study_mode {
                let _ = writeln!(summary, "alpha = 0: study mode, density vanishes off the diagonal blocks");
            }
            for (k, s) in r.certificate.ladder.iter().zip(&r.certificate.partial_sums) {
                let _ = writeln!(summary, "K = {k:>6}  S_K = {}", json::fmt_f64(*s));
            }
            let _ = writeln!(summary, "certified: {}", r.certificate.certified);
            #[derive(Serialize)]
            struct Smirnov<'a> {
                sequences: &'a counterexamples::WitnessSequences,
                report: &'a counterexamples::SmirnovViolationReport,
            }
            ctx.write_json("certificate.json", Some(&grid), Smirnov { sequences: &ws, report: &r })?;
        }
        CounterexampleKind::Uniqueness => {
            if ce.alpha != 0.0 {
                return Err(Error::config("counterexample.alpha", "the uniqueness study uses alpha = 0"));
            }
            let nw = counterexamples::nonuniqueness_witness(&ws, &grid, &ce.ladder)
                .map_err(|e| keyed("counterexample.q", e))?;
            let solve = if ce.solve {
                let zero = MarginalSet::zeros(&grid);
                let (_, rep) = solver::solve_p2(&nw.density, &zero)?;
                let sys = solver::MarginalSystem::new(&nw.density, &zero, 2.0)?;
                let witness_residual = sys.residual_report(&nw.multipliers().phi.concat()).sup;
                Some(UniquenessSolve {
                    singular_value_ratio: rep.singular_value_ratio.unwrap_or(f64::NAN),
                    null_vector_emitted: rep.nonuniqueness.is_some(),
                    zero_solution_residual: rep.final_residual_inf,
                    witness_residual,
                    warnings: rep.warnings,
                })
            } else {
                None
            };
            let r = &nw.residuals;
            let _ = writeln!(summary, "eq1 {:.3e}  eq2 {:.3e}  eq3 {:.3e}", r.eq1, r.eq2, r.eq3);
            let _ = writeln!(summary, "max |f_i| = {}  sup |f + g| on support = {:.3e}", json::fmt_f64(r.f_sup), r.sum_on_support);
            if let Some(s) = &solve {
                let _ = writeln!(
                    summary,
                    "p = 2 system: sigma_min/sigma_max = {:.3e}, null vector emitted: {}",
                    s.singular_value_ratio, s.null_vector_emitted
                );
            }
            #[derive(Serialize)]
            struct Uniqueness<'a> {
                alpha: f64,
                study_mode: bool,
                sequences: &'a counterexamples::WitnessSequences,
                residuals: &'a counterexamples::NonuniquenessResiduals,
                solve: Option<UniquenessSolve>,
            }
            ctx.write_json(
                "certificate.json",
                Some(&grid),
                Uniqueness {
                    alpha: 0.0,
                    study_mode: true,
                    sequences: &nw.sequences,
                    residuals: &nw.residuals,
                    solve,
                },
            )?;
        }
    }
    ctx.write_text("summary.txt", &summary)?;
    Ok(Outcome {
        converged: true,
        summary,
        artifacts: Vec::new(),
    })
}

#[derive(Debug, Serialize)]
struct UniquenessSolve {
    singular_value_ratio: f64,
    null_vector_emitted: bool,
    zero_solution_residual: f64,
    witness_residual: f64,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct HypercubeDemo {
    pub n: usize,
    #[serde(rename = "N")]
    pub nodes: usize,
    pub bound: f64,
    /// `sum_i int g_i^2 - (n - 1) (int g)^2` for the continuum marginals.
    pub closed_form: f64,
    pub difference: f64,
    /// The same expression evaluated with grid quadrature.
    pub closed_form_grid: f64,
    pub converged: bool,
}

/// `g = (2/n) sum_i x_i` on the uniform unit cube `[0, 1]^n`, p = 2.
pub fn hypercube_demo(n: usize, nodes: usize) -> Result<HypercubeDemo> {
    let grid = Arc::new(GridSpec::uniform(n, 0.0, 1.0, nodes)?);
    let w = DensitySpec::uniform(n).assemble(&grid)?.field;
    let c = 2.0 / n as f64;
    let g = ScalarField::from_fn(grid.clone(), |x| c * x.iter().sum::<f64>())?;
    let gm = MarginalSet::from_field(&g, &w)?;
    let (_, rep) = solver::solve_p2(&w, &gm)?;
    // g_i(x) = c x + c (n - 1) / 2, so int g_i^2 = c^2 / 3 + c^2 (n - 1) / 2 + c^2 (n - 1)^2 / 4
    let nf = n as f64;
    let gi2 = c * c * (1.0 / 3.0 + (nf - 1.0) / 2.0 + (nf - 1.0) * (nf - 1.0) / 4.0);
    let closed_form = nf * gi2 - (nf - 1.0);
    let total = grid::integrate(&g, &w)?;
    let grid_gi2: f64 = (0..n)
        .map(|i| {
            let sq: Vec<f64> = gm.table(i).iter().map(|v| v * v).collect();
            grid.axis(i).quadrature(&sq)
        })
        .sum();
    let closed_form_grid = grid_gi2 - (nf - 1.0) * total * total;
    Ok(HypercubeDemo {
        n,
        nodes,
        bound: rep.bound_value,
        closed_form,
        difference: rep.bound_value - closed_form,
        closed_form_grid,
        converged: rep.converged,
    })
}

fn cmd_hypercube(cfg: &RunConfig, ctx: &mut Ctx) -> Result<Outcome> {
    let h = cfg.hypercube.as_ref().ok_or_else(|| Error::config("hypercube", "missing"))?;
    let d = hypercube_demo(h.n, h.nodes).map_err(|e| keyed("hypercube", e))?;
    let summary = format!(
        "n = {}, N = {}\nbound        {}\nclosed form  {}\ndifference   {:.3e}\n",
        d.n,
        d.nodes,
        json::fmt_f64(d.bound),
        json::fmt_f64(d.closed_form),
        d.difference
    );
    ctx.write_json("hypercube.json", None, &d)?;
    ctx.write_text("summary.txt", &summary)?;
    Ok(Outcome {
        converged: d.converged,
        summary,
        artifacts: Vec::new(),
    })
}

/// One CSV row per (p, density).
pub fn sweep_rows(cfg: &RunConfig) -> Result<Vec<(f64, String, OracleComparison)>> {
    let s = cfg.sweep.as_ref().ok_or_else(|| Error::config("sweep", "missing"))?;
    let mut rows = Vec::new();
    for (j, nd) in s.densities.iter().enumerate() {
        let pb = build_problem(cfg, &nd.density).map_err(|e| keyed(&format!("sweep.densities[{j}]"), e))?;
        for &p in &s.p_values {
            rows.push((p, nd.name.clone(), compare(cfg, &pb, p)?));
        }
    }
    Ok(rows)
}

fn cmd_sweep(cfg: &RunConfig, ctx: &mut Ctx) -> Result<Outcome> {
    let rows = sweep_rows(cfg)?;
    let mut csv = String::from("p,density,bound,oracle_value,rel_diff,iterations\n");
    let mut converged = true;
    for (p, name, c) in &rows {
        converged &= c.solver_converged;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            json::fmt_f64(*p),
            name,
            json::fmt_f64(c.solver_value),
            json::fmt_f64(c.oracle_value),
            json::fmt_f64(c.rel_diff),
            c.solver_iterations
        );
    }
    let grid = cfg.grid.as_ref().map(|g| g.build()).transpose()?;
    ctx.write_text("sweep.csv", &csv)?;
    let table: Vec<&OracleComparison> = rows.iter().map(|r| &r.2).collect();
    ctx.write_json("sweep.json", grid.as_ref(), table)?;
    Ok(Outcome {
        converged,
        summary: csv,
        artifacts: Vec::new(),
    })
}

/// Executes a validated config.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut ctx = Ctx::new(cfg)?;
    let mut outcome = match cfg.command {
        Command::Solve => cmd_solve(cfg, &mut ctx, true),
        Command::Bound => cmd_solve(cfg, &mut ctx, false),
        Command::OracleCompare => cmd_oracle_compare(cfg, &mut ctx),
        Command::CheckWeight => cmd_check_weight(cfg, &mut ctx),
        Command::Counterexample => cmd_counterexample(cfg, &mut ctx),
        Command::DemoP2Hypercube => cmd_hypercube(cfg, &mut ctx),
        Command::Sweep => cmd_sweep(cfg, &mut ctx),
    }?;
    outcome.artifacts = ctx.artifacts;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    FromP2,
    FromMarginalRatio,
    Zeros,
}

/// Overrides applied on top of a config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long)]
    pub homotopy_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = self.p {
            cfg.p = p;
        }
        if let Some(t) = self.tol {
            cfg.solver.tol_residual = t;
        }
        if let Some(m) = self.max_iter {
            cfg.solver.max_iter = m;
        }
        if let Some(e) = self.eps {
            cfg.solver.smoothing_eps = e;
        }
        if let Some(i) = self.init {
            cfg.solver.init = match i {
                InitArg::FromP2 => Init::FromP2,
                InitArg::FromMarginalRatio => Init::FromMarginalRatio,
                InitArg::Zeros => Init::Zeros,
            };
        }
        if let Some(h) = self.homotopy_steps {
            cfg.solver.homotopy_steps = Some(h);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lpmarg", version, about = "Sharp lower bounds for weighted Lp norms with prescribed marginals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Run whatever command the config names.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve the multiplier equations and write h_*, multipliers and the report.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve and report only the bound.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare the solver bound with the direct minimization.
    OracleCompare {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Estimate likelihood ratios and classify the density.
    CheckWeight {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Emit counterexample certificates on the diagonal block density.
    Counterexample {
        #[arg(value_enum)]
        kind: CounterexampleKind,
        #[arg(long, default_value_t = 2.0)]
        q: f64,
        #[arg(long = "K", default_value_t = 512)]
        k: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Comma-separated truncation lengths.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LADDER.to_vec())]
        ladder: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        per_block: usize,
        /// Skip the p = 2 solve of the uniqueness instance.
        #[arg(long)]
        no_solve: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// p = 2 bound for g = (2/n) sum x_i on the uniform unit cube against its closed form.
    DemoP2Hypercube {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long = "N", default_value_t = 64)]
        nodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CSV of bound and oracle value over p values and densities.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn from_file(path: &Path, command: Option<Command>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(c) = command {
        cfg.command = c;
    }
    overrides.apply(&mut cfg);
    Ok(cfg)
}

/// Builds the run config a command line describes.
pub fn config_from_cli(cli: &Cli) -> Result<RunConfig> {
    Ok(match &cli.command {
        CliCommand::Run { config, overrides } => from_file(config, None, overrides)?,
        CliCommand::Solve { config, overrides } => from_file(config, Some(Command::Solve), overrides)?,
        CliCommand::Bound { config, overrides } => from_file(config, Some(Command::Bound), overrides)?,
        CliCommand::OracleCompare { config, overrides } => from_file(config, Some(Command::OracleCompare), overrides)?,
        CliCommand::CheckWeight { config, overrides } => from_file(config, Some(Command::CheckWeight), overrides)?,
        CliCommand::Sweep { config, overrides } => from_file(config, Some(Command::Sweep), overrides)?,
        CliCommand::Counterexample {
            kind,
            q,
            k,
            alpha,
            ladder,
            per_block,
            no_solve,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::new(Command::Counterexample);
            cfg.counterexample = Some(CounterexampleConfig {
                kind: *kind,
                q: *q,
                k: *k,
                alpha: *alpha,
                ladder: ladder.clone(),
                per_block: *per_block,
                solve: !no_solve,
            });
            cfg.seed = seed.unwrap_or(0);
            cfg.output = out.clone();
            cfg
        }
        CliCommand::DemoP2Hypercube { n, nodes, out } => {
            let mut cfg = RunConfig::new(Command::DemoP2Hypercube);
            cfg.hypercube = Some(HypercubeConfig { n: *n, nodes: *nodes });
            cfg.output = out.clone();
            cfg
        }
    })
}

/// Configures the global thread pool from `LPMARG_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config(THREADS_ENV, format!("not a thread count: {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(THREADS_ENV, e.to_string()))?;
    }
    Ok(())
}

/// Parses arguments, runs, prints the summary and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = init_threads().and_then(|_| config_from_cli(&cli)).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            if !outcome.converged {
                eprintln!("error: did not converge");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}
