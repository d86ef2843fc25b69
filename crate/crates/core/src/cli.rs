//! Command-line front end: JSON configs in, CSV/JSON artifacts and a run manifest out.
//!
//! Exit codes: `0` success, `1` I/O failure, `2` configuration or usage error, `3` numerical
//! failure. Errors are reported on stderr as one JSON object.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::atc::{
    atc_run, noise_gain_trace, synth_problem, AtcConfig, AtcResult, AtcVariant, DEF_DAMPING,
};
use crate::design::{
    design_fir, design_iir, nonreg_iir_init, tune_iir_gamma, DesignReport, DesignTarget, FirDesignMode,
    IirDesignMode, IirDesignOptions,
};
use crate::error::{Error, Result};
use crate::filters::{Filter, FilterSpec, IirSpec};
use crate::gramians::{expected_fir_grams, fir_grams, solve_lyapunov_deterministic, solve_w_p, solve_w_phi, EdgeModel};
use crate::graphs::{benchmark_sensor_graph, gen_sensor_graph, Graph, ShiftKind, ShiftOperator};
use crate::linalg::{CMat, Mat};
use crate::qef::FeedbackPlan;
use crate::quant::QuantizerConfig;
use crate::qef::Scenario;
use crate::sim::{ScenarioResult, SimConfig, Simulation};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "gqef", version, about = "Quantized graph filtering with error feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config, or a manifest from a previous run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (the graph seed for `graph`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a graph and write its edges and spectrum.
    Graph,
    /// Regularized least-squares FIR design.
    DesignFir,
    /// Parallel IIR design from an initializer.
    DesignIir,
    /// Optimal feedback coefficients and predicted noise power.
    Qef,
    /// Solve a noise Gramian and report its residual.
    Gramian,
    /// Monte-Carlo MSD of the quantized filter.
    Simulate {
        /// Feedback plan written by `qef`; overrides the config's feedback mode.
        #[arg(long)]
        feedback: Option<PathBuf>,
    },
    /// Quantized decentralized regression.
    Atc,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Graph => "graph",
            Command::DesignFir => "design-fir",
            Command::DesignIir => "design-iir",
            Command::Qef => "qef",
            Command::Gramian => "gramian",
            Command::Simulate { .. } => "simulate",
            Command::Atc => "atc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSource {
    Sensor { n: usize, radius: f64, seed: u64 },
    /// 64-node surrogate of the benchmark sensor network.
    Benchmark { seed: u64 },
    Ring { n: usize },
    Path { n: usize },
    EdgeList { path: PathBuf, n_nodes: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub source: GraphSource,
    #[serde(default = "default_shift")]
    pub shift: ShiftKind,
}

fn default_shift() -> ShiftKind {
    ShiftKind::NormalizedLaplacian
}

impl GraphConfig {
    pub fn build(&self) -> Result<(Graph, ShiftOperator)> {
        let g = match &self.source {
            GraphSource::Sensor { n, radius, seed } => gen_sensor_graph(*n, *radius, *seed)?,
            GraphSource::Benchmark { seed } => benchmark_sensor_graph(*seed)?,
            GraphSource::Ring { n } => Graph::ring(*n),
            GraphSource::Path { n } => Graph::path(*n),
            GraphSource::EdgeList { path, n_nodes } => Graph::load_edge_list(path, *n_nodes)?,
        };
        let op = ShiftOperator::build(&g, self.shift)?;
        Ok((g, op))
    }

    fn set_seed(&mut self, seed: u64) {
        match &mut self.source {
            GraphSource::Sensor { seed: s, .. } | GraphSource::Benchmark { seed: s } => *s = seed,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRun {
    pub graph: GraphConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub cutoff: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    pub tolerance: f64,
}

fn default_points() -> usize {
    1000
}

impl TargetConfig {
    fn build(&self) -> Result<DesignTarget> {
        DesignTarget::lowpass(self.cutoff, self.points, self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FirModeConfig {
    Deterministic,
    Random { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFirRun {
    pub graph: GraphConfig,
    pub target: TargetConfig,
    pub order: usize,
    #[serde(default = "default_fir_mode")]
    pub mode: FirModeConfig,
}

fn default_fir_mode() -> FirModeConfig {
    FirModeConfig::Deterministic
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IirModeConfig {
    Deterministic,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub gamma_max: f64,
    #[serde(default = "default_tune_steps")]
    pub steps: usize,
}

fn default_tune_steps() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignIirRun {
    pub graph: GraphConfig,
    pub target: TargetConfig,
    /// `[Re ψ, Im ψ, Re φ, Im φ]` per branch; defaults to `design::nonreg_iir_init`.
    #[serde(default)]
    pub init: Option<Vec<[f64; 4]>>,
    #[serde(default = "default_iir_mode")]
    pub mode: IirModeConfig,
    #[serde(default)]
    pub gamma: f64,
    /// Bisect `γ` for the largest value meeting the tolerance instead of using `gamma`.
    #[serde(default)]
    pub tune: Option<TuneConfig>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_iir_mode() -> IirModeConfig {
    IirModeConfig::Deterministic
}

fn default_starts() -> usize {
    crate::design::MULTI_STARTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QefRun {
    pub graph: GraphConfig,
    pub filter: FilterSpec,
    pub scenario: Scenario,
    pub quantizer: QuantizerConfig,
    #[serde(default)]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GramianKind {
    /// `W₀` for a branch with pole `ψ = [re, im]`.
    Deterministic { psi: [f64; 2] },
    /// `W_Φ` over Bernoulli edge masks.
    Random { psi: [f64; 2], p: f64 },
    /// `W_P` for node-asynchronous updates, with `E[P W P]`.
    Async { psi: [f64; 2], p: f64 },
    /// FIR Grams `G_t`, expected over edge masks when `p` is given.
    Fir { coeffs: Vec<f64>, p: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramianRun {
    pub graph: GraphConfig,
    pub kind: GramianKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    None,
    Optimal,
    /// Optimal feedback and no feedback on common random numbers.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRun {
    pub graph: GraphConfig,
    pub filter: FilterSpec,
    pub sim: SimConfig,
    #[serde(default = "default_feedback")]
    pub feedback: FeedbackMode,
    /// Plan written by `qef`; `--feedback` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_file: Option<PathBuf>,
}

fn default_feedback() -> FeedbackMode {
    FeedbackMode::Paired
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Uncompressed,
    Sq,
    Dq,
    Def,
    Qef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtcRun {
    #[serde(default = "default_atc_n")]
    pub n: usize,
    #[serde(default = "default_atc_l")]
    pub l: usize,
    #[serde(default = "default_atc_m")]
    pub m: usize,
    #[serde(default)]
    pub problem_seed: u64,
    #[serde(default)]
    pub atc: AtcConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantName>,
    #[serde(default = "default_damping")]
    pub def_damping: f64,
}

fn default_atc_n() -> usize {
    50
}
fn default_atc_l() -> usize {
    40
}
fn default_atc_m() -> usize {
    4
}
fn default_variants() -> Vec<VariantName> {
    use VariantName::*;
    vec![Uncompressed, Sq, Dq, Def, Qef]
}
fn default_damping() -> f64 {
    DEF_DAMPING
}

/// Written next to every run's outputs. Passing it back via `--config` repeats the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub gqef_manifest: u32,
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub format: String,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

/// Parses `args` and runs the selected subcommand, returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            let (category, code) = categorize(&e);
            let mut report = json!({ "error": category, "message": e.to_string() });
            if let Error::Config { path, .. } = &e {
                report["path"] = json!(path);
            }
            eprintln!("{report}");
            code
        }
    }
}

fn categorize(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Io(_) => ("io", 1),
        e if e.is_input_error() => ("config", 2),
        _ => ("numerical", 3),
    }
}

/// Runs a parsed command line and returns the manifest it wrote.
pub fn execute(cli: &Cli) -> Result<RunManifest> {
    let threads = effective_threads(cli.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let config_path =
        cli.config.as_deref().ok_or_else(|| Error::Config { path: "--config".into(), message: "missing".into() })?;
    let raw = load_raw_config(config_path, cli.command.name())?;
    fs::create_dir_all(&cli.out)?;
    let start = Instant::now();
    let mut ctx = RunContext { out: cli.out.clone(), format: cli.format, warnings: Vec::new(), outputs: Vec::new() };
    let config = pool.install(|| dispatch(cli, raw, &mut ctx))?;
    let manifest = RunManifest {
        gqef_manifest: MANIFEST_VERSION,
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        seed: cli.seed,
        threads,
        format: format!("{:?}", cli.format).to_lowercase(),
        wall_time_s: start.elapsed().as_secs_f64(),
        warnings: ctx.warnings,
        outputs: ctx.outputs,
    };
    fs::write(cli.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn effective_threads(requested: Option<usize>) -> usize {
    if std::env::var("GQEF_DETERMINISTIC").is_ok_and(|v| v == "1") {
        return 1;
    }
    requested.filter(|&t| t > 0).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Reads a config file; manifests contribute their echoed config.
fn load_raw_config(path: &Path, command: &str) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config { path: format!("line {} column {}", e.line(), e.column()), message: e.to_string() })?;
    match value.get("gqef_manifest") {
        Some(_) => {
            let recorded = value.get("command").and_then(Value::as_str).unwrap_or("");
            if recorded != command {
                return Err(Error::Config {
                    path: "command".into(),
                    message: format!("manifest was written by `{recorded}`, not `{command}`"),
                });
            }
            value.get("config").cloned().ok_or_else(|| Error::Config { path: "config".into(), message: "missing".into() })
        }
        None => Ok(value),
    }
}

/// Deserializes with the offending field path in the error.
pub fn parse_config<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config { path, message: e.into_inner().to_string() }
    })
}

struct RunContext {
    out: PathBuf,
    format: Format,
    warnings: Vec<String>,
    outputs: Vec<String>,
}

impl RunContext {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(value)?;
        self.write(name, &s)
    }

    /// Writes `rows` as `<stem>.csv`, or as a JSON array of objects in JSON mode.
    fn write_table(&mut self, stem: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        match self.format {
            Format::Csv => {
                let mut s = header.join(",");
                s.push('\n');
                for r in rows {
                    let line: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
                    s.push_str(&line.join(","));
                    s.push('\n');
                }
                self.write(&format!("{stem}.csv"), &s)
            }
            Format::Json => {
                let objs: Vec<Value> = rows
                    .iter()
                    .map(|r| Value::Object(header.iter().zip(r).map(|(h, v)| (h.to_string(), json!(v))).collect()))
                    .collect();
                self.write_json(&format!("{stem}.json"), &objs)
            }
        }
    }
}

/// 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn dispatch(cli: &Cli, raw: Value, ctx: &mut RunContext) -> Result<Value> {
    match &cli.command {
        Command::Graph => {
            let mut cfg: GraphRun = parse_config(raw)?;
            if let Some(s) = cli.seed {
                cfg.graph.set_seed(s);
            }
            run_graph(&cfg, ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
        Command::DesignFir => {
            let cfg: DesignFirRun = parse_config(raw)?;
            run_design_fir(&cfg, ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
        Command::DesignIir => {
            let mut cfg: DesignIirRun = parse_config(raw)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            run_design_iir(&cfg, ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
        Command::Qef => {
            let cfg: QefRun = parse_config(raw)?;
            run_qef(&cfg, ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
        Command::Gramian => {
            let cfg: GramianRun = parse_config(raw)?;
            run_gramian(&cfg, ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
        Command::Simulate { feedback } => {
            let mut cfg: SimulateRun = parse_config(raw)?;
            if let Some(s) = cli.seed {
                cfg.sim.seed = s;
            }
            if let Some(path) = feedback {
                cfg.feedback_file = Some(path.clone());
            }
            let plan = match &cfg.feedback_file {
                Some(path) => {
                    let text = fs::read_to_string(path)?;
                    let v: Value = serde_json::from_str(&text)?;
                    Some(parse_config::<FeedbackPlan>(v)?)
                }
                None => None,
            };
            run_simulate(&cfg, plan.as_ref(), ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
        Command::Atc => {
            let mut cfg: AtcRun = parse_config(raw)?;
            if let Some(s) = cli.seed {
                cfg.atc.seed = s;
            }
            run_atc(&cfg, ctx)?;
            Ok(serde_json::to_value(cfg)?)
        }
    }
}

fn run_graph(cfg: &GraphRun, ctx: &mut RunContext) -> Result<()> {
    let (g, op) = cfg.graph.build()?;
    let rows: Vec<Vec<f64>> = g.edges.iter().map(|e| vec![e.i as f64, e.j as f64, e.weight]).collect();
    match ctx.format {
        Format::Csv => {
            let mut s = String::from("i,j,weight\n");
            for e in &g.edges {
                let _ = writeln!(s, "{},{},{}", e.i, e.j, fmt_f64(e.weight));
            }
            ctx.write("edges.csv", &s)?;
        }
        Format::Json => ctx.write_table("edges", &["i", "j", "weight"], &rows)?,
    }
    let mut eig: Vec<Complex64> = op.evd()?.eigenvalues.clone();
    eig.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let rows: Vec<Vec<f64>> = eig.iter().enumerate().map(|(k, l)| vec![k as f64, l.re, l.im]).collect();
    ctx.write_table("spectrum", &["k", "re", "im"], &rows)?;
    ctx.write_json(
        "summary.json",
        &json!({
            "n_nodes": g.n_nodes,
            "n_edges": g.n_edges(),
            "connected": g.is_connected(),
            "spectral_radius": op.spectral_radius,
        }),
    )
}

fn response_rows(target: &DesignTarget, h: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
    target.grid.iter().zip(&target.response).map(|(&l, &r)| vec![l, r, h(l)]).collect()
}

fn report_warnings(report: &DesignReport, ctx: &mut RunContext) {
    if let Some(w) = &report.warning {
        ctx.warnings.push(w.clone());
    }
}

fn run_design_fir(cfg: &DesignFirRun, ctx: &mut RunContext) -> Result<()> {
    let (_, op) = cfg.graph.build()?;
    let target = cfg.target.build()?;
    let mode = match cfg.mode {
        FirModeConfig::Deterministic => FirDesignMode::Deterministic(&op.matrix),
        FirModeConfig::Random { p } => FirDesignMode::Random { p, rho: op.spectral_radius },
    };
    let (fir, report) = design_fir(&target, cfg.order, mode)?;
    report_warnings(&report, ctx);
    ctx.write_json("filter.json", &FilterSpec::from(&Filter::Fir(fir.clone())))?;
    ctx.write_json("design.json", &report)?;
    ctx.write_table("response", &["lambda", "target", "response"], &response_rows(&target, |l| fir.response(l)))
}

fn run_design_iir(cfg: &DesignIirRun, ctx: &mut RunContext) -> Result<()> {
    let (_, op) = cfg.graph.build()?;
    let target = cfg.target.build()?;
    let init = match &cfg.init {
        Some(rows) => IirSpec::from_arrays(rows)?,
        None => nonreg_iir_init(),
    };
    let mode = match cfg.mode {
        IirModeConfig::Deterministic => IirDesignMode::deterministic(&op)?,
        IirModeConfig::Random => IirDesignMode::Random { rho: op.spectral_radius },
    };
    let opts = IirDesignOptions { gamma: cfg.gamma, starts: cfg.starts, seed: cfg.seed, ..Default::default() };
    let (iir, report) = match cfg.tune {
        Some(t) => tune_iir_gamma(&target, &init, &mode, opts, t.gamma_max, t.steps)?,
        None => design_iir(&target, &init, &mode, opts)?,
    };
    report_warnings(&report, ctx);
    if report.error > target.tolerance {
        ctx.warnings.push(format!("design error {:.6e} exceeds tolerance {:.6e}", report.error, target.tolerance));
    }
    ctx.write_json("filter.json", &FilterSpec::from(&Filter::Iir(iir.clone())))?;
    ctx.write_json("design.json", &report)?;
    ctx.write_table("response", &["lambda", "target", "response"], &response_rows(&target, |l| iir.response(l)))
}

fn theta_rows(plan: &FeedbackPlan) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for (k, col) in plan.theta.iter().enumerate() {
        for (i, c) in col.iter().enumerate() {
            rows.push(vec![i as f64, k as f64, c.re, c.im]);
        }
    }
    rows
}

fn run_qef(cfg: &QefRun, ctx: &mut RunContext) -> Result<()> {
    let (_, op) = cfg.graph.build()?;
    let filter = cfg.filter.build()?;
    let mut sim_cfg = SimConfig::new(cfg.scenario, cfg.quantizer, 1);
    sim_cfg.p = cfg.p;
    let plan = Simulation::new(&op, filter, sim_cfg)?.plan()?;
    for (k, i) in &plan.degenerate {
        ctx.warnings.push(format!("column {k}, node {i}: zero weight, coefficient set to 0"));
    }
    ctx.write_json("plan.json", &plan)?;
    ctx.write_table("theta", &["node", "column", "re", "im"], &theta_rows(&plan))
}

fn matrix_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn write_matrix(ctx: &mut RunContext, stem: &str, m: &Mat) -> Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_table(stem, &header, &matrix_rows(m))
}

fn write_cmatrix(ctx: &mut RunContext, stem: &str, m: &CMat) -> Result<()> {
    write_matrix(ctx, stem, &m.map(|c| c.re))?;
    if m.iter().any(|c| c.im != 0.0) {
        write_matrix(ctx, &format!("{stem}_im"), &m.map(|c| c.im))?;
    }
    Ok(())
}

fn run_gramian(cfg: &GramianRun, ctx: &mut RunContext) -> Result<()> {
    let (_, op) = cfg.graph.build()?;
    let c = |p: [f64; 2]| Complex64::new(p[0], p[1]);
    let summary = match &cfg.kind {
        GramianKind::Deterministic { psi } => {
            let r = solve_lyapunov_deterministic(&op.matrix, c(*psi))?;
            write_matrix(ctx, "gramian", &r.w)?;
            json!({ "residual": r.residual, "method": r.method, "iterations": r.iterations, "trace": r.w.trace() })
        }
        GramianKind::Random { psi, p } => {
            let r = solve_w_phi(&EdgeModel::new(&op, *p)?, c(*psi))?;
            write_matrix(ctx, "gramian", &r.w)?;
            json!({ "residual": r.residual, "method": r.method, "iterations": r.iterations, "trace": r.w.trace() })
        }
        GramianKind::Async { psi, p } => {
            let r = solve_w_p(&op.matrix, c(*psi), *p)?;
            write_cmatrix(ctx, "gramian", &r.w.w)?;
            write_cmatrix(ctx, "pwp", &r.pwp)?;
            json!({ "residual": r.w.residual, "method": r.w.method, "iterations": r.w.iterations, "trace": r.w.w.trace().re })
        }
        GramianKind::Fir { coeffs, p } => {
            let grams = match p {
                Some(p) => expected_fir_grams(&EdgeModel::new(&op, *p)?, coeffs),
                None => fir_grams(&op.matrix, coeffs),
            };
            let traces: Vec<f64> = grams.iter().map(|g| g.trace()).collect();
            for (t, g) in grams.iter().enumerate() {
                write_matrix(ctx, &format!("gram_{}", t + 1), g)?;
            }
            json!({ "traces": traces })
        }
    };
    ctx.write_json("summary.json", &summary)
}

fn msd_rows(r: &ScenarioResult) -> Vec<Vec<f64>> {
    (0..r.msd.len()).map(|k| vec![r.index[k] as f64, r.msd[k], r.msd_db[k], r.stderr_db[k]]).collect()
}

const MSD_HEADER: [&str; 4] = ["index", "msd_linear", "msd_db", "stderr_db"];

fn note_overflows(r: &ScenarioResult, ctx: &mut RunContext) {
    if r.overflows > 0 {
        ctx.warnings.push(format!("{} quantizer overflows", r.overflows));
    }
}

fn run_simulate(cfg: &SimulateRun, file_plan: Option<&FeedbackPlan>, ctx: &mut RunContext) -> Result<()> {
    let (_, op) = cfg.graph.build()?;
    let sim = Simulation::new(&op, cfg.filter.build()?, cfg.sim.clone())?;
    let theta = match (file_plan, cfg.feedback) {
        (Some(p), _) => Some(p.theta.clone()),
        (None, FeedbackMode::None) => None,
        (None, _) => Some(sim.plan()?.theta),
    };
    let paired = cfg.feedback == FeedbackMode::Paired;
    match (theta, paired) {
        (Some(t), true) => {
            let pr = sim.run_paired(&t)?;
            note_overflows(&pr.with_feedback, ctx);
            ctx.write_table("msd", &MSD_HEADER, &msd_rows(&pr.with_feedback))?;
            ctx.write_table("msd_nofeedback", &MSD_HEADER, &msd_rows(&pr.without_feedback))?;
            ctx.write_json(
                "result.json",
                &json!({
                    "with_feedback": summary_of(&pr.with_feedback),
                    "without_feedback": summary_of(&pr.without_feedback),
                    "improvement_db": pr.improvement_db(),
                    "z_score": pr.z_score(),
                }),
            )
        }
        (t, _) => {
            let r = sim.run(t.as_deref())?;
            note_overflows(&r, ctx);
            ctx.write_table("msd", &MSD_HEADER, &msd_rows(&r))?;
            ctx.write_json("result.json", &summary_of(&r))
        }
    }
}

fn summary_of(r: &ScenarioResult) -> Value {
    json!({
        "steady_msd": r.steady_msd,
        "steady_msd_db": r.steady_msd_db(),
        "steady_noise_power": r.steady_noise_power,
        "predicted_noise_power": r.predicted_noise_power,
        "trials": r.trials,
        "overflows": r.overflows,
    })
}

fn run_atc(cfg: &AtcRun, ctx: &mut RunContext) -> Result<()> {
    let problem = synth_problem(cfg.n, cfg.l, cfg.m, cfg.problem_seed)?;
    let mut results: Vec<AtcResult> = Vec::new();
    let mut gains = Value::Null;
    for v in &cfg.variants {
        let variant = match v {
            VariantName::Uncompressed => AtcVariant::Uncompressed,
            VariantName::Sq => AtcVariant::FullState,
            VariantName::Dq => AtcVariant::Differential,
            VariantName::Def => AtcVariant::DifferentialErrorFeedback { damping: cfg.def_damping },
            VariantName::Qef => {
                let q = AtcVariant::qef(&problem)?;
                if let AtcVariant::Qef { alpha } = &q {
                    let g = noise_gain_trace(&problem, alpha)?;
                    gains = json!({ "without_feedback": g.without_feedback, "with_feedback": g.with_feedback, "ratio": g.ratio() });
                }
                q
            }
        };
        let r = atc_run(&problem, &variant, &cfg.atc)?;
        if r.overflows > 0 {
            ctx.warnings.push(format!("{}: {} quantizer overflows", r.variant, r.overflows));
        }
        let rate = r.rate.unwrap_or(f64::NAN);
        let rows: Vec<Vec<f64>> =
            r.msd_db.iter().enumerate().map(|(t, &m)| vec![(t + 1) as f64, m, rate]).collect();
        ctx.write_table(&format!("atc_{}", r.variant), &["iter", "msd_db", "rate_bits"], &rows)?;
        results.push(r);
    }
    let variants: Vec<Value> = results
        .iter()
        .map(|r| json!({ "variant": r.variant, "steady_msd_db": r.steady_msd_db(), "rate_bits": r.rate, "overflows": r.overflows }))
        .collect();
    ctx.write_json(
        "summary.json",
        &json!({
            "problem_seed": cfg.problem_seed,
            "smoothing_cutoff": problem.smooth_keep,
            "noise_gains": gains,
            "variants": variants,
        }),
    )
}
