//! `qpmerge` command-line front end.
//!
//! Exit codes: 0 success, 1 a merge method failed, 2 usage or input error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::baselines::{
    dare_row_uniform, fisher_merge_residuals, soup, task_arithmetic, ties_rowwise, Baseline,
};
use crate::basis::{build_basis, sample_diagnostics, sweep_basis, BasisKind};
use crate::datastore::{
    gen_linear_tasks, gen_relu_tasks, gen_shared_direction_instance, load_bundle, load_network,
    save_bundle, save_network, LinearTaskSpec, ModelBundle, ReluTaskSpec, SharedDirectionSpec,
};
use crate::error::MergeError;
use crate::multilayer::{
    hybrid_refine_with, run_plan, LayerOrder, MergePlan, MergeReport, QpSolver, StepMethod,
};
use crate::netcore::LinearNetwork;
use crate::qp::{
    basis_merge, diagonal_merge, diagonal_qp_from_samples, general_qp_from_samples,
    linearize_samples, linearized_loss, BoxOptions,
};

/// Task-arithmetic scales tried by `compare`.
pub const LAMBDA_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Parser)]
#[command(
    name = "qpmerge",
    version,
    about = "Merge fine-tuned residual updates by quadratic programming"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bundle.
    Gen(GenArgs),
    /// Merge a bundle's residual updates and write the merged network.
    Merge(MergeArgs),
    /// Sweep basis families and sizes, reporting captured energy and QP error.
    Diagnose(DiagnoseArgs),
    /// Evaluate a network on a bundle's calibration data.
    Eval(EvalArgs),
    /// Run every merge method on one layer and tabulate the results.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Linear,
    SharedDirection,
    Relu,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "linear")]
    pub kind: GenKind,
    /// Number of tasks [default: 3 linear, 2 relu; shared-direction uses --sigmas].
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layer widths, input first [default: 8,6,5 linear; 16,12,8,4 relu].
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
    /// Layers receiving residual updates [default: 1 linear, 2 relu].
    #[arg(long, value_delimiter = ',')]
    pub merge_layers: Vec<usize>,
    /// Calibration samples per task [default: 20 linear, 32 relu, 16 shared-direction].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Residual magnitude for linear bundles.
    #[arg(long, default_value_t = 0.3)]
    pub delta_scale: f64,
    /// Gaussian target noise for linear bundles.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Shared-direction singular values, one per task.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub sigmas: Vec<f64>,
    /// Shared-direction target task (1-based).
    #[arg(long, default_value_t = 1)]
    pub target: usize,
    /// Shared-direction hidden width.
    #[arg(long, default_value_t = 4)]
    pub r: usize,
    /// Shared-direction output width (>= r).
    #[arg(long, default_value_t = 5)]
    pub c: usize,
    /// Shared-direction input width.
    #[arg(long, default_value_t = 6)]
    pub input_dim: usize,
    /// Scale of the remainder orthogonal to the shared direction.
    #[arg(long, default_value_t = 0.1)]
    pub remainder_scale: f64,
    /// Gradient steps per relu task.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Gradient step size for relu tasks.
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Soup,
    Ta,
    Dare,
    Ties,
    Fisher,
    QpDiag,
    QpBasis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sequential,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    ClosedForm,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Order {
    BottomUp,
    TopDown,
}

/// QP solver flags shared by `merge` and `compare`.
#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, value_enum, default_value = "closed-form")]
    pub solver: SolverKind,
    /// Lower box bound.
    #[arg(long, default_value_t = 0.0)]
    pub lower: f64,
    /// Upper box bound.
    #[arg(long, default_value_t = 1.0)]
    pub upper: f64,
    /// Box solver iterations.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Box solver step size.
    #[arg(long, default_value_t = 1e-2)]
    pub step_size: f64,
}

impl SolverArgs {
    fn solver(&self) -> QpSolver {
        match self.solver {
            SolverKind::ClosedForm => QpSolver::ClosedForm,
            SolverKind::Box => QpSolver::Box {
                lo: self.lower,
                hi: self.upper,
                options: BoxOptions {
                    steps: self.steps,
                    step_size: self.step_size,
                    ..BoxOptions::default()
                },
            },
        }
    }
}

/// Baseline hyperparameters shared by `merge` and `compare`.
#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Task-arithmetic scale.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// DARE keep probability.
    #[arg(long, default_value_t = 0.5)]
    pub keep_prob: f64,
    /// TIES density.
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    /// Seed for DARE masks and random bases.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum, default_value = "qp-diag")]
    pub method: Method,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    /// Basis family for qp-basis: eigen, standard, svd, random or random-<seed>.
    #[arg(long, default_value = "eigen")]
    pub basis: String,
    /// Directions for qp-basis (clipped to the layer's maximum).
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    /// Layers to merge: `all` or a comma-separated list.
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[arg(long, value_enum, default_value = "sequential")]
    pub mode: Mode,
    /// Baseline applied at every layer before hybrid refinement.
    #[arg(long, default_value = "soup")]
    pub init_method: String,
    #[arg(long, value_enum, default_value = "bottom-up")]
    pub order: Order,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Merged network file.
    #[arg(long, default_value = "merged.json")]
    pub out: PathBuf,
    /// Report file [default: stdout].
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Layer to analyse [default: lowest merged layer].
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub p_min: usize,
    /// Largest p [default: each family's maximum].
    #[arg(long)]
    pub p_max: Option<usize>,
    /// Basis families to sweep.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "eigen,standard,svd,random"
    )]
    pub families: Vec<String>,
    /// Number of random bases, seeded from --seed upwards.
    #[arg(long, default_value_t = 3)]
    pub random_seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Bundle providing the calibration data.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Network file to evaluate [default: the bundle's base network].
    #[arg(long, conflicts_with = "tuned")]
    pub model: Option<PathBuf>,
    /// Evaluate the bundle's fine-tuned model for this task instead.
    #[arg(long)]
    pub tuned: Option<String>,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Layer to merge [default: lowest merged layer].
    #[arg(long)]
    pub layer: Option<usize>,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    /// Basis family for the qp-basis row.
    #[arg(long, default_value = "eigen")]
    pub basis: String,
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn method(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        let code = match e {
            MergeError::NonFinite(_) | MergeError::AssumptionViolated(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn or_default<T: Clone>(given: &[T], default: Vec<T>) -> Vec<T> {
    if given.is_empty() {
        default
    } else {
        given.to_vec()
    }
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let bundle = match a.kind {
        GenKind::Linear => {
            let d = LinearTaskSpec::default();
            gen_linear_tasks(&LinearTaskSpec {
                widths: or_default(&a.widths, d.widths),
                merge_layers: or_default(&a.merge_layers, d.merge_layers),
                tasks: a.tasks.unwrap_or(d.tasks),
                samples_per_task: a.samples.unwrap_or(d.samples_per_task),
                delta_scale: a.delta_scale,
                noise: a.noise,
                seed: a.seed,
            })?
        }
        GenKind::SharedDirection => {
            if let Some(t) = a.tasks {
                if t != a.sigmas.len() {
                    return Err(CliError::usage(format!(
                        "--tasks {t} disagrees with {} sigmas",
                        a.sigmas.len()
                    )));
                }
            }
            gen_shared_direction_instance(&SharedDirectionSpec {
                sigmas: a.sigmas.clone(),
                target: a.target,
                input_dim: a.input_dim,
                r: a.r,
                c: a.c,
                samples: a.samples.unwrap_or(SharedDirectionSpec::default().samples),
                remainder_scale: a.remainder_scale,
                seed: a.seed,
            })?
        }
        GenKind::Relu => {
            let d = ReluTaskSpec::default();
            let merge_layer = match a.merge_layers.as_slice() {
                [] => d.merge_layer,
                [l] => *l,
                more => {
                    return Err(CliError::usage(format!(
                        "relu bundles take one merge layer, got {more:?}"
                    )))
                }
            };
            gen_relu_tasks(&ReluTaskSpec {
                widths: or_default(&a.widths, d.widths),
                merge_layer,
                tasks: a.tasks.unwrap_or(d.tasks),
                samples_per_task: a.samples.unwrap_or(d.samples_per_task),
                steps: a.steps,
                step_size: a.step_size,
                seed: a.seed,
                ..d
            })?
        }
    };
    match &a.out {
        Some(path) => save_bundle(&bundle, path)?,
        None => write_output(None, &crate::datastore::bundle_to_string(&bundle)?)?,
    }
    let widths: Vec<String> = std::iter::once(bundle.base.input_dim())
        .chain(bundle.base.layers().iter().map(|l| l.nrows()))
        .map(|w| w.to_string())
        .collect();
    let samples: usize = bundle.calibration.iter().map(|c| c.inputs.len()).sum();
    eprintln!(
        "bundle: widths {} | tasks {} | merge layers {:?} | {} calibration samples",
        widths.join("->"),
        bundle.tasks().len(),
        bundle.merge_layers(),
        samples
    );
    Ok(())
}

fn parse_layers(spec: &str, available: &[usize]) -> CliResult<Vec<usize>> {
    if spec == "all" {
        return Ok(available.to_vec());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let l: usize = part
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad layer `{part}` in --layers")))?;
        if !available.contains(&l) {
            return Err(CliError::usage(format!(
                "layer {l} has no residual updates (available: {available:?})"
            )));
        }
        out.push(l);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn parse_basis(name: &str) -> CliResult<BasisKind> {
    name.parse::<BasisKind>()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn baseline_for(method: Method, a: &BaselineArgs) -> Option<Baseline> {
    Some(match method {
        Method::Soup => Baseline::Soup,
        Method::Ta => Baseline::TaskArithmetic { lambda: a.lambda },
        Method::Dare => Baseline::Dare {
            keep_prob: a.keep_prob,
            seed: a.seed,
        },
        Method::Ties => Baseline::Ties { density: a.density },
        Method::Fisher => Baseline::Fisher,
        Method::QpDiag | Method::QpBasis => return None,
    })
}

fn parse_baseline(name: &str, a: &BaselineArgs) -> CliResult<Baseline> {
    let method = Method::from_str(name, false)
        .map_err(|_| CliError::usage(format!("unknown init method `{name}`")))?;
    baseline_for(method, a)
        .ok_or_else(|| CliError::usage(format!("init method must be a baseline, got `{name}`")))
}

/// Clips `p` to what the family can fill at `layer`, warning when it does.
fn clip_p(kind: BasisKind, bundle: &ModelBundle, layer: usize, p: usize) -> CliResult<usize> {
    let r = bundle.base.layer(layer)?.nrows();
    let max = kind.max_directions(r, bundle.base.output_dim());
    if p == 0 {
        return Err(CliError::usage("--p must be at least 1"));
    }
    if p > max {
        log::warn!("p = {p} exceeds the {kind} basis maximum {max} at layer {layer}; using {max}");
    }
    Ok(p.min(max))
}

#[derive(Serialize)]
struct DiagnosticsJson {
    captured_energy: f64,
    fraction: f64,
    relaxed_loss: f64,
    gap: f64,
    approximate: bool,
}

#[derive(Serialize)]
struct LayerJson {
    layer: usize,
    method: String,
    objective_before: f64,
    objective_after: f64,
    mse: f64,
    basis: Option<String>,
    coefficients: Option<Vec<Vec<f64>>>,
    diagnostics: Option<DiagnosticsJson>,
}

#[derive(Serialize)]
struct MergeJson {
    method: String,
    layers: Vec<LayerJson>,
    calibration_loss: f64,
    mse: f64,
    task_mse: BTreeMap<String, f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Shortest round-trip decimal, with an exponent for very small or large
/// magnitudes.
fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        serde_json::to_string(&v).expect("finite float")
    } else {
        v.to_string()
    }
}

fn merge_report_text(method: &str, report: &MergeReport, format: Format) -> CliResult<String> {
    match format {
        Format::Json => {
            let json = MergeJson {
                method: method.to_string(),
                layers: report
                    .layers
                    .iter()
                    .map(|r| LayerJson {
                        layer: r.layer,
                        method: r.method.clone(),
                        objective_before: r.objective_before,
                        objective_after: r.objective_after,
                        mse: r.mse_after,
                        basis: r.coefficients.as_ref().map(|c| c.basis.to_string()),
                        coefficients: r.coefficients.as_ref().map(|c| rows_of(&c.values)),
                        diagnostics: r.diagnostics.as_ref().map(|d| DiagnosticsJson {
                            captured_energy: d.captured_energy,
                            fraction: d.fraction,
                            relaxed_loss: d.relaxed_loss,
                            gap: d.gap_vs_optimal,
                            approximate: d.approximate,
                        }),
                    })
                    .collect(),
                calibration_loss: report.calibration_loss,
                mse: report.calibration_mse,
                task_mse: report.task_mse.clone(),
            };
            Ok(serde_json::to_string_pretty(&json).expect("plain report") + "\n")
        }
        Format::Csv => {
            let tasks: Vec<&String> = report.task_mse.keys().collect();
            let with_fraction = report.layers.iter().any(|r| r.diagnostics.is_some());
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec![
                "method".to_string(),
                "layer".into(),
                "objective".into(),
                "mse".into(),
            ];
            header.extend(tasks.iter().map(|t| format!("task_mse_{t}")));
            if with_fraction {
                header.push("fraction".into());
            }
            w.write_record(&header)?;
            for r in &report.layers {
                let mut row = vec![
                    r.method.clone(),
                    r.layer.to_string(),
                    fmt_num(r.objective_after),
                    fmt_num(r.mse_after),
                ];
                row.extend(tasks.iter().map(|_| String::new()));
                if with_fraction {
                    row.push(
                        r.diagnostics
                            .as_ref()
                            .map(|d| fmt_num(d.fraction))
                            .unwrap_or_default(),
                    );
                }
                w.write_record(&row)?;
            }
            let mut total = vec![
                method.to_string(),
                "all".into(),
                fmt_num(report.calibration_loss),
                fmt_num(report.calibration_mse),
            ];
            total.extend(report.task_mse.values().map(|v| fmt_num(*v)));
            if with_fraction {
                total.push(String::new());
            }
            w.write_record(&total)?;
            Ok(
                String::from_utf8(w.into_inner().map_err(|e| CliError::usage(e.to_string()))?)
                    .expect("csv is utf-8"),
            )
        }
    }
}

pub fn cmd_merge(a: &MergeArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let calib = bundle.pooled_calibration()?;
    let deltas = bundle.deltas_by_layer();
    if deltas.is_empty() {
        return Err(CliError::usage("bundle has no residual updates"));
    }
    let layers = parse_layers(&a.layers, &bundle.merge_layers())?;
    let solver = a.solver.solver();
    let order = match a.order {
        Order::BottomUp => LayerOrder::BottomUp,
        Order::TopDown => LayerOrder::TopDown,
    };
    let qp_step = |layer: usize| -> CliResult<StepMethod> {
        Ok(match a.method {
            Method::QpBasis => {
                let kind = parse_basis(&a.basis)?;
                StepMethod::QpBasis {
                    kind,
                    p: clip_p(kind, &bundle, layer, a.p)?,
                }
            }
            _ => StepMethod::Qp,
        })
    };
    let method_name = match a.method {
        Method::QpBasis => format!("qp-basis:{}:p{}", a.basis, a.p),
        other => other
            .to_possible_value()
            .expect("named")
            .get_name()
            .to_string(),
    };

    let (merged, report) = match (a.method, a.mode) {
        (Method::QpDiag | Method::QpBasis, Mode::Hybrid) => {
            let init = parse_baseline(&a.init_method, &a.baseline)?;
            let step = qp_step(layers[0])?;
            hybrid_refine_with(
                &bundle.base,
                &deltas,
                &calib,
                &init,
                &layers,
                &step,
                &solver,
            )?
        }
        (_, Mode::Hybrid) => {
            return Err(CliError::usage(
                "--mode hybrid needs --method qp-diag or qp-basis",
            ));
        }
        (method, Mode::Sequential) => {
            let steps = layers
                .iter()
                .map(|&layer| {
                    let method = match baseline_for(method, &a.baseline) {
                        Some(b) => StepMethod::Baseline(b),
                        None => qp_step(layer)?,
                    };
                    Ok(crate::multilayer::PlanStep { layer, method })
                })
                .collect::<CliResult<Vec<_>>>()?;
            let steps = match order {
                LayerOrder::BottomUp => steps,
                LayerOrder::TopDown => steps.into_iter().rev().collect(),
            };
            let plan = MergePlan::new(steps, order)?;
            run_plan(&bundle.base, &deltas, &calib, &plan, &solver)?
        }
    };
    if !merged
        .layers()
        .iter()
        .all(|l| l.iter().all(|v| v.is_finite()))
    {
        return Err(CliError {
            code: 3,
            message: "merged network has non-finite weights".into(),
        });
    }
    save_network(&merged, &a.out)?;
    write_output(
        a.report.as_deref(),
        &merge_report_text(&method_name, &report, a.format)?,
    )?;
    log::info!("merged network written to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseRow {
    basis: String,
    p: usize,
    fraction: f64,
    relaxed_loss: f64,
    qp_mse: f64,
    exact_mse: f64,
    gap: f64,
    qp_objective: f64,
}

fn default_layer(bundle: &ModelBundle, layer: Option<usize>) -> CliResult<usize> {
    let layers = bundle.merge_layers();
    match layer {
        Some(l) if layers.contains(&l) => Ok(l),
        Some(l) => Err(CliError::usage(format!(
            "layer {l} has no residual updates (available: {layers:?})"
        ))),
        None => layers
            .first()
            .copied()
            .ok_or_else(|| CliError::usage("bundle has no residual updates")),
    }
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let calib = bundle.pooled_calibration()?;
    let layer = default_layer(&bundle, a.layer)?;
    let deltas = bundle.layer_deltas(layer);
    let mut kinds = Vec::new();
    for f in &a.families {
        if f == "random" {
            kinds.extend((0..a.random_seeds).map(|i| BasisKind::Random {
                seed: a.seed.wrapping_add(i),
            }));
        } else {
            kinds.push(parse_basis(f)?);
        }
    }
    let mut rows = Vec::new();
    for kind in kinds {
        rows.extend(
            sweep_basis(&bundle.base, layer, &deltas, &calib, kind, a.p_min, a.p_max)?
                .into_iter()
                .map(|pt| DiagnoseRow {
                    basis: kind.to_string(),
                    p: pt.p,
                    fraction: pt.diagnostics.fraction,
                    relaxed_loss: pt.diagnostics.relaxed_loss,
                    qp_mse: pt.qp_mse,
                    exact_mse: pt.exact_mse,
                    gap: pt.diagnostics.gap_vs_optimal,
                    qp_objective: pt.qp_objective,
                }),
        );
    }
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&rows).expect("plain rows") + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "basis",
                "p",
                "fraction",
                "relaxed_loss",
                "qp_mse",
                "exact_mse",
                "gap",
                "qp_objective",
            ])?;
            for r in &rows {
                w.write_record([
                    r.basis.clone(),
                    r.p.to_string(),
                    fmt_num(r.fraction),
                    fmt_num(r.relaxed_loss),
                    fmt_num(r.qp_mse),
                    fmt_num(r.exact_mse),
                    fmt_num(r.gap),
                    fmt_num(r.qp_objective),
                ])?;
            }
            String::from_utf8(w.into_inner().map_err(|e| CliError::usage(e.to_string()))?)
                .expect("csv is utf-8")
        }
    };
    write_output(a.out.as_deref(), &text)
}

#[derive(Serialize, Debug, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub mse: f64,
    pub task_mse: BTreeMap<String, f64>,
    /// Argmax match rate, present when every target is one-hot.
    pub accuracy: Option<f64>,
    pub task_accuracy: Option<BTreeMap<String, f64>>,
}

fn is_one_hot(y: &DVector<f64>) -> bool {
    y.iter().all(|&v| v == 0.0 || v == 1.0) && y.iter().filter(|&&v| v == 1.0).count() == 1
}

fn argmax(v: &DVector<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Per-task and pooled MSE of `net` on `bundle`'s calibration data.
pub fn evaluate(net: &LinearNetwork, bundle: &ModelBundle) -> crate::Result<EvalMetrics> {
    let one_hot = bundle
        .calibration
        .iter()
        .all(|c| c.targets.iter().all(is_one_hot));
    let mut total = 0.0;
    let mut hits = 0usize;
    let mut n = 0usize;
    let mut task_mse = BTreeMap::new();
    let mut task_acc = BTreeMap::new();
    for c in &bundle.calibration {
        let (mut sq, mut h) = (0.0, 0usize);
        for (x, y) in c.inputs.iter().zip(&c.targets) {
            let out = net.forward(x)?;
            if out.len() != y.len() {
                return Err(MergeError::dims("network output", y.len(), out.len()));
            }
            sq += (&out - y).norm_squared();
            if one_hot && argmax(&out) == argmax(y) {
                h += 1;
            }
        }
        let m = c.inputs.len();
        if m > 0 {
            task_mse.insert(c.task.clone(), sq / m as f64);
            task_acc.insert(c.task.clone(), h as f64 / m as f64);
        }
        total += sq;
        hits += h;
        n += m;
    }
    if n == 0 {
        return Err(MergeError::EmptyCalibration);
    }
    Ok(EvalMetrics {
        samples: n,
        mse: total / n as f64,
        task_mse,
        accuracy: one_hot.then(|| hits as f64 / n as f64),
        task_accuracy: one_hot.then_some(task_acc),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let net = match (&a.model, &a.tuned) {
        (Some(path), _) => load_network(path)?,
        (None, Some(task)) => {
            if !bundle.tasks().contains(task) {
                return Err(CliError::usage(format!("bundle has no task `{task}`")));
            }
            bundle.tuned_network(task)?
        }
        (None, None) => bundle.base.clone(),
    };
    if net.input_dim() != bundle.base.input_dim() || net.output_dim() != bundle.base.output_dim() {
        return Err(CliError::usage(format!(
            "model maps {} -> {} but the calibration data is {} -> {}",
            net.input_dim(),
            net.output_dim(),
            bundle.base.input_dim(),
            bundle.base.output_dim()
        )));
    }
    let metrics = evaluate(&net, &bundle)?;
    write_output(
        a.out.as_deref(),
        &(serde_json::to_string_pretty(&metrics).expect("plain metrics") + "\n"),
    )
}

/// One `compare` row. `outcome` is `Err` for a failed method.
#[derive(Debug)]
pub struct CompareRow {
    pub method: String,
    /// Whether the method's merge is a diagonal mask (so QP must beat it).
    pub diagonal_feasible: bool,
    pub outcome: std::result::Result<CompareScores, String>,
}

#[derive(Debug, Serialize)]
pub struct CompareScores {
    /// Linearised calibration objective `Σ ‖b_j + L_j Δ z_j‖²`.
    pub objective: f64,
    pub mse: f64,
    pub task_mse: BTreeMap<String, f64>,
    pub fraction: Option<f64>,
}

/// Runs every method on `layer` in a fixed order.
pub fn compare_methods(
    bundle: &ModelBundle,
    layer: usize,
    baseline: &BaselineArgs,
    basis: BasisKind,
    p: usize,
    solver: &QpSolver,
) -> crate::Result<Vec<CompareRow>> {
    let calib = bundle.pooled_calibration()?;
    let deltas = bundle.layer_deltas(layer);
    let samples = linearize_samples(&bundle.base, layer, &calib)?;
    let score = |merged: crate::Result<DMatrix<f64>>,
                 fraction: Option<f64>|
     -> std::result::Result<CompareScores, String> {
        let merged = merged.map_err(|e| e.to_string())?;
        let net = bundle
            .base
            .apply_merged_residual(layer, &merged)
            .map_err(|e| e.to_string())?;
        let report = MergeReport::evaluate(Vec::new(), &net, &calib).map_err(|e| e.to_string())?;
        let objective = linearized_loss(&samples, &merged);
        if !objective.is_finite() {
            return Err("non-finite objective".into());
        }
        Ok(CompareScores {
            objective,
            mse: report.calibration_mse,
            task_mse: report.task_mse,
            fraction,
        })
    };
    let zero = DMatrix::zeros(deltas[0].delta.nrows(), deltas[0].delta.ncols());
    let mut rows = vec![CompareRow {
        method: "base".into(),
        diagonal_feasible: true,
        outcome: score(Ok(zero), None),
    }];
    rows.push(CompareRow {
        method: "soup".into(),
        diagonal_feasible: true,
        outcome: score(soup(&deltas), None),
    });
    for lambda in LAMBDA_GRID {
        rows.push(CompareRow {
            method: format!("ta(lambda={lambda})"),
            diagonal_feasible: true,
            outcome: score(task_arithmetic(&deltas, &vec![lambda; deltas.len()]), None),
        });
    }
    rows.push(CompareRow {
        method: format!("dare(p={})", baseline.keep_prob),
        diagonal_feasible: true,
        outcome: score(
            dare_row_uniform(&deltas, baseline.keep_prob, baseline.seed),
            None,
        ),
    });
    rows.push(CompareRow {
        method: format!("ties(density={})", baseline.density),
        diagonal_feasible: true,
        outcome: score(ties_rowwise(&deltas, baseline.density), None),
    });
    rows.push(CompareRow {
        method: "fisher".into(),
        diagonal_feasible: false,
        outcome: score(fisher_merge_residuals(&bundle.base, &deltas, &calib), None),
    });
    let diag = diagonal_qp_from_samples(&deltas, &samples)
        .and_then(|qp| solver.solve(&qp))
        .and_then(|sol| diagonal_merge(&deltas, &sol.coefficients.values));
    rows.push(CompareRow {
        method: "qp-diag".into(),
        diagonal_feasible: false,
        outcome: score(diag, None),
    });
    let basis_result = build_basis(basis, &samples, &deltas, p).and_then(|b| {
        let qp = general_qp_from_samples(&deltas, &samples, &b)?;
        let sol = solver.solve(&qp)?;
        let fraction = sample_diagnostics(&samples, &b)?.fraction;
        Ok((
            basis_merge(&deltas, &sol.coefficients.values, &b)?,
            fraction,
        ))
    });
    let (merged, fraction) = match basis_result {
        Ok((m, f)) => (Ok(m), Some(f)),
        Err(e) => (Err(e), None),
    };
    rows.push(CompareRow {
        method: format!("qp-basis:{basis}:p{p}"),
        diagonal_feasible: false,
        outcome: score(merged, fraction),
    });
    Ok(rows)
}

/// Checks that the QP row is no worse than every diagonal-feasible row, up
/// to `1e-9` relative to the base objective.
pub fn check_dominance(rows: &[CompareRow]) -> std::result::Result<(), String> {
    let qp = rows
        .iter()
        .find(|r| r.method == "qp-diag")
        .and_then(|r| r.outcome.as_ref().ok())
        .ok_or("qp-diag row failed")?;
    let scale = rows
        .first()
        .and_then(|r| r.outcome.as_ref().ok())
        .map_or(1.0, |s| s.objective.max(1.0));
    for r in rows.iter().filter(|r| r.diagonal_feasible) {
        if let Ok(s) = &r.outcome {
            if qp.objective > s.objective + 1e-9 * scale {
                return Err(format!(
                    "qp-diag objective {} exceeds {} objective {}",
                    qp.objective, r.method, s.objective
                ));
            }
        }
    }
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    let bundle = load_bundle(&a.bundle)?;
    let layer = default_layer(&bundle, a.layer)?;
    let kind = parse_basis(&a.basis)?;
    let p = clip_p(kind, &bundle, layer, a.p)?;
    let solver = a.solver.solver();
    let rows = compare_methods(&bundle, layer, &a.baseline, kind, p, &solver)?;
    let tasks: Vec<String> = bundle
        .calibration
        .iter()
        .map(|c| c.task.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let text =
        match a.format {
            Format::Json => {
                #[derive(Serialize)]
                struct RowJson<'a> {
                    method: &'a str,
                    layer: usize,
                    status: &'static str,
                    #[serde(flatten)]
                    scores: Option<&'a CompareScores>,
                    error: Option<&'a str>,
                }
                let out: Vec<RowJson> = rows
                    .iter()
                    .map(|r| RowJson {
                        method: &r.method,
                        layer,
                        status: if r.outcome.is_ok() { "ok" } else { "failed" },
                        scores: r.outcome.as_ref().ok(),
                        error: r.outcome.as_ref().err().map(String::as_str),
                    })
                    .collect();
                serde_json::to_string_pretty(&out).expect("plain rows") + "\n"
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let mut header = vec![
                    "method".to_string(),
                    "layer".into(),
                    "objective".into(),
                    "mse".into(),
                ];
                header.extend(tasks.iter().map(|t| format!("task_mse_{t}")));
                w.write_record(&header)?;
                for r in &rows {
                    let mut row = vec![r.method.clone(), layer.to_string()];
                    match &r.outcome {
                        Ok(s) => {
                            row.push(fmt_num(s.objective));
                            row.push(fmt_num(s.mse));
                            row.extend(tasks.iter().map(|t| {
                                s.task_mse.get(t).map(|v| fmt_num(*v)).unwrap_or_default()
                            }));
                        }
                        Err(_) => {
                            row.extend(std::iter::repeat_n("failed".to_string(), 2 + tasks.len()))
                        }
                    }
                    w.write_record(&row)?;
                }
                String::from_utf8(w.into_inner().map_err(|e| CliError::usage(e.to_string()))?)
                    .expect("csv is utf-8")
            }
        };
    write_output(a.out.as_deref(), &text)?;

    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .err()
                .map(|e| format!("{}: {e}", r.method))
        })
        .collect();
    if !failed.is_empty() {
        return Err(CliError::method(format!(
            "methods failed: {}",
            failed.join("; ")
        )));
    }
    check_dominance(&rows).map_err(CliError::method)
}
