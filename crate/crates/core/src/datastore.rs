//! JSON bundle files and seeded synthetic instances.
//!
//! Matrices are stored row-major as `{rows, cols, data}`. Numbers are
//! written as the shortest decimal that parses back to the same `f64`, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::basis::random_basis;
use crate::error::{MergeError, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, orthonormality_deviation, stream_rng};
use crate::multilayer::DeltasByLayer;
use crate::netcore::{Activation, LinearNetwork, ResidualUpdate};
use crate::qp::CalibrationSet;

pub const FORMAT_VERSION: u32 = 1;

/// Calibration samples belonging to one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCalibration {
    pub task: String,
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
}

/// A base network, its fine-tuning residuals and the calibration data used
/// to merge them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub base: LinearNetwork,
    /// Sorted by layer; the order within a layer is the task order.
    pub residuals: Vec<ResidualUpdate>,
    pub calibration: Vec<TaskCalibration>,
    pub meta: BTreeMap<String, Value>,
}

impl ModelBundle {
    pub fn new(
        base: LinearNetwork,
        mut residuals: Vec<ResidualUpdate>,
        calibration: Vec<TaskCalibration>,
        meta: BTreeMap<String, Value>,
    ) -> Result<Self> {
        residuals.sort_by_key(|r| r.layer);
        let bundle = Self {
            base,
            residuals,
            calibration,
            meta,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.residuals {
            r.check_against(&self.base)?;
        }
        let (din, dout) = (self.base.input_dim(), self.base.output_dim());
        for c in &self.calibration {
            if c.inputs.len() != c.targets.len() {
                return Err(MergeError::dims(
                    "calibration targets",
                    c.inputs.len(),
                    c.targets.len(),
                ));
            }
            if let Some(x) = c.inputs.iter().find(|x| x.len() != din) {
                return Err(MergeError::dims("calibration input", din, x.len()));
            }
            if let Some(y) = c.targets.iter().find(|y| y.len() != dout) {
                return Err(MergeError::dims("calibration target", dout, y.len()));
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.residuals {
            if !out.contains(&r.task) {
                out.push(r.task.clone());
            }
        }
        out
    }

    pub fn merge_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.residuals.iter().map(|r| r.layer).collect();
        layers.dedup();
        layers
    }

    pub fn deltas_by_layer(&self) -> DeltasByLayer {
        let mut out = DeltasByLayer::new();
        for r in &self.residuals {
            out.entry(r.layer).or_default().push(r.clone());
        }
        out
    }

    pub fn layer_deltas(&self, layer: usize) -> Vec<ResidualUpdate> {
        self.residuals
            .iter()
            .filter(|r| r.layer == layer)
            .cloned()
            .collect()
    }

    /// All tasks' samples in one set, unweighted, with task labels kept.
    pub fn pooled_calibration(&self) -> Result<CalibrationSet> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut tasks = Vec::new();
        for c in &self.calibration {
            inputs.extend(c.inputs.iter().cloned());
            targets.extend(c.targets.iter().cloned());
            tasks.extend(std::iter::repeat_n(Some(c.task.clone()), c.inputs.len()));
        }
        CalibrationSet::with_tasks(inputs, targets, tasks)
    }

    /// Base plus every residual labelled `task`.
    pub fn tuned_network(&self, task: &str) -> Result<LinearNetwork> {
        let mut net = self.base.clone();
        for r in self.residuals.iter().filter(|r| r.task == task) {
            net = net.with_residual(r)?;
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixFile {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }

    fn into_matrix(self, path: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(parse_error(
                path,
                format!(
                    "{} values for a {}x{} matrix",
                    self.data.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    layers: Vec<MatrixFile>,
    activations: Vec<Activation>,
}

impl NetworkFile {
    fn from_network(net: &LinearNetwork) -> Self {
        Self {
            layers: net.layers().iter().map(MatrixFile::from_matrix).collect(),
            activations: net.activations().to_vec(),
        }
    }

    fn into_network(self, path: &str) -> Result<LinearNetwork> {
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.into_matrix(&format!("{path}.layers[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        LinearNetwork::new(layers, self.activations).map_err(|e| parse_error(path, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ResidualFile {
    layer: usize,
    task: String,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    task: String,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    version: u32,
    base: NetworkFile,
    residuals: Vec<ResidualFile>,
    calibration: Vec<CalibrationFile>,
    #[serde(default)]
    meta: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(flatten)]
    network: NetworkFile,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn parse_error(path: impl Into<String>, message: impl Into<String>) -> MergeError {
    MergeError::Parse {
        path: path.into(),
        message: message.into(),
    }
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MergeError::NonFinite(
            "bundle data (JSON cannot hold NaN or infinity)",
        ))
    }
}

/// Deserialises `text`, reporting a version mismatch ahead of any structural
/// error so older or newer files fail with a clear message.
fn parse_versioned<T: serde::de::DeserializeOwned>(
    text: &str,
    version_of: impl Fn(&T) -> u32,
) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    match serde_path_to_error::deserialize::<_, T>(&mut de) {
        Ok(value) => {
            de.end().map_err(|e| parse_error("", e.to_string()))?;
            let found = version_of(&value);
            if found != FORMAT_VERSION {
                return Err(MergeError::Version {
                    found,
                    expected: FORMAT_VERSION,
                });
            }
            Ok(value)
        }
        Err(err) => {
            if let Ok(probe) = serde_json::from_str::<VersionProbe>(text) {
                if probe.version != FORMAT_VERSION {
                    return Err(MergeError::Version {
                        found: probe.version,
                        expected: FORMAT_VERSION,
                    });
                }
            }
            let path = err.path().to_string();
            Err(parse_error(path, err.into_inner().to_string()))
        }
    }
}

pub fn bundle_to_string(bundle: &ModelBundle) -> Result<String> {
    bundle.validate()?;
    for l in bundle.base.layers() {
        check_finite(l.iter())?;
    }
    let residuals = bundle
        .residuals
        .iter()
        .map(|r| {
            check_finite(r.delta.iter())?;
            Ok(ResidualFile {
                layer: r.layer,
                task: r.task.clone(),
                data: r.delta.transpose().iter().copied().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let calibration = bundle
        .calibration
        .iter()
        .map(|c| {
            for v in c.inputs.iter().chain(&c.targets) {
                check_finite(v.iter())?;
            }
            Ok(CalibrationFile {
                task: c.task.clone(),
                inputs: c
                    .inputs
                    .iter()
                    .map(|x| x.iter().copied().collect())
                    .collect(),
                targets: c
                    .targets
                    .iter()
                    .map(|y| y.iter().copied().collect())
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = BundleFile {
        version: FORMAT_VERSION,
        base: NetworkFile::from_network(&bundle.base),
        residuals,
        calibration,
        meta: bundle.meta.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| parse_error("", e.to_string()))
}

pub fn bundle_from_str(text: &str) -> Result<ModelBundle> {
    let file: BundleFile = parse_versioned(text, |f: &BundleFile| f.version)?;
    let base = file.base.into_network("base")?;
    let residuals = file
        .residuals
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let path = format!("residuals[{i}]");
            let w = base
                .layer(r.layer)
                .map_err(|e| parse_error(&path, e.to_string()))?;
            let m = MatrixFile {
                rows: w.nrows(),
                cols: w.ncols(),
                data: r.data,
            }
            .into_matrix(&format!("{path}.data"))?;
            ResidualUpdate::new(r.layer, m, r.task).map_err(|e| parse_error(&path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let calibration = file
        .calibration
        .into_iter()
        .map(|c| TaskCalibration {
            task: c.task,
            inputs: c.inputs.into_iter().map(DVector::from_vec).collect(),
            targets: c.targets.into_iter().map(DVector::from_vec).collect(),
        })
        .collect();
    ModelBundle::new(base, residuals, calibration, file.meta)
}

fn write_file(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|source| MergeError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| MergeError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), bundle_to_string(bundle)?)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    bundle_from_str(&read_file(path.as_ref())?)
}

pub fn network_to_string(net: &LinearNetwork) -> Result<String> {
    for l in net.layers() {
        check_finite(l.iter())?;
    }
    let file = ModelFile {
        version: FORMAT_VERSION,
        network: NetworkFile::from_network(net),
    };
    serde_json::to_string_pretty(&file).map_err(|e| parse_error("", e.to_string()))
}

pub fn network_from_str(text: &str) -> Result<LinearNetwork> {
    let file: ModelFile = parse_versioned(text, |f: &ModelFile| f.version)?;
    file.network.into_network("")
}

pub fn save_network(net: &LinearNetwork, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), network_to_string(net)?)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<LinearNetwork> {
    network_from_str(&read_file(path.as_ref())?)
}

fn task_name(k: usize) -> String {
    format!("task{}", k + 1)
}

// RNG stream ids, one per consumer.
const STREAM_BASE: u64 = 1;
const STREAM_DELTAS: u64 = 2;
const STREAM_INPUTS: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_DIRECTIONS: u64 = 5;

/// Linear networks with Gaussian weights and Gaussian residuals at one or
/// more layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTaskSpec {
    /// Layer widths `[d, hidden.., c]`.
    pub widths: Vec<usize>,
    /// 1-based layers that receive residual updates.
    pub merge_layers: Vec<usize>,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub delta_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for LinearTaskSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 6, 5],
            merge_layers: vec![1],
            tasks: 3,
            samples_per_task: 20,
            delta_scale: 0.3,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(MergeError::invalid(format!(
            "widths {widths:?} need at least two positive entries"
        )));
    }
    Ok(())
}

fn scaled_gaussian(
    rng: &mut rand_chacha::ChaCha8Rng,
    rows: usize,
    cols: usize,
    gain: f64,
) -> DMatrix<f64> {
    gaussian_matrix(rng, rows, cols, gain / (cols as f64).sqrt())
}

fn base_layers(widths: &[usize], gain: f64, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = stream_rng(seed, STREAM_BASE);
    widths
        .windows(2)
        .map(|w| scaled_gaussian(&mut rng, w[1], w[0], gain))
        .collect()
}

/// Per-task calibration with targets taken from each task's fine-tuned
/// model, optionally perturbed by Gaussian noise.
fn tuned_calibration(
    base: &LinearNetwork,
    residuals: &[ResidualUpdate],
    tasks: usize,
    samples: usize,
    noise: f64,
    seed: u64,
    input_for: impl Fn(&mut rand_chacha::ChaCha8Rng, usize) -> DVector<f64>,
) -> Result<Vec<TaskCalibration>> {
    let mut inputs_rng = stream_rng(seed, STREAM_INPUTS);
    let mut noise_rng = stream_rng(seed, STREAM_NOISE);
    let mut out = Vec::with_capacity(tasks);
    for k in 0..tasks {
        let task = task_name(k);
        let mut tuned = base.clone();
        for r in residuals.iter().filter(|r| r.task == task) {
            tuned = tuned.with_residual(r)?;
        }
        let mut inputs = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x = input_for(&mut inputs_rng, k);
            let mut y = tuned.forward(&x)?;
            if noise > 0.0 {
                y += gaussian_vector(&mut noise_rng, y.len(), noise);
            }
            inputs.push(x);
            targets.push(y);
        }
        out.push(TaskCalibration {
            task,
            inputs,
            targets,
        });
    }
    Ok(out)
}

pub fn gen_linear_tasks(spec: &LinearTaskSpec) -> Result<ModelBundle> {
    check_widths(&spec.widths)?;
    let depth = spec.widths.len() - 1;
    if spec.tasks == 0 || spec.samples_per_task == 0 {
        return Err(MergeError::invalid(
            "need at least one task and one sample per task",
        ));
    }
    if spec.merge_layers.is_empty() || spec.merge_layers.iter().any(|&l| l == 0 || l > depth) {
        return Err(MergeError::invalid(format!(
            "merge layers {:?} must be non-empty and within 1..={depth}",
            spec.merge_layers
        )));
    }
    if !(spec.delta_scale >= 0.0 && spec.noise >= 0.0) {
        return Err(MergeError::invalid(
            "delta_scale and noise must be non-negative",
        ));
    }
    let base = LinearNetwork::linear(base_layers(&spec.widths, 1.0, spec.seed))?;
    let mut layers = spec.merge_layers.clone();
    layers.sort_unstable();
    layers.dedup();
    let mut rng = stream_rng(spec.seed, STREAM_DELTAS);
    let mut residuals = Vec::new();
    for &layer in &layers {
        let (rows, cols) = (spec.widths[layer], spec.widths[layer - 1]);
        for k in 0..spec.tasks {
            let delta = scaled_gaussian(&mut rng, rows, cols, spec.delta_scale);
            residuals.push(ResidualUpdate::new(layer, delta, task_name(k))?);
        }
    }
    let d = spec.widths[0];
    let calibration = tuned_calibration(
        &base,
        &residuals,
        spec.tasks,
        spec.samples_per_task,
        spec.noise,
        spec.seed,
        |rng, _| gaussian_vector(rng, d, 1.0),
    )?;
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), json!("linear"));
    meta.insert(
        "spec".into(),
        serde_json::to_value(spec).expect("plain spec"),
    );
    ModelBundle::new(base, residuals, calibration, meta)
}

/// Two-layer linear instance with `δ_k = σ_k u vᵀ + R_k`, `uᵀR_k = 0`, and
/// a downstream layer with orthonormal columns. Calibration targets come from
/// the `target` task's fine-tuned model only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedDirectionSpec {
    pub sigmas: Vec<f64>,
    /// 1-based index of the task whose outputs are the targets.
    pub target: usize,
    pub input_dim: usize,
    pub r: usize,
    pub c: usize,
    pub samples: usize,
    /// Scale of the `u`-orthogonal remainder `R_k`.
    pub remainder_scale: f64,
    pub seed: u64,
}

impl Default for SharedDirectionSpec {
    fn default() -> Self {
        Self {
            sigmas: vec![1.0, 2.0],
            target: 1,
            input_dim: 6,
            r: 4,
            c: 5,
            samples: 16,
            remainder_scale: 0.1,
            seed: 0,
        }
    }
}

pub const META_SHARED_U: &str = "shared_u";

pub fn gen_shared_direction_instance(spec: &SharedDirectionSpec) -> Result<ModelBundle> {
    let k = spec.sigmas.len();
    if k == 0 || spec.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(MergeError::invalid(
            "sigmas must be a non-empty list of finite values >= 0",
        ));
    }
    if spec.target == 0 || spec.target > k {
        return Err(MergeError::invalid(format!(
            "target {} outside 1..={k}",
            spec.target
        )));
    }
    if spec.r == 0 || spec.input_dim == 0 || spec.samples == 0 {
        return Err(MergeError::invalid(
            "dimensions and sample count must be positive",
        ));
    }
    if spec.c < spec.r {
        return Err(MergeError::invalid(format!(
            "c = {} < r = {}: no isometric downstream map exists",
            spec.c, spec.r
        )));
    }
    let mut rng = stream_rng(spec.seed, STREAM_DIRECTIONS);
    let u = gaussian_vector(&mut rng, spec.r, 1.0).normalize();
    let v = gaussian_vector(&mut rng, spec.input_dim, 1.0).normalize();
    let lower = base_layers(&[spec.input_dim, spec.r], 1.0, spec.seed).remove(0);
    let downstream = random_basis(spec.c, spec.r, spec.seed ^ STREAM_BASE)?
        .columns()
        .clone();
    let base = LinearNetwork::linear(vec![lower, downstream.clone()])?;

    let complement = DMatrix::identity(spec.r, spec.r) - &u * u.transpose();
    let mut delta_rng = stream_rng(spec.seed, STREAM_DELTAS);
    let mut residuals = Vec::with_capacity(k);
    for (i, &sigma) in spec.sigmas.iter().enumerate() {
        let noise = scaled_gaussian(&mut delta_rng, spec.r, spec.input_dim, spec.remainder_scale);
        let remainder = &complement * noise;
        let leak = (u.transpose() * &remainder).amax();
        if leak > 1e-12 {
            return Err(MergeError::AssumptionViolated(format!(
                "shared direction: max |uᵀR| = {leak:e} for task {}",
                i + 1
            )));
        }
        let delta = &u * v.transpose() * sigma + remainder;
        residuals.push(ResidualUpdate::new(1, delta, task_name(i))?);
    }
    let iso = orthonormality_deviation(&downstream);
    if iso > 1e-10 {
        return Err(MergeError::AssumptionViolated(format!(
            "downstream isometry: max |LᵀL - I| = {iso:e}"
        )));
    }

    let target = task_name(spec.target - 1);
    let mut inputs_rng = stream_rng(spec.seed, STREAM_INPUTS);
    let tuned = base.with_residual(&residuals[spec.target - 1])?;
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut targets = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let x = gaussian_vector(&mut inputs_rng, spec.input_dim, 1.0);
        targets.push(tuned.forward(&x)?);
        inputs.push(x);
    }
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), json!("shared-direction"));
    meta.insert(
        "spec".into(),
        serde_json::to_value(spec).expect("plain spec"),
    );
    meta.insert(
        META_SHARED_U.into(),
        json!(u.iter().copied().collect::<Vec<f64>>()),
    );
    ModelBundle::new(
        base,
        residuals,
        vec![TaskCalibration {
            task: target,
            inputs,
            targets,
        }],
        meta,
    )
}

/// Shared direction `u` recorded by [`gen_shared_direction_instance`].
pub fn shared_direction(bundle: &ModelBundle) -> Option<DVector<f64>> {
    let values = bundle.meta.get(META_SHARED_U)?.as_array()?;
    let v: Option<Vec<f64>> = values.iter().map(Value::as_f64).collect();
    v.map(DVector::from_vec)
}

/// ReLU classifier fine-tuned per task by plain gradient descent on one
/// layer, each task seeing a disjoint subset of synthetic classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluTaskSpec {
    pub widths: Vec<usize>,
    pub merge_layer: usize,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Spread of inputs around their class centre.
    pub class_spread: f64,
    pub seed: u64,
}

impl Default for ReluTaskSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 12, 8, 4],
            merge_layer: 2,
            tasks: 2,
            samples_per_task: 32,
            steps: 20,
            step_size: 0.05,
            class_spread: 0.5,
            seed: 0,
        }
    }
}

pub fn gen_relu_tasks(spec: &ReluTaskSpec) -> Result<ModelBundle> {
    check_widths(&spec.widths)?;
    let depth = spec.widths.len() - 1;
    let classes = spec.widths[depth];
    if spec.merge_layer == 0 || spec.merge_layer > depth {
        return Err(MergeError::invalid(format!(
            "merge layer {} outside 1..={depth}",
            spec.merge_layer
        )));
    }
    if spec.tasks == 0 || spec.tasks > classes {
        return Err(MergeError::invalid(format!(
            "{} tasks cannot get disjoint subsets of {classes} classes",
            spec.tasks
        )));
    }
    if spec.samples_per_task == 0
        || !(spec.step_size.is_finite() && spec.step_size >= 0.0)
        || !(spec.class_spread.is_finite() && spec.class_spread >= 0.0)
    {
        return Err(MergeError::invalid(
            "invalid sample count, step size or spread",
        ));
    }
    let activations = vec![Activation::Relu; depth - 1];
    let base = LinearNetwork::new(
        base_layers(&spec.widths, 2f64.sqrt(), spec.seed),
        activations,
    )?;

    let d = spec.widths[0];
    let mut centre_rng = stream_rng(spec.seed, STREAM_DIRECTIONS);
    let centres: Vec<DVector<f64>> = (0..classes)
        .map(|_| gaussian_vector(&mut centre_rng, d, 1.0))
        .collect();
    let subsets: Vec<Vec<usize>> = (0..spec.tasks)
        .map(|k| (k..classes).step_by(spec.tasks).collect())
        .collect();

    let n = spec.merge_layer;
    let mut data_rng = stream_rng(spec.seed, STREAM_DELTAS);
    let mut residuals = Vec::with_capacity(spec.tasks);
    for (k, subset) in subsets.iter().enumerate() {
        let train: Vec<(DVector<f64>, DVector<f64>)> = (0..spec.samples_per_task)
            .map(|i| {
                let class = subset[i % subset.len()];
                let x = &centres[class] + gaussian_vector(&mut data_rng, d, spec.class_spread);
                (
                    x,
                    DVector::from_fn(classes, |c, _| if c == class { 1.0 } else { 0.0 }),
                )
            })
            .collect();
        let mut tuned = base.clone();
        for _ in 0..spec.steps {
            let mut grad = DMatrix::zeros(spec.widths[n], spec.widths[n - 1]);
            for (x, y) in &train {
                let z = tuned.layer_input(n, x)?;
                let jac = tuned.linearize_downstream(n, x)?.matrix;
                let err = tuned.forward(x)? - y;
                grad += jac.transpose() * err * z.transpose();
            }
            grad /= train.len() as f64;
            tuned = tuned.apply_merged_residual(n, &(grad * -spec.step_size))?;
        }
        let delta = tuned.layer(n)? - base.layer(n)?;
        residuals.push(ResidualUpdate::new(n, delta, task_name(k))?);
    }

    let calibration = tuned_calibration(
        &base,
        &residuals,
        spec.tasks,
        spec.samples_per_task,
        0.0,
        spec.seed,
        |rng, k| {
            let subset = &subsets[k];
            let class = subset[(rng.random::<u32>() as usize) % subset.len()];
            &centres[class] + gaussian_vector(rng, d, spec.class_spread)
        },
    )?;
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), json!("relu"));
    meta.insert(
        "spec".into(),
        serde_json::to_value(spec).expect("plain spec"),
    );
    meta.insert("class_subsets".into(), json!(subsets));
    ModelBundle::new(base, residuals, calibration, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: &str = r#"{
      "version": 1,
      "base": {"layers": [{"rows": 1, "cols": 2, "data": [2.0, -1.0]}], "activations": []},
      "residuals": [{"layer": 1, "task": "a", "data": [0.5, 0.25]}],
      "calibration": [{"task": "a", "inputs": [[1.0, 2.0]], "targets": [[1.0]]}],
      "meta": {}
    }"#;

    #[test]
    fn golden_bundle_loads_and_runs() {
        let b = bundle_from_str(GOLDEN).unwrap();
        let x = &b.calibration[0].inputs[0];
        assert_eq!(b.base.forward(x).unwrap()[0], 0.0);
        assert_eq!(b.tuned_network("a").unwrap().forward(x).unwrap()[0], 1.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = gen_linear_tasks(&LinearTaskSpec {
            noise: 0.1,
            ..Default::default()
        })
        .unwrap();
        let text = bundle_to_string(&b).unwrap();
        let back = bundle_from_str(&text).unwrap();
        assert_eq!(back, b);
        assert_eq!(bundle_to_string(&back).unwrap(), text);
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"version": 1, "base": {"layers": [], "activations": []}, "residuals": []}"#;
        match bundle_from_str(text) {
            Err(MergeError::Parse { message, .. }) => assert!(message.contains("calibration")),
            other => panic!("unexpected {other:?}"),
        }
        let truncated = &GOLDEN[..GOLDEN.find("\"targets\"").unwrap() + 14];
        match bundle_from_str(truncated) {
            Err(MergeError::Parse { path, .. }) => {
                assert!(path.starts_with("calibration"), "{path}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = GOLDEN.replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            bundle_from_str(&text),
            Err(MergeError::Version {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn bad_matrix_length_is_rejected() {
        let text = GOLDEN.replace("[0.5, 0.25]", "[0.5]");
        assert!(matches!(
            bundle_from_str(&text),
            Err(MergeError::Parse { .. })
        ));
    }

    #[test]
    fn network_round_trip() {
        let b = gen_relu_tasks(&ReluTaskSpec::default()).unwrap();
        let text = network_to_string(&b.base).unwrap();
        assert_eq!(network_from_str(&text).unwrap(), b.base);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = bundle_to_string(&gen_linear_tasks(&LinearTaskSpec::default()).unwrap()).unwrap();
        let b = bundle_to_string(&gen_linear_tasks(&LinearTaskSpec::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let a = bundle_to_string(&gen_relu_tasks(&ReluTaskSpec::default()).unwrap()).unwrap();
        let b = bundle_to_string(&gen_relu_tasks(&ReluTaskSpec::default()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_delta_scale_gives_zero_residuals() {
        let b = gen_linear_tasks(&LinearTaskSpec {
            delta_scale: 0.0,
            ..Default::default()
        })
        .unwrap();
        let calib = b.pooled_calibration().unwrap();
        let res = crate::qp::base_residuals(&b.base, &calib).unwrap();
        assert!(res.iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn relu_zero_steps_gives_zero_deltas() {
        let b = gen_relu_tasks(&ReluTaskSpec {
            steps: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(b
            .residuals
            .iter()
            .all(|r| r.delta.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn relu_updates_touch_only_merge_layer() {
        let spec = ReluTaskSpec::default();
        let b = gen_relu_tasks(&spec).unwrap();
        for task in b.tasks() {
            let tuned = b.tuned_network(&task).unwrap();
            for l in 1..=tuned.depth() {
                let same = tuned.layer(l).unwrap() == b.base.layer(l).unwrap();
                assert_eq!(same, l != spec.merge_layer, "layer {l}");
            }
        }
    }

    #[test]
    fn shared_direction_instance_validates() {
        let b = gen_shared_direction_instance(&SharedDirectionSpec::default()).unwrap();
        let u = shared_direction(&b).unwrap();
        assert!((u.norm() - 1.0).abs() < 1e-12);
        assert!(orthonormality_deviation(b.base.layer(2).unwrap()) <= 1e-10);
        assert!(gen_shared_direction_instance(&SharedDirectionSpec {
            c: 3,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn generator_rejects_bad_specs() {
        assert!(gen_linear_tasks(&LinearTaskSpec {
            tasks: 0,
            ..Default::default()
        })
        .is_err());
        assert!(gen_linear_tasks(&LinearTaskSpec {
            merge_layers: vec![3],
            ..Default::default()
        })
        .is_err());
        assert!(gen_relu_tasks(&ReluTaskSpec {
            tasks: 5,
            ..Default::default()
        })
        .is_err());
    }
}
