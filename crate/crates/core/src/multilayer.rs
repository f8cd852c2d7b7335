//! Greedy layer-by-layer merging. Every step rebuilds the single-layer QP
//! from the current partially merged network, so each subproblem is an exact
//! convex QP even though the joint multi-layer objective is not.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::baselines::Baseline;
use crate::basis::{build_basis, sample_diagnostics, BasisKind, BasisOrigin, SubspaceDiagnostics};
use crate::error::{MergeError, Result};
use crate::netcore::{LinearNetwork, ResidualUpdate};
use crate::qp::{
    base_residuals, basis_merge, build_diagonal_qp, calibration_loss, diagonal_merge,
    general_qp_from_samples, linearize_samples, solve_box_constrained, solve_unconstrained,
    BoxOptions, CalibrationSet, MergeCoefficients, Solution,
};

pub type DeltasByLayer = BTreeMap<usize, Vec<ResidualUpdate>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub enum QpSolver {
    /// Minimum-norm closed form.
    #[default]
    ClosedForm,
    /// Projected Adam on a box.
    Box {
        lo: f64,
        hi: f64,
        options: BoxOptions,
    },
}

impl QpSolver {
    pub fn solve(&self, qp: &crate::qp::QuadraticObjective) -> Result<Solution> {
        match self {
            QpSolver::ClosedForm => solve_unconstrained(qp),
            QpSolver::Box { lo, hi, options } => solve_box_constrained(qp, *lo, *hi, options),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LayerOrder {
    #[default]
    BottomUp,
    TopDown,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepMethod {
    /// Diagonal-mask QP.
    Qp,
    /// General-basis QP with `p` directions of the given family.
    QpBasis {
        kind: BasisKind,
        p: usize,
    },
    Baseline(Baseline),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanStep {
    pub layer: usize,
    pub method: StepMethod,
}

/// Ordered merge steps. Within a pass, layers are strictly increasing
/// (bottom-up) or strictly decreasing (top-down).
#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    steps: Vec<PlanStep>,
}

impl MergePlan {
    pub fn new(steps: Vec<PlanStep>, order: LayerOrder) -> Result<Self> {
        if steps.is_empty() {
            return Err(MergeError::invalid("merge plan has no steps"));
        }
        for w in steps.windows(2) {
            let ok = match order {
                LayerOrder::BottomUp => w[0].layer < w[1].layer,
                LayerOrder::TopDown => w[0].layer > w[1].layer,
            };
            if !ok {
                return Err(MergeError::invalid(format!(
                    "plan layers {} then {} violate {:?} order",
                    w[0].layer, w[1].layer, order
                )));
            }
        }
        Ok(Self { steps })
    }

    pub fn qp_layers(layers: impl IntoIterator<Item = usize>, order: LayerOrder) -> Result<Self> {
        Self::uniform(layers, StepMethod::Qp, order)
    }

    /// The same method at every listed layer.
    pub fn uniform(
        layers: impl IntoIterator<Item = usize>,
        method: StepMethod,
        order: LayerOrder,
    ) -> Result<Self> {
        let mut layers: Vec<usize> = layers.into_iter().collect();
        layers.sort_unstable();
        layers.dedup();
        if order == LayerOrder::TopDown {
            layers.reverse();
        }
        Self::new(
            layers
                .into_iter()
                .map(|layer| PlanStep {
                    layer,
                    method: method.clone(),
                })
                .collect(),
            order,
        )
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequentialOptions {
    pub solver: QpSolver,
    pub order: LayerOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    pub method: String,
    /// Calibration loss of the current model before this step.
    pub objective_before: f64,
    /// QP objective at the solution for QP steps, exact loss otherwise.
    pub objective_after: f64,
    /// Total diagonal mask now applied at this layer, or the basis
    /// coefficients of a general-basis step.
    pub coefficients: Option<MergeCoefficients>,
    /// Captured-energy diagnostics of the basis, for general-basis steps.
    pub diagnostics: Option<SubspaceDiagnostics>,
    /// Exact calibration MSE right after this step.
    pub mse_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeReport {
    pub layers: Vec<LayerRecord>,
    pub calibration_loss: f64,
    pub calibration_mse: f64,
    pub task_mse: BTreeMap<String, f64>,
}

impl MergeReport {
    /// Report for `net` on `calib` with the given per-layer records.
    pub fn evaluate(
        layers: Vec<LayerRecord>,
        net: &LinearNetwork,
        calib: &CalibrationSet,
    ) -> Result<Self> {
        let residuals = base_residuals(net, calib)?;
        let loss: f64 = residuals.iter().map(|b| b.norm_squared()).sum();
        let mut per_task: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (j, b) in residuals.iter().enumerate() {
            if let Some(task) = calib.task(j) {
                let e = per_task.entry(task.to_string()).or_default();
                e.0 += b.norm_squared();
                e.1 += 1;
            }
        }
        Ok(Self {
            layers,
            calibration_loss: loss,
            calibration_mse: loss / calib.len() as f64,
            task_mse: per_task
                .into_iter()
                .map(|(t, (s, n))| (t, s / n as f64))
                .collect(),
        })
    }
}

fn layer_deltas(deltas: &DeltasByLayer, layer: usize) -> Result<&[ResidualUpdate]> {
    deltas
        .get(&layer)
        .map(Vec::as_slice)
        .filter(|d| !d.is_empty())
        .ok_or_else(|| MergeError::invalid(format!("no residual updates for layer {layer}")))
}

/// Standalone single-layer QP merge. Returns the merged network and the
/// solution.
pub fn single_layer_merge(
    net: &LinearNetwork,
    deltas: &[ResidualUpdate],
    calib: &CalibrationSet,
    solver: &QpSolver,
) -> Result<(LinearNetwork, Solution)> {
    let qp = build_diagonal_qp(net, deltas, calib)?;
    let sol = solver.solve(&qp)?;
    let merged = diagonal_merge(deltas, &sol.coefficients.values)?;
    Ok((net.apply_merged_residual(deltas[0].layer, &merged)?, sol))
}

/// Executes a plan step by step on a working copy of `net`.
///
/// A QP step at a layer that already carries a merge (from an earlier
/// baseline step) solves for a correction on top of it; the recorded
/// coefficients are the total mask.
pub fn run_plan(
    net: &LinearNetwork,
    deltas: &DeltasByLayer,
    calib: &CalibrationSet,
    plan: &MergePlan,
    solver: &QpSolver,
) -> Result<(LinearNetwork, MergeReport)> {
    if calib.is_empty() {
        return Err(MergeError::EmptyCalibration);
    }
    let mut current = net.clone();
    let mut applied: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    let mut records = Vec::new();
    for step in plan.steps() {
        let ds = layer_deltas(deltas, step.layer)?;
        let before = calibration_loss(&current, calib)?;
        match &step.method {
            StepMethod::Qp => {
                let qp = build_diagonal_qp(&current, ds, calib)?;
                let sol = solver.solve(&qp)?;
                let correction = diagonal_merge(ds, &sol.coefficients.values)?;
                current = current.apply_merged_residual(step.layer, &correction)?;
                let total = match applied.get(&step.layer) {
                    Some(prev) => prev + &sol.coefficients.values,
                    None => sol.coefficients.values.clone(),
                };
                applied.insert(step.layer, total.clone());
                records.push(LayerRecord {
                    layer: step.layer,
                    method: "qp-diag".into(),
                    objective_before: qp.constant,
                    objective_after: sol.objective,
                    coefficients: Some(MergeCoefficients {
                        values: total,
                        basis: sol.coefficients.basis,
                    }),
                    diagnostics: None,
                    mse_after: 0.0,
                });
            }
            StepMethod::QpBasis { kind, p } => {
                let samples = linearize_samples(&current, step.layer, calib)?;
                let basis = build_basis(*kind, &samples, ds, *p)?;
                let qp = general_qp_from_samples(ds, &samples, &basis)?;
                let sol = solver.solve(&qp)?;
                let correction = basis_merge(ds, &sol.coefficients.values, &basis)?;
                current = current.apply_merged_residual(step.layer, &correction)?;
                applied.remove(&step.layer);
                records.push(LayerRecord {
                    layer: step.layer,
                    method: format!("qp-basis:{kind}:p{}", basis.dim()),
                    objective_before: qp.constant,
                    objective_after: sol.objective,
                    coefficients: Some(sol.coefficients),
                    diagnostics: Some(sample_diagnostics(&samples, &basis)?),
                    mse_after: 0.0,
                });
            }
            StepMethod::Baseline(b) => {
                let mask = b.mask(ds)?;
                let merged = b.merge(&current, ds, calib)?;
                current = current.apply_merged_residual(step.layer, &merged)?;
                if let Some(m) = &mask {
                    applied.insert(step.layer, m.clone());
                }
                records.push(LayerRecord {
                    layer: step.layer,
                    method: b.to_string(),
                    objective_before: before,
                    objective_after: calibration_loss(&current, calib)?,
                    coefficients: mask.map(|values| MergeCoefficients {
                        values,
                        basis: BasisOrigin::Standard,
                    }),
                    diagnostics: None,
                    mse_after: 0.0,
                });
            }
        }
        if let Some(last) = records.last_mut() {
            last.mse_after = calibration_loss(&current, calib)? / calib.len() as f64;
        }
    }
    let report = MergeReport::evaluate(records, &current, calib)?;
    Ok((current, report))
}

/// Sequential QP over every layer that has updates.
pub fn sequential_merge(
    net: &LinearNetwork,
    deltas: &DeltasByLayer,
    calib: &CalibrationSet,
    opts: &SequentialOptions,
) -> Result<(LinearNetwork, MergeReport)> {
    if deltas.is_empty() {
        return Err(MergeError::NoResiduals);
    }
    let plan = MergePlan::qp_layers(deltas.keys().copied(), opts.order)?;
    run_plan(net, deltas, calib, &plan, &opts.solver)
}

/// Baseline merge at every layer, then QP refinement of `refine_layers` in
/// ascending order, each re-solved from the baseline-merged state.
pub fn hybrid_refine(
    net: &LinearNetwork,
    deltas: &DeltasByLayer,
    calib: &CalibrationSet,
    init: &Baseline,
    refine_layers: &[usize],
    solver: &QpSolver,
) -> Result<(LinearNetwork, MergeReport)> {
    hybrid_refine_with(
        net,
        deltas,
        calib,
        init,
        refine_layers,
        &StepMethod::Qp,
        solver,
    )
}

/// [`hybrid_refine`] with an arbitrary refinement step.
pub fn hybrid_refine_with(
    net: &LinearNetwork,
    deltas: &DeltasByLayer,
    calib: &CalibrationSet,
    init: &Baseline,
    refine_layers: &[usize],
    refine: &StepMethod,
    solver: &QpSolver,
) -> Result<(LinearNetwork, MergeReport)> {
    if deltas.is_empty() {
        return Err(MergeError::NoResiduals);
    }
    if let StepMethod::Baseline(b) = refine {
        return Err(MergeError::invalid(format!(
            "refinement must be a QP step, got {b}"
        )));
    }
    for l in refine_layers {
        if !deltas.contains_key(l) {
            return Err(MergeError::invalid(format!(
                "refine layer {l} has no updates"
            )));
        }
    }
    let baseline = MergePlan::uniform(
        deltas.keys().copied(),
        StepMethod::Baseline(init.clone()),
        LayerOrder::BottomUp,
    )?;
    let (merged, base_report) = run_plan(net, deltas, calib, &baseline, solver)?;
    if refine_layers.is_empty() {
        return Ok((merged, base_report));
    }

    let refine_plan = MergePlan::uniform(
        refine_layers.iter().copied(),
        refine.clone(),
        LayerOrder::BottomUp,
    )?;
    let (refined, refine_report) = run_plan(&merged, deltas, calib, &refine_plan, solver)?;
    let mut records = base_report.layers;
    for mut rec in refine_report.layers {
        if *refine == StepMethod::Qp {
            let prior = records
                .iter()
                .rev()
                .find(|r| r.layer == rec.layer)
                .and_then(|r| r.coefficients.as_ref().map(|c| c.values.clone()));
            if let (Some(prev), Some(c)) = (prior, rec.coefficients.as_mut()) {
                c.values += prev;
            }
        }
        records.push(rec);
    }
    let report = MergeReport::evaluate(records, &refined, calib)?;
    Ok((refined, report))
}

/// Mean over calibration inputs of
/// `‖h(ε δ_a, ε δ_b) − h(ε δ_a) − h(ε δ_b) + h(0)‖`: the part of the joint
/// output change not explained by the two single-layer changes.
pub fn interaction_error(
    net: &LinearNetwork,
    lower: &ResidualUpdate,
    upper: &ResidualUpdate,
    calib: &CalibrationSet,
    scale: f64,
) -> Result<f64> {
    if lower.layer == upper.layer {
        return Err(MergeError::invalid(format!(
            "interaction needs two distinct layers, got {} twice",
            lower.layer
        )));
    }
    lower.check_against(net)?;
    upper.check_against(net)?;
    let a = net.apply_merged_residual(lower.layer, &(&lower.delta * scale))?;
    let b = net.apply_merged_residual(upper.layer, &(&upper.delta * scale))?;
    let ab = a.apply_merged_residual(upper.layer, &(&upper.delta * scale))?;
    let mut total = 0.0;
    for x in calib.inputs() {
        let h0 = net.forward(x)?;
        let e = ab.forward(x)? - a.forward(x)? - b.forward(x)? + h0;
        total += e.norm();
    }
    Ok(total / calib.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, gaussian_vector, stream_rng};

    fn setup(seed: u64) -> (LinearNetwork, DeltasByLayer, CalibrationSet) {
        let mut rng = stream_rng(seed, 0);
        let net = LinearNetwork::linear(vec![
            gaussian_matrix(&mut rng, 3, 3, 0.6),
            gaussian_matrix(&mut rng, 2, 3, 0.6),
        ])
        .unwrap();
        let mut deltas = DeltasByLayer::new();
        for layer in [1, 2] {
            let rows = net.layer(layer).unwrap().nrows();
            let cols = net.layer(layer).unwrap().ncols();
            deltas.insert(
                layer,
                (0..2)
                    .map(|k| {
                        ResidualUpdate::new(
                            layer,
                            gaussian_matrix(&mut rng, rows, cols, 0.2),
                            format!("t{k}"),
                        )
                        .unwrap()
                    })
                    .collect(),
            );
        }
        let xs: Vec<_> = (0..10).map(|_| gaussian_vector(&mut rng, 3, 1.0)).collect();
        let mut ys = Vec::new();
        let mut tasks = Vec::new();
        for (j, x) in xs.iter().enumerate() {
            let k = j % 2;
            let tuned = net
                .with_residual(&deltas[&1][k])
                .unwrap()
                .with_residual(&deltas[&2][k])
                .unwrap();
            ys.push(tuned.forward(x).unwrap());
            tasks.push(Some(format!("t{k}")));
        }
        (
            net,
            deltas,
            CalibrationSet::with_tasks(xs, ys, tasks).unwrap(),
        )
    }

    #[test]
    fn plan_order_is_enforced() {
        let step = |layer| PlanStep {
            layer,
            method: StepMethod::Qp,
        };
        assert!(MergePlan::new(vec![step(2), step(1)], LayerOrder::BottomUp).is_err());
        assert!(MergePlan::new(vec![step(2), step(1)], LayerOrder::TopDown).is_ok());
        assert!(MergePlan::new(vec![], LayerOrder::BottomUp).is_err());
    }

    #[test]
    fn single_layer_plan_matches_standalone() {
        let (net, mut deltas, calib) = setup(1);
        deltas.remove(&2);
        let (merged, report) =
            sequential_merge(&net, &deltas, &calib, &SequentialOptions::default()).unwrap();
        let (alone, sol) =
            single_layer_merge(&net, &deltas[&1], &calib, &QpSolver::ClosedForm).unwrap();
        assert_eq!(merged, alone);
        assert_eq!(
            report.layers[0].coefficients.as_ref().unwrap().values,
            sol.coefficients.values
        );
    }

    #[test]
    fn sequential_is_greedy_monotone() {
        let (net, deltas, calib) = setup(2);
        let (_, report) =
            sequential_merge(&net, &deltas, &calib, &SequentialOptions::default()).unwrap();
        for rec in &report.layers {
            assert!(rec.objective_after <= rec.objective_before * (1.0 + 1e-8));
        }
        assert_eq!(report.task_mse.len(), 2);
    }

    #[test]
    fn hybrid_without_refinement_is_baseline() {
        let (net, deltas, calib) = setup(3);
        let (hybrid, _) = hybrid_refine(
            &net,
            &deltas,
            &calib,
            &Baseline::Soup,
            &[],
            &QpSolver::ClosedForm,
        )
        .unwrap();
        let mut expected = net.clone();
        for (layer, ds) in &deltas {
            expected = expected
                .apply_merged_residual(*layer, &crate::baselines::soup(ds).unwrap())
                .unwrap();
        }
        assert_eq!(hybrid, expected);
    }

    #[test]
    fn hybrid_refinement_never_hurts() {
        let (net, deltas, calib) = setup(4);
        let (soup_only, _) = hybrid_refine(
            &net,
            &deltas,
            &calib,
            &Baseline::Soup,
            &[],
            &QpSolver::ClosedForm,
        )
        .unwrap();
        let (refined, _) = hybrid_refine(
            &net,
            &deltas,
            &calib,
            &Baseline::Soup,
            &[1, 2],
            &QpSolver::ClosedForm,
        )
        .unwrap();
        let soup_loss = calibration_loss(&soup_only, &calib).unwrap();
        let refined_loss = calibration_loss(&refined, &calib).unwrap();
        assert!(refined_loss <= soup_loss * (1.0 + 1e-9));
        assert!(hybrid_refine(
            &net,
            &deltas,
            &calib,
            &Baseline::Soup,
            &[3],
            &QpSolver::ClosedForm
        )
        .is_err());
    }

    #[test]
    fn interaction_of_zero_update_vanishes() {
        let (net, deltas, calib) = setup(5);
        let zero = ResidualUpdate::new(2, DMatrix::zeros(2, 3), "z").unwrap();
        let err = interaction_error(&net, &deltas[&1][0], &zero, &calib, 0.5).unwrap();
        assert!(err < 1e-15);
        assert!(interaction_error(&net, &deltas[&1][0], &deltas[&1][1], &calib, 0.5).is_err());
    }

    #[test]
    fn interaction_equals_product_term() {
        let (net, deltas, calib) = setup(6);
        let (d1, d2) = (&deltas[&1][0], &deltas[&2][1]);
        let eps = 0.3;
        let err = interaction_error(&net, d1, d2, &calib, eps).unwrap();
        let expected: f64 = calib
            .inputs()
            .iter()
            .map(|x| (&d2.delta * &d1.delta * x * (eps * eps)).norm())
            .sum::<f64>()
            / calib.len() as f64;
        assert!((err - expected).abs() <= 1e-12 * expected);
    }
}
