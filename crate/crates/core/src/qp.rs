//! The squared-output calibration loss as an explicit convex quadratic in the
//! merge coefficients, for the diagonal mask and for a general orthonormal
//! basis, plus the closed-form and box-constrained solvers.
//!
//! Coefficients are flattened task-major: entry `(k, p)` lives at
//! `k * directions + p`.

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisOrigin, OrthonormalBasis};
use crate::error::{MergeError, Result};
use crate::linalg::{all_finite, orthonormality_deviation, pinv_symmetric, shape, PINV_CUTOFF};
use crate::netcore::{common_layer, LinearNetwork, ResidualUpdate};

/// Paired calibration inputs and targets, pooled across tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    tasks: Vec<Option<String>>,
}

impl CalibrationSet {
    pub fn new(inputs: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        let tasks = vec![None; inputs.len()];
        Self::with_tasks(inputs, targets, tasks)
    }

    pub fn with_tasks(
        inputs: Vec<DVector<f64>>,
        targets: Vec<DVector<f64>>,
        tasks: Vec<Option<String>>,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(MergeError::EmptyCalibration);
        }
        if inputs.len() != targets.len() || inputs.len() != tasks.len() {
            return Err(MergeError::dims(
                "calibration sample count",
                inputs.len(),
                format!("{} targets, {} labels", targets.len(), tasks.len()),
            ));
        }
        let (din, dout) = (inputs[0].len(), targets[0].len());
        for (x, y) in inputs.iter().zip(&targets) {
            if x.len() != din || y.len() != dout {
                return Err(MergeError::dims(
                    "calibration sample shape",
                    format!("{din} -> {dout}"),
                    format!("{} -> {}", x.len(), y.len()),
                ));
            }
            if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
                return Err(MergeError::NonFinite("calibration sample"));
            }
        }
        Ok(Self {
            inputs,
            targets,
            tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    pub fn task(&self, j: usize) -> Option<&str> {
        self.tasks[j].as_deref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.inputs.iter().zip(&self.targets)
    }

    /// Subset of samples carrying the given task label.
    pub fn for_task(&self, task: &str) -> Option<Self> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&j| self.task(j) == Some(task))
            .collect();
        if idx.is_empty() {
            return None;
        }
        Some(Self {
            inputs: idx.iter().map(|&j| self.inputs[j].clone()).collect(),
            targets: idx.iter().map(|&j| self.targets[j].clone()).collect(),
            tasks: idx.iter().map(|&j| self.tasks[j].clone()).collect(),
        })
    }

    fn check_network(&self, net: &LinearNetwork) -> Result<()> {
        if self.inputs[0].len() != net.input_dim() {
            return Err(MergeError::dims(
                "calibration input",
                net.input_dim(),
                self.inputs[0].len(),
            ));
        }
        if self.targets[0].len() != net.output_dim() {
            return Err(MergeError::dims(
                "calibration target",
                net.output_dim(),
                self.targets[0].len(),
            ));
        }
        Ok(())
    }
}

/// `b_j = h(x_j) - y_j` for every sample, in order.
pub fn base_residuals(net: &LinearNetwork, calib: &CalibrationSet) -> Result<Vec<DVector<f64>>> {
    calib.check_network(net)?;
    calib.iter().map(|(x, y)| Ok(net.forward(x)? - y)).collect()
}

/// Sum of squared output errors of `net` on the calibration set.
pub fn calibration_loss(net: &LinearNetwork, calib: &CalibrationSet) -> Result<f64> {
    Ok(base_residuals(net, calib)?
        .iter()
        .map(|b| b.norm_squared())
        .sum())
}

/// Everything the QP needs from one calibration sample at the merge layer.
#[derive(Clone, Debug)]
pub struct SampleTerms {
    /// Input to the merge layer (`Z x_j`).
    pub layer_input: DVector<f64>,
    /// Downstream map `L_j`.
    pub downstream: DMatrix<f64>,
    /// Base residual `b_j`.
    pub residual: DVector<f64>,
}

/// Per-sample linearisation of `net` around merge layer `layer`.
pub fn linearize_samples(
    net: &LinearNetwork,
    layer: usize,
    calib: &CalibrationSet,
) -> Result<Vec<SampleTerms>> {
    calib.check_network(net)?;
    net.check_layer(layer)?;
    let mut out = Vec::with_capacity(calib.len());
    for (x, y) in calib.iter() {
        out.push(SampleTerms {
            layer_input: net.layer_input(layer, x)?,
            downstream: net.linearize_downstream(layer, x)?.matrix,
            residual: net.forward(x)? - y,
        });
    }
    Ok(out)
}

/// `Σ_j ‖b_j + L_j Δ z_j‖²`: the linearised loss of adding `delta` at the
/// merge layer.
pub fn linearized_loss(samples: &[SampleTerms], delta: &DMatrix<f64>) -> f64 {
    samples
        .iter()
        .map(|s| (&s.residual + &s.downstream * (delta * &s.layer_input)).norm_squared())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoefficientLayout {
    pub tasks: usize,
    pub directions: usize,
}

impl CoefficientLayout {
    pub fn len(&self) -> usize {
        self.tasks * self.directions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, task: usize, direction: usize) -> usize {
        task * self.directions + direction
    }
}

/// `J(d) = ½ dᵀHd + gᵀd + constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub layout: CoefficientLayout,
    pub basis: BasisOrigin,
}

impl QuadraticObjective {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constant: f64,
        layout: CoefficientLayout,
        basis: BasisOrigin,
    ) -> Result<Self> {
        let n = layout.len();
        if hessian.shape() != (n, n) {
            return Err(MergeError::dims(
                "hessian",
                format!("{n}x{n}"),
                shape(&hessian),
            ));
        }
        if linear.len() != n {
            return Err(MergeError::dims("linear term", n, linear.len()));
        }
        Ok(Self {
            hessian,
            linear,
            constant,
            layout,
            basis,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    fn check_point(&self, d: &DVector<f64>) -> Result<()> {
        if d.len() != self.dim() {
            return Err(MergeError::dims("coefficient vector", self.dim(), d.len()));
        }
        Ok(())
    }

    pub fn objective_value(&self, d: &DVector<f64>) -> Result<f64> {
        self.check_point(d)?;
        Ok(0.5 * d.dot(&(&self.hessian * d)) + self.linear.dot(d) + self.constant)
    }

    /// `∇J(d) = Hd + g`.
    pub fn gradient(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(d)?;
        Ok(&self.hessian * d + &self.linear)
    }

    /// Asymmetry relative to `‖H‖` and most negative eigenvalue relative to
    /// `‖H‖`; both should be roundoff-sized.
    pub fn psd_defects(&self) -> (f64, f64) {
        let scale = self.hessian.amax().max(f64::MIN_POSITIVE);
        let asym = (&self.hessian - self.hessian.transpose()).amax() / scale;
        let sym = (&self.hessian + self.hessian.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        (asym, (-min_eig).max(0.0) / scale)
    }

    /// Uniform soup point `d = 1/K`.
    pub fn soup_point(&self) -> DVector<f64> {
        DVector::from_element(self.dim(), 1.0 / self.layout.tasks as f64)
    }
}

/// Merge coefficients as a `K x P` matrix (row per task).
#[derive(Clone, Debug, PartialEq)]
pub struct MergeCoefficients {
    pub values: DMatrix<f64>,
    pub basis: BasisOrigin,
}

impl MergeCoefficients {
    pub fn from_flat(flat: &DVector<f64>, layout: CoefficientLayout, basis: BasisOrigin) -> Self {
        let values = DMatrix::from_fn(layout.tasks, layout.directions, |k, p| {
            flat[layout.index(k, p)]
        });
        Self { values, basis }
    }

    pub fn flatten(&self) -> DVector<f64> {
        let (k, p) = self.values.shape();
        DVector::from_iterator(
            k * p,
            self.values
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>()),
        )
    }

    pub fn tasks(&self) -> usize {
        self.values.nrows()
    }

    pub fn directions(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub coefficients: MergeCoefficients,
    pub objective: f64,
    /// Relative size of the part of `g` outside `Range(H)`; only the closed
    /// form reports it.
    pub range_residual: f64,
    pub range_deficient: bool,
    pub rank: usize,
}

fn diag_layout(deltas: &[ResidualUpdate]) -> CoefficientLayout {
    CoefficientLayout {
        tasks: deltas.len(),
        directions: deltas[0].delta.nrows(),
    }
}

/// Diagonal-mask QP: `A_j = [L_j diag(r_1j) … L_j diag(r_Kj)]`,
/// `H = 2 Σ A_jᵀA_j`, `g = 2 Σ A_jᵀ b_j`, constant `Σ ‖b_j‖²`.
pub fn build_diagonal_qp(
    net: &LinearNetwork,
    deltas: &[ResidualUpdate],
    calib: &CalibrationSet,
) -> Result<QuadraticObjective> {
    let layer = common_layer(net, deltas)?;
    let samples = linearize_samples(net, layer, calib)?;
    diagonal_qp_from_samples(deltas, &samples)
}

pub fn diagonal_qp_from_samples(
    deltas: &[ResidualUpdate],
    samples: &[SampleTerms],
) -> Result<QuadraticObjective> {
    if deltas.is_empty() {
        return Err(MergeError::NoResiduals);
    }
    if samples.is_empty() {
        return Err(MergeError::EmptyCalibration);
    }
    let layout = diag_layout(deltas);
    let r = layout.directions;
    let n = layout.len();
    let mut hessian = DMatrix::zeros(n, n);
    let mut linear = DVector::zeros(n);
    let mut constant = 0.0;
    for s in samples {
        let c = s.downstream.nrows();
        let mut a = DMatrix::zeros(c, n);
        for (k, d) in deltas.iter().enumerate() {
            let hidden = &d.delta * &s.layer_input;
            for i in 0..r {
                let col = s.downstream.column(i) * hidden[i];
                a.set_column(layout.index(k, i), &col);
            }
        }
        hessian.gemm_tr(2.0, &a, &a, 1.0);
        linear.gemv_tr(2.0, &a, &s.residual, 1.0);
        constant += s.residual.norm_squared();
    }
    QuadraticObjective::new(hessian, linear, constant, layout, BasisOrigin::Standard)
}

/// General-basis QP built from projected activations `α`, projected
/// residuals `β` and the per-sample coupling `G_j = (L_j Q)ᵀ(L_j Q)`.
pub fn build_general_basis_qp(
    net: &LinearNetwork,
    deltas: &[ResidualUpdate],
    calib: &CalibrationSet,
    basis: &OrthonormalBasis,
) -> Result<QuadraticObjective> {
    let layer = common_layer(net, deltas)?;
    let samples = linearize_samples(net, layer, calib)?;
    general_qp_from_samples(deltas, &samples, basis)
}

pub fn general_qp_from_samples(
    deltas: &[ResidualUpdate],
    samples: &[SampleTerms],
    basis: &OrthonormalBasis,
) -> Result<QuadraticObjective> {
    if deltas.is_empty() {
        return Err(MergeError::NoResiduals);
    }
    if samples.is_empty() {
        return Err(MergeError::EmptyCalibration);
    }
    let q = basis.columns();
    let r = deltas[0].delta.nrows();
    if q.nrows() != r {
        return Err(MergeError::dims("basis dimension", r, q.nrows()));
    }
    let deviation = orthonormality_deviation(q);
    if deviation > 1e-10 {
        return Err(MergeError::NotOrthonormal { deviation });
    }
    let layout = CoefficientLayout {
        tasks: deltas.len(),
        directions: q.ncols(),
    };
    let (kk, pp) = (layout.tasks, layout.directions);
    let n = layout.len();
    let mut hessian = DMatrix::zeros(n, n);
    let mut linear = DVector::zeros(n);
    let mut constant = 0.0;
    for s in samples {
        // alpha[(p, k)] = q_pᵀ δ_k z_j
        let hidden = DMatrix::from_columns(
            &deltas
                .iter()
                .map(|d| &d.delta * &s.layer_input)
                .collect::<Vec<_>>(),
        );
        let alpha = q.transpose() * hidden;
        let lq = &s.downstream * q;
        let beta = lq.transpose() * &s.residual;
        let coupling = lq.transpose() * &lq;
        for k in 0..kk {
            for p in 0..pp {
                let row = layout.index(k, p);
                let a_kp = alpha[(p, k)];
                linear[row] += 2.0 * a_kp * beta[p];
                for k2 in 0..kk {
                    for p2 in 0..pp {
                        hessian[(row, layout.index(k2, p2))] +=
                            2.0 * a_kp * alpha[(p2, k2)] * coupling[(p, p2)];
                    }
                }
            }
        }
        constant += s.residual.norm_squared();
    }
    QuadraticObjective::new(hessian, linear, constant, layout, basis.origin().clone())
}

/// Minimum-norm minimiser `d* = -H⁺ g`.
pub fn solve_unconstrained(qp: &QuadraticObjective) -> Result<Solution> {
    if !all_finite(&qp.hessian) || !qp.linear.iter().all(|v| v.is_finite()) {
        return Err(MergeError::NonFinite("quadratic objective"));
    }
    let (pinv, rank) = pinv_symmetric(&qp.hessian, PINV_CUTOFF);
    let d = -(&pinv * &qp.linear);
    let projected = &qp.hessian * (&pinv * &qp.linear);
    let gnorm = qp.linear.norm();
    let range_residual = if gnorm > 0.0 {
        (&qp.linear - projected).norm() / gnorm
    } else {
        0.0
    };
    if !d.iter().all(|v| v.is_finite()) {
        return Err(MergeError::NonFinite("closed-form solution"));
    }
    let objective = qp.objective_value(&d)?;
    Ok(Solution {
        coefficients: MergeCoefficients::from_flat(&d, qp.layout, qp.basis.clone()),
        objective,
        range_residual,
        range_deficient: range_residual > 1e-6,
        rank,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoxInit {
    /// `d = 1/K` everywhere, clamped into the box.
    Soup,
    Given(DVector<f64>),
}

/// Projected adaptive-moment descent settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxOptions {
    pub steps: usize,
    pub step_size: f64,
    pub init: BoxInit,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Reject steps that increase the objective and halve the step size.
    pub accept_only_improving: bool,
}

impl Default for BoxOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 1e-2,
            init: BoxInit::Soup,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            accept_only_improving: false,
        }
    }
}

/// Minimises the QP over the box `[lo, hi]^n` with clamped Adam steps.
pub fn solve_box_constrained(
    qp: &QuadraticObjective,
    lo: f64,
    hi: f64,
    opts: &BoxOptions,
) -> Result<Solution> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(MergeError::invalid(format!("invalid box [{lo}, {hi}]")));
    }
    if opts.steps == 0 || !opts.step_size.is_finite() || opts.step_size <= 0.0 {
        return Err(MergeError::invalid("steps and step size must be positive"));
    }
    if !all_finite(&qp.hessian) || !qp.linear.iter().all(|v| v.is_finite()) {
        return Err(MergeError::NonFinite("quadratic objective"));
    }
    let clamp = |v: &mut DVector<f64>| v.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
    let mut d = match &opts.init {
        BoxInit::Soup => qp.soup_point(),
        BoxInit::Given(v) => {
            qp.check_point(v)?;
            v.clone()
        }
    };
    clamp(&mut d);

    let n = qp.dim();
    let mut m = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut lr = opts.step_size;
    let mut current = qp.objective_value(&d)?;
    for t in 1..=opts.steps {
        let grad = qp.gradient(&d)?;
        m = m * opts.beta1 + &grad * (1.0 - opts.beta1);
        v = v * opts.beta2 + grad.component_mul(&grad) * (1.0 - opts.beta2);
        let bc1 = 1.0 - opts.beta1.powi(t as i32);
        let bc2 = 1.0 - opts.beta2.powi(t as i32);
        let mut candidate = d.clone();
        for i in 0..n {
            let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opts.epsilon);
            candidate[i] -= lr * step;
        }
        clamp(&mut candidate);
        if opts.accept_only_improving {
            let value = qp.objective_value(&candidate)?;
            if value <= current {
                d = candidate;
                current = value;
            } else {
                lr *= 0.5;
            }
        } else {
            d = candidate;
        }
    }
    if !d.iter().all(|x| x.is_finite()) {
        return Err(MergeError::NonFinite("box-constrained iterate"));
    }
    let objective = qp.objective_value(&d)?;
    Ok(Solution {
        coefficients: MergeCoefficients::from_flat(&d, qp.layout, qp.basis.clone()),
        objective,
        range_residual: 0.0,
        range_deficient: false,
        rank: 0,
    })
}

/// Minimum-norm minimiser of `(dᵀm + β)²`.
pub fn solve_1d(m: &DVector<f64>, beta: f64) -> DVector<f64> {
    let norm2 = m.norm_squared();
    if norm2 == 0.0 {
        return DVector::zeros(m.len());
    }
    m * (-beta / norm2)
}

/// `Σ_k diag(d_k) δ_k`.
pub fn diagonal_merge(deltas: &[ResidualUpdate], coeffs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let first = deltas.first().ok_or(MergeError::NoResiduals)?;
    let (rows, cols) = first.delta.shape();
    if coeffs.shape() != (deltas.len(), rows) {
        return Err(MergeError::dims(
            "diagonal mask",
            format!("{}x{}", deltas.len(), rows),
            shape(coeffs),
        ));
    }
    let mut out = DMatrix::zeros(rows, cols);
    for (k, d) in deltas.iter().enumerate() {
        if d.delta.shape() != (rows, cols) {
            return Err(MergeError::dims(
                "residual update",
                shape(&first.delta),
                shape(&d.delta),
            ));
        }
        for i in 0..rows {
            let w = coeffs[(k, i)];
            if w != 0.0 {
                for c in 0..cols {
                    out[(i, c)] += w * d.delta[(i, c)];
                }
            }
        }
    }
    Ok(out)
}

/// `Σ_k Σ_p d_kp q_p q_pᵀ δ_k`.
pub fn basis_merge(
    deltas: &[ResidualUpdate],
    coeffs: &DMatrix<f64>,
    basis: &OrthonormalBasis,
) -> Result<DMatrix<f64>> {
    let first = deltas.first().ok_or(MergeError::NoResiduals)?;
    let q = basis.columns();
    if q.nrows() != first.delta.nrows() {
        return Err(MergeError::dims(
            "basis dimension",
            first.delta.nrows(),
            q.nrows(),
        ));
    }
    if coeffs.shape() != (deltas.len(), q.ncols()) {
        return Err(MergeError::dims(
            "basis coefficients",
            format!("{}x{}", deltas.len(), q.ncols()),
            shape(coeffs),
        ));
    }
    let mut out = DMatrix::zeros(first.delta.nrows(), first.delta.ncols());
    for (k, d) in deltas.iter().enumerate() {
        let projected = q.transpose() * &d.delta;
        let mut scaled = projected;
        for p in 0..q.ncols() {
            scaled.row_mut(p).scale_mut(coeffs[(k, p)]);
        }
        out += q * scaled;
    }
    Ok(out)
}

/// Merged residual for coefficients in the given basis (`None` means the
/// diagonal mask).
pub fn merged_residual(
    deltas: &[ResidualUpdate],
    coeffs: &MergeCoefficients,
    basis: Option<&OrthonormalBasis>,
) -> Result<DMatrix<f64>> {
    match basis {
        None => diagonal_merge(deltas, &coeffs.values),
        Some(b) => basis_merge(deltas, &coeffs.values, b),
    }
}
