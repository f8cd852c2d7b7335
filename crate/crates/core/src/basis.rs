//! Candidate merge bases and the output-space projection diagnostics built
//! on the residual energy matrix `S = Σ b_j b_jᵀ`.
//!
//! The captured energy `tr(S P)` of an output subspace with projector `P`
//! equals `Σ_j ‖P b_j‖²`, so `Σ_j ‖b_j‖² − tr(S P)` is the smallest loss
//! reachable when every sample may be corrected independently inside that
//! subspace. The top eigenvectors of `S` maximise it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::linalg::{
    gaussian_matrix, orthonormality_deviation, orthonormalize_columns, pinv, pinv_symmetric,
    sorted_symmetric_eigen, stream_rng, PINV_CUTOFF,
};
use crate::netcore::{LinearNetwork, ResidualUpdate};
use crate::qp::{
    basis_merge, calibration_loss, general_qp_from_samples, linearize_samples, solve_unconstrained,
    CalibrationSet, SampleTerms,
};

/// Relative threshold for dropping dependent columns during
/// orthonormalisation.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisOrigin {
    Standard,
    EigenS,
    SvdResiduals,
    Random(u64),
}

impl fmt::Display for BasisOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisOrigin::Standard => f.write_str("standard"),
            BasisOrigin::EigenS => f.write_str("eigen"),
            BasisOrigin::SvdResiduals => f.write_str("svd"),
            BasisOrigin::Random(seed) => write!(f, "random-{seed}"),
        }
    }
}

/// Columns `q_1 .. q_p` with `QᵀQ = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalBasis {
    columns: DMatrix<f64>,
    origin: BasisOrigin,
}

impl OrthonormalBasis {
    pub fn new(columns: DMatrix<f64>, origin: BasisOrigin) -> Result<Self> {
        let deviation = orthonormality_deviation(&columns);
        if deviation.is_nan() || deviation > 1e-10 {
            return Err(MergeError::NotOrthonormal { deviation });
        }
        Ok(Self { columns, origin })
    }

    /// `e_1 .. e_dim`.
    pub fn standard(dim: usize) -> Self {
        Self {
            columns: DMatrix::identity(dim, dim),
            origin: BasisOrigin::Standard,
        }
    }

    /// Standard basis vectors for the listed coordinates, in that order.
    pub fn standard_subset(dim: usize, coords: &[usize]) -> Result<Self> {
        let mut columns = DMatrix::zeros(dim, coords.len());
        for (c, &i) in coords.iter().enumerate() {
            if i >= dim {
                return Err(MergeError::invalid(format!("coordinate {i} >= {dim}")));
            }
            columns[(i, c)] = 1.0;
        }
        Self::new(columns, BasisOrigin::Standard)
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn origin(&self) -> &BasisOrigin {
        &self.origin
    }

    /// Number of directions `p`.
    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    /// Dimension of the space the columns live in.
    pub fn ambient_dim(&self) -> usize {
        self.columns.nrows()
    }

    /// First `p` columns.
    pub fn prefix(&self, p: usize) -> Self {
        let p = p.min(self.dim());
        Self {
            columns: self.columns.columns(0, p).clone_owned(),
            origin: self.origin.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEnergyMatrix {
    pub s: DMatrix<f64>,
    pub total_energy: f64,
}

/// `S = Σ b_j b_jᵀ`, symmetrised after accumulation.
pub fn energy_matrix(residuals: &[DVector<f64>]) -> Result<ResidualEnergyMatrix> {
    let first = residuals.first().ok_or(MergeError::EmptyCalibration)?;
    let c = first.len();
    let mut s = DMatrix::zeros(c, c);
    for b in residuals {
        if b.len() != c {
            return Err(MergeError::dims("residual", c, b.len()));
        }
        s.ger(1.0, b, b, 1.0);
    }
    let s = (&s + s.transpose()) * 0.5;
    let total_energy = s.trace();
    Ok(ResidualEnergyMatrix { s, total_energy })
}

impl ResidualEnergyMatrix {
    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        sorted_symmetric_eigen(&self.s).0
    }
}

/// Top-`p` eigenvectors of `S` (output space), sorted and signed
/// deterministically.
pub fn optimal_basis(energy: &ResidualEnergyMatrix, p: usize) -> Result<OrthonormalBasis> {
    let c = energy.dim();
    if p == 0 || p > c {
        return Err(MergeError::invalid(format!("p = {p} outside 1..={c}")));
    }
    let (_, vectors) = sorted_symmetric_eigen(&energy.s);
    OrthonormalBasis::new(vectors.columns(0, p).clone_owned(), BasisOrigin::EigenS)
}

/// Residual-space directions whose images under `downstream` span the given
/// output basis: the minimum-norm preimages `L⁺ u_i`, orthonormalised in
/// order so prefixes stay nested.
pub fn lift_output_basis(
    downstream: &DMatrix<f64>,
    output_basis: &OrthonormalBasis,
) -> Result<OrthonormalBasis> {
    if downstream.nrows() != output_basis.ambient_dim() {
        return Err(MergeError::dims(
            "output basis",
            downstream.nrows(),
            output_basis.ambient_dim(),
        ));
    }
    let preimages = pinv(downstream, PINV_CUTOFF) * output_basis.columns();
    let q = orthonormalize_columns(&preimages, RANK_TOL);
    if q.ncols() < output_basis.dim() {
        log::warn!(
            "lifted basis has rank {} < requested {}",
            q.ncols(),
            output_basis.dim()
        );
    }
    OrthonormalBasis::new(q, output_basis.origin().clone())
}

/// Basis from the left singular vectors of the residual updates, weighted by
/// their singular values. Columns are stacked rank-major (every update's
/// first singular vector, then every second one, ...), by descending
/// singular value within a rank, and orthonormalised in that order.
///
/// Returns fewer than `p` columns, with a warning, when the stacked vectors
/// do not reach rank `p`.
pub fn svd_basis(deltas: &[ResidualUpdate], p: usize) -> Result<OrthonormalBasis> {
    let first = deltas.first().ok_or(MergeError::NoResiduals)?;
    let r = first.delta.nrows();
    if p == 0 || p > r {
        return Err(MergeError::invalid(format!("p = {p} outside 1..={r}")));
    }
    let mut ranked: Vec<Vec<(f64, usize, DVector<f64>)>> = Vec::new();
    for (k, d) in deltas.iter().enumerate() {
        if d.layer != first.layer {
            return Err(MergeError::MixedLayers {
                first: first.layer,
                other: d.layer,
            });
        }
        if d.delta.nrows() != r {
            return Err(MergeError::dims("residual rows", r, d.delta.nrows()));
        }
        let svd = d.delta.clone().svd(true, false);
        let u = svd.u.expect("u requested");
        let mut pairs: Vec<(f64, DVector<f64>)> = svd
            .singular_values
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, u.column(i).clone_owned()))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let smax = pairs.first().map_or(0.0, |p| p.0);
        for (rank, (s, v)) in pairs.into_iter().enumerate() {
            if s <= RANK_TOL * smax || s == 0.0 {
                continue;
            }
            if ranked.len() <= rank {
                ranked.resize_with(rank + 1, Vec::new);
            }
            ranked[rank].push((s, k, v * s));
        }
    }
    let mut stacked = Vec::new();
    for mut level in ranked {
        level.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        stacked.extend(level.into_iter().map(|(_, _, v)| v));
    }
    if stacked.is_empty() {
        log::warn!("all residual updates are zero; svd basis is empty");
        return OrthonormalBasis::new(DMatrix::zeros(r, 0), BasisOrigin::SvdResiduals);
    }
    let q = orthonormalize_columns(&DMatrix::from_columns(&stacked), RANK_TOL);
    if q.ncols() < p {
        log::warn!("svd basis reaches rank {} < requested {p}", q.ncols());
    }
    let keep = p.min(q.ncols());
    OrthonormalBasis::new(q.columns(0, keep).clone_owned(), BasisOrigin::SvdResiduals)
}

/// QR of a seeded standard-Gaussian `dim x p` matrix, signed so `R` has a
/// positive diagonal. The first `k` columns for a seed do not depend on `p`.
pub fn random_basis(dim: usize, p: usize, seed: u64) -> Result<OrthonormalBasis> {
    if p == 0 || p > dim {
        return Err(MergeError::invalid(format!("p = {p} outside 1..={dim}")));
    }
    let g = gaussian_matrix(&mut stream_rng(seed, 0x6261_7369), dim, p, 1.0);
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for i in 0..p {
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
        }
    }
    OrthonormalBasis::new(q, BasisOrigin::Random(seed))
}

/// Orthogonal projector onto `span(L q_1, …, L q_p)`, computed as
/// `B (BᵀB)⁺ Bᵀ` with `B = LQ` so rank-deficient images are handled.
pub fn output_projector(
    downstream: &DMatrix<f64>,
    basis: &OrthonormalBasis,
) -> Result<DMatrix<f64>> {
    if downstream.ncols() != basis.ambient_dim() {
        return Err(MergeError::dims(
            "downstream map columns",
            basis.ambient_dim(),
            downstream.ncols(),
        ));
    }
    let b = downstream * basis.columns();
    let (gram_pinv, _) = pinv_symmetric(&(b.transpose() * &b), PINV_CUTOFF);
    Ok(&b * gram_pinv * b.transpose())
}

/// Projector onto the span of orthonormal output-space columns.
pub fn projector(basis: &OrthonormalBasis) -> DMatrix<f64> {
    basis.columns() * basis.columns().transpose()
}

/// `tr(S P)`.
pub fn captured_energy(energy: &ResidualEnergyMatrix, projector: &DMatrix<f64>) -> Result<f64> {
    if projector.shape() != energy.s.shape() {
        return Err(MergeError::dims(
            "projector",
            format!("{0}x{0}", energy.dim()),
            format!("{}x{}", projector.nrows(), projector.ncols()),
        ));
    }
    Ok(energy.s.component_mul(&projector.transpose()).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceDiagnostics {
    pub captured_energy: f64,
    pub fraction: f64,
    pub relaxed_loss: f64,
    pub gap_vs_optimal: f64,
    /// Set when per-sample downstream maps were used.
    pub approximate: bool,
}

fn fraction_of(captured: f64, total: f64) -> f64 {
    if total == 0.0 {
        1.0
    } else {
        captured / total
    }
}

pub fn diagnostics(
    energy: &ResidualEnergyMatrix,
    p_model: &DMatrix<f64>,
    p_opt: &DMatrix<f64>,
) -> Result<SubspaceDiagnostics> {
    let captured = captured_energy(energy, p_model)?;
    let optimal = captured_energy(energy, p_opt)?;
    Ok(SubspaceDiagnostics {
        captured_energy: captured,
        fraction: fraction_of(captured, energy.total_energy),
        relaxed_loss: energy.total_energy - captured,
        gap_vs_optimal: optimal - captured,
        approximate: false,
    })
}

/// Diagnostics of a residual-space basis under sample-dependent downstream
/// maps: each sample's residual is projected onto `span(L_j Q)` and the
/// optimum is the top-`p` eigenvalue sum of `S`. Exact when every `L_j` is
/// the same matrix.
pub fn sample_diagnostics(
    samples: &[SampleTerms],
    basis: &OrthonormalBasis,
) -> Result<SubspaceDiagnostics> {
    let residuals: Vec<DVector<f64>> = samples.iter().map(|s| s.residual.clone()).collect();
    let energy = energy_matrix(&residuals)?;
    let shared = samples
        .windows(2)
        .all(|w| w[0].downstream == w[1].downstream);
    let captured = if shared {
        let proj = output_projector(&samples[0].downstream, basis)?;
        captured_energy(&energy, &proj)?
    } else {
        let mut total = 0.0;
        for s in samples {
            let proj = output_projector(&s.downstream, basis)?;
            total += (proj * &s.residual).norm_squared();
        }
        total
    };
    let p = basis.dim().min(energy.dim());
    let optimal: f64 = energy.eigenvalues().iter().take(p).sum();
    Ok(SubspaceDiagnostics {
        captured_energy: captured,
        fraction: fraction_of(captured, energy.total_energy),
        relaxed_loss: energy.total_energy - captured,
        gap_vs_optimal: optimal - captured,
        approximate: !shared,
    })
}

/// Residual-space coordinates ranked by the energy each single standard
/// direction captures on its own (`Σ_j (L_j e_i · b_j)² / ‖L_j e_i‖²`),
/// descending, ties to the lower index.
pub fn rank_standard_coordinates(samples: &[SampleTerms]) -> Vec<usize> {
    let r = samples.first().map_or(0, |s| s.downstream.ncols());
    let mut scores = vec![0.0; r];
    for s in samples {
        for (i, score) in scores.iter_mut().enumerate() {
            let col = s.downstream.column(i);
            let norm2 = col.norm_squared();
            if norm2 > 0.0 {
                let dot = col.dot(&s.residual);
                *score += dot * dot / norm2;
            }
        }
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean downstream map over the calibration samples.
pub fn mean_downstream(samples: &[SampleTerms]) -> Result<DMatrix<f64>> {
    let first = samples.first().ok_or(MergeError::EmptyCalibration)?;
    let mut acc = DMatrix::zeros(first.downstream.nrows(), first.downstream.ncols());
    for s in samples {
        acc += &s.downstream;
    }
    Ok(acc / samples.len() as f64)
}

/// Closed-form weights `d_k = σ_j σ_k / Σ_ℓ σ_ℓ²` for tasks sharing one
/// singular direction under a downstream isometry, when calibrating against
/// task `target`'s outputs.
pub fn svd_closed_form_weights(sigmas: &[f64], target: usize) -> Result<Vec<f64>> {
    if target >= sigmas.len() {
        return Err(MergeError::invalid(format!(
            "target task {target} outside 0..{}",
            sigmas.len()
        )));
    }
    if sigmas.iter().any(|&s| !s.is_finite() || s < 0.0) {
        return Err(MergeError::invalid(
            "singular values must be finite and non-negative",
        ));
    }
    let power: f64 = sigmas.iter().map(|s| s * s).sum();
    if power == 0.0 {
        return Err(MergeError::invalid("all singular values are zero"));
    }
    Ok(sigmas.iter().map(|&s| sigmas[target] * s / power).collect())
}

/// Basis families selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BasisKind {
    Eigen,
    Standard,
    Svd,
    Random { seed: u64 },
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisKind::Eigen => f.write_str("eigen"),
            BasisKind::Standard => f.write_str("standard"),
            BasisKind::Svd => f.write_str("svd"),
            BasisKind::Random { seed } => write!(f, "random-{seed}"),
        }
    }
}

/// Accepts `eigen`, `standard`, `svd`, `random` (seed 0) and `random-<seed>`.
impl FromStr for BasisKind {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigen" => Ok(BasisKind::Eigen),
            "standard" => Ok(BasisKind::Standard),
            "svd" => Ok(BasisKind::Svd),
            "random" => Ok(BasisKind::Random { seed: 0 }),
            other => other
                .strip_prefix("random-")
                .and_then(|seed| seed.parse().ok())
                .map(|seed| BasisKind::Random { seed })
                .ok_or_else(|| MergeError::invalid(format!("unknown basis `{other}`"))),
        }
    }
}

impl BasisKind {
    /// Largest `p` the family can fill for residuals with `r` rows and
    /// outputs of dimension `c`.
    pub fn max_directions(&self, r: usize, c: usize) -> usize {
        match self {
            BasisKind::Eigen => r.min(c),
            _ => r,
        }
    }
}

/// Builds a `p`-direction basis of the given family for one layer. Eigen
/// directions are the top eigenvectors of `S` lifted through the mean
/// downstream map; standard directions are coordinates ranked by
/// single-direction captured energy. Both are nested in `p`.
pub fn build_basis(
    kind: BasisKind,
    samples: &[SampleTerms],
    deltas: &[ResidualUpdate],
    p: usize,
) -> Result<OrthonormalBasis> {
    let first = samples.first().ok_or(MergeError::EmptyCalibration)?;
    let (c, r) = first.downstream.shape();
    let max = kind.max_directions(r, c);
    if p == 0 || p > max {
        return Err(MergeError::invalid(format!(
            "p = {p} outside 1..={max} for {kind} basis"
        )));
    }
    match kind {
        BasisKind::Eigen => {
            let residuals: Vec<DVector<f64>> = samples.iter().map(|s| s.residual.clone()).collect();
            let output = optimal_basis(&energy_matrix(&residuals)?, p)?;
            lift_output_basis(&mean_downstream(samples)?, &output)
        }
        BasisKind::Standard => {
            OrthonormalBasis::standard_subset(r, &rank_standard_coordinates(samples)[..p])
        }
        BasisKind::Svd => svd_basis(deltas, p),
        BasisKind::Random { seed } => random_basis(r, p, seed),
    }
}

/// One point of a basis-size sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub basis: BasisKind,
    pub p: usize,
    pub diagnostics: SubspaceDiagnostics,
    /// Unconstrained general-basis QP objective.
    pub qp_objective: f64,
    /// Calibration MSE attained by the QP, i.e. the objective per sample.
    /// Non-increasing along a nested chain.
    pub qp_mse: f64,
    /// Calibration MSE of the QP-merged network under an exact forward pass.
    /// Equal to `qp_mse` on all-linear networks.
    pub exact_mse: f64,
}

/// Sweeps `p` over `p_min..=p_max` (default: the family's maximum, larger
/// values clipped with a warning) using nested prefixes of one basis, so the
/// QP objective is non-increasing in `p`.
pub fn sweep_basis(
    net: &LinearNetwork,
    layer: usize,
    deltas: &[ResidualUpdate],
    calib: &CalibrationSet,
    kind: BasisKind,
    p_min: usize,
    p_max: Option<usize>,
) -> Result<Vec<SweepPoint>> {
    let samples = linearize_samples(net, layer, calib)?;
    let r = deltas.first().ok_or(MergeError::NoResiduals)?.delta.nrows();
    let max = kind.max_directions(r, net.output_dim());
    let top = match p_max {
        Some(p) if p > max => {
            log::warn!("p range up to {p} exceeds the {kind} maximum {max}; clipped");
            max
        }
        Some(p) => p,
        None => max,
    };
    if p_min == 0 || p_min > top {
        return Err(MergeError::invalid(format!(
            "empty p range {p_min}..={top} for {kind}"
        )));
    }
    let full = build_basis(kind, &samples, deltas, top)?;
    if full.dim() < top {
        log::warn!("{kind} basis only reaches p = {}", full.dim());
    }
    let mut points = Vec::new();
    for p in p_min..=full.dim() {
        let basis = full.prefix(p);
        let qp = general_qp_from_samples(deltas, &samples, &basis)?;
        let sol = solve_unconstrained(&qp)?;
        let merged = basis_merge(deltas, &sol.coefficients.values, &basis)?;
        let tuned = net.apply_merged_residual(layer, &merged)?;
        let n = calib.len() as f64;
        points.push(SweepPoint {
            basis: kind,
            p,
            diagnostics: sample_diagnostics(&samples, &basis)?,
            qp_objective: sol.objective,
            qp_mse: sol.objective.max(0.0) / n,
            exact_mse: calibration_loss(&tuned, calib)? / n,
        });
    }
    Ok(points)
}
