//! Heuristic merging rules as points of the diagonal-mask family, plus
//! Fisher-weighted merging.
//!
//! Each diagonal rule first builds a `K x r` mask (row `k` scales the rows of
//! task `k`'s update) and then merges with [`diagonal_merge`], so its
//! coefficient vector can be fed straight into the diagonal QP objective.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{MergeError, Result};
use crate::linalg::stream_rng;
use crate::netcore::{LinearNetwork, ResidualUpdate};
use crate::qp::{diagonal_merge, linearize_samples, CalibrationSet};

fn rows_of(deltas: &[ResidualUpdate]) -> Result<usize> {
    let first = deltas.first().ok_or(MergeError::NoResiduals)?;
    for d in deltas {
        if d.delta.shape() != first.delta.shape() {
            return Err(MergeError::dims(
                "residual shapes",
                format!("{:?}", first.delta.shape()),
                format!("{:?}", d.delta.shape()),
            ));
        }
    }
    Ok(first.delta.nrows())
}

pub fn soup_mask(tasks: usize, rows: usize) -> DMatrix<f64> {
    DMatrix::from_element(tasks, rows, 1.0 / tasks as f64)
}

/// `(1/K) Σ_k δ_k`.
pub fn soup(deltas: &[ResidualUpdate]) -> Result<DMatrix<f64>> {
    let rows = rows_of(deltas)?;
    diagonal_merge(deltas, &soup_mask(deltas.len(), rows))
}

pub fn task_arithmetic_mask(lambdas: &[f64], rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(lambdas.len(), rows, |k, _| lambdas[k])
}

/// `Σ_k λ_k δ_k`.
pub fn task_arithmetic(deltas: &[ResidualUpdate], lambdas: &[f64]) -> Result<DMatrix<f64>> {
    let rows = rows_of(deltas)?;
    if lambdas.len() != deltas.len() {
        return Err(MergeError::dims(
            "task arithmetic scales",
            deltas.len(),
            lambdas.len(),
        ));
    }
    diagonal_merge(deltas, &task_arithmetic_mask(lambdas, rows))
}

/// One Bernoulli(`keep_prob`) draw per task and row, survivors rescaled by
/// `1/keep_prob`. Draw order is task-major.
pub fn dare_mask(tasks: usize, rows: usize, keep_prob: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(MergeError::invalid(format!(
            "keep probability {keep_prob} outside (0, 1]"
        )));
    }
    let mut rng = stream_rng(seed, 0x6461_7265);
    let mut mask = DMatrix::zeros(tasks, rows);
    for k in 0..tasks {
        for i in 0..rows {
            let u: f64 = rng.random();
            if u < keep_prob {
                mask[(k, i)] = 1.0 / keep_prob;
            }
        }
    }
    Ok(mask)
}

/// Row-uniform DARE: drop whole rows of each update and rescale survivors.
pub fn dare_row_uniform(
    deltas: &[ResidualUpdate],
    keep_prob: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let rows = rows_of(deltas)?;
    diagonal_merge(deltas, &dare_mask(deltas.len(), rows, keep_prob, seed)?)
}

/// Row-level trim / elect / disjoint-merge.
///
/// Each task keeps its `ceil(density * r)` rows of largest L2 norm (ties to
/// the lower row). For every row the sign with the larger total row-sum mass
/// across kept rows is elected; an exact tie goes to the sign of the
/// lowest-indexed task with a non-zero row sum. Kept rows whose sum has the
/// elected sign are averaged. If every kept row sums to zero, all kept rows
/// are averaged.
pub fn ties_mask(deltas: &[ResidualUpdate], density: f64) -> Result<DMatrix<f64>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(MergeError::invalid(format!(
            "density {density} outside (0, 1]"
        )));
    }
    let rows = rows_of(deltas)?;
    let keep = ((density * rows as f64).ceil() as usize).clamp(1, rows);
    let tasks = deltas.len();

    let mut kept = vec![vec![false; rows]; tasks];
    for (k, d) in deltas.iter().enumerate() {
        let norms: Vec<f64> = d.delta.row_iter().map(|r| r.norm()).collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        for &i in &order[..keep] {
            kept[k][i] = true;
        }
    }

    let mut mask = DMatrix::zeros(tasks, rows);
    for i in 0..rows {
        let sums: Vec<f64> = deltas
            .iter()
            .enumerate()
            .map(|(k, d)| {
                if kept[k][i] {
                    d.delta.row(i).sum()
                } else {
                    0.0
                }
            })
            .collect();
        let pos: f64 = sums.iter().filter(|&&s| s > 0.0).sum();
        let neg: f64 = sums.iter().filter(|&&s| s < 0.0).map(|s| -s).sum();
        let elected = if pos > neg {
            1.0
        } else if neg > pos {
            -1.0
        } else {
            sums.iter().find(|&&s| s != 0.0).map_or(0.0, |s| s.signum())
        };
        let survivors: Vec<usize> = (0..tasks)
            .filter(|&k| {
                kept[k][i] && (elected == 0.0 || sums[k].signum() == elected && sums[k] != 0.0)
            })
            .collect();
        if survivors.is_empty() {
            continue;
        }
        let w = 1.0 / survivors.len() as f64;
        for k in survivors {
            mask[(k, i)] = w;
        }
    }
    Ok(mask)
}

pub fn ties_rowwise(deltas: &[ResidualUpdate], density: f64) -> Result<DMatrix<f64>> {
    diagonal_merge(deltas, &ties_mask(deltas, density)?)
}

/// Non-negative per-parameter precisions, flattened row-major over a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiagonal {
    values: DVector<f64>,
}

impl FisherDiagonal {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MergeError::invalid(
                "Fisher entries must be finite and non-negative",
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
}

/// Precision-weighted mean `(Σ F_k)⁻¹ Σ F_k θ_k`, falling back to the plain
/// mean on coordinates where every precision is zero.
pub fn fisher_merge(thetas: &[DVector<f64>], fishers: &[FisherDiagonal]) -> Result<DVector<f64>> {
    let first = thetas.first().ok_or(MergeError::NoResiduals)?;
    if fishers.len() != thetas.len() {
        return Err(MergeError::dims(
            "Fisher count",
            thetas.len(),
            fishers.len(),
        ));
    }
    let n = first.len();
    for (t, f) in thetas.iter().zip(fishers) {
        if t.len() != n || f.values.len() != n {
            return Err(MergeError::dims(
                "parameter vector",
                n,
                format!("{} / {}", t.len(), f.values.len()),
            ));
        }
    }
    let k = thetas.len() as f64;
    Ok(DVector::from_fn(n, |i, _| {
        let total: f64 = fishers.iter().map(|f| f.values[i]).sum();
        if total > 0.0 {
            thetas
                .iter()
                .zip(fishers)
                .map(|(t, f)| f.values[i] * t[i])
                .sum::<f64>()
                / total
        } else {
            thetas.iter().map(|t| t[i]).sum::<f64>() / k
        }
    }))
}

/// Diagonal Fisher of a unit-variance Gaussian output model for the weights
/// of `layer`: `F[i, l] = Σ_j ‖L_j e_i‖² z_j[l]²`.
pub fn squared_loss_fisher(
    net: &LinearNetwork,
    layer: usize,
    calib: &CalibrationSet,
) -> Result<FisherDiagonal> {
    let samples = linearize_samples(net, layer, calib)?;
    let w = net.layer(layer)?;
    let (rows, cols) = w.shape();
    let mut f = DMatrix::zeros(rows, cols);
    for s in &samples {
        for i in 0..rows {
            let col = s.downstream.column(i).norm_squared();
            for l in 0..cols {
                f[(i, l)] += col * s.layer_input[l] * s.layer_input[l];
            }
        }
    }
    FisherDiagonal::new(flatten_row_major(&f))
}

pub(crate) fn flatten_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

pub(crate) fn unflatten_row_major(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

/// Fisher merge of the fine-tuned layers `W_N + δ_k`, each Fisher computed on
/// the fine-tuned model with its own task's calibration samples (all samples
/// when a task has none). Returns the merged residual relative to `W_N`.
pub fn fisher_merge_residuals(
    net: &LinearNetwork,
    deltas: &[ResidualUpdate],
    calib: &CalibrationSet,
) -> Result<DMatrix<f64>> {
    let layer = crate::netcore::common_layer(net, deltas)?;
    let base = net.layer(layer)?;
    let (rows, cols) = base.shape();
    let mut thetas = Vec::with_capacity(deltas.len());
    let mut fishers = Vec::with_capacity(deltas.len());
    for d in deltas {
        let tuned = net.with_residual(d)?;
        let own = calib.for_task(&d.task);
        fishers.push(squared_loss_fisher(
            &tuned,
            layer,
            own.as_ref().unwrap_or(calib),
        )?);
        thetas.push(flatten_row_major(tuned.layer(layer)?));
    }
    let merged = unflatten_row_major(&fisher_merge(&thetas, &fishers)?, rows, cols);
    Ok(merged - base)
}

/// Baseline rules selectable by name.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Soup,
    TaskArithmetic { lambda: f64 },
    Dare { keep_prob: f64, seed: u64 },
    Ties { density: f64 },
    Fisher,
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Soup => "soup",
            Baseline::TaskArithmetic { .. } => "ta",
            Baseline::Dare { .. } => "dare",
            Baseline::Ties { .. } => "ties",
            Baseline::Fisher => "fisher",
        }
    }

    /// Diagonal mask for rules that are points of the diagonal family.
    pub fn mask(&self, deltas: &[ResidualUpdate]) -> Result<Option<DMatrix<f64>>> {
        let rows = rows_of(deltas)?;
        let k = deltas.len();
        Ok(match self {
            Baseline::Soup => Some(soup_mask(k, rows)),
            Baseline::TaskArithmetic { lambda } => {
                Some(task_arithmetic_mask(&vec![*lambda; k], rows))
            }
            Baseline::Dare { keep_prob, seed } => Some(dare_mask(k, rows, *keep_prob, *seed)?),
            Baseline::Ties { density } => Some(ties_mask(deltas, *density)?),
            Baseline::Fisher => None,
        })
    }

    /// Merged residual for one layer's updates.
    pub fn merge(
        &self,
        net: &LinearNetwork,
        deltas: &[ResidualUpdate],
        calib: &CalibrationSet,
    ) -> Result<DMatrix<f64>> {
        match self.mask(deltas)? {
            Some(mask) => diagonal_merge(deltas, &mask),
            None => fisher_merge_residuals(net, deltas, calib),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::TaskArithmetic { lambda } => write!(f, "ta(lambda={lambda})"),
            Baseline::Dare { keep_prob, seed } => write!(f, "dare(p={keep_prob},seed={seed})"),
            Baseline::Ties { density } => write!(f, "ties(density={density})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses a bare method name with default hyperparameters.
impl FromStr for Baseline {
    type Err = MergeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soup" => Ok(Baseline::Soup),
            "ta" | "task-arithmetic" => Ok(Baseline::TaskArithmetic { lambda: 1.0 }),
            "dare" => Ok(Baseline::Dare {
                keep_prob: 0.5,
                seed: 0,
            }),
            "ties" => Ok(Baseline::Ties { density: 0.5 }),
            "fisher" => Ok(Baseline::Fisher),
            other => Err(MergeError::invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, stream_rng};

    fn upd(m: DMatrix<f64>, task: &str) -> ResidualUpdate {
        ResidualUpdate::new(1, m, task).unwrap()
    }

    fn random_deltas(seed: u64, k: usize) -> Vec<ResidualUpdate> {
        let mut rng = stream_rng(seed, 0);
        (0..k)
            .map(|i| upd(gaussian_matrix(&mut rng, 4, 3, 1.0), &format!("t{i}")))
            .collect()
    }

    #[test]
    fn soup_cases() {
        let d = random_deltas(1, 1).remove(0);
        let same = soup(&[d.clone(), d.clone()]).unwrap();
        assert!((same - &d.delta).amax() < 1e-15);
        let neg = upd(-d.delta.clone(), "n");
        assert_eq!(soup(&[d, neg]).unwrap(), DMatrix::zeros(4, 3));
        assert!(soup(&[]).is_err());

        let ds = random_deltas(2, 3);
        let s = soup(&ds).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mean = ds.iter().map(|d| d.delta[(i, j)]).sum::<f64>() / 3.0;
                assert!((s[(i, j)] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn task_arithmetic_cases() {
        let ds = random_deltas(3, 3);
        let sum = ds
            .iter()
            .fold(DMatrix::zeros(4, 3), |acc, d| acc + &d.delta);
        assert!((task_arithmetic(&ds, &[1.0; 3]).unwrap() - sum).amax() < 1e-15);
        let third = task_arithmetic(&ds, &[1.0 / 3.0; 3]).unwrap();
        assert!((third - soup(&ds).unwrap()).amax() < 1e-15);
        assert_eq!(task_arithmetic(&ds, &[1.0, 0.0, 0.0]).unwrap(), ds[0].delta);
        assert!(task_arithmetic(&ds, &[1.0]).is_err());
    }

    #[test]
    fn dare_full_keep_is_plain_sum() {
        let ds = random_deltas(4, 2);
        let merged = dare_row_uniform(&ds, 1.0, 17).unwrap();
        assert_eq!(merged, task_arithmetic(&ds, &[1.0, 1.0]).unwrap());
        assert!(dare_row_uniform(&ds, 0.0, 1).is_err());
        assert!(dare_row_uniform(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn dare_is_seed_deterministic_and_row_uniform() {
        let a = dare_mask(3, 8, 0.5, 9).unwrap();
        assert_eq!(a, dare_mask(3, 8, 0.5, 9).unwrap());
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn ties_single_task_and_equal_tasks() {
        let d = random_deltas(5, 1).remove(0);
        assert_eq!(
            ties_rowwise(std::slice::from_ref(&d), 1.0).unwrap(),
            d.delta
        );
        let twice = ties_rowwise(&[d.clone(), d.clone()], 1.0).unwrap();
        assert!((twice - &d.delta).amax() < 1e-15);
    }

    #[test]
    fn ties_sign_tie_goes_to_first_task() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let merged = ties_rowwise(&[upd(a.clone(), "a"), upd(-a.clone(), "b")], 1.0).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn ties_trims_small_rows() {
        let a = DMatrix::from_row_slice(2, 1, &[5.0, 1.0]);
        let mask = ties_mask(&[upd(a, "a")], 0.5).unwrap();
        assert_eq!(mask.as_slice(), &[1.0, 0.0]);
        assert!(ties_mask(&random_deltas(1, 1), 0.0).is_err());
    }

    #[test]
    fn fisher_cases() {
        let f = |v: Vec<f64>| FisherDiagonal::new(DVector::from_vec(v)).unwrap();
        let thetas = [DVector::from_vec(vec![0.0]), DVector::from_vec(vec![4.0])];
        let merged = fisher_merge(&thetas, &[f(vec![1.0]), f(vec![3.0])]).unwrap();
        assert_eq!(merged[0], 3.0);

        let equal = fisher_merge(&thetas, &[f(vec![2.0]), f(vec![2.0])]).unwrap();
        assert_eq!(equal[0], 2.0);

        let dominant = fisher_merge(&thetas, &[f(vec![1e8]), f(vec![1.0])]).unwrap();
        assert!((dominant[0] - thetas[0][0]).abs() < 1e-6);

        let zero = fisher_merge(&thetas, &[f(vec![0.0]), f(vec![0.0])]).unwrap();
        assert_eq!(zero[0], 2.0);

        assert!(FisherDiagonal::new(DVector::from_vec(vec![-1.0])).is_err());
    }

    #[test]
    fn names_parse() {
        for name in ["soup", "ta", "dare", "ties", "fisher"] {
            assert_eq!(name.parse::<Baseline>().unwrap().name(), name);
        }
        assert!("regmean".parse::<Baseline>().is_err());
    }
}
