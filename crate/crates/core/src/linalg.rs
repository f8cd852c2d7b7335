//! Dense helpers shared by the QP and basis code: sorted symmetric
//! eigendecomposition, pseudoinverses, Gram-Schmidt and seeded Gaussian
//! sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Relative cutoff below which eigenvalues are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

pub(crate) fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

pub(crate) fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Index of the first entry with the largest magnitude.
pub(crate) fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// Near-equal eigenvalues (within `1e-12` of the spectral scale) are ordered
/// by the coordinate of each eigenvector's largest-magnitude entry, and every
/// eigenvector is signed so that entry is positive.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = argmax_abs(&v);
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            (eig.eigenvalues[i], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let scale = pairs.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[start].0 - pairs[end].0).abs() <= tol {
            end += 1;
        }
        pairs[start..end].sort_by_key(|p| argmax_abs(&p.1));
        start = end;
    }

    let values = pairs.iter().map(|p| p.0).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| pairs[c].1[r]);
    (values, vectors)
}

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix with eigenvalues
/// below `tau * lambda_max` discarded. Returns the pseudoinverse and its rank.
pub fn pinv_symmetric(m: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    let (values, vectors) = sorted_symmetric_eigen(m);
    let lmax = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    if lmax <= 0.0 {
        return (out, 0);
    }
    for (i, &lambda) in values.iter().enumerate() {
        if lambda > tau * lmax {
            let v = vectors.column(i);
            out += (v * v.transpose()) / lambda;
            rank += 1;
        }
    }
    (out, rank)
}

/// Pseudoinverse of a general matrix via SVD, singular values below
/// `tau * sigma_max` discarded.
pub fn pinv(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    if smax <= 0.0 {
        return out;
    }
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tau * smax {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Modified Gram-Schmidt with one reorthogonalisation pass. Columns whose
/// remaining norm falls below `tol` times their original norm are dropped,
/// so the span of the first `k` outputs is the span of the first inputs that
/// produced them.
pub fn orthonormalize_columns(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for col in m.column_iter() {
        let original = col.norm();
        if original == 0.0 {
            continue;
        }
        let mut v = col.clone_owned();
        for _ in 0..2 {
            for q in &kept {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > tol * original {
            let lead = argmax_abs(v.as_slice());
            let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
            kept.push(v * (sign / norm));
        }
    }
    if kept.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    DMatrix::from_columns(&kept)
}

/// Largest entry of `|QᵀQ - I|`.
pub fn orthonormality_deviation(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    let eye = DMatrix::<f64>::identity(q.ncols(), q.ncols());
    (gram - eye).amax()
}

/// Deterministic per-consumer stream derived from one top-level seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian matrix filled column by column, so that the first `k` columns
/// depend only on the seed and not on the total column count.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        data.push(std * z);
    }
    DMatrix::from_vec(rows, cols, data)
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> DVector<f64> {
    DVector::from_iterator(
        len,
        (0..len).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        }),
    )
}

/// Product `mats[0] * mats[1] * ...`, or the `n x n` identity when empty.
pub(crate) fn chain_product<'a>(
    mats: impl DoubleEndedIterator<Item = &'a DMatrix<f64>>,
    n: usize,
) -> DMatrix<f64> {
    let mut acc: Option<DMatrix<f64>> = None;
    for m in mats {
        acc = Some(match acc {
            None => m.clone(),
            Some(a) => a * m,
        });
    }
    acc.unwrap_or_else(|| DMatrix::identity(n, n))
}
