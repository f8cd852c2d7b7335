//! Reference computations for the integration and acceptance tests. These
//! avoid the library's QP assembly, eigen solver and linearisation so they
//! can act as independent oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qpmerge::linalg::{gaussian_matrix, gaussian_vector, stream_rng};
use qpmerge::{CalibrationSet, LinearNetwork, ResidualUpdate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0x7465_7374)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// `Σ_k diag(d_k) δ_k` with one explicit loop per entry.
pub fn masked_sum(deltas: &[ResidualUpdate], mask: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = deltas[0].delta.shape();
    DMatrix::from_fn(rows, cols, |i, l| {
        deltas
            .iter()
            .enumerate()
            .map(|(k, d)| mask[(k, i)] * d.delta[(i, l)])
            .sum()
    })
}

/// Squared-error calibration loss of an all-linear network whose layer
/// `layer` is shifted by `shift`, using explicit layer products.
pub fn linear_loss(
    net: &LinearNetwork,
    layer: usize,
    shift: &DMatrix<f64>,
    calib: &CalibrationSet,
) -> f64 {
    let mut layers: Vec<DMatrix<f64>> = net.layers().to_vec();
    layers[layer - 1] += shift;
    calib
        .iter()
        .map(|(x, y)| {
            let mut h = x.clone();
            for w in &layers {
                h = w * h;
            }
            (h - y).norm_squared()
        })
        .sum()
}

/// Loss of a diagonal mask on an all-linear network.
pub fn mask_loss(
    net: &LinearNetwork,
    deltas: &[ResidualUpdate],
    mask: &DMatrix<f64>,
    calib: &CalibrationSet,
) -> f64 {
    linear_loss(net, deltas[0].layer, &masked_sum(deltas, mask), calib)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * a.norm() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Random residual vectors with an anisotropic spread so `S` has distinct
/// eigenvalues.
pub fn anisotropic_residuals(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<DVector<f64>> {
    let mix = gaussian_matrix(rng, c, c, 1.0);
    let scales = DVector::from_fn(c, |i, _| 1.0 / (1.0 + i as f64));
    (0..n)
        .map(|_| &mix * gaussian_vector(rng, c, 1.0).component_mul(&scales))
        .collect()
}

/// Random orthonormal `dim x p` columns from a QR of a Gaussian matrix.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize, p: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, dim, p, 1.0).qr().q()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Exact two-layer objective of a network whose layers 1 and 2 both carry
/// masked residuals, minimised jointly by multistart Levenberg-Marquardt.
/// Layers above 2 are used as given.
pub struct JointProblem<'a> {
    pub net: &'a LinearNetwork,
    pub lower: &'a [ResidualUpdate],
    pub upper: &'a [ResidualUpdate],
    pub calib: &'a CalibrationSet,
}

impl JointProblem<'_> {
    fn split(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (k, r1) = (self.lower.len(), self.lower[0].delta.nrows());
        let r2 = self.upper[0].delta.nrows();
        let m1 = DMatrix::from_fn(k, r1, |a, i| theta[a * r1 + i]);
        let m2 = DMatrix::from_fn(k, r2, |a, i| theta[k * r1 + a * r2 + i]);
        (m1, m2)
    }

    pub fn dim(&self) -> usize {
        self.lower.len() * (self.lower[0].delta.nrows() + self.upper[0].delta.nrows())
    }

    pub fn pack(&self, m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for a in 0..m1.nrows() {
            v.extend(m1.row(a).iter());
        }
        for a in 0..m2.nrows() {
            v.extend(m2.row(a).iter());
        }
        DVector::from_vec(v)
    }

    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        let (m1, m2) = self.split(theta);
        let w1 = &self.net.layers()[0] + masked_sum(self.lower, &m1);
        let w2 = &self.net.layers()[1] + masked_sum(self.upper, &m2);
        let mut out = Vec::new();
        for (x, y) in self.calib.iter() {
            let mut h = &w2 * (&w1 * x);
            for w in &self.net.layers()[2..] {
                h = w * h;
            }
            out.extend((h - y).iter());
        }
        DVector::from_vec(out)
    }

    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        self.residuals(theta).norm_squared()
    }

    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let base = self.residuals(theta);
        let mut jac = DMatrix::zeros(base.len(), theta.len());
        for i in 0..theta.len() {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let col = (self.residuals(&plus) - self.residuals(&minus)) / (2.0 * h);
            jac.set_column(i, &col);
        }
        jac
    }

    /// Levenberg-Marquardt from `start`, returning the final point.
    pub fn refine(&self, start: DVector<f64>, iters: usize) -> DVector<f64> {
        let mut theta = start;
        let mut loss = self.loss(&theta);
        let mut mu = 1e-3;
        for _ in 0..iters {
            let r = self.residuals(&theta);
            let j = self.jacobian(&theta);
            let jtj = j.transpose() * &j;
            let jtr = j.transpose() * &r;
            let scale = jtj.diagonal().max().max(1e-300);
            let mut improved = false;
            for _ in 0..30 {
                let damped = &jtj + DMatrix::identity(theta.len(), theta.len()) * (mu * scale);
                let Some(step) = damped.clone().cholesky().map(|c| c.solve(&jtr)) else {
                    mu *= 10.0;
                    continue;
                };
                let cand = &theta - step;
                let cand_loss = self.loss(&cand);
                if cand_loss < loss {
                    theta = cand;
                    let gain = loss - cand_loss;
                    loss = cand_loss;
                    mu = (mu * 0.3).max(1e-15);
                    improved = gain > 1e-16 * loss.max(1e-300);
                    break;
                }
                mu *= 10.0;
            }
            if !improved {
                break;
            }
        }
        theta
    }

    /// Best loss over the given starts plus `random_starts` uniform starts
    /// in `[-1, 2]`.
    pub fn minimise(&self, starts: Vec<DVector<f64>>, random_starts: usize, seed: u64) -> f64 {
        let mut rng = rng(seed);
        let mut all = starts;
        for _ in 0..random_starts {
            all.push(DVector::from_fn(self.dim(), |_, _| {
                uniform(&mut rng, -1.0, 2.0)
            }));
        }
        all.into_iter()
            .map(|s| self.loss(&self.refine(s, 200)))
            .fold(f64::INFINITY, f64::min)
    }
}
