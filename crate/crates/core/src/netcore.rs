//! Dense feed-forward networks: forward passes, the lower/upper factorisation
//! around a merge layer, hidden-layer residual activations and the local
//! linearisation of everything above the merge layer.
//!
//! Layer indices are 1-based throughout (`1..=depth`), matching the bundle
//! file format and the CLI.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};
use crate::linalg::{all_finite, chain_product, shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, v: &mut DVector<f64>) {
        if self == Activation::Relu {
            v.iter_mut().for_each(|x| *x = x.max(0.0));
        }
    }

    /// Derivative at a pre-activation; ties at zero use the subgradient 0.
    fn slope(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A stack of dense layers `W_1 .. W_M` with one activation per gap between
/// consecutive layers (`activations.len() == depth - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearNetwork {
    layers: Vec<DMatrix<f64>>,
    activations: Vec<Activation>,
}

impl LinearNetwork {
    pub fn new(layers: Vec<DMatrix<f64>>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(MergeError::invalid("network needs at least one layer"));
        }
        if activations.len() != layers.len() - 1 {
            return Err(MergeError::dims(
                "activation count",
                layers.len() - 1,
                activations.len(),
            ));
        }
        for (i, w) in layers.iter().enumerate() {
            if !all_finite(w) {
                return Err(MergeError::NonFinite("layer weights"));
            }
            if i > 0 && layers[i - 1].nrows() != w.ncols() {
                return Err(MergeError::dims(
                    "layer chain",
                    format!("layer {} with {} inputs", i + 1, layers[i - 1].nrows()),
                    shape(w),
                ));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    /// All-identity network.
    pub fn linear(layers: Vec<DMatrix<f64>>) -> Result<Self> {
        let gaps = layers.len().saturating_sub(1);
        Self::new(layers, vec![Activation::Identity; gaps])
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.depth() - 1].nrows()
    }

    pub fn is_linear(&self) -> bool {
        self.activations.iter().all(|&a| a == Activation::Identity)
    }

    pub fn check_layer(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.depth() {
            return Err(MergeError::LayerOutOfRange {
                index: n,
                layers: self.depth(),
            });
        }
        Ok(())
    }

    /// Weight matrix of layer `n` (1-based).
    pub fn layer(&self, n: usize) -> Result<&DMatrix<f64>> {
        self.check_layer(n)?;
        Ok(&self.layers[n - 1])
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(MergeError::dims("network input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, w) in self.layers.iter().enumerate() {
            h = w * h;
            if let Some(act) = self.activations.get(i) {
                act.apply(&mut h);
            }
        }
        Ok(h)
    }

    /// Input seen by layer `n`: `Z x` for linear lower layers, otherwise the
    /// actual activation after layers `1..n`.
    pub fn layer_input(&self, n: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_layer(n)?;
        self.check_input(x)?;
        let mut h = x.clone();
        for i in 0..n - 1 {
            h = &self.layers[i] * h;
            self.activations[i].apply(&mut h);
        }
        Ok(h)
    }

    /// Exact split `h(x) = L W_n Z x` for all-identity networks.
    pub fn factorize(&self, n: usize) -> Result<Factorization> {
        self.check_layer(n)?;
        if let Some(pos) = self
            .activations
            .iter()
            .position(|&a| a != Activation::Identity)
        {
            return Err(MergeError::NonLinearActivation { layer: pos + 1 });
        }
        let lower = chain_product(self.layers[..n - 1].iter().rev(), self.input_dim());
        let upper = chain_product(self.layers[n..].iter().rev(), self.layers[n - 1].nrows());
        Ok(Factorization { lower, upper })
    }

    /// Jacobian of the map from layer `n`'s output to the network output,
    /// taken at the base activation pattern for input `x`.
    pub fn linearize_downstream(&self, n: usize, x: &DVector<f64>) -> Result<DownstreamMap> {
        self.check_layer(n)?;
        self.check_input(x)?;
        let width = self.layers[n - 1].nrows();
        let downstream_linear = self.activations[n - 1..]
            .iter()
            .all(|&a| a == Activation::Identity);
        if downstream_linear {
            let matrix = chain_product(self.layers[n..].iter().rev(), width);
            return Ok(DownstreamMap {
                matrix,
                kind: MapKind::Exact,
            });
        }

        let mut pre = self.layer_input(n, x)?;
        pre = &self.layers[n - 1] * pre;
        let mut jac = DMatrix::<f64>::identity(width, width);
        for gap in n..self.depth() {
            let act = self.activations[gap - 1];
            for (i, mut row) in jac.row_iter_mut().enumerate() {
                let s = act.slope(pre[i]);
                if s != 1.0 {
                    row *= s;
                }
            }
            act.apply(&mut pre);
            let w = &self.layers[gap];
            jac = w * jac;
            pre = w * pre;
        }
        Ok(DownstreamMap {
            matrix: jac,
            kind: MapKind::Jacobian,
        })
    }

    /// Copy of the network with `W_n` replaced by `W_n + merged_delta`.
    pub fn apply_merged_residual(&self, n: usize, merged_delta: &DMatrix<f64>) -> Result<Self> {
        let w = self.layer(n)?;
        if w.shape() != merged_delta.shape() {
            return Err(MergeError::dims(
                "merged residual",
                shape(w),
                shape(merged_delta),
            ));
        }
        if !all_finite(merged_delta) {
            return Err(MergeError::NonFinite("merged residual"));
        }
        let mut out = self.clone();
        out.layers[n - 1] += merged_delta;
        Ok(out)
    }

    /// Fine-tuned model obtained by adding a single residual update.
    pub fn with_residual(&self, update: &ResidualUpdate) -> Result<Self> {
        self.apply_merged_residual(update.layer, &update.delta)
    }
}

/// Lower and upper compositions around a merge layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    /// `Z = W_{n-1} ... W_1`
    pub lower: DMatrix<f64>,
    /// `L = W_M ... W_{n+1}`
    pub upper: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Exact,
    Jacobian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamMap {
    pub matrix: DMatrix<f64>,
    pub kind: MapKind,
}

/// Per-task weight delta at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUpdate {
    pub layer: usize,
    pub delta: DMatrix<f64>,
    pub task: String,
}

impl ResidualUpdate {
    pub fn new(layer: usize, delta: DMatrix<f64>, task: impl Into<String>) -> Result<Self> {
        if !all_finite(&delta) {
            return Err(MergeError::NonFinite("residual update"));
        }
        Ok(Self {
            layer,
            delta,
            task: task.into(),
        })
    }

    pub fn check_against(&self, net: &LinearNetwork) -> Result<()> {
        let w = net.layer(self.layer)?;
        if w.shape() != self.delta.shape() {
            return Err(MergeError::dims(
                "residual update",
                shape(w),
                shape(&self.delta),
            ));
        }
        Ok(())
    }
}

/// `δ Z x`, the residual activation a task's update produces at its layer.
pub fn hidden_residual(
    delta: &ResidualUpdate,
    lower: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if lower.ncols() != x.len() {
        return Err(MergeError::dims("lower map input", lower.ncols(), x.len()));
    }
    if delta.delta.ncols() != lower.nrows() {
        return Err(MergeError::dims(
            "residual update input",
            lower.nrows(),
            delta.delta.ncols(),
        ));
    }
    Ok(&delta.delta * (lower * x))
}

/// Checks that every update sits at the same valid layer of `net` and
/// returns that layer.
pub(crate) fn common_layer(net: &LinearNetwork, deltas: &[ResidualUpdate]) -> Result<usize> {
    let first = deltas.first().ok_or(MergeError::NoResiduals)?.layer;
    for d in deltas {
        if d.layer != first {
            return Err(MergeError::MixedLayers {
                first,
                other: d.layer,
            });
        }
        d.check_against(net)?;
    }
    Ok(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, gaussian_vector, stream_rng};

    fn random_linear(seed: u64, widths: &[usize]) -> LinearNetwork {
        let mut rng = stream_rng(seed, 0);
        let layers = widths
            .windows(2)
            .map(|w| gaussian_matrix(&mut rng, w[1], w[0], 1.0))
            .collect();
        LinearNetwork::linear(layers).unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let net = LinearNetwork::linear(vec![eye.clone(), eye]).unwrap();
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn diagonal_scaling() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let net = LinearNetwork::linear(vec![w]).unwrap();
        let y = net.forward(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn forward_matches_term_by_term_evaluation() {
        let net = random_linear(1, &[4, 5, 3, 2]);
        let x = gaussian_vector(&mut stream_rng(2, 0), 4, 1.0);
        // naive: explicit sums, no matrix products
        let mut h: Vec<f64> = x.iter().copied().collect();
        for w in net.layers() {
            h = (0..w.nrows())
                .map(|i| (0..w.ncols()).map(|j| w[(i, j)] * h[j]).sum())
                .collect();
        }
        let y = net.forward(&x).unwrap();
        for (a, b) in y.iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = random_linear(1, &[3, 2]);
        assert!(matches!(
            net.forward(&DVector::zeros(4)),
            Err(MergeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn constructor_rejects_broken_chain() {
        let res = LinearNetwork::linear(vec![DMatrix::zeros(3, 2), DMatrix::zeros(2, 4)]);
        assert!(res.is_err());
    }

    #[test]
    fn factorize_single_layer_is_identity() {
        let net = random_linear(4, &[3, 2]);
        let f = net.factorize(1).unwrap();
        assert_eq!(f.lower, DMatrix::identity(3, 3));
        assert_eq!(f.upper, DMatrix::identity(2, 2));
    }

    #[test]
    fn factorize_middle_and_top_layers() {
        let net = random_linear(5, &[4, 3, 3, 2]);
        let f = net.factorize(2).unwrap();
        assert_eq!(&f.lower, net.layer(1).unwrap());
        assert_eq!(&f.upper, net.layer(3).unwrap());
        let x = gaussian_vector(&mut stream_rng(6, 0), 4, 1.0);
        let direct = net.forward(&x).unwrap();
        let split = &f.upper * net.layer(2).unwrap() * &f.lower * &x;
        assert!((direct.clone() - split).norm() <= 1e-12 * direct.norm());

        let two = random_linear(7, &[3, 3, 2]);
        let top = two.factorize(2).unwrap();
        assert_eq!(&top.lower, two.layer(1).unwrap());
        assert_eq!(top.upper, DMatrix::identity(2, 2));
    }

    #[test]
    fn factorize_refuses_relu() {
        let net = LinearNetwork::new(
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            vec![Activation::Relu],
        )
        .unwrap();
        assert!(matches!(
            net.factorize(1),
            Err(MergeError::NonLinearActivation { layer: 1 })
        ));
    }

    #[test]
    fn hidden_residual_cases() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let eye = DMatrix::<f64>::identity(2, 2);
        let zero = ResidualUpdate::new(1, DMatrix::zeros(2, 2), "a").unwrap();
        assert_eq!(hidden_residual(&zero, &eye, &x).unwrap(), DVector::zeros(2));
        let id = ResidualUpdate::new(1, eye.clone(), "a").unwrap();
        assert_eq!(hidden_residual(&id, &eye, &x).unwrap(), x);

        let mut rng = stream_rng(8, 0);
        let z = gaussian_matrix(&mut rng, 3, 2, 1.0);
        let d = ResidualUpdate::new(2, gaussian_matrix(&mut rng, 4, 3, 1.0), "b").unwrap();
        let zx = &z * &x;
        let expected = &d.delta * zx;
        assert!((hidden_residual(&d, &z, &x).unwrap() - expected).amax() < 1e-14);
        assert!(hidden_residual(&d, &eye, &x).is_err());
    }

    #[test]
    fn apply_merged_residual_is_pure() {
        let net = random_linear(9, &[3, 3, 2]);
        let snapshot = net.clone();
        let same = net.apply_merged_residual(1, &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(same, net);

        let mut rng = stream_rng(10, 0);
        let d1 = gaussian_matrix(&mut rng, 3, 3, 0.1);
        let d2 = gaussian_matrix(&mut rng, 3, 3, 0.1);
        let merged = net.apply_merged_residual(1, &(&d1 + &d2)).unwrap();
        assert_eq!(net, snapshot);

        let f = net.factorize(1).unwrap();
        let x = gaussian_vector(&mut rng, 3, 1.0);
        let expected = &f.upper * (net.layer(1).unwrap() + &d1 + &d2) * &f.lower * &x;
        assert!((merged.forward(&x).unwrap() - expected).norm() < 1e-12);

        assert!(net.apply_merged_residual(1, &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn linearization_on_linear_net_is_exact_upper() {
        let net = random_linear(11, &[4, 3, 3, 2]);
        let x = gaussian_vector(&mut stream_rng(12, 0), 4, 1.0);
        for n in 1..=3 {
            let map = net.linearize_downstream(n, &x).unwrap();
            assert_eq!(map.kind, MapKind::Exact);
            assert_eq!(map.matrix, net.factorize(n).unwrap().upper);
        }
    }

    #[test]
    fn active_relu_is_identity() {
        let w1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w2 = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let net = LinearNetwork::new(vec![w1, w2.clone()], vec![Activation::Relu]).unwrap();
        let map = net
            .linearize_downstream(1, &DVector::from_vec(vec![1.0, 2.0]))
            .unwrap();
        assert_eq!(map.kind, MapKind::Jacobian);
        assert_eq!(map.matrix, w2);
        // inactive unit (and the zero tie) drop their column
        let map = net
            .linearize_downstream(1, &DVector::from_vec(vec![1.0, 0.0]))
            .unwrap();
        assert_eq!(map.matrix.as_slice(), &[2.0, 0.0]);
    }
}
