//! Captured-energy diagnostics: how much residual energy a p-dimensional
//! subspace explains, for the optimal eigenbasis and a random competitor.

use nalgebra::DVector;
use qpmerge::basis::{diagnostics, energy_matrix, optimal_basis, projector, random_basis};
use qpmerge::linalg::{gaussian_vector, stream_rng};

fn main() -> qpmerge::Result<()> {
    let mut rng = stream_rng(3, 0);
    let scales = DVector::from_vec(vec![3.0, 2.0, 1.0, 0.5, 0.25, 0.1]);
    let residuals: Vec<DVector<f64>> = (0..50)
        .map(|_| gaussian_vector(&mut rng, scales.len(), 1.0).component_mul(&scales))
        .collect();
    let energy = energy_matrix(&residuals)?;
    println!("eigenvalues of S: {:.3?}", energy.eigenvalues());
    println!("p  eigen_fraction  random_fraction  random_gap");
    for p in 1..=energy.dim() {
        let opt = projector(&optimal_basis(&energy, p)?);
        let rand = projector(&random_basis(energy.dim(), p, 7)?);
        let best = diagnostics(&energy, &opt, &opt)?;
        let other = diagnostics(&energy, &rand, &opt)?;
        println!(
            "{p}  {:.4}          {:.4}           {:.4}",
            best.fraction, other.fraction, other.gap_vs_optimal
        );
    }
    Ok(())
}
