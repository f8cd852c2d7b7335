//! Tasks sharing one singular direction: the QP over that direction recovers
//! the weights σ_t σ_k / Σσ², where t is the calibration task.

use nalgebra::DMatrix;
use qpmerge::basis::{svd_closed_form_weights, BasisOrigin, OrthonormalBasis};
use qpmerge::datastore::{gen_shared_direction_instance, shared_direction, SharedDirectionSpec};
use qpmerge::qp::{build_general_basis_qp, solve_unconstrained};

fn main() -> qpmerge::Result<()> {
    let sigmas = vec![1.0, 2.0, 3.0];
    for target in 1..=sigmas.len() {
        let bundle = gen_shared_direction_instance(&SharedDirectionSpec {
            sigmas: sigmas.clone(),
            target,
            ..Default::default()
        })?;
        let u = shared_direction(&bundle).expect("generator stores the direction");
        let basis = OrthonormalBasis::new(
            DMatrix::from_column_slice(u.len(), 1, u.as_slice()),
            BasisOrigin::SvdResiduals,
        )?;
        let calib = bundle.pooled_calibration()?;
        let qp = build_general_basis_qp(&bundle.base, &bundle.layer_deltas(1), &calib, &basis)?;
        let solved = solve_unconstrained(&qp)?.coefficients.values;
        let expected = svd_closed_form_weights(&sigmas, target - 1)?;
        println!("target task {target}");
        for (k, e) in expected.iter().enumerate() {
            println!(
                "  task {}: qp {:.10}  closed form {e:.10}",
                k + 1,
                solved[(k, 0)]
            );
        }
    }
    Ok(())
}
