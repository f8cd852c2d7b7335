//! Merges three tasks at one layer of a linear network with the diagonal-mask
//! QP and compares the result with the soup and task-arithmetic baselines.

use qpmerge::baselines::{soup_mask, task_arithmetic_mask};
use qpmerge::datastore::{gen_linear_tasks, LinearTaskSpec};
use qpmerge::qp::{
    build_diagonal_qp, calibration_loss, diagonal_merge, solve_box_constrained,
    solve_unconstrained, BoxOptions,
};

fn main() -> qpmerge::Result<()> {
    let bundle = gen_linear_tasks(&LinearTaskSpec {
        delta_scale: 0.5,
        noise: 0.05,
        ..Default::default()
    })?;
    let calib = bundle.pooled_calibration()?;
    let deltas = bundle.layer_deltas(1);
    let (k, rows) = (deltas.len(), deltas[0].delta.nrows());

    let qp = build_diagonal_qp(&bundle.base, &deltas, &calib)?;
    let closed = solve_unconstrained(&qp)?;
    let boxed = solve_box_constrained(&qp, 0.0, 1.0, &BoxOptions::default())?;

    let loss_of = |mask: &nalgebra::DMatrix<f64>| -> qpmerge::Result<f64> {
        let merged = bundle
            .base
            .apply_merged_residual(1, &diagonal_merge(&deltas, mask)?)?;
        calibration_loss(&merged, &calib)
    };
    println!("{} samples, {k} tasks, {rows} rows per mask", calib.len());
    println!(
        "base         {:.6}",
        calibration_loss(&bundle.base, &calib)?
    );
    println!("soup         {:.6}", loss_of(&soup_mask(k, rows))?);
    println!(
        "ta (1.0)     {:.6}",
        loss_of(&task_arithmetic_mask(&vec![1.0; k], rows))?
    );
    println!(
        "qp closed    {:.6} (rank {})",
        closed.objective, closed.rank
    );
    println!("qp in [0,1]  {:.6}", boxed.objective);
    println!("closed-form mask:\n{:.3}", closed.coefficients.values);
    Ok(())
}
