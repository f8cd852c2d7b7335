//! Merges two layers bottom-up, then refines a soup merge at one layer only,
//! and measures the second-order cross-layer interaction.

use qpmerge::baselines::Baseline;
use qpmerge::datastore::{gen_linear_tasks, LinearTaskSpec};
use qpmerge::multilayer::{
    hybrid_refine, interaction_error, sequential_merge, QpSolver, SequentialOptions,
};

fn main() -> qpmerge::Result<()> {
    let bundle = gen_linear_tasks(&LinearTaskSpec {
        widths: vec![6, 5, 4, 3],
        merge_layers: vec![1, 2, 3],
        delta_scale: 0.3,
        noise: 0.02,
        ..Default::default()
    })?;
    let calib = bundle.pooled_calibration()?;
    let deltas = bundle.deltas_by_layer();

    let (_, seq) = sequential_merge(&bundle.base, &deltas, &calib, &SequentialOptions::default())?;
    println!("sequential qp");
    for rec in &seq.layers {
        println!(
            "  layer {}: loss {:.6} -> {:.6}",
            rec.layer, rec.objective_before, rec.objective_after
        );
    }
    println!("  final mse {:.6}", seq.calibration_mse);

    let (_, pure) = hybrid_refine(
        &bundle.base,
        &deltas,
        &calib,
        &Baseline::Soup,
        &[],
        &QpSolver::ClosedForm,
    )?;
    let (_, hybrid) = hybrid_refine(
        &bundle.base,
        &deltas,
        &calib,
        &Baseline::Soup,
        &[2],
        &QpSolver::ClosedForm,
    )?;
    println!(
        "soup mse {:.6}, soup + qp at layer 2 {:.6}",
        pure.calibration_mse, hybrid.calibration_mse
    );

    let lower = &deltas[&1][0];
    let upper = &deltas[&2][0];
    for eps in [1e-1, 1e-2, 1e-3] {
        let err = interaction_error(&bundle.base, lower, upper, &calib, eps)?;
        println!(
            "interaction at eps {eps:e}: {err:.3e}, /eps^2 = {:.4}",
            err / (eps * eps)
        );
    }
    Ok(())
}
