//! Every baseline merge rule next to the QP on one generated bundle.

use qpmerge::baselines::Baseline;
use qpmerge::datastore::{gen_linear_tasks, LinearTaskSpec};
use qpmerge::multilayer::{single_layer_merge, QpSolver};
use qpmerge::qp::calibration_loss;

fn main() -> qpmerge::Result<()> {
    let bundle = gen_linear_tasks(&LinearTaskSpec {
        delta_scale: 0.5,
        noise: 0.05,
        seed: 9,
        ..Default::default()
    })?;
    let calib = bundle.pooled_calibration()?;
    let deltas = bundle.layer_deltas(1);
    let n = calib.len() as f64;
    let rules = [
        Baseline::Soup,
        Baseline::TaskArithmetic { lambda: 0.5 },
        Baseline::TaskArithmetic { lambda: 1.0 },
        Baseline::Dare {
            keep_prob: 0.5,
            seed: 0,
        },
        Baseline::Ties { density: 0.5 },
        Baseline::Fisher,
    ];
    for rule in &rules {
        let merged = rule.merge(&bundle.base, &deltas, &calib)?;
        let net = bundle.base.apply_merged_residual(1, &merged)?;
        println!(
            "{:<24} mse {:.6}",
            rule.to_string(),
            calibration_loss(&net, &calib)? / n
        );
    }
    let (net, _) = single_layer_merge(&bundle.base, &deltas, &calib, &QpSolver::ClosedForm)?;
    println!(
        "{:<24} mse {:.6}",
        "qp",
        calibration_loss(&net, &calib)? / n
    );
    Ok(())
}
