//! Accuracy of the linearised objective on a ReLU network. The gap to the
//! exact loss shrinks with the residual and vanishes once no unit changes
//! its on/off pattern.

use qpmerge::baselines::soup;
use qpmerge::datastore::{gen_relu_tasks, ReluTaskSpec};
use qpmerge::qp::{calibration_loss, linearize_samples, linearized_loss};

fn main() -> qpmerge::Result<()> {
    let bundle = gen_relu_tasks(&ReluTaskSpec::default())?;
    let layer = bundle.merge_layers()[0];
    let calib = bundle.pooled_calibration()?;
    let direction = soup(&bundle.layer_deltas(layer))?;
    let samples = linearize_samples(&bundle.base, layer, &calib)?;
    println!("merge layer {layer}, {} samples", calib.len());
    println!("eps        exact          linearised     |diff|");
    for eps in [1.0, 0.1, 0.01, 0.001] {
        let shift = &direction * eps;
        let exact = calibration_loss(&bundle.base.apply_merged_residual(layer, &shift)?, &calib)?;
        let approx = linearized_loss(&samples, &shift);
        println!(
            "{eps:<10} {exact:<14.8} {approx:<14.8} {:.3e}",
            (exact - approx).abs()
        );
    }
    Ok(())
}
