//! Hand-written bundle files checked against hand-computed values.

use nalgebra::DVector;
use qpmerge::datastore::{bundle_from_str, bundle_to_string, load_bundle};

const TWO_LAYER: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/two_layer_bundle.json"
);
const MINIMAL: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/tests/fixtures/minimal_bundle.json"
);

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

#[test]
fn two_layer_fixture_forward_values() {
    let b = load_bundle(TWO_LAYER).unwrap();
    assert_eq!(b.tasks(), vec!["left".to_string(), "right".to_string()]);
    assert_eq!(b.merge_layers(), vec![1]);
    // relu(I x) = (2, 1), then 2 - 2 = 0.
    assert_eq!(b.base.forward(&v(&[2.0, 1.0])).unwrap(), v(&[0.0]));
    // Left scales the first unit by 1.5: (3, 1) -> 1.
    let left = b.tuned_network("left").unwrap();
    assert_eq!(left.forward(&v(&[2.0, 1.0])).unwrap(), v(&[1.0]));
    // Right halves the second unit, which relu then clips: (1, 0) -> 1.
    let right = b.tuned_network("right").unwrap();
    assert_eq!(right.forward(&v(&[1.0, -1.0])).unwrap(), v(&[1.0]));

    let calib = b.pooled_calibration().unwrap();
    assert_eq!(calib.len(), 3);
    assert_eq!(calib.task(0), Some("left"));
    assert_eq!(calib.task(2), Some("right"));
    assert_eq!(
        calib.inputs()[2][1].to_bits(),
        0.30000000000000004f64.to_bits()
    );
}

#[test]
fn fixtures_survive_save_and_load() {
    for path in [TWO_LAYER, MINIMAL] {
        let b = load_bundle(path).unwrap();
        let text = bundle_to_string(&b).unwrap();
        let back = bundle_from_str(&text).unwrap();
        assert_eq!(bundle_to_string(&back).unwrap(), text);
        assert_eq!(back.meta, b.meta);
    }
}

#[test]
fn minimal_fixture_residual_layout() {
    let b = load_bundle(MINIMAL).unwrap();
    let d = &b.layer_deltas(1)[0];
    assert_eq!(d.delta.shape(), (1, 2));
    assert_eq!((d.delta[(0, 0)], d.delta[(0, 1)]), (0.5, 0.25));
    // 2·1 - 1·2 = 0 before tuning, 2.5·1 - 0.75·2 = 1 after.
    assert_eq!(
        b.tuned_network("a")
            .unwrap()
            .forward(&v(&[1.0, 2.0]))
            .unwrap(),
        v(&[1.0])
    );
}
