//! Generates a bundle, writes it to JSON and reads it back bit-for-bit.

use qpmerge::datastore::{gen_linear_tasks, load_bundle, save_bundle, LinearTaskSpec};

fn main() -> qpmerge::Result<()> {
    let bundle = gen_linear_tasks(&LinearTaskSpec {
        seed: 42,
        noise: 0.1,
        ..Default::default()
    })?;
    let path = std::env::temp_dir().join("qpmerge_example_bundle.json");
    save_bundle(&bundle, &path)?;
    let back = load_bundle(&path)?;
    let same = bundle
        .base
        .layers()
        .iter()
        .zip(back.base.layers())
        .all(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    println!("wrote {}", path.display());
    println!(
        "tasks {:?}, merge layers {:?}",
        back.tasks(),
        back.merge_layers()
    );
    println!("base weights bit-identical after reload: {same}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
