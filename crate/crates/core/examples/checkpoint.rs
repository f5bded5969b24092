//! Saves a trained model, reloads it, and checks that predictions are
//! bit-identical. Loading against a different encoder shape fails with the
//! offending field named.
//!
//!     cargo run --release --example checkpoint

use tokenmask::checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use tokenmask::data::{generate_synthetic, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::train::{train, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { examples_per_domain: 150, ..SyntheticSpec::default() })?;
    let config = TrainConfig { epochs: 2, ..TrainConfig::desk() };
    let model = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |_| Ok(()))?.model;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &config, &path)?;
    println!("saved {} bytes", std::fs::metadata(&path)?.len());

    let loaded = load_checkpoint(&path)?;
    let mut identical = true;
    for split in &data.splits {
        for ex in &split.test {
            let seq = model.tokenize(&ex.text)?;
            identical &= model.predict(&seq, split.domain_id)? == loaded.model.predict(&seq, split.domain_id)?;
        }
    }
    println!("reloaded predictions identical: {identical}");

    let mut other = model.encoder().config().clone();
    other.layers += 1;
    match load_checkpoint_expecting(&path, &other) {
        Err(e) => println!("loading with a different encoder: {e}"),
        Ok(_) => println!("unexpectedly loaded"),
    }
    Ok(())
}
