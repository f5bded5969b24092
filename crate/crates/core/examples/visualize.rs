//! Writes SVG renderings of the masks a trained model predicts for a few
//! test sentences per domain, plus the records as JSON lines.
//!
//!     cargo run --release --example visualize -- [output-dir]

use std::path::PathBuf;

use tokenmask::analysis::visualize_masks;
use tokenmask::data::{generate_synthetic, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::train::{train, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let dir = std::env::args_os().nth(1).map_or_else(|| PathBuf::from("mask-visualization"), PathBuf::from);
    let data = generate_synthetic(&SyntheticSpec::default())?;
    let config = TrainConfig::desk();
    let model = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |_| Ok(()))?.model;

    let examples: Vec<_> = data.splits.iter().flat_map(|s| s.test.iter().take(3).cloned()).collect();
    let records = visualize_masks(&model, &examples, &dir)?;
    println!("wrote {} renderings to {}", records.len(), dir.display());
    println!("red boxes: shared mask, blue underline: private mask, grey: protected");
    Ok(())
}
