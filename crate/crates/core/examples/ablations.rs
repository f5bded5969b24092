//! Trains the full model and each single-switch ablation with the same
//! seed and compares test accuracy.
//!
//!     cargo run --release --example ablations

use tokenmask::data::{generate_synthetic, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::model::Ablation;
use tokenmask::train::{train, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?;
    for name in std::iter::once("none").chain(Ablation::NAMES) {
        let mut config = TrainConfig::desk();
        config.set_ablation(Ablation::single(name)?);
        let out = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |_| Ok(()))?;
        println!(
            "{name:<24} test macro accuracy {:.3}  config {}",
            out.test.macro_avg,
            &out.fingerprint[..12]
        );
    }
    Ok(())
}
