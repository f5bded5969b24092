//! Cross-domain transfer: each domain in turn is held out as the target.
//! Training never reads target sentiment labels; only its test split is
//! scored.
//!
//!     cargo run --release --example cross_domain

use tokenmask::data::{generate_synthetic, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::train::{train, Protocol, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?;
    for target in data.splits.iter().map(|s| s.domain.clone()) {
        let config = TrainConfig {
            mode: Protocol::CrossDomain,
            target: Some(target.clone()),
            ..TrainConfig::desk()
        };
        let out = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |_| Ok(()))?;
        println!(
            "target {target}: test accuracy {:.3} (best epoch {}, {} steps)",
            out.test.accuracy_of(&target).unwrap_or(f64::NAN),
            out.best_epoch,
            out.steps
        );
    }
    Ok(())
}
