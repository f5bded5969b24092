//! Trains a fresh domain classifier on original text, on text with the
//! shared mask applied, and on the masked words alone. Lower accuracy on
//! shared-masked text means less domain information survives the mask.
//!
//!     cargo run --release --example domain_probe

use tokenmask::analysis::{domain_probe_splits, ProbeConfig, ProbeVariant};
use tokenmask::data::{generate_synthetic, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::train::{train, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?;
    let config = TrainConfig::desk();
    let model = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |_| Ok(()))?.model;

    let probe = ProbeConfig::default();
    for variant in ProbeVariant::ALL {
        let r = domain_probe_splits(variant, Some(&model), &data.splits, &probe)?;
        println!("{:<18} domain accuracy {:.3}", variant.name(), r.accuracy);
        for (domain, row) in r.domains.iter().zip(&r.confusion) {
            println!("  {domain:<10} {row:?}");
        }
    }
    Ok(())
}
