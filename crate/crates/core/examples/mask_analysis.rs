//! Masking statistics of a trained model: rates per domain, the most
//! frequently masked words, and rates per planted token role.
//!
//!     cargo run --release --example mask_analysis

use tokenmask::analysis::{mask_records, mask_stats_from_records, rank_words, role_mask_rates, Scope};
use tokenmask::data::{generate_synthetic, Part, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::train::{train, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?;
    let config = TrainConfig::desk();
    let model = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |_| Ok(()))?.model;

    let records = mask_records(&model, &data.splits, Part::Test)?;
    let stats = mask_stats_from_records(&records);
    println!("{:<10} {:>8} {:>12} {:>13} {:>8}", "domain", "examples", "shared rate", "private rate", "length");
    for s in stats.per_domain.iter().chain([&stats.overall]) {
        println!(
            "{:<10} {:>8} {:>12.3} {:>13.3} {:>8.1}",
            s.domain, s.examples, s.shared_rate, s.private_rate, s.length
        );
    }

    for ranking in rank_words(&records, 8, Scope::PerDomain)? {
        let words: Vec<String> = ranking.masked.iter().map(|w| format!("{}:{}", w.word, w.count)).collect();
        println!("{} most masked: {}", ranking.domain.unwrap_or_default(), words.join(" "));
    }

    for r in role_mask_rates(&records, &data.roles) {
        let role = r.role.map_or("unplanted".to_string(), |x| format!("{x:?}").to_lowercase());
        println!(
            "{role:<10} {:>6} tokens  shared {:.3}  private {:.3}",
            r.tokens, r.shared_rate, r.private_rate
        );
    }
    Ok(())
}
