//! Generates a small synthetic corpus, trains the masker on all domains
//! and shows the masks it predicts for a few test sentences.
//!
//!     cargo run --release --example quickstart

use tokenmask::data::{format_summary, generate_synthetic, summarize, SyntheticSpec};
use tokenmask::masking::LexiconConstraints;
use tokenmask::train::{train, MetricEvent, TrainConfig};

fn main() -> tokenmask::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?;
    print!("{}", format_summary(&summarize(&data.splits)));

    let config = TrainConfig::desk();
    let outcome = train(&config, &data.splits, LexiconConstraints::bundled(), &mut |event| {
        if let MetricEvent::Eval { epoch, report, .. } = event {
            println!("epoch {epoch}: dev macro accuracy {:.3}", report.macro_avg);
        }
        Ok(())
    })?;
    println!("best epoch {}, test macro accuracy {:.3}", outcome.best_epoch, outcome.test.macro_avg);
    for d in &outcome.test.per_domain {
        println!("  {:<10} {:.3}", d.domain, d.accuracy);
    }

    let model = &outcome.model;
    for split in &data.splits {
        let ex = &split.test[0];
        let seq = model.tokenize(&ex.text)?;
        let p = model.predict(&seq, split.domain_id)?;
        let shown: Vec<String> = seq
            .surface
            .iter()
            .enumerate()
            .filter(|(i, _)| !seq.is_special[*i])
            .map(|(i, w)| match (p.shared.hard[i], p.private.hard[i]) {
                (true, true) => format!("<{w}>"),
                (true, false) => format!("[{w}]"),
                (false, true) => format!("{{{w}}}"),
                _ => w.clone(),
            })
            .collect();
        println!("{} gold={} pred={} p={:.2}", split.domain, ex.sentiment, p.label, p.probs[1]);
        println!("  {}", shown.join(" "));
    }
    println!("[w] shared-masked, {{w}} private-masked, <w> both");
    Ok(())
}
