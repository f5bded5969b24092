//! Which tokens the lexicon constraints protect from masking, and what
//! turning each constraint off changes. An untrained model never masks a
//! protected token.
//!
//!     cargo run --release --example lexicon_constraints

use tokenmask::encoder::{tokenize, Vocabulary};
use tokenmask::masking::LexiconConstraints;
use tokenmask::model::MaskerModel;
use tokenmask::train::TrainConfig;

fn main() -> tokenmask::Result<()> {
    let text = "the battery is not very good but the screen is really excellent";
    let vocab = Vocabulary::build(&[text], 1)?;
    let seq = tokenize(text, &vocab, 64)?;
    let bundled = LexiconConstraints::bundled();
    let c = bundled.counts();
    println!(
        "bundled lexicons: {} stopwords, {} sentiment, {} negation, {} intensifier",
        c.stopwords, c.sentiment, c.negation, c.intensifier
    );

    let variants = [
        ("all constraints", bundled.clone()),
        ("no stopwords", bundled.clone().without_stopwords()),
        ("no sentiment", bundled.clone().without_sentiment()),
    ];
    println!("{:<10} {}", "token", variants.iter().map(|v| format!("{:<16}", v.0)).collect::<String>());
    let eligible: Vec<Vec<bool>> = variants.iter().map(|(_, l)| l.eligible(&seq)).collect();
    for (i, word) in seq.surface.iter().enumerate() {
        let cells: String = eligible
            .iter()
            .map(|e| format!("{:<16}", if e[i] { "maskable" } else { "protected" }))
            .collect();
        println!("{word:<10} {cells}");
    }

    let config = TrainConfig::desk();
    let model = MaskerModel::new(
        config.model_config(vec!["a".into(), "b".into()], vocab.len()),
        vocab,
        bundled,
        7,
    )?;
    let p = model.predict(&model.tokenize(text)?, 0)?;
    let masked: Vec<&str> = seq
        .surface
        .iter()
        .enumerate()
        .filter(|(i, _)| p.shared.hard[*i] || p.private.hard[*i])
        .map(|(_, w)| w.as_str())
        .collect();
    println!("untrained model masks: {masked:?}");
    Ok(())
}
