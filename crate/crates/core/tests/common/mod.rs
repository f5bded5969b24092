//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;

use tokenmask::encoder::Vocabulary;
use tokenmask::masking::LexiconConstraints;
use tokenmask::model::{MaskerModel, ModelConfig};
use tokenmask::train::TrainConfig;

/// Very small model dimensions for property checks.
pub fn tiny_train_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.hidden = 8;
    c.layers = 1;
    c.heads = 2;
    c.ff = 16;
    c.max_len = 24;
    c.descriptor_dim = 6;
    c.scorer_hidden = 8;
    c.probe_hidden = 8;
    c
}

pub fn domains(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("d{i}")).collect()
}

pub fn tiny_model_config(vocab: &Vocabulary, m: usize) -> ModelConfig {
    tiny_train_config().model_config(domains(m), vocab.len())
}

/// Word pool mixing every bundled lexicon with invented words.
pub struct WordPool {
    pub words: Vec<String>,
    pub vocab: Vocabulary,
}

impl WordPool {
    pub fn new(lexicons: &LexiconConstraints, invented: usize) -> Self {
        let mut words: Vec<String> = lexicons
            .stopwords
            .iter()
            .chain(&lexicons.sentiment)
            .chain(&lexicons.negation)
            .chain(&lexicons.intensifier)
            .cloned()
            .collect();
        words.extend((0..invented).map(|i| format!("zq{i}x")));
        words.sort();
        words.dedup();
        let vocab = Vocabulary::from_word_lists(&[words.clone()], 1).unwrap();
        WordPool { words, vocab }
    }

    /// Random sentence of 1..=max_words words.
    pub fn sentence<R: Rng>(&self, max_words: usize, rng: &mut R) -> String {
        let n = rng.random_range(1..=max_words);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.words.choose(rng).unwrap().as_str());
        }
        out.join(" ")
    }
}

pub fn tiny_model(pool: &WordPool, lexicons: &LexiconConstraints, m: usize, seed: u64) -> MaskerModel {
    MaskerModel::new(tiny_model_config(&pool.vocab, m), pool.vocab.clone(), lexicons.clone(), seed).unwrap()
}
