//! Tokenization, vocabulary, and the bidirectional transformer encoder.
//!
//! The encoder is a compact post-LN transformer (token + position
//! embeddings, `L` blocks of multi-head self-attention and a GELU
//! feed-forward). It accepts sequences containing `[MASK]` like any other
//! token, and an optional per-position blend weight that swaps a token's
//! embedding for the `[MASK]` embedding differentiably.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{io_at, Error, Result};
use crate::masking::MaskDecision;
use crate::params::{glorot, normal_tensor, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token/id mapping. Ids are dense and the reserved tokens occupy 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts, keeping words seen at least
    /// `min_freq` times, ordered by frequency (descending) then lexically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        let lists: Vec<Vec<String>> = corpus.iter().map(|t| split_words(t.as_ref())).collect();
        Self::from_word_lists(&lists, min_freq)
    }

    /// Like [`Vocabulary::build`] over pre-split words. Reserved token
    /// strings are skipped.
    pub fn from_word_lists<S: AsRef<str>>(lists: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if lists.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for words in lists {
            for w in words {
                let w = w.as_ref();
                if !RESERVED.contains(&w) {
                    *counts.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Validates and indexes a full token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::InvalidArgument(
                "vocabulary is missing reserved tokens".into(),
            ));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary line {} must be {r}, found {:?}",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reads a vocabulary file: one token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a word-piece style vocabulary (e.g. a BERT `vocab.txt`).
    ///
    /// Reserved tokens are moved to ids 0..5; continuation pieces (`##x`)
    /// and `[unusedN]`/other bracketed entries are dropped, since text is
    /// still split into whole words.
    pub fn load_wordpiece(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for line in text.lines() {
            let t = line.trim();
            if t.is_empty() || t.starts_with("##") || (t.starts_with('[') && t.ends_with(']')) {
                continue;
            }
            let t = t.to_lowercase();
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercases and splits on whitespace and punctuation. Apostrophes inside
/// a word are kept (`don't`), punctuation is otherwise dropped.
pub fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// One tokenized text: `[CLS] w1 .. wk [SEP] [PAD]*`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub surface: Vec<String>,
    pub is_special: Vec<bool>,
    /// Count of non-PAD positions.
    pub true_len: usize,
}

impl TokenSequence {
    /// Builds `[CLS] words.. [SEP]`, truncating words so the total length
    /// is at most `max_len`.
    pub fn from_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::InvalidArgument(format!(
                "max_len must be at least 3, got {max_len}"
            )));
        }
        let keep = words.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        let mut surface = Vec::with_capacity(keep + 2);
        let mut is_special = Vec::with_capacity(keep + 2);
        ids.push(CLS);
        surface.push(RESERVED[CLS].to_string());
        is_special.push(true);
        for w in &words[..keep] {
            let w = w.as_ref();
            ids.push(vocab.id(w));
            surface.push(w.to_string());
            is_special.push(false);
        }
        ids.push(SEP);
        surface.push(RESERVED[SEP].to_string());
        is_special.push(true);
        let true_len = ids.len();
        Ok(TokenSequence {
            ids,
            surface,
            is_special,
            true_len,
        })
    }

    /// Padded length.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends PAD positions up to `len` (no-op if already that long).
    pub fn pad_to(&self, len: usize) -> TokenSequence {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.surface.push(RESERVED[PAD].to_string());
            out.is_special.push(true);
        }
        out
    }

    /// Per-position validity (true for non-PAD).
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.true_len).collect()
    }

    /// Number of ordinary (non-special) tokens.
    pub fn num_words(&self) -> usize {
        self.is_special.iter().filter(|s| !**s).count()
    }
}

/// Tokenizes `text`; the empty string yields `[CLS] [SEP]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    TokenSequence::from_words(&split_words(text), vocab, max_len)
}

/// Replaces masked positions with `[MASK]`; surface strings are kept.
pub fn apply_mask(seq: &TokenSequence, decision: &MaskDecision) -> Result<TokenSequence> {
    if decision.len() != seq.len() {
        return Err(Error::Shape(format!(
            "mask decision has {} positions, sequence has {}",
            decision.len(),
            seq.len()
        )));
    }
    let mut out = seq.clone();
    for (i, &m) in decision.hard.iter().enumerate() {
        if m {
            if seq.is_special[i] {
                return Err(Error::SpecialPositionMasked(i));
            }
            out.ids[i] = MASK;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            max_len: 64,
            dropout: 0.1,
            vocab_size: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!("max-len must be >= 4, got {}", self.max_len)));
        }
        if self.vocab_size <= MASK {
            return Err(Error::Config("vocab-size must cover the reserved tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Field-by-field comparison, naming the first differing field.
    pub fn ensure_matches(&self, other: &EncoderConfig) -> Result<()> {
        let fields: [(&'static str, String, String); 6] = [
            ("hidden", self.hidden.to_string(), other.hidden.to_string()),
            ("layers", self.layers.to_string(), other.layers.to_string()),
            ("heads", self.heads.to_string(), other.heads.to_string()),
            ("ff", self.ff.to_string(), other.ff.to_string()),
            ("max-len", self.max_len.to_string(), other.max_len.to_string()),
            ("vocab-size", self.vocab_size.to_string(), other.vocab_size.to_string()),
        ];
        for (field, expected, found) in fields {
            if expected != found {
                return Err(Error::ConfigMismatch {
                    field,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Output of [`Encoder::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    /// One row per position (padded length x H).
    pub hidden: Tensor,
    /// Copy of `hidden` row 0.
    pub cls: Vec<f64>,
    pub attention_mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.hidden.cols()
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Handles to the encoder's parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    blocks: Vec<Block>,
}

/// Tape handles for one encoded sequence.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub hidden: Var,
    pub cls: Var,
}

impl Encoder {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let name = |s: &str| format!("{prefix}.{s}");
        let tok_emb = store.add(name("tok_emb"), normal_tensor(config.vocab_size, h, 0.1, rng), false);
        let pos_emb = store.add(name("pos_emb"), normal_tensor(config.max_len, h, 0.1, rng), false);
        let emb_ln_g = store.add(name("emb_ln.gain"), Tensor::filled(1, h, 1.0), true);
        let emb_ln_b = store.add(name("emb_ln.bias"), Tensor::zeros(1, h), true);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("{prefix}.layer{l}.{s}");
            blocks.push(Block {
                wq: store.add(n("attn.wq"), glorot(h, h, rng), true),
                bq: store.add(n("attn.bq"), Tensor::zeros(1, h), true),
                wk: store.add(n("attn.wk"), glorot(h, h, rng), true),
                bk: store.add(n("attn.bk"), Tensor::zeros(1, h), true),
                wv: store.add(n("attn.wv"), glorot(h, h, rng), true),
                bv: store.add(n("attn.bv"), Tensor::zeros(1, h), true),
                wo: store.add(n("attn.wo"), glorot(h, h, rng), true),
                bo: store.add(n("attn.bo"), Tensor::zeros(1, h), true),
                ln1_g: store.add(n("ln1.gain"), Tensor::filled(1, h, 1.0), true),
                ln1_b: store.add(n("ln1.bias"), Tensor::zeros(1, h), true),
                w1: store.add(n("ff.w1"), glorot(h, config.ff, rng), true),
                b1: store.add(n("ff.b1"), Tensor::zeros(1, config.ff), true),
                w2: store.add(n("ff.w2"), glorot(config.ff, h, rng), true),
                b2: store.add(n("ff.b2"), Tensor::zeros(1, h), true),
                ln2_g: store.add(n("ln2.gain"), Tensor::filled(1, h, 1.0), true),
                ln2_b: store.add(n("ln2.bias"), Tensor::zeros(1, h), true),
            });
        }
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// The token embedding table parameter.
    pub fn token_embeddings(&self) -> ParamId {
        self.tok_emb
    }

    fn check_ids(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if seq.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    ///
    /// `mask_weight` (N x 1, values in {0, 1} in the forward pass) blends
    /// each input embedding towards the `[MASK]` embedding. `dropout`
    /// enables training-mode dropout with the given stream.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        seq: &TokenSequence,
        mask_weight: Option<Var>,
        mut dropout: Option<&mut R>,
    ) -> Result<EncoderVars> {
        self.check_ids(seq)?;
        let n = seq.len();
        let h = self.config.hidden;
        let valid = seq.attention_mask();

        let mut x = tape.gather(self.tok_emb, &seq.ids);
        if let Some(w) = mask_weight {
            if tape.value(w).shape() != (n, 1) {
                return Err(Error::Shape(format!(
                    "mask weight shape {:?}, expected ({n}, 1)",
                    tape.value(w).shape()
                )));
            }
            let mask_row = tape.gather(self.tok_emb, &[MASK]);
            x = tape.mix_rows(x, mask_row, w);
        }
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(self.pos_emb, &positions);
        x = tape.add(x, pos);
        let (g, b) = (tape.param(self.emb_ln_g), tape.param(self.emb_ln_b));
        x = tape.layer_norm(x, g, b);
        x = self.dropout(tape, x, dropout.as_deref_mut());

        let heads = self.config.heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            let q = linear(tape, x, blk.wq, blk.bq);
            let k = linear(tape, x, blk.wk, blk.bk);
            let v = linear(tape, x, blk.wv, blk.bv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_bt(qh, kh);
                let s = tape.scale(s, scale);
                let p = tape.softmax_rows(s, Some(&valid));
                outs.push(tape.matmul(p, vh));
            }
            let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let a = linear(tape, cat, blk.wo, blk.bo);
            let a = self.dropout(tape, a, dropout.as_deref_mut());
            let res = tape.add(x, a);
            let (g, b) = (tape.param(blk.ln1_g), tape.param(blk.ln1_b));
            x = tape.layer_norm(res, g, b);

            let f = linear(tape, x, blk.w1, blk.b1);
            let f = tape.gelu(f);
            let f = linear(tape, f, blk.w2, blk.b2);
            let f = self.dropout(tape, f, dropout.as_deref_mut());
            let res = tape.add(x, f);
            let (g, b) = (tape.param(blk.ln2_g), tape.param(blk.ln2_b));
            x = tape.layer_norm(res, g, b);
        }
        let cls = tape.row(x, 0);
        Ok(EncoderVars { hidden: x, cls })
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, rng: Option<&mut R>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (rows, cols) = tape.value(x).shape();
                let keep = 1.0 / (1.0 - p);
                let data = (0..rows * cols)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = tape.leaf(Tensor::from_vec(rows, cols, data));
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    /// Evaluation-mode encoding (no dropout).
    pub fn encode(&self, store: &ParamStore, seq: &TokenSequence) -> Result<EncodedSequence> {
        let mut tape = Tape::new(store);
        let vars = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, seq, None, None)?;
        let hidden = tape.value(vars.hidden).clone();
        let cls = hidden.row(0).to_vec();
        Ok(EncodedSequence {
            hidden,
            cls,
            attention_mask: seq.attention_mask(),
        })
    }
}

/// `x W + b`.
pub(crate) fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = tape.param(w);
    let b = tape.param(b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}
