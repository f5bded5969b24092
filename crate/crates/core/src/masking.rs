//! Token masking networks.
//!
//! Each non-special token gets two logits (index 1 = "mask") from a
//! one-hidden-layer tanh network applied to `concat(h_i, d)`, where `d` is
//! the example's domain descriptor (shared path) or a relatedness-weighted
//! mixture of all descriptors (private path). Discrete decisions come from
//! hard Gumbel-Softmax with a straight-through gradient during training and
//! from the logit argmax at inference. Lexicon-constrained and special
//! positions are always kept.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncodedSequence, TokenSequence, RESERVED};
use crate::error::{Error, Result};
use crate::params::{glorot, normal_tensor, ParamId, ParamStore};
use crate::tensor::{softmax, Tensor};

/// Width of the scoring network's hidden layer.
pub const SCORER_HIDDEN: usize = 256;

/// Per-position mask decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDecision {
    /// True = replace with `[MASK]` / select as domain-related.
    pub hard: Vec<bool>,
    /// Probability of the "mask" choice.
    pub soft: Vec<f64>,
    /// Position excluded from masking (special token or lexicon word).
    pub constrained: Vec<bool>,
}

impl MaskDecision {
    /// A decision that keeps everything; special positions are flagged.
    pub fn keep_all(seq: &TokenSequence) -> Self {
        MaskDecision {
            hard: vec![false; seq.len()],
            soft: vec![0.0; seq.len()],
            constrained: seq.is_special.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.hard.iter().filter(|m| **m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.hard[i]).collect()
    }
}

/// Words that may never be masked.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconConstraints {
    pub stopwords: BTreeSet<String>,
    pub sentiment: BTreeSet<String>,
    pub negation: BTreeSet<String>,
    pub intensifier: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LexiconCounts {
    pub stopwords: usize,
    pub sentiment: usize,
    pub negation: usize,
    pub intensifier: usize,
}

fn parse_lexicon(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|w| !w.is_empty())
        .filter(|w| !RESERVED.iter().any(|r| r.eq_ignore_ascii_case(w)))
        .collect()
}

impl LexiconConstraints {
    /// The lexicons shipped with the crate.
    pub fn bundled() -> Self {
        LexiconConstraints {
            stopwords: parse_lexicon(include_str!("../lexicons/stopwords.txt")),
            sentiment: parse_lexicon(include_str!("../lexicons/sentiment.txt")),
            negation: parse_lexicon(include_str!("../lexicons/negation.txt")),
            intensifier: parse_lexicon(include_str!("../lexicons/intensifier.txt")),
        }
    }

    /// Reads four lexicon files: one word per line, `#` starts a comment.
    pub fn load(stopwords: &Path, sentiment: &Path, negation: &Path, intensifier: &Path) -> Result<Self> {
        let read = |name: &'static str, path: &Path| {
            fs::read_to_string(path)
                .map(|t| parse_lexicon(&t))
                .map_err(|source| Error::Lexicon {
                    name,
                    path: path.to_path_buf(),
                    source,
                })
        };
        let out = LexiconConstraints {
            stopwords: read("stopword", stopwords)?,
            sentiment: read("sentiment", sentiment)?,
            negation: read("negation", negation)?,
            intensifier: read("intensifier", intensifier)?,
        };
        let c = out.counts();
        log::info!(
            "loaded lexicons: {} stopwords, {} sentiment, {} negation, {} intensifier",
            c.stopwords,
            c.sentiment,
            c.negation,
            c.intensifier
        );
        Ok(out)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> LexiconCounts {
        LexiconCounts {
            stopwords: self.stopwords.len(),
            sentiment: self.sentiment.len(),
            negation: self.negation.len(),
            intensifier: self.intensifier.len(),
        }
    }

    /// Exact whole-word membership in any of the sets.
    pub fn contains(&self, word: &str) -> bool {
        self.stopwords.contains(word)
            || self.sentiment.contains(word)
            || self.negation.contains(word)
            || self.intensifier.contains(word)
    }

    pub fn without_stopwords(mut self) -> Self {
        self.stopwords.clear();
        self
    }

    pub fn without_sentiment(mut self) -> Self {
        self.sentiment.clear();
        self
    }

    /// Per-position eligibility for masking.
    pub fn eligible(&self, seq: &TokenSequence) -> Vec<bool> {
        (0..seq.len())
            .map(|i| !seq.is_special[i] && !self.contains(&seq.surface[i]))
            .collect()
    }
}

/// Trainable domain descriptors, one row per domain.
#[derive(Clone, Debug)]
pub struct DescriptorTable {
    param: ParamId,
    names: Vec<String>,
    dim: usize,
}

impl DescriptorTable {
    /// Registers `names.len()` descriptors of width `dim`, drawn from
    /// N(0, 0.1^2).
    pub fn new<R: Rng + ?Sized>(
        names: Vec<String>,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if names.is_empty() || dim == 0 {
            return Err(Error::InvalidArgument(
                "descriptor table needs at least one domain and a positive width".into(),
            ));
        }
        let param = store.add("descriptors", normal_tensor(names.len(), dim, 0.1, rng), false);
        Ok(DescriptorTable { param, names, dim })
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn num_domains(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row<'s>(&self, store: &'s ParamStore, j: usize) -> &'s [f64] {
        store.get(self.param).row(j)
    }
}

/// The relatedness scorer: `l_i = W2 tanh(W1 [h_i; d] + b1) + b2`.
///
/// `W1` is stored as two blocks (`w_token`, `w_desc`) so the descriptor
/// half is projected once per sequence rather than once per token.
#[derive(Clone, Debug)]
pub struct TokenScorer {
    w_token: ParamId,
    w_desc: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    token_dim: usize,
    desc_dim: usize,
}

impl TokenScorer {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        token_dim: usize,
        desc_dim: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let fan_in = token_dim + desc_dim;
        let w1 = glorot(fan_in, hidden, rng);
        let rows: Vec<&[f64]> = (0..fan_in).map(|r| w1.row(r)).collect();
        let w_token = Tensor::from_rows(&rows[..token_dim]);
        let w_desc = Tensor::from_rows(&rows[token_dim..]);
        TokenScorer {
            w_token: store.add(format!("{prefix}.w_token"), w_token, true),
            w_desc: store.add(format!("{prefix}.w_desc"), w_desc, true),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden), true),
            w2: store.add(format!("{prefix}.w2"), glorot(hidden, 2, rng), true),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, 2), true),
            token_dim,
            desc_dim,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn desc_dim(&self) -> usize {
        self.desc_dim
    }

    /// Parameter handles in registration order.
    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.w_token, self.w_desc, self.b1, self.w2, self.b2]
    }

    /// Logits (N x 2) for every position of `hidden` (N x H) given a
    /// descriptor row (1 x D).
    pub fn logits(&self, tape: &mut Tape<'_>, hidden: Var, descriptor: Var) -> Result<Var> {
        let hd = tape.value(hidden).cols();
        let dd = tape.value(descriptor).shape();
        if hd != self.token_dim || dd != (1, self.desc_dim) {
            return Err(Error::Shape(format!(
                "scorer expects token dim {} and descriptor 1x{}, got {} and {:?}",
                self.token_dim, self.desc_dim, hd, dd
            )));
        }
        let wt = tape.param(self.w_token);
        let wd = tape.param(self.w_desc);
        let b1 = tape.param(self.b1);
        let tok = tape.matmul(hidden, wt);
        let desc = tape.matmul(descriptor, wd);
        let desc = tape.add(desc, b1);
        let pre = tape.add_row(tok, desc);
        let act = tape.tanh(pre);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let out = tape.matmul(act, w2);
        Ok(tape.add_row(out, b2))
    }
}

/// Projection used to mix descriptors on the private path:
/// `z = tanh(W [cls; d_j] + b)`, `a = softmax(D z)`, `d_hat = a D`.
#[derive(Clone, Debug)]
pub struct DescriptorMixer {
    w: ParamId,
    b: ParamId,
    hidden_dim: usize,
    desc_dim: usize,
}

/// Tape handles for a mixed descriptor.
#[derive(Clone, Copy, Debug)]
pub struct MixedVars {
    pub descriptor: Var,
    pub weights: Var,
}

/// Eager result of [`mixed_descriptor`].
#[derive(Clone, Debug, PartialEq)]
pub struct MixedDescriptor {
    pub descriptor: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DescriptorMixer {
    pub fn new<R: Rng + ?Sized>(
        hidden_dim: usize,
        desc_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        DescriptorMixer {
            w: store.add("mixer.w", glorot(hidden_dim + desc_dim, desc_dim, rng), true),
            b: store.add("mixer.b", Tensor::zeros(1, desc_dim), true),
            hidden_dim,
            desc_dim,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// `cls` is 1 x H, `table` is M x D, `own` is the example's descriptor
    /// row (1 x D).
    pub fn mix(&self, tape: &mut Tape<'_>, cls: Var, table: Var, own: Var) -> Result<MixedVars> {
        if tape.value(cls).shape() != (1, self.hidden_dim)
            || tape.value(own).shape() != (1, self.desc_dim)
            || tape.value(table).cols() != self.desc_dim
        {
            return Err(Error::Shape("descriptor mixer input dimensions".into()));
        }
        let z = tape.concat_cols(&[cls, own]);
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matmul(z, w);
        let z = tape.add(z, b);
        let z = tape.tanh(z);
        let scores = tape.matmul_bt(z, table);
        let weights = tape.softmax_rows(scores, None);
        let descriptor = tape.matmul(weights, table);
        Ok(MixedVars { descriptor, weights })
    }
}

/// How discrete decisions are drawn.
pub enum Sampling<'r, R: Rng + ?Sized> {
    /// Hard Gumbel-Softmax with the given temperature.
    Gumbel { temperature: f64, rng: &'r mut R },
    /// Deterministic argmax of the logits (inference).
    Argmax,
}

/// Gumbel-Softmax sample over the rows of an N x 2 (or N x C) logit matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub soft: Tensor,
    /// One-hot argmax of `soft`.
    pub hard: Tensor,
}

fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn one_hot_rows(probs: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let best = crate::tensor::argmax(probs.row(r));
        out.set(r, best, 1.0);
    }
    out
}

/// Records `softmax((logits + g) / temperature)` with Gumbel noise `g`.
/// With `hard`, the returned variable is the one-hot argmax in the forward
/// pass and carries the soft gradient backward. Returns `(soft, output)`.
pub fn gumbel_softmax_var<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    logits: Var,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (rows, cols) = tape.value(logits).shape();
    let noise = tape.leaf(gumbel_noise(rows, cols, rng));
    let y = tape.add(logits, noise);
    let y = tape.scale(y, 1.0 / temperature);
    let soft = tape.softmax_rows(y, None);
    if hard {
        let one_hot = one_hot_rows(tape.value(soft));
        let out = tape.straight_through(one_hot, soft);
        Ok((soft, out))
    } else {
        Ok((soft, soft))
    }
}

/// Eager Gumbel-Softmax on plain logits.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    logits: &Tensor,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<GumbelSample> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.leaf(logits.clone());
    let (soft, out) = gumbel_softmax_var(&mut tape, l, temperature, hard, rng)?;
    let soft = tape.value(soft).clone();
    let hard_t = if hard {
        tape.value(out).clone()
    } else {
        one_hot_rows(&soft)
    };
    Ok(GumbelSample { soft, hard: hard_t })
}

/// Tape handles plus the materialised decision.
#[derive(Clone, Debug)]
pub struct MaskVars {
    pub decision: MaskDecision,
    /// N x 1, forward values in {0, 1}; gradient flows to the soft
    /// "mask" probabilities at eligible positions.
    pub weight: Var,
    pub logits: Var,
}

/// Scores every position and draws a constrained mask decision.
pub fn decide_mask<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    scorer: &TokenScorer,
    hidden: Var,
    descriptor: Var,
    seq: &TokenSequence,
    constraints: &LexiconConstraints,
    sampling: Sampling<'_, R>,
) -> Result<MaskVars> {
    let n = seq.len();
    if tape.value(hidden).rows() != n {
        return Err(Error::Shape(format!(
            "encoding has {} positions, sequence has {n}",
            tape.value(hidden).rows()
        )));
    }
    let logits = scorer.logits(tape, hidden, descriptor)?;
    let (soft_probs, choice) = match sampling {
        Sampling::Gumbel { temperature, rng } => {
            let (soft, out) = gumbel_softmax_var(tape, logits, temperature, true, rng)?;
            let soft_mask = tape.slice_cols(soft, 1, 1);
            let out_mask = tape.slice_cols(out, 1, 1);
            (soft_mask, out_mask)
        }
        Sampling::Argmax => {
            let probs = tape.softmax_rows(logits, None);
            let soft_mask = tape.slice_cols(probs, 1, 1);
            let lt = tape.value(logits);
            let hard: Vec<f64> = (0..n)
                .map(|i| if lt.get(i, 1) > lt.get(i, 0) { 1.0 } else { 0.0 })
                .collect();
            let out = tape.straight_through(Tensor::column_vector(hard), soft_mask);
            (soft_mask, out)
        }
    };
    let eligible = constraints.eligible(seq);
    let gate = tape.leaf(Tensor::column_vector(
        eligible.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect(),
    ));
    let weight = tape.mul(choice, gate);
    let w = tape.value(weight).data();
    let decision = MaskDecision {
        hard: w.iter().map(|&x| x == 1.0).collect(),
        soft: tape.value(soft_probs).data().to_vec(),
        constrained: eligible.iter().map(|e| !e).collect(),
    };
    Ok(MaskVars {
        decision,
        weight,
        logits,
    })
}

fn eager_mask<R: Rng + ?Sized>(
    enc: &EncodedSequence,
    seq: &TokenSequence,
    descriptor: &[f64],
    scorer: &TokenScorer,
    store: &ParamStore,
    constraints: &LexiconConstraints,
    sampling: Sampling<'_, R>,
) -> Result<MaskDecision> {
    if enc.dim() != scorer.token_dim() {
        return Err(Error::Shape(format!(
            "hidden dim {} does not match scorer input {}",
            enc.dim(),
            scorer.token_dim()
        )));
    }
    let mut tape = Tape::new(store);
    let h = tape.leaf(enc.hidden.clone());
    let d = tape.leaf(Tensor::row_vector(descriptor.to_vec()));
    Ok(decide_mask(&mut tape, scorer, h, d, seq, constraints, sampling)?.decision)
}

/// Shared-path decision for one sequence under its own domain descriptor.
pub fn shared_mask<R: Rng + ?Sized>(
    enc: &EncodedSequence,
    seq: &TokenSequence,
    descriptor: &[f64],
    scorer: &TokenScorer,
    store: &ParamStore,
    constraints: &LexiconConstraints,
    sampling: Sampling<'_, R>,
) -> Result<MaskDecision> {
    eager_mask(enc, seq, descriptor, scorer, store, constraints, sampling)
}

/// Private-path decision: same network shape, independent parameters,
/// driven by the mixed descriptor.
pub fn private_mask<R: Rng + ?Sized>(
    enc: &EncodedSequence,
    seq: &TokenSequence,
    mixed: &[f64],
    scorer: &TokenScorer,
    store: &ParamStore,
    constraints: &LexiconConstraints,
    sampling: Sampling<'_, R>,
) -> Result<MaskDecision> {
    eager_mask(enc, seq, mixed, scorer, store, constraints, sampling)
}

/// Mixture of descriptors for domain `j` given a sentence vector `cls`.
pub fn mixed_descriptor(
    cls: &[f64],
    table: &DescriptorTable,
    j: usize,
    mixer: &DescriptorMixer,
    store: &ParamStore,
) -> Result<MixedDescriptor> {
    if j >= table.num_domains() {
        return Err(Error::InvalidArgument(format!(
            "domain index {j} out of range for {} domains",
            table.num_domains()
        )));
    }
    let mut tape = Tape::new(store);
    let c = tape.leaf(Tensor::row_vector(cls.to_vec()));
    let t = tape.param(table.param());
    let own = tape.row(t, j);
    let m = mixer.mix(&mut tape, c, t, own)?;
    Ok(MixedDescriptor {
        descriptor: tape.value(m.descriptor).data().to_vec(),
        weights: tape.value(m.weights).data().to_vec(),
    })
}

/// Probability of the "mask" choice without noise, per row of logits.
pub fn mask_probability(logits: &[f64; 2], temperature: f64) -> f64 {
    softmax(&[logits[0] / temperature, logits[1] / temperature])[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{tokenize, Vocabulary};
    use crate::params::ParamGrads;
    use crate::rng;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).unwrap()
    }

    fn mask_frequency(logits: [f64; 2], samples: usize, seed: u64) -> f64 {
        let mut r = rng::stream(seed, "gumbel-test");
        let rows: Vec<[f64; 2]> = vec![logits; samples];
        let t = Tensor::from_rows(&rows);
        let s = gumbel_softmax(&t, 1.0, true, &mut r).unwrap();
        (0..samples).filter(|&i| s.hard.get(i, 1) == 1.0).count() as f64 / samples as f64
    }

    #[test]
    fn gumbel_symmetric_logits_mask_half_the_time() {
        let f = mask_frequency([0.0, 0.0], 100_000, 1);
        assert!((f - 0.5).abs() < 0.01, "{f}");
    }

    #[test]
    fn gumbel_extreme_logits_always_mask() {
        let f = mask_frequency([-10.0, 10.0], 100_000, 2);
        assert!(f > 0.999, "{f}");
    }

    #[test]
    fn gumbel_hard_rows_are_one_hot() {
        let mut r = rng::stream(3, "gumbel-test");
        let t = Tensor::from_rows(&[[0.3, -1.0], [2.0, 2.0], [-4.0, 1.0]]);
        let s = gumbel_softmax(&t, 0.5, true, &mut r).unwrap();
        for i in 0..3 {
            let row = s.hard.row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn gumbel_rejects_non_positive_temperature() {
        let mut r = rng::stream(3, "gumbel-test");
        let t = Tensor::from_rows(&[[0.0, 0.0]]);
        assert!(gumbel_softmax(&t, 0.0, true, &mut r).is_err());
        assert!(gumbel_softmax(&t, -1.0, true, &mut r).is_err());
    }

    #[test]
    fn gumbel_is_deterministic_under_seed() {
        let t = Tensor::from_rows(&[[0.1, 0.2], [0.5, -0.5]]);
        let a = gumbel_softmax(&t, 1.0, true, &mut rng::stream(9, "g")).unwrap();
        let b = gumbel_softmax(&t, 1.0, true, &mut rng::stream(9, "g")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let store = ParamStore::new();
        let logits = Tensor::from_rows(&[[0.3, -0.2], [1.5, 0.1]]);
        let weights = Tensor::from_rows(&[[0.7, -1.3], [0.4, 2.0]]);
        let grad_for = |hard: bool| {
            let mut tape = Tape::new(&store);
            let l = tape.leaf(logits.clone());
            let (_, out) = gumbel_softmax_var(&mut tape, l, 1.0, hard, &mut rng::stream(4, "g")).unwrap();
            let w = tape.leaf(weights.clone());
            let y = tape.mul(out, w);
            let s = tape.sum(y);
            let mut pg = ParamGrads::new(&store);
            tape.backward(s, &mut pg).wrt(l).unwrap().clone()
        };
        let hard = grad_for(true);
        let soft = grad_for(false);
        for (a, b) in hard.data().iter().zip(soft.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lexicon_blocks_every_listed_word() {
        let v = vocab(&["i", "love", "this", "helmet"]);
        let seq = tokenize("i love this helmet", &v, 16).unwrap();
        let mut c = LexiconConstraints::empty();
        c.sentiment.insert("love".into());
        c.stopwords.insert("this".into());
        c.stopwords.insert("i".into());
        assert_eq!(c.eligible(&seq), vec![false, false, false, false, true, false]);
        c.stopwords.insert("helmet".into());
        assert!(c.eligible(&seq).iter().all(|e| !e));
    }

    #[test]
    fn bundled_lexicons_are_populated_and_exclude_reserved() {
        let c = LexiconConstraints::bundled();
        let n = c.counts();
        assert!(n.stopwords > 100 && n.sentiment > 200 && n.negation > 3 && n.intensifier > 3);
        for r in RESERVED {
            assert!(!c.contains(&r.to_lowercase()));
        }
        assert!(c.negation.contains("n't"));
        assert!(c.intensifier.contains("really"));
    }

    #[test]
    fn lexicon_files_dedup_and_report_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        fs::write(p("stop"), "").unwrap();
        fs::write(p("sent"), "Good\ngood\n# comment\n").unwrap();
        fs::write(p("neg"), "").unwrap();
        fs::write(p("int"), "good\n").unwrap();
        let c = LexiconConstraints::load(&p("stop"), &p("sent"), &p("neg"), &p("int")).unwrap();
        assert_eq!(c.sentiment.len(), 1);
        assert!(c.sentiment.contains("good") && c.intensifier.contains("good"));
        assert!(c.stopwords.is_empty());
        let err = LexiconConstraints::load(&p("stop"), &p("sent"), &p("missing"), &p("int")).unwrap_err();
        assert!(err.to_string().contains("negation"), "{err}");
    }

    #[test]
    fn mixed_descriptor_single_domain_is_exact() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init");
        let table = DescriptorTable::new(vec!["only".into()], 6, &mut store, &mut r).unwrap();
        let mixer = DescriptorMixer::new(4, 6, &mut store, &mut r);
        let m = mixed_descriptor(&[0.1, 0.2, -0.3, 0.4], &table, 0, &mixer, &store).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        assert_eq!(m.descriptor, table.row(&store, 0));
        assert!(mixed_descriptor(&[0.0; 4], &table, 1, &mixer, &store).is_err());
    }

    #[test]
    fn mixed_descriptor_matches_hand_computation() {
        // H = 1, D = 2, M = 3. Mixer weight chosen so z = tanh(cls*w0 + d_j . w1).
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init");
        let names = vec!["a".into(), "b".into(), "c".into()];
        let table = DescriptorTable::new(names, 2, &mut store, &mut r).unwrap();
        *store.get_mut(table.param()) = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let mixer = DescriptorMixer::new(1, 2, &mut store, &mut r);
        *store.get_mut(mixer.w) = Tensor::from_rows(&[[0.5, -0.5], [1.0, 0.0], [0.0, 1.0]]);
        let cls = [2.0];
        let j = 0; // d_j = (1, 0)
        let z = [(2.0f64 * 0.5 + 1.0).tanh(), (2.0f64 * -0.5 + 0.0).tanh()];
        let s = [z[0], z[1], z[0] + z[1]];
        let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let tot: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / tot).collect();
        let expected = [a[0] + a[2], a[1] + a[2]];
        let m = mixed_descriptor(&cls, &table, j, &mixer, &store).unwrap();
        for (x, y) in m.weights.iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in m.descriptor.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
