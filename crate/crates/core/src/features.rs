//! Shared-path and private-path feature extraction.
//!
//! Shared path: the masked text is re-encoded and its `[CLS]` vector is the
//! domain-invariant feature, trained adversarially through a gradient
//! reversal layer. Private path: hidden states of the privately masked
//! tokens are averaged into a domain clue, which queries the original
//! encoding with dot-product attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{apply_mask, EncodedSequence, Encoder, TokenSequence};
use crate::error::{Error, Result};
use crate::masking::MaskDecision;
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Width of the domain probes' hidden layer.
pub const PROBE_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub h_shared: Vec<f64>,
    pub h_private: Vec<f64>,
    pub h_clue: Vec<f64>,
    /// Number of privately masked tokens.
    pub k: usize,
}

/// `M` domain logits from a `H`-dim vector: `W2 tanh(W1 h + b1) + b2`.
#[derive(Clone, Debug)]
pub struct DomainProbeHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    num_domains: usize,
}

impl DomainProbeHead {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        num_domains: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        DomainProbeHead {
            w1: store.add(format!("{prefix}.w1"), glorot(input_dim, hidden, rng), true),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden), true),
            w2: store.add(format!("{prefix}.w2"), glorot(hidden, num_domains, rng), true),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, num_domains), true),
            num_domains,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn logits(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let z = tape.matmul(h, w1);
        let z = tape.add(z, b1);
        let z = tape.tanh(z);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let z = tape.matmul(z, w2);
        tape.add(z, b2)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_domains {
            return Err(Error::InvalidArgument(format!(
                "domain label {label} out of range for {} domains",
                self.num_domains
            )));
        }
        Ok(())
    }
}

/// Gradient reversal: identity forward, negated gradient backward.
pub fn grad_reverse(tape: &mut Tape<'_>, x: Var) -> Var {
    tape.grad_reverse(x)
}

/// `CE(softmax(probe(GRL(h_shared))), label)`.
pub fn adversarial_domain_loss(
    tape: &mut Tape<'_>,
    h_shared: Var,
    label: usize,
    probe: &DomainProbeHead,
) -> Result<Var> {
    probe.check_label(label)?;
    let reversed = grad_reverse(tape, h_shared);
    let logits = probe.logits(tape, reversed);
    Ok(tape.cross_entropy(logits, label))
}

/// Plain domain cross-entropy on the domain clue (no reversal).
pub fn private_domain_loss(
    tape: &mut Tape<'_>,
    h_clue: Var,
    label: usize,
    probe: &DomainProbeHead,
) -> Result<Var> {
    probe.check_label(label)?;
    let logits = probe.logits(tape, h_clue);
    Ok(tape.cross_entropy(logits, label))
}

/// Mean of `hidden` rows weighted by the 0/1 column `weight`; falls back
/// to `cls` when nothing is selected.
pub fn domain_clue_var(tape: &mut Tape<'_>, hidden: Var, weight: Var, cls: Var) -> (Var, usize) {
    let k = tape.value(weight).data().iter().filter(|&&w| w != 0.0).count();
    if k == 0 {
        return (cls, 0);
    }
    let selected = tape.mul_col(hidden, weight);
    let total = tape.sum_rows(selected);
    let count = tape.sum(weight);
    (tape.div_scalar(total, count), k)
}

/// Dot-product attention of `query` (1 x H) over the valid rows of
/// `hidden`. Returns `(pooled, weights)`.
pub fn domain_attention_var(tape: &mut Tape<'_>, query: Var, hidden: Var, valid: &[bool]) -> (Var, Var) {
    let scores = tape.matmul_bt(query, hidden);
    let weights = tape.softmax_rows(scores, Some(valid));
    (tape.matmul(weights, hidden), weights)
}

/// `[CLS]` vector of the re-encoded masked sequence.
pub fn shared_features(
    seq: &TokenSequence,
    decision: &MaskDecision,
    encoder: &Encoder,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let masked = apply_mask(seq, decision)?;
    Ok(encoder.encode(store, &masked)?.cls)
}

/// Domain clue from the original encoding: mean hidden state at the
/// masked positions, or `cls` if none are masked.
pub fn domain_clue(enc: &EncodedSequence, decision: &MaskDecision) -> Result<(Vec<f64>, usize)> {
    if decision.len() != enc.len() {
        return Err(Error::Shape(format!(
            "decision has {} positions, encoding has {}",
            decision.len(),
            enc.len()
        )));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let hidden = tape.leaf(enc.hidden.clone());
    let cls = tape.leaf(Tensor::row_vector(enc.cls.clone()));
    let weight = tape.leaf(Tensor::column_vector(
        decision.hard.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    ));
    let (clue, k) = domain_clue_var(&mut tape, hidden, weight, cls);
    Ok((tape.value(clue).data().to_vec(), k))
}

/// Domain-aware pooled representation and its attention weights.
pub fn domain_attention(h_clue: &[f64], enc: &EncodedSequence) -> Result<(Vec<f64>, Vec<f64>)> {
    if h_clue.len() != enc.dim() {
        return Err(Error::Shape(format!(
            "query dim {} does not match hidden dim {}",
            h_clue.len(),
            enc.dim()
        )));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let q = tape.leaf(Tensor::row_vector(h_clue.to_vec()));
    let hidden = tape.leaf(enc.hidden.clone());
    let (pooled, weights) = domain_attention_var(&mut tape, q, hidden, &enc.attention_mask);
    Ok((tape.value(pooled).data().to_vec(), tape.value(weights).data().to_vec()))
}
