//! Sentiment heads and loss composition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{softmax, Tensor};

pub const NUM_SENTIMENTS: usize = 2;

/// Single linear layer to two sentiment logits.
#[derive(Clone, Debug)]
pub struct SentimentHead {
    w: ParamId,
    b: ParamId,
    input_dim: usize,
}

impl SentimentHead {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input_dim: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        SentimentHead {
            w: store.add(format!("{prefix}.w"), glorot(input_dim, NUM_SENTIMENTS, rng), true),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(1, NUM_SENTIMENTS), true),
            input_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn logits(&self, tape: &mut Tape<'_>, h: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matmul(h, w);
        tape.add(z, b)
    }

    /// Class probabilities `p_s` for a plain vector.
    pub fn probabilities(&self, store: &ParamStore, h: &[f64]) -> Result<[f64; 2]> {
        if h.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "sentiment head expects {} inputs, got {}",
                self.input_dim,
                h.len()
            )));
        }
        let mut tape = Tape::new(store);
        let x = tape.leaf(Tensor::row_vector(h.to_vec()));
        let l = self.logits(&mut tape, x);
        let p = softmax(tape.value(l).data());
        Ok([p[0], p[1]])
    }
}

fn check_sentiment(label: usize) -> Result<()> {
    if label >= NUM_SENTIMENTS {
        return Err(Error::InvalidArgument(format!(
            "sentiment label must be 0 or 1, got {label}"
        )));
    }
    Ok(())
}

/// `L_s = CE(head([h_shared; h_private]), label)`.
pub fn main_sentiment_loss(
    tape: &mut Tape<'_>,
    h_shared: Var,
    h_private: Var,
    label: usize,
    head: &SentimentHead,
) -> Result<Var> {
    check_sentiment(label)?;
    let concat = tape.concat_cols(&[h_shared, h_private]);
    let logits = head.logits(tape, concat);
    Ok(tape.cross_entropy(logits, label))
}

/// `(L_ss, L_sp)`: independent heads on each feature.
pub fn aux_sentiment_losses(
    tape: &mut Tape<'_>,
    h_shared: Var,
    h_private: Var,
    label: usize,
    head_shared: &SentimentHead,
    head_private: &SentimentHead,
) -> Result<(Var, Var)> {
    check_sentiment(label)?;
    let ls = head_shared.logits(tape, h_shared);
    let lp = head_private.logits(tape, h_private);
    Ok((tape.cross_entropy(ls, label), tape.cross_entropy(lp, label)))
}

/// Loss coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LossWeights {
    pub lambda_ds: f64,
    pub lambda_dp: f64,
    pub gamma: f64,
    pub gamma_ss: f64,
    pub gamma_sp: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ds: 0.002,
            lambda_dp: 0.002,
            gamma: 0.4,
            gamma_ss: 0.3,
            gamma_sp: 0.3,
            lambda_reg: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_ds: 0.0,
            lambda_dp: 0.0,
            gamma: 0.0,
            gamma_ss: 0.0,
            gamma_sp: 0.0,
            lambda_reg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda-ds", self.lambda_ds),
            ("lambda-dp", self.lambda_dp),
            ("gamma", self.gamma),
            ("gamma-ss", self.gamma_ss),
            ("gamma-sp", self.gamma_sp),
            ("lambda-reg", self.lambda_reg),
        ];
        for (name, w) in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// The five task losses (before weighting).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentLosses {
    pub l_s: f64,
    pub l_ss: f64,
    pub l_sp: f64,
    pub l_ds: f64,
    pub l_dp: f64,
}

impl ComponentLosses {
    /// `lambda_ds L_ds + lambda_dp L_dp + gamma L_s + gamma_ss L_ss + gamma_sp L_sp`.
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_ds * self.l_ds + w.lambda_dp * self.l_dp + w.gamma * self.l_s + w.gamma_ss * self.l_ss + w.gamma_sp * self.l_sp
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_s: f64,
    pub l_ss: f64,
    pub l_sp: f64,
    pub l_ds: f64,
    pub l_dp: f64,
    pub l_reg: f64,
    pub l_all: f64,
}

/// Combines component losses with `L_reg = sum(theta^2)` over the decayed
/// parameters of `params`.
pub fn total_loss(parts: &ComponentLosses, weights: &LossWeights, params: &ParamStore) -> LossBundle {
    combine(parts, weights, params.l2_penalty())
}

/// [`total_loss`] with an explicit regulariser value.
pub fn combine(parts: &ComponentLosses, weights: &LossWeights, l_reg: f64) -> LossBundle {
    LossBundle {
        l_s: parts.l_s,
        l_ss: parts.l_ss,
        l_sp: parts.l_sp,
        l_ds: parts.l_ds,
        l_dp: parts.l_dp,
        l_reg,
        l_all: parts.weighted(weights) + weights.lambda_reg * l_reg,
    }
}
