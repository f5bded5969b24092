//! The full masker model: shared encoder, two maskers, domain probes and
//! sentiment heads, wired per example on a [`Tape`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::classify::{aux_sentiment_losses, main_sentiment_loss, ComponentLosses, LossWeights, SentimentHead};
use crate::encoder::{tokenize, Encoder, EncoderConfig, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::features::{
    adversarial_domain_loss, domain_attention_var, domain_clue_var, private_domain_loss, DomainProbeHead,
};
use crate::masking::{decide_mask, DescriptorMixer, DescriptorTable, LexiconConstraints, MaskDecision, Sampling, TokenScorer};
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::tensor::{softmax, Tensor};

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Ablation {
    pub no_shared_part: bool,
    pub no_private_part: bool,
    pub no_shared_mask: bool,
    pub no_private_mask: bool,
    pub no_sentiment_constraint: bool,
    pub no_stopword_constraint: bool,
}

impl Ablation {
    /// Switch names in a fixed order.
    pub const NAMES: [&'static str; 6] = [
        "no-shared-part",
        "no-private-part",
        "no-shared-mask",
        "no-private-mask",
        "no-sentiment-constraint",
        "no-stopword-constraint",
    ];

    /// Only the named switch enabled.
    pub fn single(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "no-shared-part" => a.no_shared_part = true,
            "no-private-part" => a.no_private_part = true,
            "no-shared-mask" => a.no_shared_mask = true,
            "no-private-mask" => a.no_private_mask = true,
            "no-sentiment-constraint" => a.no_sentiment_constraint = true,
            "no-stopword-constraint" => a.no_stopword_constraint = true,
            "none" => {}
            _ => return Err(Error::InvalidArgument(format!("unknown ablation `{name}`"))),
        }
        Ok(a)
    }

    /// Names of the enabled switches.
    pub fn enabled(&self) -> Vec<&'static str> {
        let flags = [
            self.no_shared_part,
            self.no_private_part,
            self.no_shared_mask,
            self.no_private_mask,
            self.no_sentiment_constraint,
            self.no_stopword_constraint,
        ];
        Self::NAMES.iter().zip(flags).filter(|(_, f)| *f).map(|(n, _)| *n).collect()
    }

    pub fn apply(&self, mut lexicons: LexiconConstraints) -> LexiconConstraints {
        if self.no_sentiment_constraint {
            lexicons = lexicons.without_sentiment();
        }
        if self.no_stopword_constraint {
            lexicons = lexicons.without_stopwords();
        }
        lexicons
    }
}

/// Architecture of a [`MaskerModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub descriptor_dim: usize,
    pub scorer_hidden: usize,
    pub probe_hidden: usize,
    pub temperature: f64,
    pub domains: Vec<String>,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.descriptor_dim == 0 || self.scorer_hidden == 0 || self.probe_hidden == 0 {
            return Err(Error::Config("descriptor-dim, scorer-hidden and probe-hidden must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        Ok(())
    }
}

/// Which loss terms contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveLosses {
    pub s: bool,
    pub ss: bool,
    pub sp: bool,
    pub ds: bool,
    pub dp: bool,
}

impl ActiveLosses {
    pub const DOMAIN: ActiveLosses = ActiveLosses {
        s: false,
        ss: false,
        sp: false,
        ds: true,
        dp: true,
    };
    pub const SENTIMENT: ActiveLosses = ActiveLosses {
        s: true,
        ss: true,
        sp: true,
        ds: false,
        dp: false,
    };
    pub const ALL: ActiveLosses = ActiveLosses {
        s: true,
        ss: true,
        sp: true,
        ds: true,
        dp: true,
    };

    /// Names of the active terms, e.g. `["L_ds", "L_dp"]`.
    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.ds, "L_ds"),
            (self.dp, "L_dp"),
            (self.s, "L_s"),
            (self.ss, "L_ss"),
            (self.sp, "L_sp"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .collect()
    }
}

/// Stochastic (training) or deterministic (inference) forward pass.
pub enum Mode<'r> {
    Train {
        gumbel: &'r mut StreamRng,
        dropout: &'r mut StreamRng,
    },
    Eval,
}

/// Tape handles for each loss that was computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub s: Option<Var>,
    pub ss: Option<Var>,
    pub sp: Option<Var>,
    pub ds: Option<Var>,
    pub dp: Option<Var>,
}

impl LossVars {
    /// Loss values; missing terms read as 0.
    pub fn values(&self, tape: &Tape<'_>) -> ComponentLosses {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        ComponentLosses {
            l_s: v(self.s),
            l_ss: v(self.ss),
            l_sp: v(self.sp),
            l_ds: v(self.ds),
            l_dp: v(self.dp),
        }
    }
}

/// Everything recorded for one example.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub losses: LossVars,
    /// Weighted sum of the active, available losses; `None` if there are none.
    pub objective: Option<Var>,
    /// 1 x 2 sentiment logits from the main head.
    pub logits: Var,
    pub shared: MaskDecision,
    pub private: MaskDecision,
    pub h_shared: Var,
    pub h_private: Var,
    pub h_clue: Var,
    /// Attention weights of the private path (absent when it is disabled).
    pub attention: Option<Var>,
    /// Descriptor mixture weights (absent when the private path is disabled).
    pub mixture: Option<Var>,
    /// Number of privately masked tokens.
    pub k: usize,
}

/// Eager inference result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub probs: [f64; 2],
    pub shared: MaskDecision,
    pub private: MaskDecision,
    pub attention: Vec<f64>,
    pub k: usize,
}

/// Parameters and structure of the whole model.
#[derive(Clone, Debug)]
pub struct MaskerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocabulary,
    /// Effective constraints (ablation already applied).
    pub constraints: LexiconConstraints,
    encoder: Encoder,
    descriptors: DescriptorTable,
    shared_scorer: TokenScorer,
    private_scorer: TokenScorer,
    mixer: DescriptorMixer,
    shared_probe: DomainProbeHead,
    private_probe: DomainProbeHead,
    head: SentimentHead,
    head_shared: SentimentHead,
    head_private: SentimentHead,
}

impl MaskerModel {
    /// Fresh model; `config.encoder.vocab_size` is overwritten with the
    /// vocabulary size. `lexicons` are filtered by the ablation switches.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, lexicons: LexiconConstraints, seed: u64) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.validate()?;
        let constraints = config.ablation.apply(lexicons);
        let mut r = rng::stream(seed, rng::streams::INIT);
        let mut params = ParamStore::new();
        let h = config.encoder.hidden;
        let m = config.domains.len();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, "encoder", &mut r)?;
        let descriptors = DescriptorTable::new(config.domains.clone(), config.descriptor_dim, &mut params, &mut r)?;
        let shared_scorer = TokenScorer::new("shared_scorer", h, config.descriptor_dim, config.scorer_hidden, &mut params, &mut r);
        let private_scorer = TokenScorer::new("private_scorer", h, config.descriptor_dim, config.scorer_hidden, &mut params, &mut r);
        let mixer = DescriptorMixer::new(h, config.descriptor_dim, &mut params, &mut r);
        let shared_probe = DomainProbeHead::new("shared_probe", h, config.probe_hidden, m, &mut params, &mut r);
        let private_probe = DomainProbeHead::new("private_probe", h, config.probe_hidden, m, &mut params, &mut r);
        let head = SentimentHead::new("head", 2 * h, &mut params, &mut r);
        let head_shared = SentimentHead::new("head_shared", h, &mut params, &mut r);
        let head_private = SentimentHead::new("head_private", h, &mut params, &mut r);
        Ok(MaskerModel {
            config,
            params,
            vocab,
            constraints,
            encoder,
            descriptors,
            shared_scorer,
            private_scorer,
            mixer,
            shared_probe,
            private_probe,
            head,
            head_shared,
            head_private,
        })
    }

    /// Rebuilds a model around stored parameter values. Names and shapes
    /// must match the structure implied by `config` exactly.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        constraints: LexiconConstraints,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = MaskerModel::new(config, vocab, LexiconConstraints::empty(), 0)?;
        if model.params.len() != params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in model.params.iter() {
            let stored = params
                .id(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter `{name}`")))?;
            let stored_value = params.get(stored);
            if stored_value.shape() != value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    stored_value.shape(),
                    value.shape()
                )));
            }
            if params.decays(stored) != model.params.decays(id) {
                return Err(Error::CorruptCheckpoint(format!("parameter `{name}` has the wrong decay flag")));
            }
        }
        model.params = params;
        model.constraints = constraints;
        Ok(model)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn descriptors(&self) -> &DescriptorTable {
        &self.descriptors
    }

    pub fn num_domains(&self) -> usize {
        self.config.domains.len()
    }

    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.descriptors.index_of(name)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab, self.config.encoder.max_len)
    }

    /// Records one example. `sentiment = None` excludes every sentiment
    /// loss for this example (unlabelled target-domain data).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        seq: &TokenSequence,
        domain_id: usize,
        sentiment: Option<usize>,
        active: ActiveLosses,
        weights: &LossWeights,
        mode: Mode<'_>,
    ) -> Result<ForwardOut> {
        if domain_id >= self.num_domains() {
            return Err(Error::InvalidArgument(format!(
                "domain id {domain_id} out of range for {} domains",
                self.num_domains()
            )));
        }
        let abl = self.config.ablation;
        let temperature = self.config.temperature;
        let (mut gumbel, mut dropout) = match mode {
            Mode::Train { gumbel, dropout } => (Some(gumbel), Some(dropout)),
            Mode::Eval => (None, None),
        };
        let h = self.config.encoder.hidden;
        let enc = self.encoder.forward(tape, seq, None, dropout.as_deref_mut())?;
        let table = tape.param(self.descriptors.param());
        let own = tape.row(table, domain_id);

        let mut shared = MaskDecision::keep_all(seq);
        let h_shared = if abl.no_shared_part {
            tape.leaf(Tensor::zeros(1, h))
        } else if abl.no_shared_mask {
            enc.cls
        } else {
            let mv = decide_mask(
                tape,
                &self.shared_scorer,
                enc.hidden,
                own,
                seq,
                &self.constraints,
                sampling(&mut gumbel, temperature),
            )?;
            shared = mv.decision;
            let re = self.encoder.forward(tape, seq, Some(mv.weight), dropout)?;
            re.cls
        };

        let mut private = MaskDecision::keep_all(seq);
        let (h_private, h_clue, attention, mixture, k) = if abl.no_private_part {
            let z = tape.leaf(Tensor::zeros(1, h));
            (z, z, None, None, 0)
        } else {
            let mixed = self.mixer.mix(tape, enc.cls, table, own)?;
            let (clue, k) = if abl.no_private_mask {
                (enc.cls, 0)
            } else {
                let mv = decide_mask(
                    tape,
                    &self.private_scorer,
                    enc.hidden,
                    mixed.descriptor,
                    seq,
                    &self.constraints,
                    sampling(&mut gumbel, temperature),
                )?;
                private = mv.decision;
                domain_clue_var(tape, enc.hidden, mv.weight, enc.cls)
            };
            let (pooled, alpha) = domain_attention_var(tape, clue, enc.hidden, &seq.attention_mask());
            (pooled, clue, Some(alpha), Some(mixed.weights), k)
        };

        let concat = tape.concat_cols(&[h_shared, h_private]);
        let logits = self.head.logits(tape, concat);

        let mut losses = LossVars::default();
        if active.ds && !abl.no_shared_part {
            losses.ds = Some(adversarial_domain_loss(tape, h_shared, domain_id, &self.shared_probe)?);
        }
        if active.dp && !abl.no_private_part {
            losses.dp = Some(private_domain_loss(tape, h_clue, domain_id, &self.private_probe)?);
        }
        if let Some(y) = sentiment {
            if active.s {
                losses.s = Some(main_sentiment_loss(tape, h_shared, h_private, y, &self.head)?);
            }
            if active.ss || active.sp {
                let (ss, sp) =
                    aux_sentiment_losses(tape, h_shared, h_private, y, &self.head_shared, &self.head_private)?;
                if active.ss && !abl.no_shared_part {
                    losses.ss = Some(ss);
                }
                if active.sp && !abl.no_private_part {
                    losses.sp = Some(sp);
                }
            }
        }

        let terms = [
            (losses.ds, weights.lambda_ds),
            (losses.dp, weights.lambda_dp),
            (losses.s, weights.gamma),
            (losses.ss, weights.gamma_ss),
            (losses.sp, weights.gamma_sp),
        ];
        let mut objective: Option<Var> = None;
        for (term, w) in terms {
            if let Some(t) = term {
                if w == 0.0 {
                    continue;
                }
                let scaled = tape.scale(t, w);
                objective = Some(match objective {
                    Some(acc) => tape.add(acc, scaled),
                    None => scaled,
                });
            }
        }

        Ok(ForwardOut {
            losses,
            objective,
            logits,
            shared,
            private,
            h_shared,
            h_private,
            h_clue,
            attention,
            mixture,
            k,
        })
    }

    /// Deterministic inference (argmax masks, no dropout).
    pub fn predict(&self, seq: &TokenSequence, domain_id: usize) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(
            &mut tape,
            seq,
            domain_id,
            None,
            ActiveLosses::ALL,
            &LossWeights::zero(),
            Mode::Eval,
        )?;
        let p = softmax(tape.value(out.logits).data());
        Ok(Prediction {
            label: if p[1] > p[0] { 1 } else { 0 },
            probs: [p[0], p[1]],
            attention: out.attention.map(|a| tape.value(a).data().to_vec()).unwrap_or_default(),
            shared: out.shared,
            private: out.private,
            k: out.k,
        })
    }

    /// Deterministic shared-path masked sequence (`[MASK]` substituted).
    pub fn shared_masked(&self, seq: &TokenSequence, domain_id: usize) -> Result<(TokenSequence, MaskDecision)> {
        let p = self.predict(seq, domain_id)?;
        let masked = crate::encoder::apply_mask(seq, &p.shared)?;
        Ok((masked, p.shared))
    }
}

fn sampling<'a>(g: &'a mut Option<&mut StreamRng>, temperature: f64) -> Sampling<'a, StreamRng> {
    match g {
        Some(rng) => Sampling::Gumbel {
            temperature,
            rng: &mut **rng,
        },
        None => Sampling::Argmax,
    }
}

/// Hex sha256 of a serialisable value's canonical JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGrads;

    fn small_model(ablation: Ablation) -> MaskerModel {
        let corpus = ["alpha beta good gamma", "delta bad epsilon the"];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig {
                hidden: 16,
                layers: 1,
                heads: 2,
                ff: 24,
                max_len: 16,
                dropout: 0.1,
                vocab_size: 0,
            },
            descriptor_dim: 8,
            scorer_hidden: 12,
            probe_hidden: 12,
            temperature: 1.0,
            domains: vec!["a".into(), "b".into()],
            ablation,
        };
        MaskerModel::new(config, vocab, LexiconConstraints::bundled(), 3).unwrap()
    }

    fn objective_grads(model: &MaskerModel, active: ActiveLosses, label: Option<usize>) -> (ParamGrads, ComponentLosses) {
        let seq = model.tokenize("alpha beta good gamma").unwrap();
        let mut tape = Tape::new(&model.params);
        let mut g = rng::stream(1, rng::streams::GUMBEL);
        let mut d = rng::stream(1, rng::streams::DROPOUT);
        let out = model
            .forward(
                &mut tape,
                &seq,
                1,
                label,
                active,
                &LossWeights::default(),
                Mode::Train {
                    gumbel: &mut g,
                    dropout: &mut d,
                },
            )
            .unwrap();
        let mut grads = ParamGrads::new(&model.params);
        if let Some(o) = out.objective {
            tape.backward(o, &mut grads);
        }
        (grads, out.losses.values(&tape))
    }

    #[test]
    fn inactive_terms_are_absent() {
        let m = small_model(Ablation::default());
        let (_, l) = objective_grads(&m, ActiveLosses::DOMAIN, Some(1));
        assert!(l.l_ds > 0.0 && l.l_dp > 0.0);
        assert_eq!((l.l_s, l.l_ss, l.l_sp), (0.0, 0.0, 0.0));
        let (_, l) = objective_grads(&m, ActiveLosses::SENTIMENT, Some(1));
        assert_eq!((l.l_ds, l.l_dp), (0.0, 0.0));
        assert!(l.l_s > 0.0 && l.l_ss > 0.0 && l.l_sp > 0.0);
    }

    #[test]
    fn unlabelled_example_has_no_sentiment_gradient() {
        let m = small_model(Ablation::default());
        let (grads, l) = objective_grads(&m, ActiveLosses::SENTIMENT, None);
        assert_eq!(l, ComponentLosses::default());
        assert!(grads.is_zero());
    }

    #[test]
    fn sentiment_phase_leaves_domain_probes_untouched() {
        let m = small_model(Ablation::default());
        let (grads, _) = objective_grads(&m, ActiveLosses::SENTIMENT, Some(0));
        for id in m.shared_probe.param_ids().into_iter().chain(m.private_probe.param_ids()) {
            assert!(grads.get(id).is_none_or(|g| g.data().iter().all(|x| *x == 0.0)));
        }
        let (grads, _) = objective_grads(&m, ActiveLosses::DOMAIN, Some(0));
        for id in m.head.param_ids() {
            assert!(grads.get(id).is_none_or(|g| g.data().iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn predictions_are_deterministic_and_respect_constraints() {
        let m = small_model(Ablation::default());
        let seq = m.tokenize("alpha beta good the gamma").unwrap();
        let a = m.predict(&seq, 0).unwrap();
        let b = m.predict(&seq, 0).unwrap();
        assert_eq!(a, b);
        for (i, w) in seq.surface.iter().enumerate() {
            if seq.is_special[i] || w == "good" || w == "the" {
                assert!(!a.shared.hard[i] && !a.private.hard[i]);
            }
        }
        assert!((a.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ablations_change_structure() {
        let seq_text = "alpha beta good the gamma";
        let m = small_model(Ablation::single("no-private-part").unwrap());
        let p = m.predict(&m.tokenize(seq_text).unwrap(), 0).unwrap();
        assert_eq!(p.k, 0);
        assert!(p.attention.is_empty());
        let m = small_model(Ablation::single("no-sentiment-constraint").unwrap());
        assert!(!m.constraints.contains("good") && m.constraints.contains("the"));
        let m = small_model(Ablation::single("no-stopword-constraint").unwrap());
        assert!(m.constraints.contains("good") && !m.constraints.contains("the"));
        assert!(Ablation::single("bogus").is_err());
        let prints: std::collections::BTreeSet<String> = Ablation::NAMES
            .iter()
            .map(|n| fingerprint(&Ablation::single(n).unwrap()).unwrap())
            .collect();
        assert_eq!(prints.len(), 6);
    }

    #[test]
    fn from_parts_round_trips_and_rejects_wrong_shapes() {
        let m = small_model(Ablation::default());
        let rebuilt =
            MaskerModel::from_parts(m.config.clone(), m.vocab.clone(), m.constraints.clone(), m.params.clone()).unwrap();
        let seq = m.tokenize("alpha gamma").unwrap();
        assert_eq!(m.predict(&seq, 1).unwrap(), rebuilt.predict(&seq, 1).unwrap());
        let mut cfg = m.config.clone();
        cfg.descriptor_dim = 9;
        assert!(MaskerModel::from_parts(cfg, m.vocab.clone(), m.constraints.clone(), m.params.clone()).is_err());
    }
}
