//! Three-phase training, evaluation and model selection.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::classify::{combine, ComponentLosses, LossBundle, LossWeights};
use crate::data::{batches, DomainSplit, Part};
use crate::encoder::{EncoderConfig, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::features::PROBE_HIDDEN;
use crate::masking::{LexiconConstraints, SCORER_HIDDEN};
use crate::model::{fingerprint, Ablation, ActiveLosses, MaskerModel, Mode, ModelConfig};
use crate::params::ParamGrads;
use crate::rng;
use crate::tensor::{softmax, Tensor};

pub use crate::checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint};

/// Multi-domain training or cross-domain transfer to one held-out domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    MultiDomain,
    CrossDomain,
}

/// Every training knob, flat so it maps one-to-one onto config-file keys
/// and command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_ds: f64,
    pub lambda_dp: f64,
    pub gamma: f64,
    pub gamma_ss: f64,
    pub gamma_sp: f64,
    pub lambda_reg: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub clip_norm: f64,
    pub max_len: usize,
    pub seed: u64,
    pub mode: Protocol,
    pub target: Option<String>,
    pub descriptor_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub scorer_hidden: usize,
    pub probe_hidden: usize,
    pub min_freq: usize,
    pub no_shared_part: bool,
    pub no_private_part: bool,
    pub no_shared_mask: bool,
    pub no_private_mask: bool,
    pub no_sentiment_constraint: bool,
    pub no_stopword_constraint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let e = EncoderConfig::default();
        TrainConfig {
            lr: 0.0003,
            batch_size: 8,
            epochs: 15,
            lambda_ds: w.lambda_ds,
            lambda_dp: w.lambda_dp,
            gamma: w.gamma,
            gamma_ss: w.gamma_ss,
            gamma_sp: w.gamma_sp,
            lambda_reg: w.lambda_reg,
            phase1_steps: 2000,
            phase2_steps: 3000,
            clip_norm: 5.0,
            max_len: 128,
            seed: 0,
            mode: Protocol::MultiDomain,
            target: None,
            descriptor_dim: 200,
            hidden: e.hidden,
            layers: e.layers,
            heads: e.heads,
            ff: e.ff,
            dropout: e.dropout,
            temperature: 1.0,
            scorer_hidden: SCORER_HIDDEN,
            probe_hidden: PROBE_HIDDEN,
            min_freq: 1,
            no_shared_part: false,
            no_private_part: false,
            no_shared_mask: false,
            no_private_mask: false,
            no_sentiment_constraint: false,
            no_stopword_constraint: false,
        }
    }
}

impl TrainConfig {
    /// Settings that train the compact model on the default synthetic
    /// corpus in well under a minute per seed.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 6,
            lambda_ds: 0.5,
            lambda_dp: 0.5,
            phase1_steps: 150,
            phase2_steps: 300,
            max_len: 64,
            descriptor_dim: 32,
            scorer_hidden: 64,
            probe_hidden: 64,
            ..TrainConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ds: self.lambda_ds,
            lambda_dp: self.lambda_dp,
            gamma: self.gamma,
            gamma_ss: self.gamma_ss,
            gamma_sp: self.gamma_sp,
            lambda_reg: self.lambda_reg,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_shared_part: self.no_shared_part,
            no_private_part: self.no_private_part,
            no_shared_mask: self.no_shared_mask,
            no_private_mask: self.no_private_mask,
            no_sentiment_constraint: self.no_sentiment_constraint,
            no_stopword_constraint: self.no_stopword_constraint,
        }
    }

    pub fn set_ablation(&mut self, a: Ablation) {
        self.no_shared_part = a.no_shared_part;
        self.no_private_part = a.no_private_part;
        self.no_shared_mask = a.no_shared_mask;
        self.no_private_mask = a.no_private_mask;
        self.no_sentiment_constraint = a.no_sentiment_constraint;
        self.no_stopword_constraint = a.no_stopword_constraint;
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            max_len: self.max_len,
            dropout: self.dropout,
            vocab_size,
        }
    }

    pub fn model_config(&self, domains: Vec<String>, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(vocab_size),
            descriptor_dim: self.descriptor_dim,
            scorer_hidden: self.scorer_hidden,
            probe_hidden: self.probe_hidden,
            temperature: self.temperature,
            domains,
            ablation: self.ablation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch-size and epochs must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip-norm must be positive, got {}", self.clip_norm)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        self.loss_weights().validate()?;
        match (self.mode, &self.target) {
            (Protocol::CrossDomain, None) => {
                return Err(Error::Config("cross-domain mode requires a target domain".into()))
            }
            (Protocol::MultiDomain, Some(t)) => {
                return Err(Error::Config(format!("target `{t}` given but mode is multi-domain")))
            }
            _ => {}
        }
        self.encoder_config(RESERVED_VOCAB).validate()?;
        Ok(())
    }
}

const RESERVED_VOCAB: usize = crate::encoder::RESERVED.len() + 1;

/// Loss terms active at optimizer step `step`.
pub fn phase_of(step: usize, config: &TrainConfig) -> ActiveLosses {
    if step < config.phase1_steps {
        ActiveLosses::DOMAIN
    } else if step < config.phase1_steps + config.phase2_steps {
        ActiveLosses::SENTIMENT
    } else {
        ActiveLosses::ALL
    }
}

/// Accuracy on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Result of [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Part,
    pub per_domain: Vec<DomainAccuracy>,
    /// Unweighted mean of the per-domain accuracies.
    pub macro_avg: f64,
    /// Mean per-example losses under deterministic inference.
    pub losses: ComponentLosses,
    /// Mean fraction of real tokens masked on each path.
    pub shared_mask_rate: f64,
    pub private_mask_rate: f64,
}

impl EvalReport {
    pub fn accuracy_of(&self, domain: &str) -> Option<f64> {
        self.per_domain.iter().find(|d| d.domain == domain).map(|d| d.accuracy)
    }
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Deterministic evaluation of `which` on the given domains (all when
/// `domains` is `None`).
pub fn evaluate(
    model: &MaskerModel,
    splits: &[DomainSplit],
    which: Part,
    domains: Option<&[usize]>,
) -> Result<EvalReport> {
    let weights = LossWeights::default();
    let mut per_domain = Vec::new();
    let mut loss_sum = ComponentLosses::default();
    let (mut shared_rate, mut private_rate, mut n) = (0.0, 0.0, 0usize);
    for s in splits {
        if domains.is_some_and(|d| !d.contains(&s.domain_id)) {
            continue;
        }
        let examples = s.part(which);
        if examples.is_empty() {
            return Err(Error::EmptySplit(format!("{} {}", s.domain, which.name())));
        }
        let model_domain = model
            .domain_id(&s.domain)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no domain `{}`", s.domain)))?;
        let mut correct = 0;
        for ex in examples {
            let seq = model.tokenize(&ex.text)?;
            let mut tape = Tape::new(&model.params);
            let out = model.forward(
                &mut tape,
                &seq,
                model_domain,
                Some(ex.sentiment as usize),
                ActiveLosses::ALL,
                &weights,
                Mode::Eval,
            )?;
            let p = softmax(tape.value(out.logits).data());
            let label = u8::from(p[1] > p[0]);
            if label == ex.sentiment {
                correct += 1;
            }
            let l = out.losses.values(&tape);
            loss_sum.l_s += l.l_s;
            loss_sum.l_ss += l.l_ss;
            loss_sum.l_sp += l.l_sp;
            loss_sum.l_ds += l.l_ds;
            loss_sum.l_dp += l.l_dp;
            let words = seq.num_words().max(1) as f64;
            shared_rate += out.shared.num_masked() as f64 / words;
            private_rate += out.private.num_masked() as f64 / words;
            n += 1;
        }
        per_domain.push(DomainAccuracy {
            domain: s.domain.clone(),
            correct,
            total: examples.len(),
            accuracy: correct as f64 / examples.len() as f64,
        });
    }
    if n == 0 {
        return Err(Error::EmptySplit(format!("no {} examples selected", which.name())));
    }
    let nf = n as f64;
    let accs: Vec<f64> = per_domain.iter().map(|d| d.accuracy).collect();
    Ok(EvalReport {
        split: which,
        macro_avg: macro_average(&accs),
        per_domain,
        losses: ComponentLosses {
            l_s: loss_sum.l_s / nf,
            l_ss: loss_sum.l_ss / nf,
            l_sp: loss_sum.l_sp / nf,
            l_ds: loss_sum.l_ds / nf,
            l_dp: loss_sum.l_dp / nf,
        },
        shared_mask_rate: shared_rate / nf,
        private_mask_rate: private_rate / nf,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum MetricEvent {
    /// First record of every run: the configuration fingerprint.
    Config {
        fingerprint: String,
        ablations: Vec<String>,
        domains: Vec<String>,
    },
    /// Mean training losses over one epoch.
    Train {
        epoch: usize,
        step: usize,
        active: Vec<String>,
        losses: LossBundle,
        grad_norm: f64,
    },
    Eval {
        epoch: usize,
        step: usize,
        report: EvalReport,
    },
    /// Final evaluation of the selected parameters.
    Final {
        best_epoch: usize,
        step: usize,
        dev: EvalReport,
        test: EvalReport,
    },
}

/// Per-epoch record kept in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    pub train_losses: LossBundle,
    pub dev: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Fingerprint of the training configuration.
    pub fingerprint: String,
    pub model: MaskerModel,
    pub history: Vec<EpochSummary>,
    /// Epoch (0-based) whose parameters were retained.
    pub best_epoch: usize,
    pub best_dev: EvalReport,
    pub test: EvalReport,
    pub steps: usize,
}

/// Builds the vocabulary from all training texts (labels are not read).
pub fn build_vocab(splits: &[DomainSplit], min_freq: usize) -> Result<Vocabulary> {
    let texts: Vec<&str> = splits.iter().flat_map(|s| s.train.iter().map(|e| e.text.as_str())).collect();
    Vocabulary::build(&texts, min_freq)
}

struct PoolItem {
    seq: TokenSequence,
    domain: usize,
    sentiment: Option<usize>,
}

fn target_id(config: &TrainConfig, splits: &[DomainSplit]) -> Result<Option<usize>> {
    match (&config.mode, &config.target) {
        (Protocol::CrossDomain, Some(t)) => {
            let s = splits
                .iter()
                .find(|s| s.domain.eq_ignore_ascii_case(t))
                .ok_or_else(|| Error::Config(format!("target domain `{t}` not found")))?;
            if splits.len() < 2 {
                return Err(Error::Config("cross-domain mode needs at least one source domain".into()));
            }
            Ok(Some(s.domain_id))
        }
        _ => Ok(None),
    }
}

/// Trains from scratch. `on_event` receives every metrics record in order.
pub fn train(
    config: &TrainConfig,
    splits: &[DomainSplit],
    lexicons: LexiconConstraints,
    on_event: &mut dyn FnMut(&MetricEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let target = target_id(config, splits)?;
    let vocab = build_vocab(splits, config.min_freq)?;
    let mut names: Vec<(usize, String)> = splits.iter().map(|s| (s.domain_id, s.domain.clone())).collect();
    names.sort();
    let domains: Vec<String> = names.into_iter().map(|(_, n)| n).collect();
    let model_config = config.model_config(domains, vocab.len());
    let mut model = MaskerModel::new(model_config, vocab, lexicons, config.seed)?;
    let fingerprint = fingerprint(config)?;
    on_event(&MetricEvent::Config {
        fingerprint: fingerprint.clone(),
        ablations: config.ablation().enabled().iter().map(|s| s.to_string()).collect(),
        domains: model.config.domains.clone(),
    })?;

    let mut pool = Vec::new();
    for s in splits {
        let d = model.domain_id(&s.domain).expect("domain registered above");
        for ex in &s.train {
            pool.push(PoolItem {
                seq: model.tokenize(&ex.text)?,
                domain: d,
                sentiment: if Some(s.domain_id) == target {
                    None
                } else {
                    Some(ex.sentiment as usize)
                },
            });
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptySplit("no training examples".into()));
    }
    let source_ids: Vec<usize> = splits
        .iter()
        .filter(|s| Some(s.domain_id) != target)
        .map(|s| s.domain_id)
        .collect();
    let weights = config.loss_weights();
    let steps_per_epoch = pool.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    if total < config.phase1_steps + config.phase2_steps {
        log::warn!(
            "{total} optimizer steps do not reach the joint phase (starts at step {})",
            config.phase1_steps + config.phase2_steps
        );
    }

    let mut gumbel = rng::stream(config.seed, rng::streams::GUMBEL);
    let mut dropout = rng::stream(config.seed, rng::streams::DROPOUT);
    let mut step = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, crate::params::ParamStore, EvalReport)> = None;

    for epoch in 0..config.epochs {
        let epoch_seed = rng::stream(config.seed, &format!("{}/epoch{epoch}", rng::streams::DATA_SHUFFLE)).next_u64();
        let mut sum = ComponentLosses::default();
        let mut counted = [0usize; 5];
        let mut norm_sum = 0.0;
        let mut active_seen: Vec<String> = Vec::new();
        for batch in batches(&pool, config.batch_size, true, epoch_seed) {
            let active = phase_of(step, config);
            for n in active.names() {
                if !active_seen.iter().any(|a| a == n) {
                    active_seen.push(n.to_string());
                }
            }
            let mut grads = ParamGrads::new(&model.params);
            let seed = Tensor::scalar(1.0 / batch.len() as f64);
            for item in &batch {
                let mut tape = Tape::new(&model.params);
                let out = model.forward(
                    &mut tape,
                    &item.seq,
                    item.domain,
                    item.sentiment,
                    active,
                    &weights,
                    Mode::Train {
                        gumbel: &mut gumbel,
                        dropout: &mut dropout,
                    },
                )?;
                let l = out.losses.values(&tape);
                for (name, v) in [("L_s", l.l_s), ("L_ss", l.l_ss), ("L_sp", l.l_sp), ("L_ds", l.l_ds), ("L_dp", l.l_dp)] {
                    if !v.is_finite() {
                        return Err(Error::Diverged {
                            step,
                            detail: format!("{name} = {v} on a `{}` example", model.config.domains[item.domain]),
                        });
                    }
                }
                let present = [out.losses.s, out.losses.ss, out.losses.sp, out.losses.ds, out.losses.dp];
                for (c, p) in counted.iter_mut().zip(present) {
                    *c += usize::from(p.is_some());
                }
                sum.l_s += l.l_s;
                sum.l_ss += l.l_ss;
                sum.l_sp += l.l_sp;
                sum.l_ds += l.l_ds;
                sum.l_dp += l.l_dp;
                if let Some(obj) = out.objective {
                    tape.backward_seeded(obj, seed.clone(), &mut grads);
                }
            }
            grads.add_l2(&model.params, weights.lambda_reg);
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            norm_sum += grads.clip_global_norm(config.clip_norm);
            model.params.sgd_step(&grads, config.lr);
            if !model.params.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite parameter after update".into(),
                });
            }
            step += 1;
        }
        // each term is averaged over the examples where it was computed
        let c = counted.map(|c| c.max(1) as f64);
        let mean = ComponentLosses {
            l_s: sum.l_s / c[0],
            l_ss: sum.l_ss / c[1],
            l_sp: sum.l_sp / c[2],
            l_ds: sum.l_ds / c[3],
            l_dp: sum.l_dp / c[4],
        };
        let train_losses = combine(&mean, &weights, model.params.l2_penalty());
        on_event(&MetricEvent::Train {
            epoch,
            step,
            active: active_seen,
            losses: train_losses,
            grad_norm: norm_sum / steps_per_epoch as f64,
        })?;
        let dev = evaluate(&model, splits, Part::Dev, Some(&source_ids))?;
        log::info!(
            "epoch {epoch} step {step}: L_s {:.4} L_ds {:.4} L_dp {:.4} dev {:.4}",
            mean.l_s,
            mean.l_ds,
            mean.l_dp,
            dev.macro_avg
        );
        on_event(&MetricEvent::Eval {
            epoch,
            step,
            report: dev.clone(),
        })?;
        if best.as_ref().is_none_or(|b| dev.macro_avg > b.1) {
            best = Some((epoch, dev.macro_avg, model.params.clone(), dev.clone()));
        }
        history.push(EpochSummary {
            epoch,
            step,
            train_losses,
            dev,
        });
    }

    let (best_epoch, _, params, best_dev) = best.expect("at least one epoch");
    model.params = params;
    let test_ids: Vec<usize> = match target {
        Some(t) => vec![t],
        None => source_ids.clone(),
    };
    let test = evaluate(&model, splits, Part::Test, Some(&test_ids))?;
    on_event(&MetricEvent::Final {
        best_epoch,
        step,
        dev: best_dev.clone(),
        test: test.clone(),
    })?;
    Ok(TrainOutcome {
        fingerprint,
        model,
        history,
        best_epoch,
        best_dev,
        test,
        steps: step,
    })
}

/// Per-domain accuracies keyed by domain name.
pub fn accuracy_map(report: &EvalReport) -> BTreeMap<String, f64> {
    report.per_domain.iter().map(|d| (d.domain.clone(), d.accuracy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_boundaries() {
        let c = TrainConfig::default();
        assert_eq!(phase_of(0, &c), ActiveLosses::DOMAIN);
        assert_eq!(phase_of(1999, &c), ActiveLosses::DOMAIN);
        assert_eq!(phase_of(2000, &c), ActiveLosses::SENTIMENT);
        assert_eq!(phase_of(4999, &c), ActiveLosses::SENTIMENT);
        assert_eq!(phase_of(5000, &c), ActiveLosses::ALL);
        assert_eq!(phase_of(usize::MAX, &c), ActiveLosses::ALL);
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.epochs, c.descriptor_dim), (0.0003, 8, 15, 200));
        assert_eq!((c.lambda_ds, c.lambda_dp, c.gamma, c.gamma_ss, c.gamma_sp), (0.002, 0.002, 0.4, 0.3, 0.3));
        assert!(c.validate().is_ok());
        let bad = TrainConfig {
            mode: Protocol::CrossDomain,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            target: Some("books".into()),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            gamma: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_keys_are_kebab_case_and_strict() {
        let c: TrainConfig = toml::from_str("lr = 0.1\nbatch-size = 4\nlambda-ds = 0.5\n").unwrap();
        assert_eq!((c.lr, c.batch_size, c.lambda_ds, c.epochs), (0.1, 4, 0.5, 15));
        assert!(toml::from_str::<TrainConfig>("learning-rate = 0.1\n").is_err());
        let text = toml::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn macro_average_of_reported_domain_accuracies() {
        // per-domain accuracies of the reference multi-domain results
        let table = [
            93.00, 93.25, 89.25, 90.75, 92.25, 92.75, 95.25, 89.50, 93.75, 91.25, 92.75, 94.50, 93.00, 92.50,
            86.00, 83.75,
        ];
        assert!((macro_average(&table) - 91.46875).abs() < 1e-9);
        assert_eq!(format!("{:.2}", macro_average(&table)), "91.47");
        assert_eq!(macro_average(&[1.0, 1.0]), 1.0);
    }
}
