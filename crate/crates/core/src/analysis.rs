//! Masking analysis: mask counts and rates, word rankings, the domain
//! degradation probe, per-sentence visualisation and report writers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batches, DomainSplit, Example, Part, RoleMap, TokenRole};
use crate::encoder::{split_words, Encoder, EncoderConfig, TokenSequence, Vocabulary, RESERVED, MASK};
use crate::error::{Error, Result};
use crate::features::DomainProbeHead;
use crate::model::MaskerModel;
use crate::params::{ParamGrads, ParamStore};
use crate::rng;
use crate::tensor::{argmax, Tensor};

/// Raw per-example masking record; every aggregate here is computed from
/// these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub domain: String,
    pub domain_id: usize,
    pub tokens: Vec<String>,
    pub special: Vec<bool>,
    pub shared: Vec<bool>,
    pub private: Vec<bool>,
    pub constrained: Vec<bool>,
    pub prediction: u8,
    pub gold: u8,
    pub probs: [f64; 2],
}

impl MaskRecord {
    /// Count of non-special tokens.
    pub fn num_words(&self) -> usize {
        self.special.iter().filter(|s| !**s).count()
    }

    pub fn shared_count(&self) -> usize {
        self.shared.iter().filter(|m| **m).count()
    }

    pub fn private_count(&self) -> usize {
        self.private.iter().filter(|m| **m).count()
    }
}

/// Deterministic inference record for one example.
pub fn mask_record(model: &MaskerModel, ex: &Example) -> Result<MaskRecord> {
    let domain_id = model
        .domain_id(&ex.domain)
        .ok_or_else(|| Error::InvalidArgument(format!("model has no domain `{}`", ex.domain)))?;
    let seq = model.tokenize(&ex.text)?;
    let p = model.predict(&seq, domain_id)?;
    Ok(MaskRecord {
        domain: ex.domain.clone(),
        domain_id,
        tokens: seq.surface.clone(),
        special: seq.is_special.clone(),
        shared: p.shared.hard,
        private: p.private.hard,
        constrained: p.shared.constrained,
        prediction: p.label,
        gold: ex.sentiment,
        probs: p.probs,
    })
}

pub fn mask_records(model: &MaskerModel, splits: &[DomainSplit], which: Part) -> Result<Vec<MaskRecord>> {
    let mut out = Vec::new();
    for s in splits {
        for ex in s.part(which) {
            out.push(mask_record(model, ex)?);
        }
    }
    Ok(out)
}

/// Mean masking statistics over a group of examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub domain: String,
    pub examples: usize,
    pub shared_count: f64,
    pub shared_rate: f64,
    pub private_count: f64,
    pub private_rate: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub per_domain: Vec<MaskSummary>,
    /// Mean over all examples.
    pub overall: MaskSummary,
}

fn summarize(domain: &str, records: &[&MaskRecord]) -> MaskSummary {
    let n = records.len();
    let mean = |f: &dyn Fn(&MaskRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            records.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let rate = |count: usize, r: &MaskRecord| {
        let w = r.num_words();
        if w == 0 {
            0.0
        } else {
            count as f64 / w as f64
        }
    };
    MaskSummary {
        domain: domain.to_string(),
        examples: n,
        shared_count: mean(&|r| r.shared_count() as f64),
        shared_rate: mean(&|r| rate(r.shared_count(), r)),
        private_count: mean(&|r| r.private_count() as f64),
        private_rate: mean(&|r| rate(r.private_count(), r)),
        length: mean(&|r| r.num_words() as f64),
    }
}

/// Aggregates records per domain (in order of first appearance) and overall.
pub fn mask_stats_from_records(records: &[MaskRecord]) -> MaskStats {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&MaskRecord>> = HashMap::new();
    for r in records {
        if !groups.contains_key(r.domain.as_str()) {
            order.push(&r.domain);
        }
        groups.entry(&r.domain).or_default().push(r);
    }
    let all: Vec<&MaskRecord> = records.iter().collect();
    MaskStats {
        per_domain: order.iter().map(|d| summarize(d, &groups[d])).collect(),
        overall: summarize("avg", &all),
    }
}

pub fn mask_stats(model: &MaskerModel, splits: &[DomainSplit], which: Part) -> Result<MaskStats> {
    Ok(mask_stats_from_records(&mask_records(model, splits, which)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    PerDomain,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCount {
    pub word: String,
    pub count: usize,
}

/// Word rankings for one scope (`domain = None` for all domains).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRanking {
    pub domain: Option<String>,
    /// Words selected by the private masker.
    pub masked: Vec<WordCount>,
    /// Words left in place by the shared masker.
    pub kept: Vec<WordCount>,
}

fn top_k(counts: HashMap<&str, usize>, k: usize) -> Vec<WordCount> {
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter()
        .take(k)
        .map(|(w, c)| WordCount {
            word: w.to_string(),
            count: c,
        })
        .collect()
}

fn rank(domain: Option<String>, records: &[&MaskRecord], k: usize) -> WordRanking {
    let mut masked: HashMap<&str, usize> = HashMap::new();
    let mut kept: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for (i, t) in r.tokens.iter().enumerate() {
            if r.special[i] {
                continue;
            }
            if r.private[i] {
                *masked.entry(t).or_default() += 1;
            }
            if !r.shared[i] {
                *kept.entry(t).or_default() += 1;
            }
        }
    }
    WordRanking {
        domain,
        masked: top_k(masked, k),
        kept: top_k(kept, k),
    }
}

/// Frequency rankings (count desc, then word) of private-masked words and
/// shared-kept words.
pub fn rank_words(records: &[MaskRecord], k: usize, scope: Scope) -> Result<Vec<WordRanking>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    Ok(match scope {
        Scope::All => {
            let all: Vec<&MaskRecord> = records.iter().collect();
            vec![rank(None, &all, k)]
        }
        Scope::PerDomain => {
            let mut groups: BTreeMap<&str, Vec<&MaskRecord>> = BTreeMap::new();
            for r in records {
                groups.entry(&r.domain).or_default().push(r);
            }
            groups
                .into_iter()
                .map(|(d, rs)| rank(Some(d.to_string()), &rs, k))
                .collect()
        }
    })
}

pub fn top_masked_words(
    model: &MaskerModel,
    splits: &[DomainSplit],
    which: Part,
    k: usize,
    scope: Scope,
) -> Result<Vec<WordRanking>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    rank_words(&mask_records(model, splits, which)?, k, scope)
}

/// Masking rate per planted role, for synthetic data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleRates {
    pub role: Option<TokenRole>,
    pub tokens: usize,
    pub shared_rate: f64,
    pub private_rate: f64,
}

pub fn role_mask_rates(records: &[MaskRecord], roles: &RoleMap) -> Vec<RoleRates> {
    let mut acc: BTreeMap<Option<TokenRole>, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        for (i, t) in r.tokens.iter().enumerate() {
            if r.special[i] {
                continue;
            }
            let e = acc.entry(roles.role(t)).or_default();
            e.0 += 1;
            e.1 += usize::from(r.shared[i]);
            e.2 += usize::from(r.private[i]);
        }
    }
    acc.into_iter()
        .map(|(role, (n, s, p))| RoleRates {
            role,
            tokens: n,
            shared_rate: s as f64 / n as f64,
            private_rate: p as f64 / n as f64,
        })
        .collect()
}

/// Which text the degradation probe sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeVariant {
    Original,
    /// Shared-path masked positions replaced by `[MASK]`.
    Masked,
    /// Only the shared-path masked words, in sentence order.
    MaskedWordsOnly,
}

impl ProbeVariant {
    pub const ALL: [ProbeVariant; 3] = [ProbeVariant::Original, ProbeVariant::Masked, ProbeVariant::MaskedWordsOnly];

    pub fn name(self) -> &'static str {
        match self {
            ProbeVariant::Original => "original",
            ProbeVariant::Masked => "masked",
            ProbeVariant::MaskedWordsOnly => "masked-words-only",
        }
    }
}

impl std::str::FromStr for ProbeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe variant `{s}`")))
    }
}

/// Word list of `ex` under `variant`.
pub fn variant_words(variant: ProbeVariant, model: Option<&MaskerModel>, ex: &Example) -> Result<Vec<String>> {
    if variant == ProbeVariant::Original {
        return Ok(split_words(&ex.text));
    }
    let model = model.ok_or_else(|| {
        Error::InvalidArgument(format!("the `{}` probe variant needs a trained model", variant.name()))
    })?;
    let r = mask_record(model, ex)?;
    let words = (0..r.tokens.len()).filter(|&i| !r.special[i]);
    Ok(match variant {
        ProbeVariant::Masked => words
            .map(|i| {
                if r.shared[i] {
                    RESERVED[MASK].to_string()
                } else {
                    r.tokens[i].clone()
                }
            })
            .collect(),
        _ => words.filter(|&i| r.shared[i]).map(|i| r.tokens[i].clone()).collect(),
    })
}

/// Settings of the independent domain classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ProbeConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub head_hidden: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            layers: 1,
            heads: 2,
            ff: 64,
            head_hidden: 64,
            max_len: 64,
            epochs: 3,
            lr: 0.05,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub variant: ProbeVariant,
    pub accuracy: f64,
    pub domains: Vec<String>,
    /// Rows are true domains, columns predicted domains.
    pub confusion: Vec<Vec<usize>>,
}

struct ProbeNet {
    params: ParamStore,
    vocab: Vocabulary,
    encoder: Encoder,
    head: DomainProbeHead,
    max_len: usize,
}

impl ProbeNet {
    fn sequence(&self, words: &[String]) -> Result<TokenSequence> {
        TokenSequence::from_words(words, &self.vocab, self.max_len)
    }

    fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encoder.forward::<rng::StreamRng>(&mut tape, seq, None, None)?;
        let logits = self.head.logits(&mut tape, enc.cls);
        Ok(argmax(tape.value(logits).data()))
    }
}

/// Trains a fresh domain classifier on `train` under `variant` and reports
/// accuracy and the confusion matrix on `test` under the same variant.
pub fn domain_probe(
    variant: ProbeVariant,
    model: Option<&MaskerModel>,
    train: &[Example],
    test: &[Example],
    domains: &[String],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptySplit("domain probe needs training and test examples".into()));
    }
    let m = domains.len();
    if let Some(e) = train.iter().chain(test).find(|e| e.domain_id >= m) {
        return Err(Error::InvalidArgument(format!("domain id {} out of range", e.domain_id)));
    }
    let train_words: Vec<Vec<String>> = train
        .iter()
        .map(|e| variant_words(variant, model, e))
        .collect::<Result<_>>()?;
    let vocab = Vocabulary::from_word_lists(&train_words, 1)?;
    let enc_config = EncoderConfig {
        hidden: config.hidden,
        layers: config.layers,
        heads: config.heads,
        ff: config.ff,
        max_len: config.max_len,
        dropout: 0.0,
        vocab_size: vocab.len(),
    };
    let mut init = rng::stream(config.seed, rng::streams::PROBE);
    let mut params = ParamStore::new();
    let encoder = Encoder::new(enc_config, &mut params, "probe.encoder", &mut init)?;
    let head = DomainProbeHead::new("probe.head", config.hidden, config.head_hidden, m, &mut params, &mut init);
    let mut net = ProbeNet {
        params,
        vocab,
        encoder,
        head,
        max_len: config.max_len,
    };
    let items: Vec<(TokenSequence, usize)> = train_words
        .iter()
        .zip(train)
        .map(|(w, e)| Ok((net.sequence(w)?, e.domain_id)))
        .collect::<Result<_>>()?;

    let mut order = rng::stream(config.seed, &format!("{}/{}", rng::streams::PROBE, rng::streams::DATA_SHUFFLE));
    for _ in 0..config.epochs {
        for batch in batches(&items, config.batch_size, true, order.next_u64()) {
            let mut grads = ParamGrads::new(&net.params);
            let seed = Tensor::scalar(1.0 / batch.len() as f64);
            for (seq, d) in &batch {
                let mut tape = Tape::new(&net.params);
                let enc = net.encoder.forward::<rng::StreamRng>(&mut tape, seq, None, None)?;
                let logits = net.head.logits(&mut tape, enc.cls);
                let loss = tape.cross_entropy(logits, *d);
                tape.backward_seeded(loss, seed.clone(), &mut grads);
            }
            grads.clip_global_norm(config.clip_norm);
            net.params.sgd_step(&grads, config.lr);
        }
    }

    let mut confusion = vec![vec![0usize; m]; m];
    for e in test {
        let words = variant_words(variant, model, e)?;
        let pred = net.predict(&net.sequence(&words)?)?;
        confusion[e.domain_id][pred] += 1;
    }
    let correct: usize = (0..m).map(|i| confusion[i][i]).sum();
    Ok(ProbeResult {
        variant,
        accuracy: correct as f64 / test.len() as f64,
        domains: domains.to_vec(),
        confusion,
    })
}

/// Runs the probe over pooled train/test parts of `splits`.
pub fn domain_probe_splits(
    variant: ProbeVariant,
    model: Option<&MaskerModel>,
    splits: &[DomainSplit],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let mut sorted: Vec<&DomainSplit> = splits.iter().collect();
    sorted.sort_by_key(|s| s.domain_id);
    let domains: Vec<String> = sorted.iter().map(|s| s.domain.clone()).collect();
    let train: Vec<Example> = sorted.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let test: Vec<Example> = sorted.iter().flat_map(|s| s.test.iter().cloned()).collect();
    domain_probe(variant, model, &train, &test, &domains, config)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const CHAR_W: f64 = 8.4;
const LINE_H: f64 = 30.0;

/// Standalone SVG of one record: shared-masked tokens on a red background,
/// private-masked tokens underlined in blue, constrained words in grey.
pub fn render_record_svg(r: &MaskRecord) -> String {
    let max_w = 760.0;
    let mut x = 10.0;
    let mut y = 56.0;
    let mut body = String::new();
    for (i, t) in r.tokens.iter().enumerate() {
        if r.special[i] {
            continue;
        }
        let w = t.chars().count() as f64 * CHAR_W + 8.0;
        if x + w > max_w {
            x = 10.0;
            y += LINE_H;
        }
        if r.shared[i] {
            let _ = writeln!(
                body,
                r##"<rect x="{x:.1}" y="{:.1}" width="{w:.1}" height="20" fill="#f4b6b6"/>"##,
                y - 15.0
            );
        }
        if r.private[i] {
            let _ = writeln!(
                body,
                r##"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#2f5fb3" stroke-width="2"/>"##,
                y + 6.0,
                x + w,
                y + 6.0
            );
        }
        let fill = if r.constrained[i] { "#777777" } else { "#111111" };
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{y:.1}" fill="{fill}">{}</text>"#,
            x + 4.0,
            xml_escape(t)
        );
        x += w + 4.0;
    }
    let height = y + 40.0;
    let label = |l: u8| if l == 1 { "positive" } else { "negative" };
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="780" height="{height:.0}" font-family="monospace" font-size="14">
<rect width="100%" height="100%" fill="white"/>
<text x="10" y="22" font-size="12" fill="#333333">{} | gold {} | predicted {} ({:.3}) | red: shared mask, blue underline: private mask, grey: constrained</text>
{body}</svg>
"##,
        xml_escape(&r.domain),
        label(r.gold),
        label(r.prediction),
        r.probs[r.prediction as usize],
    )
}

/// Horizontal bar chart of word counts.
pub fn render_word_chart_svg(title: &str, words: &[WordCount]) -> String {
    let max = words.iter().map(|w| w.count).max().unwrap_or(1).max(1) as f64;
    let mut body = String::new();
    for (i, w) in words.iter().enumerate() {
        let y = 40.0 + i as f64 * 22.0;
        let len = 400.0 * w.count as f64 / max;
        let _ = writeln!(
            body,
            r##"<text x="150" y="{:.1}" text-anchor="end">{}</text><rect x="160" y="{:.1}" width="{len:.1}" height="16" fill="#5b8bd6"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"##,
            y + 13.0,
            xml_escape(&w.word),
            y,
            165.0 + len,
            y + 13.0,
            w.count
        );
    }
    let height = 60.0 + words.len() as f64 * 22.0;
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="{height:.0}" font-family="sans-serif" font-size="13">
<rect width="100%" height="100%" fill="white"/>
<text x="10" y="22" font-size="15">{}</text>
{body}</svg>
"##,
        xml_escape(title)
    )
}

fn safe_file_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `masks.jsonl` plus one SVG per example under `dir/svg/`.
pub fn visualize_masks(model: &MaskerModel, examples: &[Example], dir: &Path) -> Result<Vec<MaskRecord>> {
    let records: Vec<MaskRecord> = examples.iter().map(|e| mask_record(model, e)).collect::<Result<_>>()?;
    let svg_dir = dir.join("svg");
    fs::create_dir_all(&svg_dir)?;
    write_jsonl(&dir.join("masks.jsonl"), &records)?;
    for (i, r) in records.iter().enumerate() {
        let name = format!("{:05}_{}.svg", i, safe_file_name(&r.domain));
        fs::write(svg_dir.join(name), render_record_svg(r))?;
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_mask_stats_csv(path: &Path, stats: &MaskStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in stats.per_domain.iter().chain(std::iter::once(&stats.overall)) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeRow<'a> {
    variant: &'a str,
    domain: &'a str,
    correct: usize,
    total: usize,
    accuracy: f64,
}

/// One row per (variant, domain) plus an `all` row per variant.
pub fn write_probe_csv(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        for (i, d) in r.domains.iter().enumerate() {
            let total: usize = r.confusion[i].iter().sum();
            w.serialize(ProbeRow {
                variant: r.variant.name(),
                domain: d,
                correct: r.confusion[i][i],
                total,
                accuracy: if total == 0 { 0.0 } else { r.confusion[i][i] as f64 / total as f64 },
            })?;
        }
        let total: usize = r.confusion.iter().flatten().sum();
        w.serialize(ProbeRow {
            variant: r.variant.name(),
            domain: "all",
            correct: (0..r.domains.len()).map(|i| r.confusion[i][i]).sum(),
            total,
            accuracy: r.accuracy,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rankings_csv(path: &Path, rankings: &[WordRanking]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        scope: &'a str,
        list: &'a str,
        rank: usize,
        word: &'a str,
        count: usize,
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rankings {
        let scope = r.domain.as_deref().unwrap_or("all");
        for (list, words) in [("private-masked", &r.masked), ("shared-kept", &r.kept)] {
            for (i, wc) in words.iter().enumerate() {
                w.serialize(Row {
                    scope,
                    list,
                    rank: i + 1,
                    word: &wc.word,
                    count: wc.count,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
