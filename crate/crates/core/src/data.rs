//! Multi-domain datasets: JSONL loading, seeded splits, batching and a
//! synthetic generator with planted domain-marker tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::split_words;
use crate::error::{io_at, Error, Result};
use crate::masking::LexiconConstraints;
use crate::rng;

/// One labelled review.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    /// 0 = negative, 1 = positive.
    pub sentiment: u8,
    pub domain: String,
    pub domain_id: usize,
}

/// Train/dev/test partition of one domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub domain: String,
    pub domain_id: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl DomainSplit {
    pub fn part(&self, which: Part) -> &[Example] {
        match which {
            Part::Train => &self.train,
            Part::Dev => &self.dev,
            Part::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Dev,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Dev => "dev",
            Part::Test => "test",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "dev" => Ok(Part::Dev),
            "test" => Ok(Part::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Train/dev/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            dev: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("split ratios must be positive: {all:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios must sum to 1: {all:?}")));
        }
        Ok(())
    }

    /// `(train, dev, test)` sizes; train absorbs the rounding remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let count = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let dev = count(self.dev);
        let test = count(self.test);
        (n - dev - test, dev, test)
    }
}

/// Shuffles `examples` with a stream derived from `seed` and the domain
/// name, then slices it contiguously.
pub fn split(examples: Vec<Example>, ratios: SplitRatios, seed: u64) -> Result<DomainSplit> {
    ratios.validate()?;
    if examples.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 examples to split, got {}",
            examples.len()
        )));
    }
    let domain = examples[0].domain.clone();
    let domain_id = examples[0].domain_id;
    let mut examples = examples;
    let mut r = rng::stream(seed, &format!("{}/{domain}", rng::streams::SPLIT));
    examples.shuffle(&mut r);
    let (n_train, n_dev, _) = ratios.sizes(examples.len());
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    Ok(DomainSplit {
        domain,
        domain_id,
        train: examples,
        dev,
        test,
    })
}

#[derive(Deserialize)]
struct Record {
    text: String,
    label: serde_json::Value,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    text: &'a str,
    label: u8,
}

fn parse_label(v: &serde_json::Value) -> Option<u8> {
    match v.as_u64() {
        Some(0) => Some(0),
        Some(1) => Some(1),
        _ => None,
    }
}

/// Reads one JSONL record file. Blank lines are skipped.
pub fn read_records(path: &Path, domain: &str, domain_id: usize) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let sentiment = parse_label(&rec.label).ok_or_else(|| err(format!("unknown label {}", rec.label)))?;
        if rec.text.trim().is_empty() {
            return Err(err("empty text".into()));
        }
        out.push(Example {
            text: rec.text,
            sentiment,
            domain: domain.to_string(),
            domain_id,
        });
    }
    Ok(out)
}

/// Writes examples as JSONL records.
pub fn write_records(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(
            &mut w,
            &RecordOut {
                text: &ex.text,
                label: ex.sentiment,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads `<root>/<domain>/{train,dev,test}.jsonl`, or `<root>/<domain>/all.jsonl`
/// split with `ratios` and `seed`. Domain ids follow sorted domain names.
pub fn load_dataset(root: &Path, ratios: SplitRatios, seed: u64) -> Result<Vec<DomainSplit>> {
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_at(root))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    dirs.sort();
    let mut seen = BTreeSet::new();
    for (name, _) in &dirs {
        if !seen.insert(name.to_lowercase()) {
            return Err(Error::DuplicateDomain(name.clone()));
        }
    }
    if dirs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut splits = Vec::with_capacity(dirs.len());
    for (id, (name, dir)) in dirs.into_iter().enumerate() {
        let all = dir.join("all.jsonl");
        let split_files = ["train", "dev", "test"].map(|p| dir.join(format!("{p}.jsonl")));
        let s = if split_files.iter().all(|p| p.is_file()) {
            DomainSplit {
                train: read_records(&split_files[0], &name, id)?,
                dev: read_records(&split_files[1], &name, id)?,
                test: read_records(&split_files[2], &name, id)?,
                domain: name,
                domain_id: id,
            }
        } else if all.is_file() {
            split(read_records(&all, &name, id)?, ratios, seed)?
        } else {
            return Err(Error::InvalidArgument(format!(
                "{} has neither train/dev/test.jsonl nor all.jsonl",
                dir.display()
            )));
        };
        splits.push(s);
    }
    Ok(splits)
}

/// Writes splits in the layout [`load_dataset`] reads.
pub fn save_dataset(root: &Path, splits: &[DomainSplit]) -> Result<()> {
    for s in splits {
        let dir = root.join(&s.domain);
        fs::create_dir_all(&dir)?;
        for part in [Part::Train, Part::Dev, Part::Test] {
            write_records(&dir.join(format!("{}.jsonl", part.name())), s.part(part))?;
        }
    }
    Ok(())
}

/// Per-domain split sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub domain: String,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

pub fn summarize(splits: &[DomainSplit]) -> Vec<SplitCounts> {
    splits
        .iter()
        .map(|s| SplitCounts {
            domain: s.domain.clone(),
            train: s.train.len(),
            dev: s.dev.len(),
            test: s.test.len(),
        })
        .collect()
}

/// Plain-text table of split sizes with a total row.
pub fn format_summary(counts: &[SplitCounts]) -> String {
    let width = counts.iter().map(|c| c.domain.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$} {:>7} {:>7} {:>7}\n", "domain", "train", "dev", "test");
    let (mut a, mut b, mut c) = (0, 0, 0);
    for s in counts {
        out.push_str(&format!("{:<width$} {:>7} {:>7} {:>7}\n", s.domain, s.train, s.dev, s.test));
        a += s.train;
        b += s.dev;
        c += s.test;
    }
    out.push_str(&format!("{:<width$} {:>7} {:>7} {:>7}\n", "total", a, b, c));
    out
}

/// Splits `items` into batches of `size` (last one may be short). With
/// `shuffle`, the order is a permutation drawn from `seed`.
pub fn batches<T>(items: &[T], size: usize, shuffle: bool, seed: u64) -> impl Iterator<Item = Vec<&T>> {
    let size = size.max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, rng::streams::DATA_SHUFFLE));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |c| c.into_iter().map(|i| &items[i]).collect())
}

/// Role of a synthetic token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Marker,
    Sentiment,
    Filler,
}

/// Ground-truth roles for every word the generator can emit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMap {
    pub roles: BTreeMap<String, TokenRole>,
    /// Owning domain of each marker word.
    pub marker_domain: BTreeMap<String, usize>,
    /// Polarity (0/1) of each sentiment word.
    pub polarity: BTreeMap<String, u8>,
}

impl RoleMap {
    pub fn role(&self, word: &str) -> Option<TokenRole> {
        self.roles.get(word).copied()
    }

    pub fn words(&self, role: TokenRole) -> Vec<&str> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(w, _)| w.as_str())
            .collect()
    }
}

/// Parameters of the planted-token generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SyntheticSpec {
    pub domains: usize,
    pub examples_per_domain: usize,
    pub markers_per_domain: usize,
    pub sentiment_per_polarity: usize,
    pub fillers: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub markers_per_sentence: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            domains: 3,
            examples_per_domain: 600,
            markers_per_domain: 20,
            sentiment_per_polarity: 10,
            fillers: 150,
            min_len: 8,
            max_len: 20,
            markers_per_sentence: 2,
            seed: 0,
        }
    }
}

/// Opinion words used as planted sentiment tokens; all are in the bundled
/// sentiment lexicon.
pub const POSITIVE_WORDS: [&str; 20] = [
    "good", "great", "excellent", "love", "perfect", "nice", "wonderful", "best", "happy", "amazing",
    "awesome", "fantastic", "superb", "pleasant", "brilliant", "delightful", "enjoyable", "favorite",
    "impressive", "outstanding",
];
pub const NEGATIVE_WORDS: [&str; 20] = [
    "bad", "poor", "terrible", "awful", "worst", "broken", "hate", "disappointing", "boring", "useless",
    "horrible", "annoying", "cheap", "defective", "flimsy", "junk", "mediocre", "painful", "ugly",
    "waste",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("domains", self.domains),
            ("examples-per-domain", self.examples_per_domain),
            ("markers-per-domain", self.markers_per_domain),
            ("sentiment-per-polarity", self.sentiment_per_polarity),
            ("min-len", self.min_len),
            ("max-len", self.max_len),
            ("markers-per-sentence", self.markers_per_sentence),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "min-len {} exceeds max-len {}",
                self.min_len, self.max_len
            )));
        }
        if self.markers_per_sentence + 1 > self.min_len {
            return Err(Error::InvalidArgument(format!(
                "min-len {} cannot hold {} markers plus a sentiment word",
                self.min_len, self.markers_per_sentence
            )));
        }
        if self.markers_per_sentence + 1 < self.max_len && self.fillers == 0 {
            return Err(Error::InvalidArgument("fillers must be positive when sentences need padding words".into()));
        }
        if self.sentiment_per_polarity > POSITIVE_WORDS.len() {
            return Err(Error::InvalidArgument(format!(
                "at most {} sentiment words per polarity are available",
                POSITIVE_WORDS.len()
            )));
        }
        if self.examples_per_domain < 3 {
            return Err(Error::InvalidArgument("examples-per-domain must be at least 3".into()));
        }
        Ok(())
    }
}

/// Generated corpus plus its role oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub splits: Vec<DomainSplit>,
    pub roles: RoleMap,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    if rng.random_bool(0.5) {
        w.push_str(ONSETS.choose(rng).unwrap());
    }
    w
}

fn fresh_words<R: Rng + ?Sized>(
    n: usize,
    taken: &mut BTreeSet<String>,
    lexicons: &LexiconConstraints,
    rng: &mut R,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if !lexicons.contains(&w) && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Generates a planted-token corpus: each sentence has the configured
/// number of its domain's markers, one sentiment word carrying the label,
/// and filler words. Labels alternate, so each domain is balanced.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let lexicons = LexiconConstraints::bundled();
    let mut r = rng::stream(spec.seed, "synthetic");
    let mut taken = BTreeSet::new();
    let mut roles = RoleMap::default();

    let markers: Vec<Vec<String>> = (0..spec.domains)
        .map(|_| fresh_words(spec.markers_per_domain, &mut taken, &lexicons, &mut r))
        .collect();
    let fillers = fresh_words(spec.fillers, &mut taken, &lexicons, &mut r);
    let sentiment: [Vec<String>; 2] = [
        NEGATIVE_WORDS[..spec.sentiment_per_polarity].iter().map(|s| s.to_string()).collect(),
        POSITIVE_WORDS[..spec.sentiment_per_polarity].iter().map(|s| s.to_string()).collect(),
    ];
    for (d, ms) in markers.iter().enumerate() {
        for m in ms {
            roles.roles.insert(m.clone(), TokenRole::Marker);
            roles.marker_domain.insert(m.clone(), d);
        }
    }
    for f in &fillers {
        roles.roles.insert(f.clone(), TokenRole::Filler);
    }
    for (p, words) in sentiment.iter().enumerate() {
        for w in words {
            roles.roles.insert(w.clone(), TokenRole::Sentiment);
            roles.polarity.insert(w.clone(), p as u8);
        }
    }

    let width = (spec.domains - 1).to_string().len();
    let mut splits = Vec::with_capacity(spec.domains);
    for (d, domain_markers) in markers.iter().enumerate() {
        let name = format!("domain{d:0width$}");
        let mut examples = Vec::with_capacity(spec.examples_per_domain);
        for i in 0..spec.examples_per_domain {
            let label = (i % 2) as u8;
            let len = r.random_range(spec.min_len..=spec.max_len);
            let mut words: Vec<&str> = Vec::with_capacity(len);
            for _ in 0..spec.markers_per_sentence {
                words.push(domain_markers.choose(&mut r).unwrap());
            }
            words.push(sentiment[label as usize].choose(&mut r).unwrap());
            while words.len() < len {
                words.push(fillers.choose(&mut r).unwrap());
            }
            words.shuffle(&mut r);
            examples.push(Example {
                text: words.join(" "),
                sentiment: label,
                domain: name.clone(),
                domain_id: d,
            });
        }
        splits.push(split(examples, SplitRatios::default(), spec.seed)?);
    }
    Ok(SyntheticData { splits, roles })
}

/// Role of every word of `text`, `None` for words outside the map.
pub fn word_roles(text: &str, roles: &RoleMap) -> Vec<(String, Option<TokenRole>)> {
    split_words(text)
        .into_iter()
        .map(|w| {
            let r = roles.role(&w);
            (w, r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn ex(text: &str, label: u8, domain: &str, id: usize) -> Example {
        Example {
            text: text.into(),
            sentiment: label,
            domain: domain.into(),
            domain_id: id,
        }
    }

    fn numbered(n: usize) -> Vec<Example> {
        (0..n).map(|i| ex(&format!("text {i}"), (i % 2) as u8, "books", 0)).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split(numbered(10), SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (7, 1, 2));
        let s = split(numbered(2000), SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (1400, 200, 400));
        assert!(split(numbered(2), SplitRatios::default(), 1).is_err());
        let bad = SplitRatios {
            train: 0.7,
            dev: 0.2,
            test: 0.2,
        };
        assert!(split(numbered(10), bad, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let a = split(numbered(57), SplitRatios::default(), 9).unwrap();
        let b = split(numbered(57), SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = split(numbered(57), SplitRatios::default(), 10).unwrap();
        assert_ne!(a, c);
        let mut all: Vec<String> = a.train.iter().chain(&a.dev).chain(&a.test).map(|e| e.text.clone()).collect();
        all.sort();
        let mut orig: Vec<String> = numbered(57).into_iter().map(|e| e.text).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    fn write_domain(root: &Path, name: &str, lines: &[String]) {
        let d = root.join(name);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("all.jsonl"), lines.join("\n")).unwrap();
    }

    fn records(n: usize) -> Vec<String> {
        (0..n).map(|i| format!(r#"{{"text": "review {i}", "label": {}}}"#, i % 2)).collect()
    }

    #[test]
    fn load_two_domains() {
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "kitchen", &records(10));
        write_domain(dir.path(), "books", &records(10));
        let splits = load_dataset(dir.path(), SplitRatios::default(), 3).unwrap();
        assert_eq!(splits.len(), 2);
        assert_eq!(splits[0].domain, "books");
        assert_eq!(splits[1].domain_id, 1);
        assert_eq!(splits.iter().map(|s| s.len()).sum::<usize>(), 20);
        let table = format_summary(&summarize(&splits));
        assert!(table.contains("total"));
    }

    #[test]
    fn loader_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = records(4);
        lines[2] = r#"{"text": "x", "label": 3}"#.into();
        write_domain(dir.path(), "books", &lines);
        match load_dataset(dir.path(), SplitRatios::default(), 3) {
            Err(Error::Record { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
        lines[2] = "{not json".into();
        write_domain(dir.path(), "books", &lines);
        assert!(matches!(
            load_dataset(dir.path(), SplitRatios::default(), 3),
            Err(Error::Record { line: 3, .. })
        ));
    }

    #[test]
    fn duplicate_domain_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "Books", &records(5));
        write_domain(dir.path(), "books", &records(5));
        assert!(matches!(
            load_dataset(dir.path(), SplitRatios::default(), 3),
            Err(Error::DuplicateDomain(_))
        ));
    }

    #[test]
    fn save_then_load_round_trips() {
        let data = generate_synthetic(&SyntheticSpec {
            examples_per_domain: 30,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data.splits).unwrap();
        let back = load_dataset(dir.path(), SplitRatios::default(), 99).unwrap();
        assert_eq!(back, data.splits);
    }

    #[test]
    fn batch_shapes_and_orders() {
        let items: Vec<usize> = (0..20).collect();
        let sizes: Vec<usize> = batches(&items, 8, true, 1).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![8, 8, 4]);
        let plain: Vec<usize> = batches(&items, 8, false, 1).flatten().copied().collect();
        assert_eq!(plain, items);
        let e1: Vec<usize> = batches(&items, 8, true, 1).flatten().copied().collect();
        let e2: Vec<usize> = batches(&items, 8, true, 2).flatten().copied().collect();
        assert_ne!(e1, e2);
        let (mut s1, mut s2) = (e1.clone(), e2.clone());
        s1.sort();
        s2.sort();
        assert_eq!(s1, s2);
        assert_eq!(e1, batches(&items, 8, true, 1).flatten().copied().collect::<Vec<_>>());
    }

    #[test]
    fn planted_words_are_in_the_sentiment_lexicon() {
        let lex = LexiconConstraints::bundled();
        for w in POSITIVE_WORDS.iter().chain(&NEGATIVE_WORDS) {
            assert!(lex.sentiment.contains(*w), "{w}");
        }
    }

    #[test]
    fn synthetic_structure() {
        let spec = SyntheticSpec {
            markers_per_sentence: 1,
            examples_per_domain: 100,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let lex = LexiconConstraints::bundled();
        for s in &data.splits {
            for e in s.train.iter().chain(&s.dev).chain(&s.test) {
                let roles = word_roles(&e.text, &data.roles);
                assert!(roles.iter().all(|(_, r)| r.is_some()));
                let markers: Vec<&String> = roles
                    .iter()
                    .filter(|(_, r)| *r == Some(TokenRole::Marker))
                    .map(|(w, _)| w)
                    .collect();
                assert_eq!(markers.len(), 1);
                assert_eq!(data.roles.marker_domain[markers[0]], e.domain_id);
                let sent: Vec<&String> = roles
                    .iter()
                    .filter(|(_, r)| *r == Some(TokenRole::Sentiment))
                    .map(|(w, _)| w)
                    .collect();
                assert_eq!(sent.len(), 1);
                assert_eq!(data.roles.polarity[sent[0]], e.sentiment);
                let n = roles.len();
                assert!((spec.min_len..=spec.max_len).contains(&n));
            }
        }
        for (w, r) in &data.roles.roles {
            if *r != TokenRole::Sentiment {
                assert!(!lex.contains(w), "{w}");
            }
        }
        assert_eq!(data.roles.words(TokenRole::Marker).len(), 3 * 20);
        assert_eq!(data.roles.words(TokenRole::Filler).len(), 150);
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let spec = SyntheticSpec {
            examples_per_domain: 20,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(generate_synthetic(&other).unwrap(), generate_synthetic(&SyntheticSpec {
            examples_per_domain: 20,
            ..SyntheticSpec::default()
        })
        .unwrap());
        assert!(generate_synthetic(&SyntheticSpec {
            min_len: 2,
            ..SyntheticSpec::default()
        })
        .is_err());
    }

    /// Counting oracle: add-one smoothed per-domain word frequencies.
    struct CountingClassifier {
        counts: HashMap<String, Vec<usize>>,
        m: usize,
    }

    impl CountingClassifier {
        fn fit(examples: &[&Example], m: usize) -> Self {
            let mut counts: HashMap<String, Vec<usize>> = HashMap::new();
            for e in examples {
                for w in split_words(&e.text) {
                    counts.entry(w).or_insert_with(|| vec![0; m])[e.domain_id] += 1;
                }
            }
            CountingClassifier { counts, m }
        }

        fn predict(&self, text: &str) -> usize {
            let totals: Vec<usize> = (0..self.m).map(|d| self.counts.values().map(|c| c[d]).sum()).collect();
            let v = self.counts.len() as f64;
            let score = |d: usize| -> f64 {
                split_words(text)
                    .iter()
                    .map(|w| {
                        let c = self.counts.get(w).map_or(0, |c| c[d]);
                        ((c as f64 + 1.0) / (totals[d] as f64 + v)).ln()
                    })
                    .sum()
            };
            (0..self.m)
                .max_by(|&a, &b| score(a).total_cmp(&score(b)))
                .unwrap()
        }
    }

    fn oracle_accuracy(data: &SyntheticData, strip_markers: bool) -> f64 {
        let strip = |e: &Example| -> Example {
            let mut e = e.clone();
            if strip_markers {
                e.text = split_words(&e.text)
                    .into_iter()
                    .filter(|w| data.roles.role(w) != Some(TokenRole::Marker))
                    .collect::<Vec<_>>()
                    .join(" ");
            }
            e
        };
        let train: Vec<Example> = data.splits.iter().flat_map(|s| s.train.iter().map(strip)).collect();
        let refs: Vec<&Example> = train.iter().collect();
        let clf = CountingClassifier::fit(&refs, data.splits.len());
        let test: Vec<Example> = data.splits.iter().flat_map(|s| s.test.iter().map(strip)).collect();
        let correct = test.iter().filter(|e| clf.predict(&e.text) == e.domain_id).count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn counting_oracle_separates_domains_only_through_markers() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(oracle_accuracy(&data, false), 1.0);
        let stripped = oracle_accuracy(&data, true);
        assert!((stripped - 1.0 / 3.0).abs() <= 0.05, "{stripped}");
    }
}
