//! Command-line front end. [`run`] parses arguments, dispatches to the
//! library and maps failures to exit codes: 2 for usage errors, 1 for
//! runtime errors (reported as one JSON line on stderr).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    domain_probe_splits, mask_records, mask_stats_from_records, rank_words, render_word_chart_svg, role_mask_rates,
    visualize_masks, write_json, write_jsonl, write_mask_stats_csv, write_probe_csv, write_rankings_csv, ProbeConfig,
    ProbeVariant, Scope,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic, load_dataset, save_dataset, summarize, DomainSplit, Example, Part, RoleMap, SplitRatios,
    SyntheticSpec,
};
use crate::error::{io_at, Error, Result};
use crate::masking::LexiconConstraints;
use crate::model::MaskerModel;
use crate::train::{build_vocab, evaluate, train, MetricEvent, Protocol, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const DATA_DIR: &str = "data";
pub const REPORTS_DIR: &str = "reports";
pub const ROLES_FILE: &str = "roles.json";

#[derive(Debug, Parser)]
#[command(name = "tokenmask", version, about = "Shared-private token masking for multi-domain sentiment classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary file from the training parts of a dataset.
    VocabBuild(VocabBuildArgs),
    /// Generate a planted-token synthetic dataset.
    SynthGen(SynthGenArgs),
    /// Train in the multi-domain setting (or as configured by `mode`).
    Train(TrainArgs),
    /// Evaluate a run's checkpoint on its data snapshot.
    Eval(EvalArgs),
    /// Train in the cross-domain setting; requires `target`.
    CrossTrain(TrainArgs),
    /// Mask statistics and masked-word rankings.
    AnalyzeMasks(AnalyzeArgs),
    /// Domain-classification probe on original and masked texts.
    ProbeDomains(ProbeArgs),
    /// Per-sentence mask records and SVG renderings.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct VocabBuildArgs {
    /// Dataset root (one directory per domain).
    #[arg(long)]
    pub data: PathBuf,
    /// Output vocabulary file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    /// Seed for splitting domains that only provide all.jsonl.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthGenArgs {
    /// Output dataset root.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// [default: 3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domains: Option<usize>,
    /// [default: 600]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub examples_per_domain: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub markers_per_domain: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentiment_per_polarity: Option<usize>,
    /// [default: 150]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fillers: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    /// [default: 20]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub markers_per_sentence: Option<usize>,
    /// [default: 0]
    #[arg(long, value_parser = seed_parser())]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn seed_parser() -> clap::builder::RangedU64ValueParser<u64> {
    clap::value_parser!(u64).range(..=i64::MAX as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Reference hyper-parameters.
    Reference,
    /// Small model and short schedule for CPU runs on synthetic data.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    MultiDomain,
    CrossDomain,
}

/// One optional flag per training configuration key.
#[derive(Debug, Default, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainKeys {
    /// Learning rate [default: 0.0003]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Examples per update [default: 8]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// [default: 15]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Weight of the adversarial shared-path domain loss [default: 0.002]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_ds: Option<f64>,
    /// Weight of the private-path domain loss [default: 0.002]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_dp: Option<f64>,
    /// Weight of the main sentiment loss [default: 0.4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Weight of the shared-only sentiment loss [default: 0.3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_ss: Option<f64>,
    /// Weight of the private-only sentiment loss [default: 0.3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_sp: Option<f64>,
    /// L2 coefficient [default: 0.00001]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_reg: Option<f64>,
    /// Steps of domain-loss-only training [default: 2000]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase1_steps: Option<usize>,
    /// Steps of sentiment-loss-only training after phase 1 [default: 3000]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase2_steps: Option<usize>,
    /// Global gradient-norm clip [default: 5.0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Maximum sequence length including specials [default: 128]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    /// Root seed, at most 2^63 - 1 so that it fits a TOML integer [default: 0]
    #[arg(long, value_parser = seed_parser())]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Protocol [default: multi-domain]
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeArg>,
    /// Held-out target domain (cross-domain only)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Domain descriptor size [default: 200]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descriptor_dim: Option<usize>,
    /// Encoder width [default: 64]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Encoder layers [default: 2]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 128]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff: Option<usize>,
    /// Encoder dropout [default: 0.1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    /// Gumbel-Softmax temperature [default: 1.0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Token scorer hidden size [default: 256]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_hidden: Option<usize>,
    /// Domain probe hidden size [default: 256]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_hidden: Option<usize>,
    /// Minimum word frequency for the vocabulary [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_freq: Option<usize>,
    /// Ablation: drop the shared representation [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_shared_part: Option<bool>,
    /// Ablation: drop the private representation [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_private_part: Option<bool>,
    /// Ablation: no shared-path masking [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_shared_mask: Option<bool>,
    /// Ablation: no private-path masking [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_private_mask: Option<bool>,
    /// Ablation: allow masking sentiment words [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_sentiment_constraint: Option<bool>,
    /// Ablation: allow masking stop words [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_stopword_constraint: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (one directory per domain).
    #[arg(long)]
    pub data: PathBuf,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name [default: <timestamp>-seed<seed>]
    #[arg(long)]
    pub run_id: Option<String>,
    /// TOML file with configuration keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values for keys set neither by flag nor by file.
    #[arg(long, value_enum, default_value = "reference")]
    pub preset: Preset,
    /// Directory with stopwords.txt, sentiment.txt, negation.txt and
    /// intensifier.txt [default: bundled lists]
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
    /// Resolve the configuration, write the run directory skeleton and stop.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub keys: TrainKeys,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by train or cross-train.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub part: Part,
    /// Dataset root [default: the run's data snapshot]
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Model and data location shared by the analysis commands. `--run` fills
/// in the others from a run directory.
#[derive(Debug, Args)]
pub struct Source {
    /// Run directory; supplies checkpoint, data and output defaults.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: <run>/reports]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub part: Part,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    All,
    PerDomain,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: Source,
    /// Length of each ranked word list.
    #[arg(long, short, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "all")]
    pub scope: ScopeArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Original,
    Masked,
    MaskedWordsOnly,
    All,
}

impl VariantArg {
    fn variants(self) -> Vec<ProbeVariant> {
        match self {
            VariantArg::Original => vec![ProbeVariant::Original],
            VariantArg::Masked => vec![ProbeVariant::Masked],
            VariantArg::MaskedWordsOnly => vec![ProbeVariant::MaskedWordsOnly],
            VariantArg::All => ProbeVariant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum, default_value = "all")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub source: Source,
    /// Maximum number of examples to render.
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
    /// Only render examples of this domain.
    #[arg(long)]
    pub domain: Option<String>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = check_usage(&cli) {
        let _ = e.print();
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "kind": e.kind() }));
            1
        }
    }
}

/// Argument requirements clap cannot express declaratively.
fn check_usage(cli: &Cli) -> std::result::Result<(), clap::Error> {
    let missing = |sub: &str, msg: String| {
        let mut cmd = Cli::command();
        let sub = cmd.find_subcommand_mut(sub).expect("subcommand exists").clone();
        let bin = format!("tokenmask {}", sub.get_name());
        Err(sub.bin_name(bin).error(ErrorKind::MissingRequiredArgument, msg))
    };
    let needs_model = |s: &Source| s.checkpoint.is_none() && s.run.is_none();
    let needs_data = |s: &Source| s.data.is_none() && s.run.is_none();
    match &cli.command {
        Command::ProbeDomains(a) => {
            if a.variant != VariantArg::Original && needs_model(&a.source) {
                return missing(
                    "probe-domains",
                    "the following required arguments were not provided:\n  --checkpoint <CHECKPOINT> (needed by masked variants; or pass --run)".into(),
                );
            }
            if needs_data(&a.source) {
                return missing("probe-domains", "the following required arguments were not provided:\n  --data <DATA> (or --run)".into());
            }
        }
        Command::AnalyzeMasks(AnalyzeArgs { source, .. }) | Command::Visualize(VisualizeArgs { source, .. }) => {
            let name = if matches!(cli.command, Command::AnalyzeMasks(_)) { "analyze-masks" } else { "visualize" };
            if needs_model(source) {
                return missing(name, "the following required arguments were not provided:\n  --checkpoint <CHECKPOINT> (or --run)".into());
            }
            if needs_data(source) {
                return missing(name, "the following required arguments were not provided:\n  --data <DATA> (or --run)".into());
            }
        }
        _ => {}
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::VocabBuild(a) => vocab_build(a),
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train_cmd(a, false),
        Command::CrossTrain(a) => train_cmd(a, true),
        Command::Eval(a) => eval_cmd(a),
        Command::AnalyzeMasks(a) => analyze_cmd(a),
        Command::ProbeDomains(a) => probe_cmd(a),
        Command::Visualize(a) => visualize_cmd(a),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn read_toml_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Layers `base`, then the keys of `file`, then `flags` and deserializes
/// the result, rejecting unknown keys.
pub fn layer_config<T, F>(base: &T, file: Option<&Path>, flags: &F) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: Serialize,
{
    let mut table = toml::Table::try_from(base).map_err(config_err)?;
    if let Some(path) = file {
        table.extend(read_toml_table(path)?);
    }
    table.extend(toml::Table::try_from(flags).map_err(config_err)?);
    table.try_into().map_err(config_err)
}

/// Resolves a training configuration: flag > config file > preset.
pub fn resolve_train_config(preset: Preset, file: Option<&Path>, keys: &TrainKeys) -> Result<TrainConfig> {
    let base = match preset {
        Preset::Reference => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
    };
    layer_config(&base, file, keys)
}

fn lexicons_from(dir: Option<&Path>) -> Result<LexiconConstraints> {
    match dir {
        None => Ok(LexiconConstraints::bundled()),
        Some(d) => LexiconConstraints::load(
            &d.join("stopwords.txt"),
            &d.join("sentiment.txt"),
            &d.join("negation.txt"),
            &d.join("intensifier.txt"),
        ),
    }
}

fn vocab_build(a: VocabBuildArgs) -> Result<()> {
    let splits = load_dataset(&a.data, SplitRatios::default(), a.seed)?;
    let vocab = build_vocab(&splits, a.min_freq)?;
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    vocab.save(&a.out)?;
    print_json(&json!({ "vocab": a.out, "tokens": vocab.len() }));
    Ok(())
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let spec: SyntheticSpec = layer_config(&SyntheticSpec::default(), a.config.as_deref(), &a)?;
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    save_dataset(&a.out, &data.splits)?;
    write_json(&a.out.join(ROLES_FILE), &data.roles)?;
    fs::write(a.out.join("synthetic.toml"), toml::to_string(&spec).map_err(config_err)?)?;
    print_json(&json!({ "out": a.out, "splits": summarize(&data.splits) }));
    Ok(())
}

fn run_id(seed: u64) -> String {
    let stamp = humantime::format_rfc3339_seconds(SystemTime::now()).to_string();
    let compact: String = stamp.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    format!("{compact}-seed{seed}")
}

fn create_run_dir(out: &Path, id: Option<&str>, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let base = id.map_or_else(|| run_id(seed), str::to_string);
    let mut dir = out.join(&base);
    let mut n = 1;
    while dir.exists() {
        if id.is_some() {
            return Err(Error::InvalidArgument(format!("run directory {} already exists", dir.display())));
        }
        dir = out.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(dir.join(REPORTS_DIR))?;
    Ok(dir)
}

fn train_cmd(a: TrainArgs, cross: bool) -> Result<()> {
    let mut config = resolve_train_config(a.preset, a.config.as_deref(), &a.keys)?;
    if cross {
        config.mode = Protocol::CrossDomain;
        if config.target.is_none() {
            return Err(Error::Config("cross-train needs `target`".into()));
        }
    }
    config.validate()?;
    let lexicons = lexicons_from(a.lexicons.as_deref())?;
    let splits = load_dataset(&a.data, SplitRatios::default(), config.seed)?;

    let dir = create_run_dir(&a.out, a.run_id.as_deref(), config.seed)?;
    fs::write(dir.join(CONFIG_FILE), toml::to_string(&config).map_err(config_err)?)?;
    save_dataset(&dir.join(DATA_DIR), &splits)?;
    let roles = a.data.join(ROLES_FILE);
    if roles.is_file() {
        fs::copy(&roles, dir.join(DATA_DIR).join(ROLES_FILE))?;
    }
    if a.dry_run {
        print_json(&json!({ "run_dir": dir, "config": config }));
        return Ok(());
    }

    let mut metrics = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    let outcome = train(&config, &splits, lexicons, &mut |event| {
        serde_json::to_writer(&mut metrics, event)?;
        metrics.write_all(b"\n")?;
        if let MetricEvent::Eval { epoch, report, .. } = event {
            log::info!("epoch {epoch}: dev macro {:.4}", report.macro_avg);
        }
        Ok(())
    })?;
    metrics.flush()?;
    drop(metrics);

    save_checkpoint(&outcome.model, &config, &dir.join(CHECKPOINT_FILE))?;
    outcome.model.vocab.save(&dir.join(VOCAB_FILE))?;
    write_json(&dir.join(REPORTS_DIR).join("dev.json"), &outcome.best_dev)?;
    write_json(&dir.join(REPORTS_DIR).join("test.json"), &outcome.test)?;
    print_json(&json!({
        "run_dir": dir,
        "best_epoch": outcome.best_epoch,
        "steps": outcome.steps,
        "dev_macro": outcome.best_dev.macro_avg,
        "test_macro": outcome.test.macro_avg,
    }));
    Ok(())
}

/// Checks that dataset domain names and ids line up with the model's.
fn check_domains(model: &MaskerModel, splits: &[DomainSplit]) -> Result<()> {
    for s in splits {
        if model.config.domains.get(s.domain_id) != Some(&s.domain) {
            return Err(Error::ConfigMismatch {
                field: "domains",
                expected: format!("{:?}", model.config.domains),
                found: format!("`{}` at position {}", s.domain, s.domain_id),
            });
        }
    }
    Ok(())
}

/// Domain ids the final test evaluation covers.
fn test_domains(config: &TrainConfig, model: &MaskerModel) -> Result<Option<Vec<usize>>> {
    match (config.mode, &config.target) {
        (Protocol::CrossDomain, Some(t)) => {
            let id = model
                .domain_id(t)
                .ok_or_else(|| Error::InvalidArgument(format!("target `{t}` is not a model domain")))?;
            Ok(Some(vec![id]))
        }
        _ => Ok(None),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.run.join(CHECKPOINT_FILE))?;
    let data = a.data.unwrap_or_else(|| a.run.join(DATA_DIR));
    let splits = load_dataset(&data, SplitRatios::default(), ck.train.seed)?;
    check_domains(&ck.model, &splits)?;
    // Dev selection in cross-domain runs only looks at source domains.
    let domains = match (a.part, test_domains(&ck.train, &ck.model)?) {
        (Part::Test, d) => d,
        (_, Some(target)) => Some((0..ck.model.num_domains()).filter(|d| !target.contains(d)).collect()),
        (_, None) => None,
    };
    let report = evaluate(&ck.model, &splits, a.part, domains.as_deref())?;
    let reports = a.run.join(REPORTS_DIR);
    fs::create_dir_all(&reports)?;
    write_json(&reports.join(format!("eval-{}.json", a.part.name())), &report)?;
    print_json(&serde_json::to_value(&report)?);
    Ok(())
}

struct Loaded {
    model: Option<MaskerModel>,
    splits: Vec<DomainSplit>,
    roles: Option<RoleMap>,
    out: PathBuf,
}

fn load_source(s: &Source, need_model: bool) -> Result<Loaded> {
    let checkpoint = s.checkpoint.clone().or_else(|| s.run.as_ref().map(|r| r.join(CHECKPOINT_FILE)));
    let ck = match checkpoint {
        Some(p) if need_model || s.checkpoint.is_some() => Some(load_checkpoint(&p)?),
        _ => None,
    };
    let data = s
        .data
        .clone()
        .or_else(|| s.run.as_ref().map(|r| r.join(DATA_DIR)))
        .ok_or_else(|| Error::InvalidArgument("no dataset given".into()))?;
    let seed = ck.as_ref().map_or(0, |c| c.train.seed);
    let splits = load_dataset(&data, SplitRatios::default(), seed)?;
    if let Some(c) = &ck {
        check_domains(&c.model, &splits)?;
    }
    let roles_path = data.join(ROLES_FILE);
    let roles = if roles_path.is_file() {
        Some(serde_json::from_str(&fs::read_to_string(&roles_path)?)?)
    } else {
        None
    };
    let out = s
        .out
        .clone()
        .or_else(|| s.run.as_ref().map(|r| r.join(REPORTS_DIR)))
        .unwrap_or_else(|| PathBuf::from(REPORTS_DIR));
    fs::create_dir_all(&out)?;
    Ok(Loaded {
        model: ck.map(|c| c.model),
        splits,
        roles,
        out,
    })
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<()> {
    let l = load_source(&a.source, true)?;
    let model = l.model.as_ref().expect("model required");
    let records = mask_records(model, &l.splits, a.source.part)?;
    let stats = mask_stats_from_records(&records);
    let scope = match a.scope {
        ScopeArg::All => Scope::All,
        ScopeArg::PerDomain => Scope::PerDomain,
    };
    let rankings = rank_words(&records, a.k, scope)?;
    write_jsonl(&l.out.join("mask_records.jsonl"), &records)?;
    write_mask_stats_csv(&l.out.join("mask_stats.csv"), &stats)?;
    write_json(&l.out.join("mask_stats.json"), &stats)?;
    write_rankings_csv(&l.out.join("top_words.csv"), &rankings)?;
    write_json(&l.out.join("top_words.json"), &rankings)?;
    for r in &rankings {
        let scope = r.domain.as_deref().unwrap_or("all");
        for (list, words) in [("private-masked", &r.masked), ("shared-kept", &r.kept)] {
            let svg = render_word_chart_svg(&format!("{scope}: {list} words"), words);
            fs::write(l.out.join(format!("words-{scope}-{list}.svg")), svg)?;
        }
    }
    let roles = l.roles.as_ref().map(|r| role_mask_rates(&records, r));
    if let Some(rates) = &roles {
        write_json(&l.out.join("role_rates.json"), rates)?;
    }
    print_json(&json!({ "out": l.out, "stats": stats, "role_rates": roles }));
    Ok(())
}

fn probe_cmd(a: ProbeArgs) -> Result<()> {
    let variants = a.variant.variants();
    let needs_model = variants.iter().any(|v| *v != ProbeVariant::Original);
    let l = load_source(&a.source, needs_model)?;
    let config = ProbeConfig {
        seed: a.seed,
        epochs: a.epochs,
        lr: a.lr,
        hidden: a.hidden,
        ..ProbeConfig::default()
    };
    let mut results = Vec::new();
    for v in variants {
        let r = domain_probe_splits(v, l.model.as_ref(), &l.splits, &config)?;
        write_json(&l.out.join(format!("confusion-{}.json", v.name())), &r)?;
        results.push(r);
    }
    write_probe_csv(&l.out.join("probe.csv"), &results)?;
    let summary: Vec<_> = results
        .iter()
        .map(|r| json!({ "variant": r.variant.name(), "accuracy": r.accuracy }))
        .collect();
    print_json(&json!({ "out": l.out, "probe": summary }));
    Ok(())
}

fn visualize_cmd(a: VisualizeArgs) -> Result<()> {
    let l = load_source(&a.source, true)?;
    let model = l.model.as_ref().expect("model required");
    let examples: Vec<Example> = l
        .splits
        .iter()
        .filter(|s| a.domain.as_ref().is_none_or(|d| *d == s.domain))
        .flat_map(|s| s.part(a.source.part).iter().cloned())
        .take(a.limit)
        .collect();
    let dir = l.out.join("visualize");
    let records = visualize_masks(model, &examples, &dir)?;
    print_json(&json!({ "out": dir, "records": records.len() }));
    Ok(())
}
