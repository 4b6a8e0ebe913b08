//! `attrsparse`: train the toy model, attribute, sweep activation ratios and
//! run the inter-layer error diagnostics.
//!
//! Exit codes: 0 success, 1 unknown command, bad flag or runtime failure,
//! 2 malformed configuration (file or values), 3 missing input file.
//! Failures print one line to stderr:
//! `error: code=<n> kind=<kind> msg="<message>"`.

mod settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrsparse_core::corpus::{self, QaItem};
use attrsparse_core::diagnostics::{self, Conservation, SignConsistency};
use attrsparse_core::eval::{self, SweepConfig, DEFAULT_MAX_NEW};
use attrsparse_core::model::{self, Activation, BlockLayout, TrainOptions};
use attrsparse_core::{
    attribution, GroupRef, Metric, ModelConfig, PlanMode, Scope, ToyModel, UnitKind, UnitNetwork,
};
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use settings::Settings;

/// Default output directory when neither `--out` nor the config sets one.
const OUT_ENV: &str = "SPACT_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingInput(String),
    #[error(transparent)]
    Core(#[from] attrsparse_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Core(attrsparse_core::Error::Invalid(_) | attrsparse_core::Error::UnknownMetric(_)) => 2,
            CliError::Usage(_) | CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Core(attrsparse_core::Error::Invalid(_)) => "invalid_argument",
            CliError::Core(attrsparse_core::Error::UnknownMetric(_)) => "unknown_metric",
            CliError::Core(_) => "runtime",
            CliError::Io { .. } => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "attrsparse", version, about = "Attribution-guided sparse activation for a toy transformer")]
struct Cli {
    /// Config file of `key=value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write `model.bin`.
    Train(Flags),
    /// Write fully activated reference answers to `references.jsonl`.
    Generate(Flags),
    /// Attribution report for one question.
    Attribute(Flags),
    /// BLEU against references over metrics and activation ratios.
    Sweep(Flags),
    /// Inter-layer error, bound and score-change diagnostics.
    Diagnose(Flags),
    /// Per-token deactivation map for one question.
    Maskmap(Flags),
}

#[derive(Debug, Args, Default)]
struct Flags {
    /// Checkpoint to load (the bundled model when omitted).
    #[arg(long)]
    checkpoint: Option<String>,
    /// JSONL items (the bundled split when omitted).
    #[arg(long)]
    data: Option<String>,
    /// Output directory (default: $SPACT_OUT_DIR, else `runs`).
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    loss_threshold: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    n_layers: Option<String>,
    #[arg(long)]
    n_heads: Option<String>,
    #[arg(long)]
    d_ff: Option<String>,
    #[arg(long)]
    max_seq_len: Option<String>,
    /// `gelu` or `relu`.
    #[arg(long)]
    activation: Option<String>,
    /// `parallel` or `sequential`.
    #[arg(long)]
    block_layout: Option<String>,
    #[arg(long)]
    use_bias: Option<String>,
    /// Metric name; repeat or comma-separate for several.
    #[arg(long)]
    metric: Vec<String>,
    /// Activation ratio in (0, 1]; repeat or comma-separate for several.
    #[arg(long)]
    ar: Vec<String>,
    /// `all`, `mlp_only` or `attention_only`.
    #[arg(long)]
    scope: Option<String>,
    /// `per_layer_ratio`, `uniform_threshold` or `iterative`.
    #[arg(long)]
    mode: Option<String>,
    /// Integrated-gradients interpolation steps.
    #[arg(long)]
    ig_n: Option<String>,
    /// Monte Carlo samples for the error distribution.
    #[arg(long)]
    samples: Option<String>,
    /// Number of prompts used by the diagnostics.
    #[arg(long)]
    prompts: Option<String>,
    /// Use only the first N items.
    #[arg(long)]
    limit: Option<String>,
    #[arg(long)]
    question: Option<String>,
    #[arg(long)]
    max_new: Option<String>,
}

impl Flags {
    fn apply(self, s: &mut Settings) {
        let single = [
            ("checkpoint", self.checkpoint),
            ("data", self.data),
            ("out", self.out),
            ("seed", self.seed),
            ("steps", self.steps),
            ("lr", self.lr),
            ("batch_size", self.batch_size),
            ("warmup", self.warmup),
            ("weight_decay", self.weight_decay),
            ("loss_threshold", self.loss_threshold),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("activation", self.activation),
            ("block_layout", self.block_layout),
            ("use_bias", self.use_bias),
            ("scope", self.scope),
            ("mode", self.mode),
            ("ig_n", self.ig_n),
            ("samples", self.samples),
            ("prompts", self.prompts),
            ("limit", self.limit),
            ("question", self.question),
            ("max_new", self.max_new),
        ];
        for (k, v) in single {
            if let Some(v) = v {
                s.set(k, vec![v]);
            }
        }
        if !self.metric.is_empty() {
            s.set("metric", self.metric);
        }
        if !self.ar.is_empty() {
            s.set("ar", self.ar);
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    eprintln!("error: code={} kind={} msg=\"{msg}\"", e.code(), e.kind());
    ExitCode::from(e.code())
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = match &cli.config {
        Some(p) => Settings::parse_file(p)?,
        None => Settings::default(),
    };
    let (name, flags) = match cli.command {
        Command::Train(f) => ("train", f),
        Command::Generate(f) => ("generate", f),
        Command::Attribute(f) => ("attribute", f),
        Command::Sweep(f) => ("sweep", f),
        Command::Diagnose(f) => ("diagnose", f),
        Command::Maskmap(f) => ("maskmap", f),
    };
    flags.apply(&mut settings);
    let out = out_dir(&settings)?;
    write(&out.join("config.txt"), settings.to_config_text().as_bytes())?;
    match name {
        "train" => train(&settings, &out),
        "generate" => generate(&settings, &out),
        "attribute" => attribute(&settings, &out),
        "sweep" => sweep(&settings, &out),
        "diagnose" => diagnose(&settings, &out),
        _ => maskmap(&settings, &out),
    }
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir = match s.raw("out") {
        Some(d) => PathBuf::from(d),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn existing(path: &str, what: &str) -> Result<PathBuf> {
    let p = PathBuf::from(path);
    if !p.is_file() {
        return Err(CliError::MissingInput(format!("{what} {path} not found")));
    }
    Ok(p)
}

fn load_model(s: &Settings) -> Result<ToyModel> {
    Ok(match s.raw("checkpoint") {
        Some(p) => model::load_checkpoint(&existing(p, "checkpoint")?)?,
        None => model::bundled_model()?,
    })
}

/// Items from `data`, else the bundled benchmark (or training) split.
fn load_items(s: &Settings, training: bool) -> Result<Vec<QaItem>> {
    let mut items = match s.raw("data") {
        Some(p) => corpus::load_jsonl(&existing(p, "data file")?)?,
        None => {
            let (train, bench) = corpus::bundled_split();
            if training {
                train
            } else {
                bench
            }
        }
    };
    if let Some(n) = s.get::<usize>("limit")? {
        items.truncate(n);
    }
    if items.is_empty() {
        return Err(CliError::Config("no items to process".into()));
    }
    Ok(items)
}

fn metrics(s: &Settings, default: &[Metric]) -> Result<Vec<Metric>> {
    let m: Vec<Metric> = s.list("metric")?;
    Ok(if m.is_empty() { default.to_vec() } else { m })
}

fn ars(s: &Settings, default: &[f64]) -> Result<Vec<f64>> {
    let a: Vec<f64> = s.list("ar")?;
    Ok(if a.is_empty() { default.to_vec() } else { a })
}

fn train(s: &Settings, out: &Path) -> Result<()> {
    let d = ModelConfig::default();
    let config = ModelConfig {
        d_model: s.get_or("d_model", d.d_model)?,
        n_layers: s.get_or("n_layers", d.n_layers)?,
        n_heads: s.get_or("n_heads", d.n_heads)?,
        d_ff: s.get_or("d_ff", d.d_ff)?,
        max_seq_len: s.get_or("max_seq_len", d.max_seq_len)?,
        activation: s.get_or::<Activation>("activation", d.activation)?,
        block_layout: s.get_or::<BlockLayout>("block_layout", d.block_layout)?,
        use_bias: s.get_or("use_bias", d.use_bias)?,
        seed: s.get_or("seed", d.seed)?,
        ..d
    };
    let t = TrainOptions::default();
    let opts = TrainOptions {
        steps: s.get_or("steps", t.steps)?,
        lr: s.get_or("lr", t.lr)?,
        batch_size: s.get_or("batch_size", t.batch_size)?,
        warmup: s.get_or("warmup", t.warmup)?,
        weight_decay: s.get_or("weight_decay", t.weight_decay)?,
        loss_threshold: s.get_or("loss_threshold", t.loss_threshold)?,
        ..t
    };
    let items = load_items(s, true)?;
    let seqs = corpus::to_sequences(&items)?;
    let (model, report) = model::train_toy(config, &seqs, &opts)?;
    model::save_checkpoint(&model, &out.join("model.bin"))?;
    let json = serde_json::to_string_pretty(&report).map_err(attrsparse_core::Error::from)?;
    write(&out.join("train_report.json"), json.as_bytes())?;
    println!(
        "trained {} steps, held-out loss {:.4} (threshold {}, converged {})",
        report.steps, report.heldout_loss, report.loss_threshold, report.converged
    );
    println!("wrote {}", out.join("model.bin").display());
    Ok(())
}

fn generate(s: &Settings, out: &Path) -> Result<()> {
    let model = load_model(s)?;
    let mut items = load_items(s, false)?;
    let max_new = s.get_or("max_new", DEFAULT_MAX_NEW)?;
    eval::generate_references(&model, &mut items, max_new)?;
    let path = out.join("references.jsonl");
    corpus::save_jsonl(&path, &items)?;
    let mut stdout = std::io::stdout().lock();
    for item in &items {
        let _ = writeln!(
            stdout,
            "{}\t{}",
            item.question,
            item.reference_output.as_deref().unwrap_or_default()
        );
    }
    Ok(())
}

fn attribute(s: &Settings, out: &Path) -> Result<()> {
    let model = load_model(s)?;
    let question = s
        .raw("question")
        .ok_or_else(|| CliError::Config("attribute needs a question".into()))?;
    let metric = *metrics(s, &[Metric::CorrectedGxo])?.first().expect("non-empty");
    let tokens = attrsparse_core::tokenizer::encode(&attrsparse_core::tokenizer::prompt_text(question))?;
    let opts = attribution::AttributeOptions {
        ig_steps: s.get_or("ig_n", attribution::DEFAULT_IG_STEPS)?,
        ..Default::default()
    };
    let report = attribution::attribute_metric(&model, &tokens, metric, &opts)?;
    write(&out.join("attribution.json"), report.to_json()?.as_bytes())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("in-memory write");
    write(&out.join("attribution.csv"), &csv)?;
    println!(
        "objective {:.6} for token {:?}; wrote attribution.json and attribution.csv",
        report.objective_value,
        attrsparse_core::tokenizer::decode(&[report.target_token])
    );
    Ok(())
}

fn sweep(s: &Settings, out: &Path) -> Result<()> {
    let model = load_model(s)?;
    let mut items = load_items(s, false)?;
    let max_new = s.get_or("max_new", DEFAULT_MAX_NEW)?;
    if items.iter().any(|i| i.reference_output.is_none()) {
        eval::generate_references(&model, &mut items, max_new)?;
        corpus::save_jsonl(&out.join("references.jsonl"), &items)?;
    }
    let d = SweepConfig::default();
    let config = SweepConfig {
        metrics: metrics(s, &d.metrics)?,
        ars: ars(s, &d.ars)?,
        scope: s.get_or::<Scope>("scope", d.scope)?,
        mode: s.get_or::<PlanMode>("mode", d.mode)?,
        ig_steps: s.get_or("ig_n", d.ig_steps)?,
        max_new,
    };
    let rows = eval::sweep(&model, &items, &config)?;
    let mut csv = Vec::new();
    eval::write_sweep_csv(&rows, &mut csv).expect("in-memory write");
    write(&out.join("sweep.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&rows).map_err(attrsparse_core::Error::from)?;
    write(&out.join("sweep.json"), json.as_bytes())?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn diagnose(s: &Settings, out: &Path) -> Result<()> {
    let model = load_model(s)?;
    let items = load_items(s, false)?;
    let n_prompts = s.get_or("prompts", 20usize)?.min(items.len()).max(1);
    let prompts = items[..n_prompts]
        .iter()
        .map(QaItem::prompt_tokens)
        .collect::<attrsparse_core::Result<Vec<_>>>()?;
    let samples = s.get_or("samples", 1000usize)?;
    let seed = s.get_or("seed", 0u64)?;
    let metric = *metrics(s, &[Metric::Gxo])?.first().expect("non-empty");
    let grid = ars(s, &[0.2, 0.4, 0.6, 0.8])?;

    let dist = diagnostics::error_distribution(&model, &prompts, samples, seed, metric)?;
    let mut buf = Vec::new();
    diagnostics::write_error_samples_csv(&dist.samples, &mut buf).expect("in-memory write");
    write(&out.join("error_samples.csv"), &buf)?;

    let layout = model.layout();
    let mut conservation: Vec<Conservation> = Vec::new();
    for tokens in &prompts {
        let report = attribution::attribute(&model, tokens, Metric::Gxo)?;
        for l in 0..layout.n_layers().saturating_sub(1) {
            for kind in UnitKind::ALL {
                conservation.push(diagnostics::conservation_from_report(
                    &report,
                    GroupRef::new(l, kind),
                    GroupRef::new(l + 1, kind),
                )?);
            }
        }
    }
    buf.clear();
    diagnostics::write_conservation_csv(&conservation, &mut buf).expect("in-memory write");
    write(&out.join("conservation.csv"), &buf)?;

    let signs = grid
        .iter()
        .map(|&ar| diagnostics::sign_consistency(&model, &prompts, ar))
        .collect::<attrsparse_core::Result<Vec<SignConsistency>>>()?;
    buf.clear();
    diagnostics::write_sign_consistency_csv(&signs, &mut buf).expect("in-memory write");
    write(&out.join("sign_consistency.csv"), &buf)?;

    let changes = diagnostics::score_change_vs_ar(&model, &prompts, &grid, metric)?;
    buf.clear();
    diagnostics::write_score_change_csv(&changes, &mut buf).expect("in-memory write");
    write(&out.join("score_change_vs_ar.csv"), &buf)?;

    let summary = serde_json::json!({
        "samples": dist.samples.len(),
        "histogram": dist.histogram,
        "mean_error": dist.mean,
        "half_upper_mean": dist.half_upper_mean,
        "normalized_mean": dist.normalized_mean,
        "truncated_normal": dist.fit,
        "degenerate": dist.degenerate,
        "lower_bound_rate": dist.lower_ok as f64 / dist.samples.len() as f64,
        "linearized_bound_rate": dist.linearized_ok as f64 / dist.samples.len() as f64,
        "empirical_bound_rate": dist.empirical_ok as f64 / dist.samples.len() as f64,
    });
    let json = serde_json::to_string_pretty(&summary).map_err(attrsparse_core::Error::from)?;
    write(&out.join("histogram.json"), json.as_bytes())?;
    println!(
        "{} samples: mean error {:.6}, half upper bound {:.6}, empirical bound rate {:.3}",
        dist.samples.len(),
        dist.mean,
        dist.half_upper_mean,
        dist.empirical_ok as f64 / dist.samples.len() as f64
    );
    Ok(())
}

fn maskmap(s: &Settings, out: &Path) -> Result<()> {
    let model = load_model(s)?;
    let question = s
        .raw("question")
        .ok_or_else(|| CliError::Config("maskmap needs a question".into()))?;
    let metric = *metrics(s, &[Metric::CorrectedGxo])?.first().expect("non-empty");
    let ar = *ars(s, &[0.5])?.first().expect("non-empty");
    let scope = s.get_or::<Scope>("scope", Scope::All)?;
    let max_new = s.get_or("max_new", DEFAULT_MAX_NEW)?;
    let map = eval::mask_map(&model, question, metric, ar, scope, max_new)?;
    write(&out.join("maskmap.pgm"), map.to_pgm().as_bytes())?;
    let json = serde_json::to_string_pretty(&map).map_err(attrsparse_core::Error::from)?;
    write(&out.join("maskmap.json"), json.as_bytes())?;
    println!("{}", map.tokens.concat());
    Ok(())
}
