mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dualconf::artifact::AlignmentMode;
use dualconf::collect::{load_questions, CollectionFailure};
use dualconf::features::FeatureSet;
use dualconf::metrics::DEFAULT_BINS;
use dualconf::parsing::{LabelAlphabet, PromptTemplate};
use dualconf::pipeline::{evaluate, evaluate_grouped, select_split};
use dualconf::records::{load_records, save_records, ConfidenceRecord, LoadOptions, SplitTag};
use dualconf::report::{to_pretty_json, write_document};
use dualconf::{
    collect, fit_pipeline, generate_synthetic, CalibratorArtifact, Channel, Error, ErrorClass, EvaluationDocument,
    HttpTransport, Result, SyntheticConfig,
};

use config::{set, FileConfig};

#[derive(Parser)]
#[command(name = "dualconf", version, about = "Calibrate dual-channel model confidence")]
struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic records with known calibration behaviour
    Synth(SynthArgs),
    /// Query a chat-completions endpoint and write records
    Collect(CollectArgs),
    /// Fit a calibrator on records and save the artifact
    Fit(FitArgs),
    /// Compute metrics for one confidence channel
    Evaluate(EvaluateArgs),
    /// Write metrics.json and plot-ready CSVs from an evaluation
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Neutral,
    Calibrated,
    Overconfident,
}

#[derive(Args)]
struct SynthArgs {
    /// Output records JSONL
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    token_shift: Option<f64>,
    #[arg(long)]
    token_scale: Option<f64>,
    #[arg(long)]
    token_noise: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    verbal_shift: Option<f64>,
    #[arg(long)]
    verbal_scale: Option<f64>,
    #[arg(long)]
    verbal_noise: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alphabet {
    Numeric,
    Letters,
}

impl From<Alphabet> for LabelAlphabet {
    fn from(a: Alphabet) -> Self {
        match a {
            Alphabet::Numeric => LabelAlphabet::Numeric,
            Alphabet::Letters => LabelAlphabet::Letters,
        }
    }
}

#[derive(Args)]
struct CollectArgs {
    /// Questions JSONL
    #[arg(long)]
    questions: PathBuf,
    /// Output records JSONL
    #[arg(long)]
    out: PathBuf,
    /// Where to write failed questions (default: <out>.failures.jsonl)
    #[arg(long)]
    failures: Option<PathBuf>,
    /// Prompt template file with {question} and {options} placeholders
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_parallel: Option<usize>,
    /// Per-request timeout in seconds
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    top_logprobs: Option<usize>,
    #[arg(long, value_enum)]
    alphabet: Option<Alphabet>,
    /// Ask for the label and the confidences in separate requests
    #[arg(long)]
    two_pass: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Full,
    TokenOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Validation,
    CrossFit,
}

#[derive(Args)]
struct RecordsArgs {
    /// Records JSONL
    #[arg(long)]
    records: PathBuf,
    /// Skip invalid lines instead of failing
    #[arg(long)]
    lenient: bool,
    /// Label alphabet used when parsing raw verbal text
    #[arg(long, value_enum, default_value = "numeric")]
    alphabet: Alphabet,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: RecordsArgs,
    /// Output artifact JSON
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cal_fraction: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Log-odds clip threshold
    #[arg(long)]
    epsilon: Option<f64>,
    /// Consistency kernel shape
    #[arg(long)]
    gamma: Option<f64>,
    /// Consistency bandwidth grid, comma separated
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    feature_set: Option<Features>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    alignment: Option<Mode>,
    /// Initial bisection half-width M
    #[arg(long)]
    bracket: Option<f64>,
    /// Bisection tolerance
    #[arg(long)]
    eta: Option<f64>,
    /// Free-form timestamp stored in the artifact
    #[arg(long)]
    fitted_at: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Token,
    Verbal,
    Calibrated,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::Token => Channel::Token,
            ChannelArg::Verbal => Channel::Verbal,
            ChannelArg::Calibrated => Channel::Calibrated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Calibration,
    Validation,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Calibration => SplitTag::Calibration,
            SplitArg::Validation => SplitTag::Validation,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    input: RecordsArgs,
    #[arg(long, value_enum)]
    channel: ChannelArg,
    /// Calibrator artifact; required for the calibrated channel and --split
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Restrict to one split of the artifact's assignment
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Also report per value of this meta key
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    /// Output evaluation JSON (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation JSON written by `evaluate`
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Convergence => 3,
        ErrorClass::Transport => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(args) => synth(args, &file),
        Command::Collect(args) => collect_cmd(args, &file),
        Command::Fit(args) => fit(args, &file),
        Command::Evaluate(args) => evaluate_cmd(args, &file),
        Command::Report(args) => report(args),
    }
}

fn synth(args: SynthArgs, file: &FileConfig) -> Result<()> {
    let mut c = match (args.preset, &file.synth) {
        (Some(_), Some(_)) => return Err(Error::Usage("--preset conflicts with a [synth] config section".into())),
        (None, Some(c)) => c.clone(),
        (Some(p), None) => {
            let d = SyntheticConfig::default();
            match p {
                Preset::Neutral => d,
                Preset::Calibrated => SyntheticConfig::calibrated(d.n, d.seed),
                Preset::Overconfident => SyntheticConfig::overconfident(d.n, d.seed),
            }
        }
        (None, None) => SyntheticConfig::default(),
    };
    set(&mut c.n, args.n);
    set(&mut c.k, args.k);
    set(&mut c.seed, args.seed);
    set(&mut c.token_shift, args.token_shift);
    set(&mut c.token_scale, args.token_scale);
    set(&mut c.token_noise, args.token_noise);
    set(&mut c.verbal_shift, args.verbal_shift);
    set(&mut c.verbal_scale, args.verbal_scale);
    set(&mut c.verbal_noise, args.verbal_noise);
    let records = generate_synthetic(&c)?;
    save_records(&records, &args.out)?;
    log::info!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn collect_cmd(args: CollectArgs, file: &FileConfig) -> Result<()> {
    let mut c = file.collect.clone().unwrap_or_default();
    set(&mut c.endpoint, args.endpoint);
    set(&mut c.model, args.model);
    set(&mut c.temperature, args.temperature);
    set(&mut c.max_parallel, args.max_parallel);
    set(&mut c.timeout_secs, args.timeout);
    set(&mut c.retries, args.retries);
    set(&mut c.top_logprobs, args.top_logprobs);
    set(&mut c.alphabet, args.alphabet.map(Into::into));
    c.two_pass |= args.two_pass;
    let template = match &args.template {
        Some(path) => PromptTemplate::from_file(path, c.alphabet)?,
        None => PromptTemplate {
            alphabet: c.alphabet,
            ..PromptTemplate::default()
        },
    };
    let questions = load_questions(&args.questions)?;
    let transport = HttpTransport::new(&c)?;
    let outcome = collect(&questions, &c, &template, &transport)?;
    save_records(&outcome.records, &args.out)?;
    let failures_path = args
        .failures
        .unwrap_or_else(|| PathBuf::from(format!("{}.failures.jsonl", args.out.display())));
    if !outcome.failures.is_empty() {
        write_failures(&outcome.failures, &failures_path)?;
        log::warn!(
            "{} of {} questions failed; see {}",
            outcome.failures.len(),
            questions.len(),
            failures_path.display()
        );
    }
    if outcome.records.is_empty() && !questions.is_empty() {
        return Err(Error::Transport(format!(
            "every question failed; first reason: {}",
            outcome.failures[0].reason
        )));
    }
    Ok(())
}

fn write_failures(failures: &[CollectionFailure], path: &Path) -> Result<()> {
    let mut text = String::new();
    for f in failures {
        let line = serde_json::to_string(f).map_err(|source| Error::Json {
            context: "serializing failure".into(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| Error::io(path, source))
}

fn load(args: &RecordsArgs) -> Result<Vec<ConfidenceRecord>> {
    let options = LoadOptions {
        strict: !args.lenient,
        alphabet: args.alphabet.into(),
    };
    let loaded = load_records(&args.records, &options)?;
    for e in &loaded.skipped {
        log::warn!("skipped: {e}");
    }
    Ok(loaded.records)
}

fn fit(args: FitArgs, file: &FileConfig) -> Result<()> {
    let mut c = file.pipeline();
    set(&mut c.split.calibration, args.cal_fraction);
    set(&mut c.split.validation, args.val_fraction);
    set(&mut c.split.seed, args.split_seed);
    if args.folds.is_some() {
        c.split.folds = args.folds;
    }
    set(&mut c.epsilon, args.epsilon);
    set(&mut c.gamma, args.gamma);
    set(&mut c.tau_grid, args.tau);
    set(
        &mut c.feature_set,
        args.feature_set.map(|f| match f {
            Features::Full => FeatureSet::Full,
            Features::TokenOnly => FeatureSet::TokenOnly,
        }),
    );
    set(&mut c.fit.learning_rate, args.lr);
    set(&mut c.fit.max_iters, args.max_iters);
    set(&mut c.fit.weight_decay, args.weight_decay);
    set(&mut c.fit.patience, args.patience);
    set(
        &mut c.alignment_mode,
        args.alignment.map(|m| match m {
            Mode::Validation => AlignmentMode::Validation,
            Mode::CrossFit => AlignmentMode::CrossFit,
        }),
    );
    set(&mut c.alignment.bracket, args.bracket);
    set(&mut c.alignment.tolerance, args.eta);
    c.fitted_at = args.fitted_at;

    let records = load(&args.input)?;
    let fit = fit_pipeline(&records, &c)?;
    fit.artifact.save(&args.out)?;
    let a = &fit.artifact;
    println!(
        "calibration={} validation={} test={} tau={} delta={:.6} alignment_accuracy={:.6}",
        a.provenance.counts.calibration,
        a.provenance.counts.validation,
        a.provenance.counts.test,
        a.features.tau,
        a.delta,
        a.alignment.accuracy
    );
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs, file: &FileConfig) -> Result<()> {
    let channel: Channel = args.channel.into();
    let bins = args.bins.or(file.evaluate.bins).unwrap_or(DEFAULT_BINS);
    let artifact = args.artifact.as_deref().map(CalibratorArtifact::load).transpose()?;
    if channel == Channel::Calibrated && artifact.is_none() {
        return Err(Error::Usage("the calibrated channel needs --artifact".into()));
    }
    let records = load(&args.input)?;
    let selected: Vec<&ConfidenceRecord> = match args.split {
        Some(split) => {
            let artifact = artifact
                .as_ref()
                .ok_or_else(|| Error::Usage("--split needs --artifact".into()))?;
            select_split(&records, artifact, split.into())?
        }
        None => records.iter().collect(),
    };
    if selected.is_empty() {
        return Err(Error::Usage("no records to evaluate".into()));
    }
    let overall = evaluate(selected.iter().copied(), artifact.as_ref(), channel, bins)?;
    let groups = match &args.group_by {
        Some(key) => evaluate_grouped(selected.iter().copied(), artifact.as_ref(), channel, bins, key)?,
        None => Default::default(),
    };
    let doc = EvaluationDocument {
        channel,
        split: args.split.map(|s| SplitTag::from(s).as_str().to_string()),
        overall,
        group_key: args.group_by,
        groups,
    };
    let text = to_pretty_json(&doc, "serializing evaluation")?;
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::io(path.clone(), source)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Error::io("<stdout>", source)),
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).map_err(|source| Error::io(args.input.clone(), source))?;
    let doc: EvaluationDocument = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: args.input.display().to_string(),
        source,
    })?;
    let files = write_document(&doc, &args.out_dir)?;
    for f in &files {
        log::info!("wrote {}", f.metrics.display());
    }
    Ok(())
}
