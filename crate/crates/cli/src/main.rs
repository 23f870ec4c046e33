use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use moorelens::analysis::{hahn_decay, saturation_probe, write_decay_csv, write_probe_csv, ProbeFamily};
use moorelens::automata::{MooreMachine, Word};
use moorelens::data::{length_band, Dataset, DatasetSpec, Sampling};
use moorelens::experiment::{
    analyze_model, default_starting_examples, run, transformer_for, write_json, write_train_log, AnalysisOptions,
    ExperimentConfig, SetSize,
};
use moorelens::extraction::{agreement, extract, ExtractionConfig};
use moorelens::languages::{target_machine, LanguageSpec, TaskKind};
use moorelens::metrics::evaluate;
use moorelens::net::{load_checkpoint, save_checkpoint, train, Checkpoint, Hyper, Model, ModelConfig, ModelMeta};
use moorelens::seeds::derive;
use moorelens::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_TIMEOUT: u8 = 4;

#[derive(Parser)]
#[command(name = "moorelens", version, about = "Train transformers on regular languages and extract Moore machines from them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled dataset as JSON Lines.
    GenData(GenDataArgs),
    /// Train a transformer on a generated dataset.
    Train(TrainArgs),
    /// Score a trained model on a dataset.
    Evaluate(EvaluateArgs),
    /// Extract a Moore machine from a trained model.
    Extract(ExtractArgs),
    /// Write activation-geometry reports for a model and machine.
    Analyze(AnalyzeArgs),
    /// Run saturation probes or the single-flip decay measurement.
    Probe(ProbeArgs),
    /// Run the full pipeline for several seeds.
    Run(RunArgs),
    /// Convert a machine file to DOT and canonical JSON.
    Export(ExportArgs),
}

#[derive(Args)]
struct TargetArgs {
    /// Language: ones, first, dyck:N, grid:N, mod:N, parity.
    #[arg(long)]
    lang: Option<LanguageSpec>,
    /// Task: state, char or membership.
    #[arg(long)]
    task: Option<TaskKind>,
}

/// Either `MIN:MAX` or a single `N`, meaning `N:N+4`.
fn parse_band(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad length {t:?}: {e}"));
    match s.split_once(':') {
        Some((a, b)) => {
            let band = (parse(a)?, parse(b)?);
            if band.0 > band.1 {
                return Err(format!("band {s} is empty"));
            }
            Ok(band)
        }
        None => Ok(length_band(parse(s)?)),
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Exact sequence length.
    #[arg(long, default_value_t = 32, conflicts_with = "len_band")]
    len: usize,
    /// Length range `MIN:MAX`, or `N` for `N:N+4`.
    #[arg(long, value_parser = parse_band)]
    len_band: Option<(usize, usize)>,
    #[arg(long, default_value = "uniform")]
    sampling: Sampling,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HyperArgs {
    /// JSON file with training hyperparameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Root seed; initialisation and shuffling use derived streams.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Score sequence accuracy with the strict rule.
    #[arg(long)]
    strict_sequence_accuracy: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    /// JSON file with extraction settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split_depth: Option<usize>,
    /// Seconds per learning run.
    #[arg(long)]
    time_limit: Option<f64>,
    /// Comma-separated starting words; `-` is the empty word.
    #[arg(long)]
    starting_examples: Option<String>,
    /// Machine JSON to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Extraction statistics (and agreement, if requested) as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Measure agreement on this band (`MIN:MAX` or `N`).
    #[arg(long, value_parser = parse_band)]
    agreement_band: Option<(usize, usize)>,
    #[arg(long, default_value_t = 1000)]
    agreement_count: usize,
    /// Exit with status 4 if extraction hit its time limit.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Machine whose states are analysed; defaults to the target machine.
    #[arg(long)]
    machine: Option<PathBuf>,
    #[command(flatten)]
    target: TargetArgs,
    /// Output directory.
    #[arg(long)]
    report: PathBuf,
    /// Search m-directions on the unit sphere instead of radius √d.
    #[arg(long)]
    unit_sphere: bool,
    #[arg(long, default_value_t = 100)]
    suffix_max_len: usize,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    /// Probe families, comma-separated (zero-then-ones, zeros-then-one,
    /// alternating, all-zeros, all-ones).
    #[arg(long, value_delimiter = ',', default_value = "zero-then-ones")]
    family: Vec<ProbeFamily>,
    #[arg(long, value_delimiter = ',', default_value = "50,500,2000")]
    lengths: Vec<usize>,
    /// Measure single-flip activation deltas instead of probing.
    #[arg(long)]
    hahn: bool,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    bases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    sampling: Option<Sampling>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Training length range (`MIN:MAX` or `N`); default exact length 32.
    #[arg(long, value_parser = parse_band)]
    len_band: Option<(usize, usize)>,
    #[arg(long)]
    no_analysis: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 4 if any extraction hit its time limit.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    machine: PathBuf,
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Canonical JSON re-serialisation.
    #[arg(long)]
    json: Option<PathBuf>,
}

struct Outcome(u8);

const OK: Outcome = Outcome(0);

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
        .into()
    })
}

fn read_machine(path: &Path) -> anyhow::Result<MooreMachine> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    MooreMachine::from_json_str(&text).map_err(|e| {
        let message = match e {
            Error::Json(e) => e.to_string(),
            other => other.to_string(),
        };
        Error::Parse {
            path: path.to_path_buf(),
            message,
        }
        .into()
    })
}

/// Language and task from flags, falling back to the checkpoint's metadata.
fn resolve_target(args: &TargetArgs, meta: &ModelMeta) -> anyhow::Result<(LanguageSpec, TaskKind)> {
    let language = args.lang.or(meta.language);
    let task = args.task.or(meta.task);
    match (language, task) {
        (Some(l), Some(t)) => Ok((l, t)),
        _ => Err(Error::InvalidArgument("language and task are needed (pass --lang and --task)".into()).into()),
    }
}

fn load_model(path: &Path, target: &TargetArgs) -> anyhow::Result<(Checkpoint, LanguageSpec, TaskKind)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (l, t) = resolve_target(target, &ckpt.meta)?;
    Ok((ckpt, l, t))
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<Outcome> {
    let (Some(language), Some(task)) = (args.target.lang, args.target.task) else {
        return Err(Error::InvalidArgument("gen-data needs --lang and --task".into()).into());
    };
    let (min_len, max_len) = args.len_band.unwrap_or((args.len, args.len));
    let spec = DatasetSpec {
        language,
        task,
        count: args.count,
        min_len,
        max_len,
        sampling: args.sampling,
        seed: args.seed,
    };
    let data = Dataset::generate(&spec)?;
    data.save(&args.out)?;
    info!("wrote {} examples to {}", data.examples.len(), args.out.display());
    Ok(OK)
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<Outcome> {
    let train_set = Dataset::load(&args.train)?;
    let val_set = Dataset::load(&args.val)?;
    let (language, task) = (train_set.spec.language, train_set.spec.task);
    if (val_set.spec.language, val_set.spec.task) != (language, task) {
        bail!(Error::InvalidArgument("training and validation sets describe different tasks".into()));
    }
    let mut hyper: Hyper = match &args.hyper.config {
        Some(p) => read_json(p)?,
        None => Hyper::default(),
    };
    let h = &args.hyper;
    hyper.lr = h.lr.unwrap_or(hyper.lr);
    hyper.batch_size = h.batch_size.unwrap_or(hyper.batch_size);
    hyper.patience = h.patience.unwrap_or(hyper.patience);
    hyper.max_epochs = h.max_epochs.unwrap_or(hyper.max_epochs);
    let root = h.seed.unwrap_or(hyper.seed);
    hyper.seed = derive(root, "shuffle");
    let model = Model::<f32>::init(ModelConfig::for_task(language, task)?, derive(root, "init"))?;
    let mut log = Vec::new();
    let result = train(model, &train_set.examples, &val_set.examples, &hyper, |r| {
        if r.epoch % 10 == 0 {
            info!("epoch {}: train {:.5} val {:.5}", r.epoch, r.train_loss, r.val_loss);
        }
        log.push(r.clone());
    });
    if let Some(p) = &args.log {
        write_train_log(p, &log)?;
    }
    let result = result?;
    let meta = ModelMeta {
        language: Some(language),
        task: Some(task),
        seed: Some(root),
    };
    save_checkpoint(&args.out, &result.model, &meta)?;
    info!("best epoch {} (validation loss {:.6})", result.best_epoch, result.best_val_loss);
    Ok(OK)
}

fn evaluate_cmd(args: EvaluateArgs) -> anyhow::Result<Outcome> {
    let (ckpt, language, task) = load_model(&args.model, &args.target)?;
    let model = transformer_for(ckpt.model, language, task)?;
    let data = Dataset::load(&args.data)?;
    let preds = model.model().predict_examples(&data.examples)?;
    let dfa = language.target_dfa()?;
    let name = args.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = evaluate(
        &name,
        task,
        model.model().config().n_outputs,
        &preds,
        &data.examples,
        Some(&dfa),
        args.strict_sequence_accuracy,
    )?;
    match &args.report {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(OK)
}

fn parse_words(text: &str, alphabet: &moorelens::automata::Alphabet) -> anyhow::Result<Vec<Word>> {
    text.split(',')
        .map(|w| match w.trim() {
            "-" | "" => Ok(Vec::new()),
            w => Ok(alphabet.parse_word(w)?),
        })
        .collect()
}

fn extract_cmd(args: ExtractArgs) -> anyhow::Result<Outcome> {
    let (ckpt, language, task) = load_model(&args.model, &args.target)?;
    let model = transformer_for(ckpt.model, language, task)?;
    let target = target_machine(language, task)?;
    let mut config: ExtractionConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ExtractionConfig::default(),
    };
    config.initial_split_depth = args.split_depth.unwrap_or(config.initial_split_depth);
    config.time_limit = args.time_limit.unwrap_or(config.time_limit);
    if let Some(text) = &args.starting_examples {
        config.starting_examples = Some(parse_words(text, target.alphabet())?);
    }
    if config.starting_examples.is_none() {
        config.starting_examples = Some(default_starting_examples(&target));
    }
    let ex = extract(&model, &config)?;
    fs::write(&args.out, ex.machine.to_json_string())?;
    if let Some(p) = &args.dot {
        fs::write(p, ex.machine.to_dot())?;
    }
    let mut stats = serde_json::to_value(&ex.stats)?;
    if let Some(band) = args.agreement_band {
        let a = agreement(&ex.machine, &model, task, band, args.agreement_count, derive(0, "agreement"))?;
        stats["agreement"] = serde_json::json!({ "band": band, "f1": a });
    }
    match &args.stats {
        Some(p) => write_json(p, &stats)?,
        None => println!("{}", serde_json::to_string_pretty(&stats)?),
    }
    info!("extracted {} states", ex.machine.num_states());
    if args.strict && ex.stats.timed_out {
        return Ok(Outcome(EXIT_TIMEOUT));
    }
    Ok(OK)
}

fn analyze_cmd(args: AnalyzeArgs) -> anyhow::Result<Outcome> {
    let (ckpt, language, task) = load_model(&args.model, &args.target)?;
    let model = transformer_for(ckpt.model, language, task)?;
    let target = target_machine(language, task)?;
    let machine = match &args.machine {
        Some(p) => read_machine(p)?,
        None => target.clone(),
    };
    let options = AnalysisOptions {
        unit_sphere: args.unit_sphere,
        suffix_max_len: args.suffix_max_len,
        beam_width: args.beam_width,
        ..Default::default()
    };
    let summary = analyze_model(&model, &machine, &target, &options, args.seed, &args.report)?;
    write_json(&args.report.join("summary.json"), &summary)?;
    Ok(OK)
}

fn probe_cmd(args: ProbeArgs) -> anyhow::Result<Outcome> {
    let (ckpt, language, task) = load_model(&args.model, &args.target)?;
    let model = transformer_for(ckpt.model, language, task)?;
    if args.hahn {
        let report = hahn_decay(&model, &args.grid, args.bases, args.seed)?;
        write_decay_csv(&args.out, &report)?;
        println!("log-log slope of median delta: {:.4}", report.slope_median);
        return Ok(OK);
    }
    let target = target_machine(language, task)?;
    let mut curves = Vec::new();
    for family in &args.family {
        curves.extend(saturation_probe(&model, &target, *family, &args.lengths)?);
    }
    write_probe_csv(&args.out, &curves)?;
    for c in &curves {
        match c.failure_position {
            Some(p) => println!("{} n={}: first failure at position {p}", c.family, c.n),
            None => println!("{} n={}: no failure", c.family, c.n),
        }
    }
    Ok(OK)
}

fn run_cmd(args: RunArgs) -> anyhow::Result<Outcome> {
    let mut config = match &args.config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => {
            let (Some(l), Some(t)) = (args.target.lang, args.target.task) else {
                return Err(Error::InvalidArgument("run needs --config or both --lang and --task".into()).into());
            };
            ExperimentConfig::new(l, t)
        }
    };
    config.language = args.target.lang.unwrap_or(config.language);
    config.task = args.target.task.unwrap_or(config.task);
    config.sampling = args.sampling.unwrap_or(config.sampling);
    config.seeds = args.seeds.clone().unwrap_or(config.seeds);
    config.jobs = args.jobs.unwrap_or(config.jobs);
    config.hyper.max_epochs = args.max_epochs.unwrap_or(config.hyper.max_epochs);
    config.hyper.patience = args.patience.unwrap_or(config.hyper.patience);
    if let Some((min_len, max_len)) = args.len_band {
        config.train = SetSize {
            min_len,
            max_len,
            ..config.train
        };
    }
    if args.no_analysis {
        config.analysis.enabled = false;
    }
    let summary = run(&config, &args.out)?;
    for s in &summary.seeds {
        match &s.failed_stage {
            Some(stage) => println!("seed {}: {stage} failed: {}", s.seed, s.error.as_deref().unwrap_or("")),
            None => println!(
                "seed {}: train F1 {:.4}, {} extracted states",
                s.seed,
                s.train_f1.unwrap_or(f64::NAN),
                s.extracted_states.unwrap_or(0)
            ),
        }
    }
    if summary.any_diverged() {
        return Ok(Outcome(EXIT_DIVERGED));
    }
    if args.strict && summary.any_timed_out() {
        return Ok(Outcome(EXIT_TIMEOUT));
    }
    Ok(OK)
}

fn export_cmd(args: ExportArgs) -> anyhow::Result<Outcome> {
    let machine = read_machine(&args.machine)?;
    if args.dot.is_none() && args.json.is_none() {
        print!("{}", machine.to_dot());
    }
    if let Some(p) = &args.dot {
        fs::write(p, machine.to_dot())?;
    }
    if let Some(p) = &args.json {
        fs::write(p, machine.to_json_string())?;
    }
    Ok(OK)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_) | Error::Parse { .. } | Error::Json(_) | Error::Generation(_)) => EXIT_CONFIG,
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Extract(a) => extract_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Export(a) => export_cmd(a),
    };
    match result {
        Ok(Outcome(code)) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
