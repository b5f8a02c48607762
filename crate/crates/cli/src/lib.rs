//! Experiment runner for the `amcl` binary: `train`, `eval` and `compare`.
//!
//! Every command writes plain CSV under its output directory. Nothing in the
//! outputs depends on wall-clock time, so equal configurations give equal bytes.

pub mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use amcl_core::autodiff::set_threads;
use amcl_core::checkpoint::{load_checkpoint, save_checkpoint};
use amcl_core::data::{DatasetSpec, LabeledDataset};
use amcl_core::eval::{fmt_f, purity_flow, write_ce_split, write_ood_scores, write_purity_flow, write_text, MetricReport};
use amcl_core::objective::SpecializationMatrix;
use amcl_core::trainer::{train_with, EnsembleState, TrainLog};
use amcl_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

pub use config::{parse_reports, ExperimentConfig, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.amcl";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const PURITY_FILE: &str = "purity_flow.csv";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Parser, Debug)]
#[command(name = "amcl", version, about = "Train and evaluate multiple choice learning ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one ensemble and write its checkpoint, log and summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metric reports.
    Eval(EvalArgs),
    /// Train several methods under identical settings and tabulate their errors.
    Compare(CompareArgs),
}

/// Experiment settings. Flags override values read from `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct ExperimentArgs {
    /// File of key=value lines, as written to config.txt by `train`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ie, smcl, cmcl or amcl.
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset spec, e.g. `blobs:classes=4,per_class=200,dim=2,sep=3,seed=1`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Held-out dataset spec for the summary metrics.
    #[arg(long)]
    pub test_dataset: Option<String>,
    #[arg(long)]
    pub members: Option<usize>,
    /// Members assigned per example (K).
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Last epoch of loss-based assignment.
    #[arg(long)]
    pub t_tau: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, module or share.
    #[arg(long)]
    pub fusion: Option<String>,
    /// simple_cnn or mlp.
    #[arg(long)]
    pub arch: Option<String>,
    /// MLP hidden widths as `A,B`.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub residual_scale: Option<f64>,
    #[arg(long)]
    pub p_share: Option<f64>,
    #[arg(long)]
    pub reduction: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let overrides = [
            ("method", self.method.clone()),
            ("dataset", self.dataset.clone()),
            ("test_dataset", self.test_dataset.clone()),
            ("members", text(&self.members)),
            ("overlap", text(&self.overlap)),
            ("beta", text(&self.beta)),
            ("gamma", text(&self.gamma)),
            ("t_tau", text(&self.t_tau)),
            ("epochs", text(&self.epochs)),
            ("batch_size", text(&self.batch_size)),
            ("seed", text(&self.seed)),
            ("fusion", self.fusion.clone()),
            ("arch", self.arch.clone()),
            ("hidden", self.hidden.clone()),
            ("lr", text(&self.lr)),
            ("momentum", text(&self.momentum)),
            ("weight_decay", text(&self.weight_decay)),
            ("residual_scale", text(&self.residual_scale)),
            ("p_share", text(&self.p_share)),
            ("reduction", text(&self.reduction)),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, v) in overrides {
            if let Some(v) = v {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled test dataset spec.
    #[arg(long)]
    pub dataset: String,
    /// Unseen data; writes ood_scores.csv. Needs an auxiliary-class model.
    #[arg(long)]
    pub ood_dataset: Option<String>,
    /// Optional reports: histograms, ce_split, purity (comma-separated).
    #[arg(long, default_value = "")]
    pub reports: String,
    /// Training log for the purity report. Defaults to the one beside the checkpoint.
    #[arg(long)]
    pub train_log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct CompareArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Methods to train, comma-separated.
    #[arg(long, default_value = "ie,smcl,cmcl,amcl")]
    pub methods: String,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Csv(_) => EXIT_PARTIAL,
        _ => EXIT_USAGE,
    }
}

fn finish<T>(result: Result<T>) -> i32 {
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `argv` (program name first) and runs the chosen command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    finish(args.experiment.resolve().and_then(|cfg| run_train(&cfg)))
}

pub fn cmd_eval(args: &EvalArgs) -> i32 {
    finish(EvalOptions::from_args(args).and_then(|opts| run_eval(&opts)))
}

pub fn cmd_compare(args: &CompareArgs) -> i32 {
    let run = args.experiment.resolve().and_then(|cfg| {
        let methods: Vec<String> =
            args.methods.split(',').map(str::trim).filter(|m| !m.is_empty()).map(String::from).collect();
        run_compare(&cfg, &methods)
    });
    match run {
        Ok(rows) if rows.iter().all(|r| r.error.is_none()) => EXIT_OK,
        Ok(_) => EXIT_PARTIAL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Caps worker threads from `AMCL_THREADS`, defaulting to the member count.
pub fn configure_threads(members: usize) {
    let n = match std::env::var("AMCL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                log::warn!("ignoring AMCL_THREADS={v}; expected a positive integer");
                members
            }
        },
        Err(_) => members,
    };
    set_threads(n);
}

fn load_dataset(spec: &DatasetSpec, what: &str) -> Result<LabeledDataset> {
    let ds = spec.load()?;
    log::info!("{what}: {} examples, {} classes ({spec})", ds.len(), ds.num_classes);
    Ok(ds)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Renders `w` as class rows of member bits, e.g. `10|01`.
pub fn specialization_string(w: &SpecializationMatrix) -> String {
    (0..w.num_classes())
        .map(|c| w.row(c).iter().map(|&f| if f { '1' } else { '0' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: EnsembleState,
    pub log: TrainLog,
    pub train_report: MetricReport,
    pub test_report: Option<MetricReport>,
}

/// Trains one ensemble and writes checkpoint, train log, purity flow, summary
/// and the resolved configuration into `cfg.out`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.train.validate(&amcl_core::objective::ObjectiveRegistry::with_builtin())?;
    let train_ds = load_dataset(&cfg.dataset, "train")?;
    let test_ds = cfg.test_dataset.as_ref().map(|s| load_dataset(s, "test")).transpose()?;
    configure_threads(cfg.train.members);
    create_dir(&cfg.out)?;

    let registry = amcl_core::objective::ObjectiveRegistry::with_builtin();
    let (state, log) = train_with(&train_ds, &cfg.train, &registry, |_, r| {
        log::info!(
            "epoch {} [{}] loss {:.4} oracle {:.2}% top-1 {:.2}%",
            r.epoch,
            r.phase.as_str(),
            r.loss,
            r.oracle_error,
            r.top1_error
        );
        Ok(())
    })?;

    let train_report = MetricReport::compute(&state.predict(&train_ds.inputs)?, &train_ds.labels)?;
    let test_report = match &test_ds {
        Some(ds) => {
            check_classes(&state, ds)?;
            Some(MetricReport::compute(&state.predict(&ds.inputs)?, &ds.labels)?)
        }
        None => None,
    };

    save_checkpoint(&state, &cfg.out.join(CHECKPOINT_FILE))?;
    log.write_csv(&cfg.out.join(TRAIN_LOG_FILE))?;
    write_purity_flow(&cfg.out.join(PURITY_FILE), &purity_flow(&log.snapshots()))?;
    cfg.save(&cfg.out.join(CONFIG_FILE))?;

    let mut rows: Vec<(String, String)> = vec![
        ("method".into(), cfg.train.method.clone()),
        ("members".into(), cfg.train.members.to_string()),
        ("overlap".into(), cfg.train.penalty.k.to_string()),
        ("epochs".into(), cfg.train.epochs.to_string()),
        ("seed".into(), cfg.train.seed.to_string()),
        ("train_examples".into(), train_ds.len().to_string()),
        ("dataset_checksum".into(), format!("{:016x}", train_ds.checksum())),
        ("final_loss".into(), fmt_f(log.last().map_or(f64::NAN, |r| r.loss))),
        ("frozen".into(), state.specialization().is_some().to_string()),
        ("specialization".into(), state.specialization().map(specialization_string).unwrap_or_default()),
    ];
    push_report(&mut rows, "train", &train_report);
    if let Some(r) = &test_report {
        push_report(&mut rows, "test", r);
    }
    write_pairs(&cfg.out.join(SUMMARY_FILE), &rows)?;
    println!(
        "{}: train oracle {:.2}% top-1 {:.2}%{}",
        cfg.train.method,
        train_report.oracle_error,
        train_report.top1_error,
        test_report
            .as_ref()
            .map(|r| format!(", test oracle {:.2}% top-1 {:.2}%", r.oracle_error, r.top1_error))
            .unwrap_or_default()
    );
    Ok(TrainOutcome { state, log, train_report, test_report })
}

fn push_report(rows: &mut Vec<(String, String)>, prefix: &str, r: &MetricReport) {
    rows.push((format!("{prefix}_oracle_error"), fmt_f(r.oracle_error)));
    rows.push((format!("{prefix}_top1_error"), fmt_f(r.top1_error)));
    for (m, e) in r.member_errors.iter().enumerate() {
        rows.push((format!("{prefix}_member{m}_error"), fmt_f(*e)));
    }
}

fn write_pairs(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}

fn check_classes(state: &EnsembleState, ds: &LabeledDataset) -> Result<()> {
    if ds.num_classes != state.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            ds.num_classes,
            state.num_classes()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub dataset: DatasetSpec,
    pub ood_dataset: Option<DatasetSpec>,
    pub reports: BTreeSet<Report>,
    pub train_log: Option<PathBuf>,
    pub out: PathBuf,
}

impl EvalOptions {
    pub fn from_args(a: &EvalArgs) -> Result<Self> {
        Ok(Self {
            checkpoint: a.checkpoint.clone(),
            dataset: a.dataset.parse()?,
            ood_dataset: a.ood_dataset.as_deref().map(str::parse).transpose()?,
            reports: parse_reports(&a.reports)?,
            train_log: a.train_log.clone(),
            out: a.out.clone(),
        })
    }
}

/// Writes `errors.csv` and `summary.txt`, plus each selected report.
pub fn run_eval(opts: &EvalOptions) -> Result<MetricReport> {
    let state = load_checkpoint(&opts.checkpoint)?;
    configure_threads(state.members.len());
    if opts.reports.contains(&Report::CeSplit) && state.specialization().is_none() {
        return Err(Error::Config(format!(
            "ce_split needs a frozen specialization; this {} model has none",
            state.method
        )));
    }
    if opts.ood_dataset.is_some() && !state.auxiliary() {
        return Err(Error::Config(format!(
            "OOD scores need an auxiliary-class model; this one was trained with {}",
            state.method
        )));
    }
    let train_log = opts
        .train_log
        .clone()
        .unwrap_or_else(|| opts.checkpoint.parent().unwrap_or(Path::new(".")).join(TRAIN_LOG_FILE));
    if opts.reports.contains(&Report::Purity) && !train_log.is_file() {
        return Err(Error::Config(format!("purity report needs a training log; {} not found", train_log.display())));
    }

    let ds = load_dataset(&opts.dataset, "eval")?;
    check_classes(&state, &ds)?;
    create_dir(&opts.out)?;
    let preds = state.predict(&ds.inputs)?;
    let report = MetricReport::compute(&preds, &ds.labels)?;
    report.write_errors_csv(&opts.out.join("errors.csv"))?;
    write_text(&opts.out.join("summary.txt"), &report.summary())?;

    if opts.reports.contains(&Report::Histograms) {
        report.write_histograms(&opts.out)?;
    }
    if opts.reports.contains(&Report::CeSplit) {
        write_ce_split(&opts.out.join("ce_split.csv"), &preds.cross_entropy_split(&ds.labels, state.specialization())?)?;
    }
    if opts.reports.contains(&Report::Purity) {
        write_purity_flow(&opts.out.join(PURITY_FILE), &purity_flow(&TrainLog::read_snapshots(&train_log)?))?;
    }
    if let Some(spec) = &opts.ood_dataset {
        let ood = load_dataset(spec, "ood")?;
        write_ood_scores(&opts.out.join("ood_scores.csv"), &state.predict(&ood.inputs)?.ood_scores()?)?;
    }
    print!("{}", report.summary());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub oracle_error: f64,
    pub top1_error: f64,
    pub error: Option<String>,
}

impl CompareRow {
    /// Harmonic mean of the oracle and top-1 errors; zero when both are zero.
    pub fn harmonic_mean(&self) -> f64 {
        let (a, b) = (self.oracle_error, self.top1_error);
        if a + b == 0.0 {
            0.0
        } else {
            2.0 * a * b / (a + b)
        }
    }
}

/// Trains every method in turn on the same data and seed and writes
/// `compare.csv`. Failed methods keep a row marked `failed`.
pub fn run_compare(cfg: &ExperimentConfig, methods: &[String]) -> Result<Vec<CompareRow>> {
    if methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    let train_ds = load_dataset(&cfg.dataset, "train")?;
    let test_ds = match &cfg.test_dataset {
        Some(s) => load_dataset(s, "test")?,
        None => train_ds.clone(),
    };
    configure_threads(cfg.train.members);
    create_dir(&cfg.out)?;
    let registry = amcl_core::objective::ObjectiveRegistry::with_builtin();

    let mut rows = Vec::new();
    for method in methods {
        let mut train_cfg = cfg.train.clone();
        train_cfg.method = method.clone();
        let result = train_with(&train_ds, &train_cfg, &registry, |_, _| Ok(())).and_then(|(state, _)| {
            check_classes(&state, &test_ds)?;
            let preds = state.predict(&test_ds.inputs)?;
            Ok((preds.oracle_error(&test_ds.labels)?, preds.top1_error(&test_ds.labels)?))
        });
        let row = match result {
            Ok((oracle, top1)) => CompareRow { method: method.clone(), oracle_error: oracle, top1_error: top1, error: None },
            Err(e) => {
                eprintln!("{method} failed: {e}");
                CompareRow { method: method.clone(), oracle_error: f64::NAN, top1_error: f64::NAN, error: Some(e.to_string()) }
            }
        };
        log::info!("{method}: oracle {:.2}% top-1 {:.2}%", row.oracle_error, row.top1_error);
        rows.push(row);
    }

    let mut w = csv::Writer::from_path(cfg.out.join(COMPARE_FILE))?;
    w.write_record(["method", "oracle", "top1", "harmonic_mean", "status"])?;
    for r in &rows {
        match &r.error {
            None => w.write_record([
                r.method.clone(),
                fmt_f(r.oracle_error),
                fmt_f(r.top1_error),
                fmt_f(r.harmonic_mean()),
                "ok".into(),
            ])?,
            Some(e) => w.write_record([r.method.as_str(), "", "", "", &format!("failed: {e}")])?,
        }
    }
    w.flush()?;
    for r in &rows {
        println!("{:>6}  oracle {:>7.2}%  top-1 {:>7.2}%", r.method, r.oracle_error, r.top1_error);
    }
    Ok(rows)
}
