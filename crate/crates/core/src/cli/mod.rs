//! `auxbo` command line: `gen`, `train`, `eval-pred`, `optimize`, `report`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure
//! (including unreadable input files), 4 numeric failure.

mod config;
mod report;

pub use config::{BenchmarkSection, DgpSection, EvalSection, RunConfig, SEED_ENV};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::engine::{
    aggregate_runs, evaluate_prediction, run_protocol, train, Acquisition, EngineError, EpochLog, EvalConfig,
    StgpSurrogate, Surrogate, TrainError,
};
use crate::gp::{select_dgp, DeepKernelGp, GpError};
use crate::model::{Checkpoint, CheckpointError, Model, ModelError, ModelKind, Normalizer, Variant};
use crate::tasks::{generate_benchmark, load_tasks, write_benchmark, BenchmarkConfig, Split, TaskDataset, TaskError};

pub const EVAL_HEADER: [&str; 7] = ["surrogate", "context_size", "mse_sum", "nll_mean", "n_tasks", "n_repeats", "seed"];
pub const OPTIMIZE_HEADER: [&str; 9] =
    ["surrogate", "acq", "task_id", "run", "trial", "selected_index", "observed_f", "best_f", "regret"];
pub const REPORT_HEADER: [&str; 5] = ["trial", "surrogate", "mean_norm_best", "mean_regret", "frac_solved"];
pub const TRAIN_LOG_HEADER: [&str; 4] = ["epoch", "train_nll", "val_nll", "best_flag"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(_) => CliError::Numeric(e.to_string()),
            ModelError::Checkpoint(ref c) => match c {
                CheckpointError::ConfigConflict(_) | CheckpointError::KindMismatch { .. } => CliError::Usage(e.to_string()),
                _ => CliError::Io(e.to_string()),
            },
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::Numerics(_) | GpError::AllRestartsFailed(_) | GpError::Step { .. } => CliError::Numeric(e.to_string()),
            GpError::Checkpoint(c) => ModelError::Checkpoint(c).into(),
            GpError::Task(t) => t.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(m) => m.into(),
            EngineError::Gp(g) => g.into(),
            EngineError::Task(t) => t.into(),
            EngineError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Step { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Task(t) => t.into(),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// `out.csv` → `out.config.json`, beside the output.
fn echo_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

#[derive(Parser)]
#[command(name = "auxbo", version, about = "Few-shot surrogates and Bayesian optimization with auxiliary trial feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (train/val/test JSON-lines plus summary).
    Gen(GenArgs),
    /// Train a transformer surrogate or a deep-kernel GP.
    Train(TrainArgs),
    /// Few-shot prediction error on the test split.
    #[command(name = "eval-pred")]
    EvalPred(EvalArgs),
    /// Bayesian-optimization runs on the test split.
    Optimize(OptimizeArgs),
    /// Aggregate optimize tables into a summary table and charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides AUXBO_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for task-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.resolve_seed(self.seed)?;
        if let Some(j) = self.jobs {
            cfg.jobs = j.max(1);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    pool: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "aux")]
    Aux,
    #[value(name = "reward_only")]
    RewardOnly,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Aux => Variant::Aux,
            VariantArg::RewardOnly => Variant::RewardOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SurrogateArg {
    Tnp,
    Dgp,
}

#[derive(Clone, Copy, ValueEnum)]
enum AcqArg {
    Pi,
    Greedy,
}

#[derive(Args)]
struct TrainArgs {
    /// Benchmark directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum, default_value = "tnp")]
    surrogate: SurrogateArg,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SurrogateSource {
    /// Trained checkpoint (transformer or deep-kernel GP).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Single-task GP fitted online; needs no checkpoint.
    #[arg(long)]
    stgp: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SurrogateSource,
    /// Require the checkpoint to hold this variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated context sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    source: SurrogateSource,
    /// Require the checkpoint to hold this variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long, value_enum)]
    acq: Option<AcqArg>,
    /// Only the first N test tasks.
    #[arg(long)]
    max_tasks: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// Optimize tables to aggregate.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    solved_threshold: f64,
    /// Directory for aggregate.csv and the charts.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalPred(a) => cmd_eval(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let mut cfg = a.common.run_config()?;
    let b = &mut cfg.benchmark;
    b.n_train = a.train.unwrap_or(b.n_train);
    b.n_val = a.val.unwrap_or(b.n_val);
    b.n_test = a.test.unwrap_or(b.n_test);
    b.pool_size = a.pool.unwrap_or(b.pool_size);
    if b.n_train == 0 || b.n_val == 0 || b.n_test == 0 || b.pool_size == 0 {
        return Err(CliError::Usage("split counts and pool size must be positive".into()));
    }
    let bench_cfg = BenchmarkConfig {
        seed: cfg.seed,
        n_train: b.n_train,
        n_val: b.n_val,
        n_test: b.n_test,
        pool_size: b.pool_size,
    };
    let (n_train, n_val, n_test) = (b.n_train, b.n_val, b.n_test);
    let bench = generate_benchmark(&bench_cfg, cfg.jobs)?;
    let summary = write_benchmark(&a.out, &bench_cfg, &bench)?;
    cfg.echo(&a.out.join("run_config.json"))?;
    eprintln!(
        "wrote {} / {} / {} tasks to {} (test tasks with max_f >= 4: {:.3})",
        n_train,
        n_val,
        n_test,
        a.out.display(),
        summary.test_frac_max_f_ge_4
    );
    Ok(())
}

fn data_dir(flag: Option<PathBuf>, cfg: &mut RunConfig) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Usage("no benchmark directory: pass --data or set `data` in the config".into()))?;
    cfg.data = Some(dir.clone());
    Ok(dir)
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<TaskDataset>, CliError> {
    let tasks = load_tasks(&dir.join(format!("{split}.jsonl")))?;
    if tasks.is_empty() {
        return Err(CliError::Usage(format!("{}: the {split} split is empty", dir.display())));
    }
    Ok(tasks)
}

fn write_train_log(model_path: &Path, log: &[EpochLog]) -> Result<(), CliError> {
    let rows = log.iter().map(|r| {
        vec![
            r.epoch.to_string(),
            r.train_nll.to_string(),
            r.val_nll.to_string(),
            u8::from(r.best).to_string(),
        ]
    });
    let dir = model_path.parent().unwrap_or(Path::new(""));
    write_file(&dir.join("train_log.csv"), &csv_bytes(&TRAIN_LOG_HEADER, rows))
}

fn print_epoch(r: &EpochLog) {
    eprintln!(
        "epoch {:4}  train_nll {:.4}  val_nll {:.4}{}",
        r.epoch,
        r.train_nll,
        r.val_nll,
        if r.best { "  *" } else { "" }
    );
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.common.run_config()?;
    let dir = data_dir(a.data, &mut cfg)?;
    let train_tasks = load_split(&dir, Split::Train)?;
    let val_tasks = load_split(&dir, Split::Val)?;
    match a.surrogate {
        SurrogateArg::Tnp => {
            if let Some(v) = a.variant {
                cfg.model.variant = v.into();
            }
            let first = &train_tasks[0];
            cfg.model.input_dim = first.input_dim().unwrap_or(cfg.model.input_dim);
            cfg.model.aux_channels = first.aux_channels().unwrap_or(cfg.model.aux_channels);
            let model = Model::new(cfg.model.clone(), Normalizer::fit(&train_tasks), cfg.seed)?;
            let trained = train(model, &train_tasks, &val_tasks, &cfg.sampler, &cfg.train, print_epoch)?;
            ensure_parent(&a.out)?;
            trained.model.save(&a.out)?;
            write_train_log(&a.out, &trained.log)?;
        }
        SurrogateArg::Dgp => {
            if a.variant.is_some() {
                return Err(CliError::Usage("--variant applies to the transformer surrogate only".into()));
            }
            let d = &cfg.dgp;
            let (run, grid) = select_dgp(&train_tasks, &val_tasks, &d.model, &d.families, &d.embedding_dims, &d.train)?;
            for g in &grid {
                eprintln!(
                    "dgp {} dim {:2}: best val_nll {:.4} after {} epochs",
                    g.family.name(),
                    g.embedding_dim,
                    g.best_val_nll,
                    g.epochs
                );
            }
            cfg.dgp.model = run.model.config().clone();
            ensure_parent(&a.out)?;
            run.model.save(&a.out)?;
            write_train_log(&a.out, &run.log)?;
        }
    }
    cfg.echo(&echo_path(&a.out))
}

enum Loaded {
    Tnp(Model),
    Dgp(DeepKernelGp),
    Stgp(StgpSurrogate),
}

impl Loaded {
    fn open(src: &SurrogateSource, variant: Option<VariantArg>, cfg: &RunConfig, train_tasks: impl FnOnce() -> Result<Vec<TaskDataset>, CliError>) -> Result<Self, CliError> {
        if src.stgp {
            if variant.is_some() {
                return Err(CliError::Usage("--variant needs a transformer checkpoint".into()));
            }
            let normalizer = Normalizer::fit(&train_tasks()?);
            return Ok(Loaded::Stgp(StgpSurrogate { config: cfg.stgp.clone(), normalizer }));
        }
        let path = src.model.as_ref().expect("clap enforces a surrogate source");
        let ck = Checkpoint::load(path).map_err(ModelError::from)?;
        match ck.kind {
            ModelKind::Transformer => {
                let model = Model::from_checkpoint(&ck)?;
                if let Some(v) = variant.map(Variant::from) {
                    if model.config().variant != v {
                        return Err(CliError::Usage(format!(
                            "configuration conflict: {} holds the {} variant but --variant {} was given",
                            path.display(),
                            model.config().variant.name(),
                            v.name()
                        )));
                    }
                }
                Ok(Loaded::Tnp(model))
            }
            ModelKind::DeepKernelGp => {
                if variant.is_some() {
                    return Err(CliError::Usage(format!("{} holds a DGP; --variant does not apply", path.display())));
                }
                Ok(Loaded::Dgp(DeepKernelGp::from_checkpoint(&ck)?))
            }
        }
    }

    fn surrogate(&self) -> &dyn Surrogate {
        match self {
            Loaded::Tnp(m) => m,
            Loaded::Dgp(m) => m,
            Loaded::Stgp(s) => s,
        }
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = a.common.run_config()?;
    let dir = data_dir(a.data, &mut cfg)?;
    if let Some(s) = a.sizes {
        cfg.eval.sizes = s;
    }
    if let Some(r) = a.repeats {
        cfg.eval.repeats = r;
    }
    let test = load_split(&dir, Split::Test)?;
    let loaded = Loaded::open(&a.source, a.variant, &cfg, || load_split(&dir, Split::Train))?;
    let surrogate = loaded.surrogate();
    let ec = EvalConfig {
        sizes: cfg.eval.sizes.clone(),
        repeats: cfg.eval.repeats,
        sampler: cfg.sampler.clone(),
        seed: cfg.seed,
        jobs: cfg.jobs,
    };
    let report = evaluate_prediction(surrogate, &test, &ec)?;
    let rows = report.rows.iter().map(|r| {
        vec![
            surrogate.name().to_string(),
            r.context_size.to_string(),
            r.mse_sum.to_string(),
            r.nll_mean.to_string(),
            r.n_tasks.to_string(),
            r.n_repeats.to_string(),
            cfg.seed.to_string(),
        ]
    });
    write_file(&a.out, &csv_bytes(&EVAL_HEADER, rows))?;
    cfg.echo(&echo_path(&a.out))
}

fn cmd_optimize(a: OptimizeArgs) -> Result<(), CliError> {
    let mut cfg = a.common.run_config()?;
    let dir = data_dir(a.data, &mut cfg)?;
    let p = &mut cfg.protocol;
    p.trials = a.trials.unwrap_or(p.trials);
    p.runs = a.runs.unwrap_or(p.runs);
    p.init = a.init.unwrap_or(p.init);
    if let Some(acq) = a.acq {
        p.acquisition = match acq {
            AcqArg::Pi => Acquisition::Pi,
            AcqArg::Greedy => Acquisition::Greedy,
        };
    }
    let mut test = load_split(&dir, Split::Test)?;
    if let Some(n) = a.max_tasks {
        if n == 0 {
            return Err(CliError::Usage("--max-tasks must be positive".into()));
        }
        test.truncate(n);
    }
    let loaded = Loaded::open(&a.source, a.variant, &cfg, || load_split(&dir, Split::Train))?;
    let traces = run_protocol(loaded.surrogate(), &test, &cfg.protocol, cfg.seed, cfg.jobs)?;
    let fallbacks = traces.iter().filter(|t| t.init_fallback).count();
    if fallbacks > 0 {
        eprintln!("{fallbacks} runs used the lowest-reward fallback for their initial designs");
    }
    let rows = traces.iter().flat_map(|t| {
        t.rows.iter().map(move |r| {
            vec![
                t.surrogate.clone(),
                t.acquisition.name().to_string(),
                t.task_id.clone(),
                t.run.to_string(),
                r.trial.to_string(),
                r.selected_index.to_string(),
                r.observed_f.to_string(),
                r.best_f.to_string(),
                r.regret.to_string(),
            ]
        })
    });
    write_file(&a.out, &csv_bytes(&OPTIMIZE_HEADER, rows))?;
    cfg.echo(&echo_path(&a.out))
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    if !(a.solved_threshold >= 0.0) {
        return Err(CliError::Usage("--solved-threshold must be nonnegative".into()));
    }
    let mut traces = Vec::new();
    for path in &a.inputs {
        traces.extend(report::read_traces(path)?);
    }
    if traces.is_empty() {
        return Err(CliError::Usage("the input tables hold no rows".into()));
    }
    // series are per surrogate, split by acquisition only when both occur
    let mixed = traces.iter().any(|t| t.acquisition != traces[0].acquisition);
    if mixed {
        for t in &mut traces {
            t.surrogate = format!("{}+{}", t.surrogate, t.acquisition.name());
        }
    }
    let agg = aggregate_runs(&traces, &[a.solved_threshold])?;
    if agg.excluded_tasks > 0 {
        eprintln!("{} tasks with max_f = 0 were left out", agg.excluded_tasks);
    }
    let rows = agg.rows.iter().map(|r| {
        vec![
            r.trial.to_string(),
            r.surrogate.clone(),
            r.mean_norm_best.to_string(),
            r.mean_regret.to_string(),
            r.frac_solved[0].to_string(),
        ]
    });
    write_file(&a.out.join("aggregate.csv"), &csv_bytes(&REPORT_HEADER, rows))?;
    let charts: [(&str, &str, fn(&crate::engine::AggregateRow) -> f64); 3] = [
        ("mean_norm_best", "Mean best reward / max reward", |r| r.mean_norm_best),
        ("mean_regret", "Mean regret", |r| r.mean_regret),
        ("frac_solved", "Fraction of tasks solved", |r| r.frac_solved[0]),
    ];
    for (metric, label, f) in charts {
        let svg = report::line_chart(&agg, metric, label, f);
        write_file(&a.out.join(format!("{metric}.svg")), svg.as_bytes())?;
    }
    let echo = serde_json::json!({
        "inputs": a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "solved_threshold": a.solved_threshold,
    });
    let text = serde_json::to_string_pretty(&echo).expect("plain json") + "\n";
    write_file(&a.out.join("report_config.json"), text.as_bytes())
}
