//! Command-line front end. Diagnostics go to stderr, data only to the
//! output files, each written once at the end of a command.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accelconfig::{load_config, validate_config, ConfigFileError, ControllerType, ValidatedConfig};
use crate::graph::{infer_shapes, parse_model, Model};
use crate::mapping::{count_space, MappingFile, SpacePolicy, Workload};
use crate::runner::{report_csv, run_model, verify_against_reference, ErrorClass, RunOptions};
use crate::tensorops::{Tensor, ValueMode};
use crate::tuner::{
    history_csv, sweep_csv, sweep_hardware, tune_model, Objective, Strategy, TuneError, TunerOptions, GRID_LIMIT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MODEL: i32 = 3;
pub const EXIT_SIM: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Caps concurrent tuner trials.
pub const PARALLELISM_ENV: &str = "BIFROST_PARALLELISM";

#[derive(Debug, Parser)]
#[command(
    name = "accelsim",
    version,
    about = "Evaluate and tune DNN layers on reconfigurable accelerator models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a hardware configuration.
    Validate {
        #[arg(short = 'c', long = "config")]
        config: PathBuf,
    },
    /// Execute a model and write the per-layer report.
    Run(RunArgs),
    /// Search mappings for every conv2d and dense layer.
    Tune(TuneArgs),
    /// Evaluate a model across values of one hardware parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(short = 'm', long = "model")]
    pub model: PathBuf,
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
    #[arg(long, conflicts_with = "tune_first")]
    pub mappings: Option<PathBuf>,
    /// Tune every layer (genetic search on psums) before running.
    #[arg(long)]
    pub tune_first: bool,
    /// Raw little-endian f32 input tensor.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compare every layer with the reference kernels; mismatches fail the run.
    #[arg(long)]
    pub verify: bool,
    /// Drop layer outputs once consumed.
    #[arg(long, conflicts_with = "verify")]
    pub low_memory: bool,
    /// Float values instead of small integers.
    #[arg(long)]
    pub float: bool,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct SearchArgs {
    #[arg(long)]
    pub objective: Objective,
    #[arg(long, default_value = "grid")]
    pub tuner: Strategy,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub early_stop: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "divisors", value_parser = parse_policy)]
    pub policy: SpacePolicy,
    #[arg(long, default_value_t = 32)]
    pub population: usize,
    #[arg(long, default_value_t = 0.1)]
    pub mutation_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub elite_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(short = 'm', long = "model")]
    pub model: PathBuf,
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Mapping file with the best mapping per layer.
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short = 'm', long = "model")]
    pub model: PathBuf,
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<u32>,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Fixed mappings instead of tuning each row.
    #[arg(long)]
    pub mappings: Option<PathBuf>,
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
}

fn parse_policy(s: &str) -> Result<SpacePolicy, String> {
    match s {
        "divisors" => Ok(SpacePolicy::Divisors),
        "full" => Ok(SpacePolicy::Full),
        other => Err(format!("unknown policy '{other}'")),
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn parse_args<I, T>(argv: I) -> Result<Command, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv).map(|c| c.command)
}

pub fn main() -> i32 {
    match parse_args(std::env::args_os()) {
        Ok(cmd) => execute(cmd),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn execute(cmd: Command) -> i32 {
    let result = match cmd {
        Command::Validate { config } => cmd_validate(&config),
        Command::Run(a) => cmd_run(&a),
        Command::Tune(a) => cmd_tune(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            e.code
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, data: &str) -> CliResult<()> {
    std::fs::write(path, data).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load_validated(path: &Path) -> CliResult<ValidatedConfig> {
    let raw = load_config(&read_text(path)?).map_err(|e: ConfigFileError| CliError::new(EXIT_CONFIG, e.to_string()))?;
    let cfg = validate_config(&raw).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    for n in cfg.notices() {
        eprintln!("notice: {n}");
    }
    Ok(cfg)
}

/// Parses, resolves weight paths against the model's directory and infers
/// shapes.
fn load_model(path: &Path) -> CliResult<Model> {
    let mut model = parse_model(&read_text(path)?).map_err(|e| CliError::new(EXIT_MODEL, e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for layer in &mut model.layers {
        if let Some(w) = &layer.weights {
            if w.is_relative() {
                layer.weights = Some(dir.join(w));
            }
        }
    }
    infer_shapes(&model).map_err(|e| CliError::new(EXIT_MODEL, e.to_string()))
}

fn load_mappings(path: &Path, model: &Model, cfg: &ValidatedConfig) -> CliResult<MappingFile> {
    let file = MappingFile::parse(&read_text(path)?).map_err(|e| CliError::new(EXIT_MODEL, e.to_string()))?;
    if cfg.controller() == ControllerType::FlexLinear {
        file.validate_against(model, cfg)
            .map_err(|e| CliError::new(EXIT_MODEL, e.to_string()))?;
    }
    Ok(file)
}

/// Trial workers: `BIFROST_PARALLELISM` if set, else the machine's cores.
fn parallelism() -> CliResult<usize> {
    match std::env::var(PARALLELISM_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::new(
                EXIT_USAGE,
                format!("{PARALLELISM_ENV} must be a positive integer, got '{v}'"),
            )),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn tuner_options(s: &SearchArgs) -> CliResult<TunerOptions> {
    let opts = TunerOptions {
        strategy: s.tuner,
        budget: s.budget,
        early_stop: s.early_stop,
        seed: s.seed,
        population: s.population,
        mutation_rate: s.mutation_rate,
        elite_fraction: s.elite_fraction,
        parallelism: parallelism()?,
        policy: s.policy,
    };
    opts.check().map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?;
    Ok(opts)
}

fn require_flexible(cfg: &ValidatedConfig) -> CliResult<()> {
    if cfg.controller() != ControllerType::FlexLinear {
        return Err(CliError::new(
            EXIT_CONFIG,
            format!(
                "mapping search needs a FLEX_LINEAR config; {} tiles internally",
                cfg.controller()
            ),
        ));
    }
    Ok(())
}

/// Refuses grid search on any layer whose space exceeds the grid limit.
fn grid_guard(model: &Model, cfg: &ValidatedConfig, opts: &TunerOptions) -> CliResult<()> {
    if opts.strategy != Strategy::Grid {
        return Ok(());
    }
    for layer in model.layers.iter().filter(|l| l.op.is_offloadable()) {
        let Ok(w) = Workload::from_layer(layer) else { continue };
        let size = count_space(&w, cfg, opts.policy, GRID_LIMIT);
        if size > GRID_LIMIT {
            return Err(CliError::new(
                EXIT_USAGE,
                format!(
                    "layer '{}': mapping space exceeds {GRID_LIMIT} points; grid search refused. \
                     Use --tuner random|ga or --policy divisors",
                    layer.id
                ),
            ));
        }
    }
    Ok(())
}

fn tune_error_code(e: &TuneError) -> i32 {
    match e {
        TuneError::Options(_) | TuneError::GridTooLarge { .. } | TuneError::UnknownParam(_) => EXIT_USAGE,
        TuneError::Controller(_) => EXIT_CONFIG,
        TuneError::Mapping(_) | TuneError::EmptySpace => EXIT_MODEL,
        TuneError::Sim(_) | TuneError::Run(_) => EXIT_SIM,
    }
}

fn cmd_validate(path: &Path) -> CliResult<()> {
    let cfg = load_validated(path)?;
    eprintln!(
        "valid: {} with {} multipliers, dn_bw={}, rn_bw={}",
        cfg.controller(),
        cfg.multipliers(),
        cfg.dn_bw(),
        cfg.rn_bw()
    );
    Ok(())
}

fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let cfg = load_validated(&a.config)?;
    let model = load_model(&a.model)?;
    let mappings = match (&a.mappings, a.tune_first) {
        (Some(p), _) => Some(load_mappings(p, &model, &cfg)?),
        (None, true) => {
            require_flexible(&cfg)?;
            let opts = TunerOptions {
                strategy: Strategy::Genetic,
                budget: Some(2000),
                early_stop: Some(200),
                seed: a.seed.unwrap_or(0),
                parallelism: parallelism()?,
                ..TunerOptions::default()
            };
            let tuning = tune_model(&model, &cfg, Objective::Psums, &opts)
                .map_err(|e| CliError::new(tune_error_code(&e), e.to_string()))?;
            if let Some((id, e)) = tuning.errors.first() {
                return Err(CliError::new(tune_error_code(e), format!("layer '{id}': {e}")));
            }
            Some(tuning.mapping_file())
        }
        (None, false) => None,
    };
    let input = match &a.input {
        None => None,
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display())))?;
            let shape = model
                .input_shape()
                .map_err(|e| CliError::new(EXIT_MODEL, e.to_string()))?;
            let t = Tensor::from_le_bytes(shape.dims.clone(), shape.tag, &bytes)
                .map_err(|e| CliError::new(EXIT_MODEL, format!("{}: {e}", p.display())))?;
            Some(t)
        }
    };
    let opts = RunOptions {
        seed: a.seed,
        value_mode: if a.float { ValueMode::Float } else { ValueMode::Integer },
        retain_outputs: !a.low_memory,
    };
    let report = run_model(&model, &cfg, mappings.as_ref(), input, &opts).map_err(|e| {
        let code = match e.class() {
            ErrorClass::Model => EXIT_MODEL,
            ErrorClass::Simulation => EXIT_SIM,
            ErrorClass::Io => EXIT_IO,
        };
        CliError::new(code, e.to_string())
    })?;
    for n in report.layers.iter().filter_map(|l| l.notice.as_ref()) {
        eprintln!("notice: {n}");
    }
    if a.verify {
        let checks = verify_against_reference(&model, &report.input, &report);
        let failed: Vec<_> = checks.iter().filter(|c| !c.ok).collect();
        for c in &failed {
            eprintln!("mismatch: layer '{}': {}", c.id, c.detail.as_deref().unwrap_or(""));
        }
        if !failed.is_empty() {
            return Err(CliError::new(
                EXIT_SIM,
                format!("verification failed on {} of {} layers", failed.len(), checks.len()),
            ));
        }
        eprintln!("verified: {} layers match the reference kernels", checks.len());
    }
    write_file(&a.output, &report_csv(&report))
}

fn cmd_tune(a: &TuneArgs) -> CliResult<()> {
    let cfg = load_validated(&a.config)?;
    let model = load_model(&a.model)?;
    require_flexible(&cfg)?;
    let opts = tuner_options(&a.search)?;
    grid_guard(&model, &cfg, &opts)?;
    let tuning = tune_model(&model, &cfg, a.search.objective, &opts)
        .map_err(|e| CliError::new(tune_error_code(&e), e.to_string()))?;
    for (id, r) in &tuning.results {
        eprintln!(
            "{id}: best {} {} after {} trials{}",
            a.search.objective,
            r.best_cost,
            r.trials_evaluated,
            if r.converged { " (early stop)" } else { "" }
        );
    }
    write_file(&a.output, &tuning.mapping_file().to_json())?;
    if let Some(h) = &a.history {
        write_file(h, &history_csv(&tuning))?;
    }
    if let Some((id, e)) = tuning.errors.first() {
        for (other, err) in &tuning.errors[1..] {
            eprintln!("error: layer '{other}': {err}");
        }
        return Err(CliError::new(tune_error_code(e), format!("layer '{id}': {e}")));
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let raw = load_config(&read_text(&a.config)?).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    let model = load_model(&a.model)?;
    let opts = tuner_options(&a.search)?;
    let mappings = match &a.mappings {
        Some(p) => Some(MappingFile::parse(&read_text(p)?).map_err(|e| CliError::new(EXIT_MODEL, e.to_string()))?),
        None => None,
    };
    let rows = sweep_hardware(
        &model,
        &raw,
        &a.param,
        &a.values,
        a.search.objective,
        &opts,
        mappings.as_ref(),
    )
    .map_err(|e| CliError::new(tune_error_code(&e), e.to_string()))?;
    for r in &rows {
        match &r.outcome {
            Ok(c) => eprintln!("{}={}: best {} {c}", a.param, r.value, a.search.objective),
            Err(e) => eprintln!("{}={}: invalid: {e}", a.param, r.value),
        }
    }
    write_file(&a.output, &sweep_csv(&a.param, a.search.objective, &rows))
}
