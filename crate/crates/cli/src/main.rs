//! `wmdl` command-line tool: simulate data, fit and apply estimators, and run
//! the simulation benchmarks.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use wmdl::data::{load_csv, simulate, write_csv, CsvSchema, DgpConfig};
use wmdl::estimators::{fit_with_diagnostics, save_estimate, EstimatorSpec};
use wmdl::evaluation::{
    emit_report, ordering_checks, robustness_checks, robustness_suite, run_replications,
    ExperimentConfig, ExperimentGrid, OrderingCheck, ReportFormat,
};
use wmdl::{parallel, WmdlError};

mod predict;

#[derive(Parser)]
#[command(name = "wmdl", version, about = "Multi-source CATE estimation by weighted direct learning")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset; writes the CSV and a `.truth.json` sidecar.
    Simulate {
        /// DGP config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit an estimator to a CSV dataset and save the model as JSON.
    Fit {
        /// Estimator spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional CSV column mapping (JSON).
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Output model path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for nuisance and weight diagnostics.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Predict delta and tau for covariate rows in a CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with columns x1..xd and optionally `source`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source id for heterogeneous models when the CSV has no `source` column.
        #[arg(long)]
        source: Option<usize>,
    },
    /// Run a replicated simulation experiment.
    Benchmark(ExperimentArgs),
    /// Run the nuisance-corruption stress suite.
    Robustness {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Sample sizes, comma separated (first is the small size).
        #[arg(long, value_delimiter = ',', default_value = "2000,8000")]
        sizes: Vec<usize>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Evaluate ordering checks; exit with status 3 if any fails.
    #[arg(long)]
    check: bool,
}

/// Raised when `--check` finds a failed ordering.
#[derive(Debug)]
struct CheckFailed(usize);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ordering check(s) failed", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let v = serde_json::from_reader(BufReader::new(f))
        .map_err(WmdlError::from)
        .with_context(|| format!("invalid config {}", path.display()))?;
    Ok(v)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

struct Log(bool);

impl Log {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}.truth.json"))
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>, log: &Log) -> Result<()> {
    let mut dgp: DgpConfig = read_json(config)?;
    if let Some(s) = seed {
        dgp.seed = s;
    }
    let (data, truth) = simulate(&dgp)?;
    let w = BufWriter::new(File::create(out).with_context(|| format!("cannot create {}", out.display()))?);
    write_csv(&data, w)?;
    let side = sidecar(out);
    write_json(&side, &truth)?;
    log.say(format!(
        "wrote {} rows to {} (truth in {})",
        data.n_rows(),
        out.display(),
        side.display()
    ));
    Ok(())
}

struct FitArgs<'a> {
    config: &'a Path,
    data: &'a Path,
    schema: Option<&'a Path>,
    out: &'a Path,
    seed: Option<u64>,
    diagnostics: Option<&'a Path>,
}

fn cmd_fit(a: FitArgs<'_>, log: &Log) -> Result<()> {
    let mut spec: EstimatorSpec = read_json(a.config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let schema: Option<CsvSchema> = a.schema.map(read_json).transpose()?;
    let data = load_csv(a.data, schema.as_ref())
        .with_context(|| format!("cannot load {}", a.data.display()))?;
    log.say(format!(
        "fitting {} on {} rows from {} sources",
        spec.label(),
        data.n_rows(),
        data.sources().len()
    ));
    let (estimate, diag) = fit_with_diagnostics(&data, &spec)?;
    save_estimate(a.out, &estimate, Some(&spec))?;
    if let Some(dir) = a.diagnostics {
        fs::create_dir_all(dir)?;
        diag.write_nuisance_json(BufWriter::new(File::create(dir.join("nuisances.json"))?))?;
        diag.write_weight_summary_csv(File::create(dir.join("weights_summary.csv"))?)?;
        diag.write_weight_histogram_csv(20, File::create(dir.join("weights_histogram.csv"))?)?;
        log.say(format!("diagnostics in {}", dir.display()));
    }
    log.say(format!("model saved to {} ({} rows used)", a.out.display(), diag.rows_used));
    Ok(())
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_json(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_checks(checks: &[OrderingCheck], log: &Log) -> Result<()> {
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in checks {
        println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.description);
    }
    if checks.is_empty() {
        log.say("no ordering checks apply to this configuration");
    }
    if failed > 0 {
        return Err(CheckFailed(failed).into());
    }
    Ok(())
}

fn cmd_benchmark(args: &ExperimentArgs, log: &Log) -> Result<()> {
    let mut grid: ExperimentGrid = read_json(&args.config)?;
    if let Some(s) = args.seed {
        grid.base.master_seed = s;
    }
    if let Some(r) = args.replications {
        grid.base.replications = r;
    }
    let cells = grid.expand()?;
    fs::create_dir_all(&args.out)?;
    let mut summary = csv::Writer::from_path(args.out.join("grid_summary.csv"))?;
    summary.write_record(["cell", "scenario", "effect_mode", "n_total", "estimator", "mean_mse", "sd_mse"])?;
    let mut checks = Vec::new();
    for cell in &cells {
        let cfg = &cell.config;
        log.say(format!(
            "[{}] {} replications of {} estimators",
            cell.label,
            cfg.replications,
            cfg.estimators.len()
        ));
        let report = run_replications(cfg)?;
        let dir = if grid.is_grid() { args.out.join(&cell.label) } else { args.out.clone() };
        let mut files = emit_report(&report, ReportFormat::Csv, &dir)?;
        files.extend(emit_report(&report, ReportFormat::Json, &dir)?);
        println!("{}", cell.label);
        for r in &report.results {
            println!(
                "  {:8} mean {:.4} sd {}",
                r.name,
                r.mean_mse.unwrap_or(f64::NAN),
                r.sd_mse.map_or("-".into(), |v| format!("{v:.4}"))
            );
            summary.write_record([
                cell.label.clone(),
                format!("{:?}", cfg.dgp.scenario),
                format!("{:?}", cfg.dgp.effect_mode).to_lowercase(),
                cfg.dgp.n_total.to_string(),
                r.name.clone(),
                r.mean_mse.map(|v| v.to_string()).unwrap_or_default(),
                r.sd_mse.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        log.say(format!("wrote {}", display_list(&files)));
        if args.check {
            checks.extend(ordering_checks(&report).into_iter().map(|mut c| {
                c.description = format!("[{}] {}", cell.label, c.description);
                c
            }));
        }
    }
    summary.flush()?;
    if args.check {
        report_checks(&checks, log)?;
    }
    Ok(())
}

fn cmd_robustness(args: &ExperimentArgs, sizes: &[usize], log: &Log) -> Result<()> {
    if sizes.len() < 2 {
        return Err(WmdlError::Config("robustness needs at least two sizes".into()).into());
    }
    let cfg = experiment_config(args)?;
    let rep = robustness_suite(&cfg, sizes)?;
    let flat = rep.to_experiment_report(&cfg);
    let mut files = emit_report(&flat, ReportFormat::Csv, &args.out)?;
    files.extend(emit_report(&flat, ReportFormat::Json, &args.out)?);
    for c in &rep.cells {
        println!(
            "{:15} n={:6} mean {:.4}",
            c.arm.name(),
            c.n_total,
            c.result.mean_mse.unwrap_or(f64::NAN)
        );
    }
    log.say(format!("wrote {}", display_list(&files)));
    if args.check {
        let (small, large) = (sizes[0], sizes[sizes.len() - 1]);
        report_checks(&robustness_checks(&rep, small, large), log)?;
    }
    Ok(())
}

fn display_list(files: &[PathBuf]) -> String {
    files
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn run(cli: Cli) -> Result<()> {
    parallel::init_threads(cli.threads);
    let log = Log(cli.quiet);
    match &cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(config, out, *seed, &log),
        Command::Fit {
            config,
            data,
            schema,
            out,
            seed,
            diagnostics,
        } => cmd_fit(
            FitArgs {
                config,
                data,
                schema: schema.as_deref(),
                out,
                seed: *seed,
                diagnostics: diagnostics.as_deref(),
            },
            &log,
        ),
        Command::Predict {
            model,
            data,
            out,
            source,
        } => predict::cmd_predict(model, data, out, *source, &log),
        Command::Benchmark(args) => cmd_benchmark(args, &log),
        Command::Robustness { common, sizes } => cmd_robustness(common, sizes, &log),
    }
}

/// 2 for configuration and schema problems, 3 for failed checks, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<WmdlError>() {
            return match e {
                WmdlError::Schema(_)
                | WmdlError::Parse { .. }
                | WmdlError::Validation(_)
                | WmdlError::Config(_)
                | WmdlError::Usage(_)
                | WmdlError::Json(_)
                | WmdlError::Dimension { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
