//! The `cdnn` command line.
//!
//! Every run writes `manifest.json`, `results.csv` and `summary.json` under
//! `--output-dir`; `train` also writes `model.json`. Only the primary result
//! goes to stdout. Exit codes: 0 success, 1 usage or config error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::betafit::{fit_beta, reconstruct_density, FitConfig};
use crate::config::{load_train_recipe, TrainRecipe};
use crate::covariance::{sample_covariance, CovarianceMatrix, DataMatrix};
use crate::density::density_operator;
use crate::entropy::{cvne, naive_entropy, DiscriminationConfig};
use crate::error::Error;
use crate::forecast::{predict, read_series, train_forecaster, Checkpoint};
use crate::lab::{
    run_experiment, write_records_csv, EntropyCurveConfig,
    ExperimentConfig, LipschitzConfig, RegressionConfig, StabilityConfig, SurrogateConfig,
    TrialRecord,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cdnn", version, about = "Covariance density operators, entropy and networks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "cdnn_output")]
    output_dir: PathBuf,
    /// JSON config; flags win over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Unit {
    Nats,
    Bits,
}

#[derive(Debug, Args)]
struct CovarianceInput {
    /// CSV data matrix (rows are observations).
    #[arg(long)]
    input: PathBuf,
    /// Treat the input as a precomputed covariance matrix.
    #[arg(long)]
    input_is_covariance: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Covariance von Neumann entropy at one or more β.
    Entropy {
        #[command(flatten)]
        input: CovarianceInput,
        #[arg(long, conflicts_with = "betas")]
        beta: Option<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        betas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "nats")]
        unit: Unit,
    },
    /// Fits the β whose Gibbs distribution over a spectrum best matches a target.
    FitBeta {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required_unless_present = "input")]
        spectrum: Option<Vec<f64>>,
        /// Take the spectrum from this CSV instead.
        #[arg(long, conflicts_with = "spectrum")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        input_is_covariance: bool,
        #[arg(long, value_delimiter = ',', required = true)]
        target: Vec<f64>,
    },
    /// Density operator spectrum and partition function.
    Density {
        #[command(flatten)]
        input: CovarianceInput,
        #[arg(long, allow_hyphen_values = true)]
        beta: f64,
    },
    /// Density perturbation error against its bound.
    Stability {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        betas: Option<Vec<f64>>,
    },
    /// Composite Lipschitz check on random filters.
    Lipschitz,
    /// Covariance eigenvectors as a surrogate for the Laplacian basis.
    Surrogate,
    /// Label-noise robustness of density-transformed ridge regression.
    Regression {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        betas: Option<Vec<f64>>,
    },
    /// Entropy against β for several data families.
    EntropyCurve {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        betas: Option<Vec<f64>>,
    },
    /// Regime discrimination by naive entropy and CVNE.
    Discriminate {
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<f64>,
    },
    /// Trains a network on a time-series CSV.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        betas: Option<Vec<f64>>,
    },
    /// Applies a trained `model.json` to a time-series CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Entropy { .. } => "entropy",
            Command::FitBeta { .. } => "fit-beta",
            Command::Density { .. } => "density",
            Command::Stability { .. } => "stability",
            Command::Lipschitz => "lipschitz",
            Command::Surrogate => "surrogate",
            Command::Regression { .. } => "regression",
            Command::EntropyCurve { .. } => "entropy-curve",
            Command::Discriminate { .. } => "discriminate",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

/// Artifacts of one run, written after the command succeeds.
struct RunOutput {
    stdout: String,
    records: Vec<TrialRecord>,
    summary: Value,
    model: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv_text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv_text) {
        Ok(stdout) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{stdout}");
            EXIT_OK
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: &Cli, argv: &[String]) -> Result<String, Failure> {
    let threads = match cli.global.threads {
        Some(0) => return Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, usize::from),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Runtime(Error::invalid(e.to_string())))?;

    let (resolved, job) = resolve(cli)?;
    let dir = &cli.global.output_dir;
    fs::create_dir_all(dir)?;
    let manifest = json!({
        "tool": "cdnn",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cli.command.name(),
        "argv": argv,
        "seed": resolved.seed,
        "threads": threads,
        "config": resolved.config,
        "timestamp": SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    });
    write_json(&dir.join("manifest.json"), &manifest)?;

    let out = pool.install(|| job(&resolved))?;
    let mut csv = Vec::new();
    write_records_csv(&out.records, &mut csv)?;
    fs::write(dir.join("results.csv"), csv)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    if let Some(model) = &out.model {
        fs::write(dir.join("model.json"), model)?;
    }
    Ok(out.stdout)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

struct Resolved {
    seed: u64,
    config: Value,
}

type Job<'a> = Box<dyn Fn(&Resolved) -> Result<RunOutput, Failure> + Send + Sync + 'a>;

fn resolve(cli: &Cli) -> Result<(Resolved, Job<'_>), Failure> {
    let g = &cli.global;
    let seed = g.seed.unwrap_or(0);
    match &cli.command {
        Command::Entropy { input, beta, betas, unit } => {
            no_config(g)?;
            let betas = match (beta, betas) {
                (Some(b), None) => vec![*b],
                (None, Some(bs)) if !bs.is_empty() => bs.clone(),
                (None, None) => vec![1.0],
                _ => return Err(Failure::Usage("give --beta or a nonempty --betas".into())),
            };
            let config = json!({
                "input": input.input, "input_is_covariance": input.input_is_covariance,
                "betas": betas, "unit": unit_name(*unit),
            });
            let unit = *unit;
            Ok((Resolved { seed, config }, Box::new(move |r| run_entropy(input, &betas, unit, r.seed))))
        }
        Command::FitBeta { spectrum, input, input_is_covariance, target } => {
            no_config(g)?;
            let config = json!({
                "spectrum": spectrum, "input": input, "input_is_covariance": input_is_covariance,
                "target": target, "fit": FitConfig::default(),
            });
            Ok((
                Resolved { seed, config },
                Box::new(move |r| run_fit_beta(spectrum.as_deref(), input.as_deref(), *input_is_covariance, target, r.seed)),
            ))
        }
        Command::Density { input, beta } => {
            no_config(g)?;
            let config = json!({ "input": input.input, "input_is_covariance": input.input_is_covariance, "beta": beta });
            Ok((Resolved { seed, config }, Box::new(move |r| run_density(input, *beta, r.seed))))
        }
        Command::Train { input, horizon, betas } => {
            let mut recipe = match &g.config {
                Some(path) => load_train_recipe(path)?,
                None => TrainRecipe::default(),
            };
            if let Some(s) = g.seed {
                recipe.seed = s;
            }
            if let Some(h) = horizon {
                recipe.horizon = *h;
            }
            if let Some(b) = betas {
                if recipe.betas_learnable {
                    recipe.beta_init = Some(b.clone());
                } else {
                    recipe.betas = Some(b.clone());
                }
            }
            recipe.validate()?;
            let config = json!({ "input": input, "recipe": recipe });
            let seed = recipe.seed;
            Ok((Resolved { seed, config }, Box::new(move |_| run_train(input, &recipe))))
        }
        Command::Predict { model, input, horizon } => {
            no_config(g)?;
            let config = json!({ "model": model, "input": input, "horizon": horizon });
            let horizon = *horizon;
            Ok((Resolved { seed, config }, Box::new(move |_| run_predict(model, input, horizon))))
        }
        cmd => {
            let mut cfg = experiment_config(cmd, g.config.as_deref())?;
            if let Some(s) = g.seed {
                cfg.set_seed(s);
            }
            apply_overrides(cmd, &mut cfg);
            cfg.validate().map_err(|e| match e {
                Error::InvalidArgument(m) => Failure::Usage(m),
                other => Failure::from(other),
            })?;
            let config = serde_json::to_value(&cfg).map_err(Error::from)?;
            let seed = cfg.seed();
            Ok((Resolved { seed, config }, Box::new(move |_| run_lab(&cfg))))
        }
    }
}

fn no_config(g: &GlobalArgs) -> Result<(), Failure> {
    match &g.config {
        Some(_) => Err(Failure::Usage("this subcommand takes no --config".into())),
        None => Ok(()),
    }
}

fn unit_name(u: Unit) -> &'static str {
    match u {
        Unit::Nats => "nats",
        Unit::Bits => "bits",
    }
}

fn experiment_config(cmd: &Command, path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let default = match cmd {
        Command::Stability { .. } => ExperimentConfig::Stability(StabilityConfig::default()),
        Command::Lipschitz => ExperimentConfig::Lipschitz(LipschitzConfig::default()),
        Command::Surrogate => ExperimentConfig::Surrogate(SurrogateConfig::default()),
        Command::Regression { .. } => ExperimentConfig::Regression(RegressionConfig::default()),
        Command::EntropyCurve { .. } => ExperimentConfig::EntropyCurve(EntropyCurveConfig::default()),
        Command::Discriminate { .. } => ExperimentConfig::Discrimination(DiscriminationConfig::default()),
        _ => unreachable!("not an experiment subcommand"),
    };
    let Some(path) = path else {
        return Ok(default);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    // the experiment tag is implied by the subcommand
    let mut value: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        let tag = default.name();
        match obj.get("experiment").and_then(Value::as_str) {
            Some(t) if t != tag => {
                return Err(Failure::Usage(format!("config is for '{t}', not '{tag}'")));
            }
            _ => {
                obj.insert("experiment".into(), Value::from(tag));
            }
        }
    }
    Ok(crate::config::parse_versioned::<ExperimentConfig>(&value.to_string())?)
}

fn apply_overrides(cmd: &Command, cfg: &mut ExperimentConfig) {
    match (cmd, cfg) {
        (Command::Stability { betas: Some(b) }, ExperimentConfig::Stability(c)) => c.betas = b.clone(),
        (Command::Regression { betas: Some(b) }, ExperimentConfig::Regression(c)) => c.betas = b.clone(),
        (Command::EntropyCurve { betas: Some(b) }, ExperimentConfig::EntropyCurve(c)) => c.betas = b.clone(),
        (Command::Discriminate { beta: Some(b) }, ExperimentConfig::Discrimination(c)) => c.beta = *b,
        _ => {}
    }
}

fn run_lab(cfg: &ExperimentConfig) -> Result<RunOutput, Failure> {
    let out = run_experiment(cfg)?;
    let stdout = serde_json::to_string(&out.summary["results"]).map_err(Error::from)?;
    Ok(RunOutput {
        stdout,
        records: out.records,
        summary: out.summary,
        model: None,
    })
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::invalid(format!("cannot read {}: {e}", path.display()))))
}

fn has_header(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.split(',').any(|f| f.trim().parse::<f64>().is_err()))
}

fn load_covariance(input: &Path, is_covariance: bool) -> Result<CovarianceMatrix, Failure> {
    let text = read_text(input)?;
    let header = has_header(&text);
    Ok(if is_covariance {
        CovarianceMatrix::read_csv(text.as_bytes(), header)?
    } else {
        sample_covariance(&DataMatrix::read_csv(text.as_bytes(), header)?)?
    })
}

fn run_entropy(input: &CovarianceInput, betas: &[f64], unit: Unit, seed: u64) -> Result<RunOutput, Failure> {
    let c = load_covariance(&input.input, input.input_is_covariance)?;
    let naive = naive_entropy(&c).ok();
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for (i, &beta) in betas.iter().enumerate() {
        let r = cvne(&c, beta)?;
        let value = match unit {
            Unit::Nats => r.entropy_nats,
            Unit::Bits => r.entropy_bits,
        };
        lines.push(if betas.len() == 1 { value.to_string() } else { format!("{beta}\t{value}") });
        let mut rec = TrialRecord::new("entropy", format!("beta={beta}"), i, seed)
            .param("beta", beta)
            .metric("entropy_nats", r.entropy_nats)
            .metric("entropy_bits", r.entropy_bits)
            .metric("gibbs_form_nats", r.gibbs_form_nats);
        if let Some(n) = naive {
            rec = rec.metric("naive_entropy_bits", n);
        }
        records.push(rec);
        reports.push(r);
    }
    let summary = json!({
        "subcommand": "entropy",
        "dim": c.dim(),
        "unit": unit_name(unit),
        "naive_entropy_bits": naive,
        "reports": reports,
    });
    Ok(RunOutput { stdout: lines.join("\n"), records, summary, model: None })
}

fn run_fit_beta(
    spectrum: Option<&[f64]>,
    input: Option<&Path>,
    is_covariance: bool,
    target: &[f64],
    seed: u64,
) -> Result<RunOutput, Failure> {
    let (spectrum, covariance) = match (spectrum, input) {
        (Some(s), _) => (s.to_vec(), None),
        (None, Some(path)) => {
            let c = load_covariance(path, is_covariance)?;
            (c.eigenvalues().iter().copied().collect(), Some(c))
        }
        (None, None) => return Err(Failure::Usage("give --spectrum or --input".into())),
    };
    let fit = fit_beta(&spectrum, target, &FitConfig::default())?;
    let mut summary = json!({ "subcommand": "fit-beta", "spectrum": spectrum, "target": target, "fit": fit });
    if let Some(c) = &covariance {
        let rho = reconstruct_density(c, fit.beta_star)?;
        summary["reconstructed_density_eigenvalues"] = json!(rho.density_eigenvalues().as_slice());
    }
    let records = vec![TrialRecord::new("fit_beta", "moment_match", 0, seed)
        .param("dim", spectrum.len() as f64)
        .metric("beta_star", fit.beta_star)
        .metric("objective", fit.objective_value)
        .metric("gradient", fit.gradient_at_solution)
        .metric("curvature", fit.curvature_at_solution)
        .metric("iterations", fit.iterations as f64)];
    Ok(RunOutput { stdout: fit.beta_star.to_string(), records, summary, model: None })
}

fn run_density(input: &CovarianceInput, beta: f64, seed: u64) -> Result<RunOutput, Failure> {
    let c = load_covariance(&input.input, input.input_is_covariance)?;
    let rho = density_operator(&c, beta)?;
    let records = rho
        .source_spectrum()
        .iter()
        .zip(rho.density_eigenvalues().iter())
        .enumerate()
        .map(|(i, (l, p))| {
            TrialRecord::new("density", "eigenpair", i, seed)
                .param("beta", beta)
                .metric("covariance_eigenvalue", *l)
                .metric("density_eigenvalue", *p)
        })
        .collect();
    let dense = rho.to_dense();
    let summary = json!({
        "subcommand": "density",
        "beta": beta,
        "partition_function": rho.partition_function(),
        "log_partition": rho.log_partition(),
        "mean_energy": rho.mean_energy(),
        "trace": rho.trace(),
        "density": dense.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    Ok(RunOutput { stdout: rho.partition_function().to_string(), records, summary, model: None })
}

fn run_train(input: &Path, recipe: &TrainRecipe) -> Result<RunOutput, Failure> {
    let series = read_series(read_text(input)?.as_bytes(), recipe.task)?;
    let report = train_forecaster(&series, recipe)?;
    let seed = recipe.seed;
    let mut records: Vec<TrialRecord> = report
        .outcome
        .train_loss
        .iter()
        .zip(&report.outcome.val_loss)
        .enumerate()
        .map(|(epoch, (t, v))| {
            let mut rec = TrialRecord::new("train", "epoch", epoch, seed).metric("train_loss", *t);
            if v.is_finite() {
                rec = rec.metric("val_loss", *v);
            }
            rec
        })
        .collect();
    let mut test = TrialRecord::new("train", "test", report.outcome.best_epoch, seed)
        .param("n_train", report.n_train as f64)
        .param("n_val", report.n_val as f64)
        .param("n_test", report.n_test as f64);
    for (k, v) in &report.test_metrics {
        test = test.metric(k, *v);
    }
    records.push(test);
    let primary = ["test_accuracy", "test_mae"]
        .iter()
        .find_map(|k| report.test_metrics.get(*k).map(|v| format!("{k} {v}")))
        .unwrap_or_default();
    let summary = json!({
        "subcommand": "train",
        "best_epoch": report.outcome.best_epoch,
        "n_train": report.n_train,
        "n_val": report.n_val,
        "n_test": report.n_test,
        "num_parameters": report.checkpoint.model.num_parameters(),
        "test_metrics": report.test_metrics,
        "learned_betas": report.checkpoint.model.layers.iter().map(|l| l.betas.clone()).collect::<Vec<_>>(),
    });
    let model = serde_json::to_string_pretty(&report.checkpoint).map_err(Error::from)? + "\n";
    Ok(RunOutput { stdout: primary, records, summary, model: Some(model) })
}

fn run_predict(model: &Path, input: &Path, horizon: Option<usize>) -> Result<RunOutput, Failure> {
    let cp = Checkpoint::from_json(&read_text(model)?)?;
    if let Some(h) = horizon {
        if h != cp.horizon {
            return Err(Failure::Usage(format!("--horizon {h} differs from the model's horizon {}", cp.horizon)));
        }
    }
    let series = read_series(read_text(input)?.as_bytes(), cp.model.task)?;
    let preds = predict(&cp, &series)?;
    let seed = cp.recipe.seed;
    let records: Vec<TrialRecord> = preds
        .iter()
        .map(|p| {
            let mut rec = TrialRecord::new("predict", "window", p.window_start, seed);
            for (j, v) in p.outputs.iter().enumerate() {
                rec = rec.metric(&format!("output_{j}"), *v);
            }
            for (j, v) in p.target.iter().flatten().enumerate() {
                rec = rec.metric(&format!("target_{j}"), *v);
            }
            rec
        })
        .collect();
    let last = preds.last().map(|p| p.outputs.clone()).unwrap_or_default();
    let summary = json!({
        "subcommand": "predict",
        "windows": preds.len(),
        "window": cp.window,
        "horizon": cp.horizon,
        "final_window_output": last,
    });
    let stdout = last.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    Ok(RunOutput { stdout, records, summary, model: None })
}
