//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{read_dataset, read_table, write_dataset, write_table, ModelFile};
use crate::model::{compare_gradients, finite_diff_gradient, grad_log_likelihood, GradientErrors};
use crate::optimizer::{fit, predict_centered, FitConfig, Init, Mode};
use crate::select::{cross_validate, rank_features};
use crate::simulate::{
    generate, generate_lines, r_squared, random_instance, GenConfig, LinesConfig,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_SHAPE: u8 = 3;
pub const EXIT_OPTIMIZATION: u8 = 4;
pub const EXIT_GRADIENT: u8 = 5;

/// Scaled-error floor of the gradient check: absolute tolerance 1e-8 at the
/// default relative tolerance 1e-4.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "clreg", version, about = "Contrastive linear regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to foreground/background tables.
    Fit(FitArgs),
    /// Predictive mean and variance for new foreground rows.
    Predict(PredictArgs),
    /// Cross-validate the latent dimension.
    Cv(CvArgs),
    /// Write a simulated dataset.
    Simulate(SimulateArgs),
    /// Compare the analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Rank features by their response-linked loading.
    Rank(RankArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    LineSearch,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Pca,
    Random,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub foreground: PathBuf,
    #[arg(long)]
    pub background: PathBuf,
    #[arg(long)]
    pub response_col: String,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::LineSearch)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1e-2)]
    pub step0: f64,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Pca)]
    pub init: InitArg,
}

impl OptimArgs {
    fn config(&self, d: usize) -> FitConfig {
        FitConfig {
            d,
            alpha: self.alpha,
            tol: self.tol,
            max_iter: self.max_iter,
            mode: match self.mode {
                ModeArg::LineSearch => Mode::LineSearchAscent,
                ModeArg::Adam => Mode::AdaptiveMoment,
            },
            step0: self.step0,
            restarts: self.restarts,
            seed: self.seed,
            init: match self.init {
                InitArg::Pca => Init::PcaWarmStart,
                InitArg::Random => Init::RandomNormal,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(short = 'd', long = "d")]
    pub d: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub d_grid: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Tidy CSV path (d, fold, train_r2, test_r2); defaults to the report
    /// path with a .csv extension.
    #[arg(long)]
    pub tidy_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long, required_unless_present = "lines")]
    pub p: Option<usize>,
    #[arg(long, required_unless_present = "lines")]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_prefix: String,
    /// Ground-truth model file to sample from instead of drawing one.
    #[arg(long, conflicts_with = "lines")]
    pub truth: Option<PathBuf>,
    /// Generate the corrupted-lines image dataset instead.
    #[arg(long)]
    pub lines: bool,
    #[arg(long, default_value_t = 28)]
    pub image_side: usize,
    #[arg(long, default_value = "r")]
    pub response_col: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub rtol: f64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the column of W with the largest |beta_k| as fitted.
    #[arg(long)]
    pub no_canonical_rotation: bool,
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ShapeMismatch(_) => EXIT_SHAPE,
        Error::Malformed { .. }
        | Error::Io { .. }
        | Error::Json { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidParams(_)
        | Error::TooFewSamples(_) => EXIT_INPUT,
        Error::Factorization { .. }
        | Error::RankDeficiency(_)
        | Error::DegenerateData(_)
        | Error::NonFiniteObjective { .. }
        | Error::ConstantTruth
        | Error::ZeroBeta { .. } => EXIT_OPTIMIZATION,
    }
}

/// Runs a parsed command and returns its exit status.
pub fn run(cli: Cli) -> u8 {
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Cv(a) => cmd_cv(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Rank(a) => cmd_rank(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn distinct_outputs(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for out in outputs {
        if inputs.iter().any(|i| same_file(i, out)) {
            return Err(Error::InvalidConfig(format!(
                "output {} would overwrite an input",
                out.display()
            )));
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    // a closed stdout (e.g. a pipe into `head`) is not an error of the command
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize)]
struct FitReport {
    final_ll: f64,
    iterations: usize,
    converged: bool,
    best_restart: usize,
    restart_objectives: Vec<Option<f64>>,
    grad_norm_inf: f64,
    train_r2: Option<f64>,
    wall_time_seconds: f64,
}

pub fn cmd_fit(args: &FitArgs) -> Result<u8> {
    let data_args = &args.data;
    distinct_outputs(
        &[&data_args.foreground, &data_args.background],
        &[&args.out],
    )?;
    let data = read_dataset(
        &data_args.foreground,
        &data_args.background,
        &data_args.response_col,
    )?;
    let result = fit(&data, &args.optim.config(args.d))?;
    let file = ModelFile::from_fit(&result, data.feature_names.clone());
    file.write(&args.out)?;
    let train_r2 = r_squared(&result.predict_means(&data.x)?, data.r.as_slice()).ok();
    print_json(&FitReport {
        final_ll: result.final_ll(),
        iterations: result.iterations,
        converged: result.converged,
        best_restart: result.best_restart,
        restart_objectives: result.restart_objectives.clone(),
        grad_norm_inf: result.grad_norm_inf,
        train_r2,
        wall_time_seconds: result.wall_time_seconds,
    });
    Ok(EXIT_OK)
}

/// Selects the model's feature columns from an input table: by name when the
/// header contains every feature name, otherwise by position.
fn feature_columns(
    model: &ModelFile,
    header: &[String],
    values: &DMatrix<f64>,
    path: &Path,
) -> Result<DMatrix<f64>> {
    if let Some(names) = &model.feature_names {
        let found: Option<Vec<usize>> = names
            .iter()
            .map(|n| header.iter().position(|h| h == n))
            .collect();
        if let Some(cols) = found {
            return Ok(values.select_columns(&cols));
        }
    }
    if values.ncols() != model.p {
        return Err(Error::shape(format!(
            "{} has {} columns, model has p = {}",
            path.display(),
            values.ncols(),
            model.p
        )));
    }
    Ok(values.clone())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<u8> {
    distinct_outputs(&[&args.model, &args.input], &[&args.out])?;
    let model = ModelFile::read(&args.model)?;
    let params = model.params()?;
    let table = read_table(&args.input)?;
    let x = feature_columns(&model, &table.header, &table.values, &args.input)?;
    let preds = predict_centered(&params, &model.center_x(), model.center_r, &x)?;
    let out = DMatrix::from_fn(preds.len(), 3, |i, j| match j {
        0 => (i + 1) as f64,
        1 => preds[i].mean,
        _ => preds[i].variance,
    });
    let header = ["row", "mean", "variance"].map(String::from);
    write_table(&args.out, &header, &out)?;
    Ok(EXIT_OK)
}

pub fn cmd_cv(args: &CvArgs) -> Result<u8> {
    let data_args = &args.data;
    let tidy = args
        .tidy_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    distinct_outputs(
        &[&data_args.foreground, &data_args.background],
        &[&args.out, &tidy],
    )?;
    if same_file(&args.out, &tidy) {
        return Err(Error::InvalidConfig(
            "report and tidy paths coincide".into(),
        ));
    }
    let data = read_dataset(
        &data_args.foreground,
        &data_args.background,
        &data_args.response_col,
    )?;
    let first = *args.d_grid.first().expect("clap requires a grid");
    let report = cross_validate(&data, &args.d_grid, args.k, &args.optim.config(first))?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_text(&args.out, &text)?;

    let mut csv_text = String::from("d,fold,train_r2,test_r2\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (d, fold, train, test) in report.tidy_rows() {
        csv_text.push_str(&format!(
            "{d},{},{},{}\n",
            fold + 1,
            cell(train),
            cell(test)
        ));
    }
    write_text(&tidy, &csv_text)?;
    print_json(&serde_json::json!({
        "best_d": report.best_d,
        "criterion": report.criterion,
        "mean_test_r2": report.mean_test_r2,
        "failures": report.failures.len(),
    }));
    Ok(EXIT_OK)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let fg = PathBuf::from(format!("{}_foreground.csv", args.out_prefix));
    let bg = PathBuf::from(format!("{}_background.csv", args.out_prefix));
    if args.lines {
        let data = generate_lines(&LinesConfig {
            image_side: args.image_side,
            n_fg: args.n,
            n_bg: args.m,
            line_column: args.image_side / 2,
            seed: args.seed,
            ..LinesConfig::default()
        })?;
        write_dataset(&data, &fg, &bg, &args.response_col)?;
        return Ok(EXIT_OK);
    }
    let (p, d) = (args.p.expect("required"), args.d.expect("required"));
    let truth_path = PathBuf::from(format!("{}_truth.json", args.out_prefix));
    let mut config = GenConfig::new(args.n, args.m, p, d, args.seed);
    if let Some(path) = &args.truth {
        distinct_outputs(&[path], &[&fg, &bg, &truth_path])?;
        config.truth = Some(ModelFile::read(path)?.params()?);
    }
    let (data, truth) = generate(&config)?;
    if data
        .feature_names
        .iter()
        .flatten()
        .any(|n| n == &args.response_col)
    {
        return Err(Error::InvalidConfig(format!(
            "response column {:?} clashes with a feature name",
            args.response_col
        )));
    }
    write_dataset(&data, &fg, &bg, &args.response_col)?;
    ModelFile::from_params(&truth, 1.0, data.feature_names.clone()).write(&truth_path)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct GradcheckReport {
    trials: usize,
    rtol: f64,
    worst: GradientErrors,
    passed: bool,
    failing_seeds: Vec<u64>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    if !(args.rtol >= 0.0) {
        return Err(Error::InvalidConfig("rtol must be nonnegative".into()));
    }
    if !(args.alpha >= 0.0 && args.alpha.is_finite()) {
        return Err(Error::InvalidConfig(
            "alpha must be finite and nonnegative".into(),
        ));
    }
    let mut worst = GradientErrors::default();
    let mut failing = Vec::new();
    for trial in 0..args.trials {
        let seed = args.seed ^ trial as u64;
        let (params, data) = random_instance(args.p, args.d, args.n, args.m, seed)?;
        let analytic = grad_log_likelihood(&params, &data, args.alpha)?;
        let numeric = finite_diff_gradient(&params, &data, args.alpha, args.step)?;
        let errs = compare_gradients(&analytic, &numeric, GRADCHECK_FLOOR);
        if !(errs.max() <= args.rtol) {
            failing.push(seed);
        }
        worst = worst.merge(&errs);
    }
    for (name, v) in [
        ("S", worst.s),
        ("W", worst.w),
        ("beta", worst.beta),
        ("sigma2", worst.sigma2),
        ("tau2", worst.tau2),
    ] {
        eprintln!("{name:>6}: worst scaled error {v:.3e}");
    }
    let passed = failing.is_empty();
    if !passed {
        eprintln!(
            "gradient mismatch above rtol {:e}; offending seeds: {:?}",
            args.rtol, failing
        );
    }
    print_json(&GradcheckReport {
        trials: args.trials,
        rtol: args.rtol,
        worst,
        passed,
        failing_seeds: failing,
    });
    Ok(if passed { EXIT_OK } else { EXIT_GRADIENT })
}

pub fn cmd_rank(args: &RankArgs) -> Result<u8> {
    distinct_outputs(&[&args.model], &[&args.out])?;
    let model = ModelFile::read(&args.model)?;
    let params = model.params()?;
    let ranking = rank_features(
        &params,
        model.feature_names.as_deref(),
        !args.no_canonical_rotation,
    )?;
    let mut writer = csv::Writer::from_path(&args.out).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e.into(),
    })?;
    let mut rows: Vec<[String; 3]> = vec![["rank", "feature", "score"].map(String::from)];
    for (rank, &feature) in ranking.order.iter().enumerate() {
        let label = match &ranking.names {
            Some(names) => names[feature - 1].clone(),
            None => feature.to_string(),
        };
        rows.push([
            (rank + 1).to_string(),
            label,
            ranking.scores[feature - 1].to_string(),
        ]);
    }
    for row in rows {
        writer.write_record(&row).map_err(|e| Error::Io {
            path: args.out.display().to_string(),
            source: e.into(),
        })?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: args.out.display().to_string(),
        source,
    })?;
    Ok(EXIT_OK)
}
