//! `plft` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adam_trainer::{parse_pass_order, TrainConfig};
use crate::cascade::{run_cascade_traced, CascadeConfig, CascadeResult};
use crate::cp_model::{entry_gradients, load_factors, save_factors, Mode};
use crate::error::PlftError;
use crate::eval_metrics::{evaluate, gradient_check_suite, wilcoxon_signed_rank};
use crate::synth_gen::{generate, SynthSpec};
use crate::tensor_store::{load_coo, save_coo, split, TensorDims};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "plft",
    version,
    about = "Cascaded prediction-sampling tensor factorization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a COO tensor, run the cascade and write traces, factors and metrics.
    Train(TrainArgs),
    /// Generate a synthetic tensor with known low-rank ground truth.
    Synth(SynthArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Score factors on a holdout file, or run a Wilcoxon test on two metric lists.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// COO input file (`i j k value` per line, 0-based).
    #[arg(long)]
    data: PathBuf,
    /// Tensor dimensions as I,J,K.
    #[arg(long)]
    dims: TensorDims,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    /// Number of cascade layers N.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    layers: u64,
    /// Loss weight of synthetic entries.
    #[arg(long, default_value_t = 1.5, value_parser = non_negative)]
    alpha: f64,
    /// Regularization coefficient.
    #[arg(long, default_value_t = 0.01, value_parser = non_negative)]
    lambda: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 0.001, value_parser = positive)]
    eta: f64,
    #[arg(long, default_value_t = 0.9, value_parser = unit_interval)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999, value_parser = unit_interval)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8, value_parser = positive)]
    tau: f64,
    /// Maximum epochs per layer.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    /// Stop a layer when consecutive training RMSEs differ by less than this.
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    tol: f64,
    #[arg(long)]
    seed: u64,
    /// Train/validation/test ratios.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    split: [f64; 3],
    /// Clamp factors at zero after each update.
    #[arg(long)]
    nonneg: bool,
    /// Initialize each layer from the previous layer's factors.
    #[arg(long)]
    warm_start: bool,
    /// Report test metrics and factors of the best-validated layer.
    #[arg(long)]
    use_best_layer: bool,
    /// Factor update order within an epoch.
    #[arg(long, default_value = "UTS", value_parser = parse_pass_order)]
    pass_order: [Mode; 3],
    #[arg(long, default_value = "plft-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    dims: TensorDims,
    /// Rank of the ground-truth factors.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    /// Observed fraction of cells, in (0, 1].
    #[arg(long, value_parser = density)]
    density: f64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    noise: f64,
    /// Range of the noiseless values as LOW,HIGH.
    #[arg(long, default_value = "0,1", value_parser = parse_range)]
    range: (f64, f64),
    #[arg(long)]
    seed: u64,
    /// Output COO file.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth factor file (default: OUT with extension `factors`).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    instances: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    h: f64,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    threshold: f64,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["factors", "wilcoxon"])))]
struct EvalArgs {
    /// Factor file written by `train` or `synth`.
    #[arg(long, requires = "holdout")]
    factors: Option<PathBuf>,
    /// Holdout COO file scored against --factors.
    #[arg(long, requires = "factors")]
    holdout: Option<PathBuf>,
    /// Two files of paired metric values (whitespace separated).
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    wilcoxon: Option<Vec<PathBuf>>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("not a number: {s:?}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("not finite: {s:?}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(format!("must be > 0, got {v}"))
        }
    })
}

fn non_negative(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(format!("must be >= 0, got {v}"))
        }
    })
}

fn unit_interval(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if (0.0..1.0).contains(&v) {
            Ok(v)
        } else {
            Err(format!("must lie in [0, 1), got {v}"))
        }
    })
}

fn density(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(format!("must lie in (0, 1], got {v}"))
        }
    })
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts = s
        .split(',')
        .map(non_negative)
        .collect::<Result<Vec<_>, _>>()?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| format!("expected A,B,C but got {s:?}"))?;
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("ratios must sum to 1, got {sum}"));
    }
    Ok(ratios)
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LOW,HIGH but got {s:?}"))?;
    let (lo, hi) = (parse_f64(lo)?, parse_f64(hi)?);
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(format!("LOW must be below HIGH, got {lo},{hi}"))
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(PlftError),
}

impl From<PlftError> for CliError {
    fn from(e: PlftError) -> Self {
        CliError::Failure(e)
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Everything needed to repeat a `train` run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub data: PathBuf,
    pub dims: [usize; 3],
    pub split: [f64; 3],
    pub seed: u64,
    pub n_layers: usize,
    pub rank: usize,
    pub warm_start: bool,
    pub use_best_layer: bool,
    pub train: TrainConfig,
    pub outputs: Vec<PathBuf>,
}

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const LAYERS_CSV: &str = "layers.csv";
pub const TEST_CSV: &str = "test_metrics.csv";
pub const FACTORS_FILE: &str = "factors.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = CascadeConfig {
        n_layers: a.layers as usize,
        rank: a.rank as usize,
        train: TrainConfig {
            eta: a.eta,
            beta1: a.beta1,
            beta2: a.beta2,
            tau: a.tau,
            lambda: a.lambda,
            alpha: a.alpha,
            max_epochs: a.epochs as usize,
            tol: a.tol,
            seed: a.seed,
            nonneg: a.nonneg,
            pass_order: a.pass_order,
        },
        select_best_by_validation: a.use_best_layer,
        warm_start: a.warm_start,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let tensor = load_coo(&a.data, a.dims)?;
    let parts = split(&tensor, a.split, a.seed)?;

    let mut epochs_csv = String::from("layer,epoch,train_rmse\n");
    let result = run_cascade_traced(&cfg, &parts, &mut |layer, rec| {
        let _ = writeln!(epochs_csv, "{layer},{},{}", rec.epoch, rec.train_rmse);
    })?;

    fs::create_dir_all(&a.out_dir).map_err(|e| PlftError::io(&a.out_dir, e))?;
    let out = |name: &str| a.out_dir.join(name);
    write_file(&out(EPOCHS_CSV), &epochs_csv)?;
    write_file(&out(LAYERS_CSV), &layers_csv(&result))?;

    let chosen = result.selected_layer;
    let factors = result.selected_factors();
    let mut test_csv = String::from("layer,test_rmse,test_mae,n\n");
    if parts.test.is_empty() {
        println!("layer {chosen}: no test entries");
    } else {
        let m = evaluate(factors, &parts.test)?;
        let _ = writeln!(test_csv, "{chosen},{},{},{}", m.rmse, m.mae, m.n);
        println!(
            "layer {chosen}: test rmse={} mae={} n={}",
            m.rmse, m.mae, m.n
        );
    }
    write_file(&out(TEST_CSV), &test_csv)?;
    save_factors(out(FACTORS_FILE), factors)?;

    let manifest = RunManifest {
        tool: "plft",
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        data: a.data.clone(),
        dims: [a.dims.i_size, a.dims.j_size, a.dims.k_size],
        split: a.split,
        seed: a.seed,
        n_layers: cfg.n_layers,
        rank: cfg.rank,
        warm_start: cfg.warm_start,
        use_best_layer: cfg.select_best_by_validation,
        train: cfg.train,
        outputs: [
            EPOCHS_CSV,
            LAYERS_CSV,
            TEST_CSV,
            FACTORS_FILE,
            MANIFEST_FILE,
        ]
        .iter()
        .map(|n| out(n))
        .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out(MANIFEST_FILE), &(json + "\n"))?;
    Ok(())
}

fn layers_csv(result: &CascadeResult) -> String {
    let mut csv = String::from("layer,omega_size,val_rmse,val_mae,epochs_to_converge\n");
    for rec in &result.per_layer {
        let (rmse, mae) = match rec.validation {
            Some(v) => (v.rmse.to_string(), v.mae.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            csv,
            "{},{},{rmse},{mae},{}",
            rec.layer, rec.omega_size, rec.result.epochs_run
        );
    }
    csv
}

fn write_file(path: &Path, contents: &str) -> Result<(), PlftError> {
    fs::write(path, contents).map_err(|e| PlftError::io(path, e))
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let spec = SynthSpec {
        dims: a.dims,
        true_rank: a.rank as usize,
        density: a.density,
        noise_sigma: a.noise,
        value_range: a.range,
        seed: a.seed,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (observed, truth) = generate(&spec)?;
    save_coo(&a.out, observed.entries())?;
    let truth_path = a
        .truth
        .clone()
        .unwrap_or_else(|| a.out.with_extension("factors"));
    save_factors(&truth_path, &truth)?;
    println!(
        "wrote {} entries ({} density) to {} and ground truth to {}",
        observed.len(),
        observed.density(),
        a.out.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let report = gradient_check_suite(
        a.instances as usize,
        a.seed,
        a.h,
        a.threshold,
        &entry_gradients,
    )?;
    println!(
        "instances={} max_rel_error={:e} worst_instance={} threshold={:e} {}",
        report.instances,
        report.max_rel_error,
        report.worst_instance,
        report.threshold,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failure(PlftError::InvalidConfig(format!(
            "analytic gradient disagrees with finite differences (max relative error {:e})",
            report.max_rel_error
        ))))
    }
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    if let Some(files) = &a.wilcoxon {
        let first = read_values(&files[0])?;
        let second = read_values(&files[1])?;
        let r = wilcoxon_signed_rank(&first, &second)?;
        println!("w+={} w-={} p={}", r.w_plus, r.w_minus, r.p_value);
        return Ok(());
    }
    let (Some(factors), Some(holdout)) = (&a.factors, &a.holdout) else {
        return Err(CliError::Usage(
            "eval needs --factors with --holdout, or --wilcoxon A B".into(),
        ));
    };
    let factors = load_factors(factors)?;
    let holdout = load_coo(holdout, factors.dims())?;
    let m = evaluate(&factors, holdout.entries())?;
    println!("rmse={} mae={} n={}", m.rmse, m.mae, m.n);
    Ok(())
}

fn read_values(path: &Path) -> Result<Vec<f64>, PlftError> {
    let text = fs::read_to_string(path).map_err(|e| PlftError::io(path, e))?;
    let mut values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        for tok in line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
        {
            let v: f64 = tok.parse().map_err(|_| {
                PlftError::Malformed(format!("not a number: {tok:?}")).at_line(idx + 1)
            })?;
            values.push(v);
        }
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("plft").chain(args.iter().copied()))
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_ratios("0.8,0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
        assert!(parse_ratios("0.8,0.1").is_err());
        assert!(parse_ratios("0.8,0.3,0.1").is_err());
        assert_eq!(parse_range("1,5").unwrap(), (1.0, 5.0));
        assert!(parse_range("5,1").is_err());
        assert!(density("0").is_err());
        assert!(density("1").is_ok());
        assert!(unit_interval("1").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(
            run_args(&[
                "train", "--data", "x.coo", "--dims", "4,4,1", "--layers", "0", "--seed", "1"
            ]),
            EXIT_USAGE
        );
        assert_eq!(
            run_args(&["train", "--data", "x.coo", "--dims", "4,4", "--seed", "1"]),
            EXIT_USAGE
        );
        assert_eq!(
            run_args(&[
                "synth",
                "--dims",
                "4,4,1",
                "--rank",
                "2",
                "--density",
                "0",
                "--seed",
                "1",
                "--out",
                "x"
            ]),
            EXIT_USAGE
        );
        assert_eq!(
            run_args(&[
                "synth",
                "--dims",
                "4,4,1",
                "--rank",
                "2",
                "--density",
                "0.5",
                "--out",
                "x"
            ]),
            EXIT_USAGE
        );
        assert_eq!(run_args(&["eval"]), EXIT_USAGE);
        assert_eq!(run_args(&["bogus"]), EXIT_USAGE);
    }

    #[test]
    fn missing_data_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.coo");
        let code = run_args(&[
            "train",
            "--data",
            missing.to_str().unwrap(),
            "--dims",
            "4,4,1",
            "--seed",
            "1",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_FAILURE);
    }

    #[test]
    fn gradcheck_default_passes() {
        assert_eq!(run_args(&["gradcheck"]), EXIT_OK);
        assert_eq!(
            run_args(&["gradcheck", "--instances", "1", "--seed", "3"]),
            EXIT_OK
        );
    }

    #[test]
    fn read_values_accepts_commas_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        fs::write(&p, "# rmse\n0.1, 0.2\n0.3\n\n").unwrap();
        assert_eq!(read_values(&p).unwrap(), vec![0.1, 0.2, 0.3]);
        fs::write(&p, "0.1 x\n").unwrap();
        assert!(read_values(&p).is_err());
    }
}
