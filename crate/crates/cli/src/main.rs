//! Experiment harness: dataset generation, two-stage training, shift
//! estimation from a checkpoint, and compute-path benchmarking.
//!
//! Exit codes: 0 success, 1 runtime/training failure, 2 usage or
//! configuration error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use condalign::datagen::{load_features, save_features, synth_gls, GlsScenario};
use condalign::embedding::{fit_cme, mcmd_squared_within_path, ComputePath};
use condalign::eval::{accuracy, discriminability, prior_error, prototype_distance_matrix};
use condalign::kernels::median_bandwidth;
use condalign::label_shift::{bbse_solve, plug_in_estimates, ShiftEstimate};
use condalign::model::{
    adapt, forward, load_checkpoint, predictions, pretrain, save_checkpoint, MulParams,
    TrainConfig, TrainTrace,
};
use condalign::{DenseMatrix, FeatureSet, KernelSpec};

const REPORT_VERSION: &str = "condalign-report v1";

const USAGE_EXIT: u8 = 2;
const RUNTIME_EXIT: u8 = 1;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE_EXIT,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: RUNTIME_EXIT,
            message: message.into(),
        }
    }
}

impl From<condalign::Error> for CliError {
    fn from(e: condalign::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "condalign", version, about = "Conditional alignment under generalized label shift")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-domain scenario (source.csv, target.csv, oracle.json)
    Gen(GenArgs),
    /// Pretrain and adapt; writes checkpoint, trace.csv, report.json
    Train(TrainArgs),
    /// Estimate class-prior shift from a checkpoint; writes shift.json
    EstimateShift(EstimateArgs),
    /// Time the discrepancy compute paths; writes bench.csv
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scenario name: null, g1, or g2
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override the per-domain sample counts
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with the same keys as the flags below; flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled source feature CSV
    #[arg(long)]
    source: PathBuf,
    /// Target feature CSV; labels, if present, are used for reporting only
    #[arg(long)]
    target: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda_tu: Option<f64>,
    #[arg(long)]
    lambda_du: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    t_pre: Option<usize>,
    #[arg(long)]
    t_adapt: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated G widths, last entry is the transformed width
    #[arg(long)]
    hidden_dims: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sample counts
    #[arg(long, default_value = "500,1000,2000,4000")]
    m_grid: String,
    #[arg(long, default_value_t = 2048)]
    rff_rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Skip the cubic-time reference path (drops the error column)
    #[arg(long, default_value_t = false)]
    skip_naive: bool,
}

/// Optional file-borne defaults for `train`; any present key fills in
/// before flag overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    lambda_tu: Option<f64>,
    lambda_du: Option<f64>,
    epsilon: Option<f64>,
    tau: Option<f64>,
    learning_rate: Option<f64>,
    t_pre: Option<usize>,
    t_adapt: Option<usize>,
    seed: Option<u64>,
    hidden_dims: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct ScatterReport {
    j_b: f64,
    j_w: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct PriorErrorReport {
    linf: f64,
    l1: f64,
}

#[derive(Serialize)]
struct Report {
    version: String,
    accuracy_source: f64,
    accuracy_target: Option<f64>,
    source_scatter: Option<ScatterReport>,
    /// Prior-estimation error against the empirical target label
    /// frequencies; present only when the target file carried labels.
    prior_error: Option<PriorErrorReport>,
    prototype_distances: Option<Vec<Vec<Option<f64>>>>,
    shift: Option<ShiftEstimate>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::EstimateShift(args) => cmd_estimate_shift(args),
        Cmd::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::usage(format!("file not found: {}", path.display())));
    }
    Ok(())
}

fn ensure_out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::usage(format!("cannot create output directory {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let mut scenario = GlsScenario::named(&args.scenario, args.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(n) = args.n_source {
        scenario.n_source = n;
    }
    if let Some(n) = args.n_target {
        scenario.n_target = n;
    }
    ensure_out_dir(&args.out)?;
    let (source, target, oracle) = synth_gls(&scenario)?;
    save_features(&args.out.join("source.csv"), &source)?;
    save_features(&args.out.join("target.csv"), &target)?;
    write_json(&args.out.join("oracle.json"), &oracle)?;
    Ok(())
}

fn parse_hidden_dims(text: &str) -> CliResult<Vec<usize>> {
    let dims: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse()).collect();
    let dims = dims.map_err(|_| CliError::usage(format!("bad hidden widths '{text}'")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(CliError::usage("hidden widths must be positive"));
    }
    Ok(dims)
}

fn build_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            require_file(path)?;
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let mut cfg = TrainConfig::default();
    // file values first, then flags on top
    macro_rules! layer {
        ($field:ident) => {
            if let Some(v) = file.$field {
                cfg.$field = v;
            }
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        };
    }
    layer!(lambda_tu);
    layer!(lambda_du);
    layer!(epsilon);
    layer!(tau);
    layer!(learning_rate);
    layer!(t_pre);
    layer!(t_adapt);
    layer!(seed);
    if let Some(dims) = file.hidden_dims {
        cfg.hidden_dims = dims;
    }
    if let Some(text) = &args.hidden_dims {
        cfg.hidden_dims = parse_hidden_dims(text)?;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn write_trace(path: &Path, trace: &TrainTrace) -> CliResult<()> {
    let mut out = String::from("epoch,j_e,j_tu,j_du,acc_s,acc_t,n_pseudo\n");
    for r in &trace.epochs {
        let acc_t = r.acc_t.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.j_e, r.j_tu, r.j_du, r.acc_s, acc_t, r.n_pseudo
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn empirical_prior(labels: &[i64], c: usize) -> Vec<f64> {
    let mut p = vec![0.0; c];
    for &l in labels {
        if l >= 0 && (l as usize) < c {
            p[l as usize] += 1.0 / labels.len() as f64;
        }
    }
    p
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    require_file(&args.source)?;
    require_file(&args.target)?;
    let cfg = build_train_config(&args)?;
    ensure_out_dir(&args.out)?;

    let source = load_features(&args.source)?;
    if source.labels.is_none() {
        return Err(CliError::usage(format!(
            "source {} carries no labels",
            args.source.display()
        )));
    }
    let target_file = load_features(&args.target)?;
    let oracle_labels = target_file.labels.clone();
    let target = FeatureSet::unlabeled(target_file.features);

    let c = source.class_count();
    let mut dims = vec![source.dim()];
    dims.extend_from_slice(&cfg.hidden_dims);
    let mut params = MulParams::init(&dims, c, cfg.seed)?;

    let mut trace = TrainTrace::default();
    let outcome = pretrain(&mut params, &source, &cfg, &mut trace).and_then(|_| {
        adapt(
            &mut params,
            &source,
            &target,
            &cfg,
            oracle_labels.as_deref(),
            &mut trace,
        )
    });
    // the trace survives a failed run
    write_trace(&args.out.join("trace.csv"), &trace)?;
    let estimates = outcome?;
    save_checkpoint(&args.out.join("model.ckpt"), &params)?;

    let (z_s, logits_s) = forward(&params, &source.features)?;
    let (z_t, logits_t) = forward(&params, &target.features)?;
    let preds_s = predictions(&logits_s);
    let preds_t = predictions(&logits_t);
    let labels_s = source.labels.as_ref().unwrap();

    let shift = estimates.last().cloned();
    let accuracy_target = match &oracle_labels {
        Some(oracle) => Some(accuracy(&preds_t, oracle)?),
        None => None,
    };
    let prior_err = match (&oracle_labels, &shift) {
        (Some(oracle), Some(est)) => {
            let empirical = empirical_prior(oracle, c);
            let (linf, l1) = prior_error(&est.p_t, &empirical)?;
            Some(PriorErrorReport { linf, l1 })
        }
        _ => None,
    };
    let source_scatter = discriminability(&z_s, labels_s)
        .ok()
        .map(|(j_b, j_w, ratio)| ScatterReport { j_b, j_w, ratio });
    // prototypes use oracle labels when present, predictions otherwise
    let target_proto_labels = oracle_labels.unwrap_or_else(|| preds_t.clone());
    let prototype_distances =
        prototype_distance_matrix(&z_s, labels_s, &z_t, &target_proto_labels).ok();

    let report = Report {
        version: REPORT_VERSION.into(),
        accuracy_source: accuracy(&preds_s, labels_s)?,
        accuracy_target,
        source_scatter,
        prior_error: prior_err,
        prototype_distances,
        shift,
    };
    write_json(&args.out.join("report.json"), &report)?;
    Ok(())
}

fn cmd_estimate_shift(args: EstimateArgs) -> CliResult<()> {
    require_file(&args.checkpoint)?;
    require_file(&args.source)?;
    require_file(&args.target)?;
    ensure_out_dir(&args.out)?;

    let params = load_checkpoint(&args.checkpoint)?;
    let source = load_features(&args.source)?;
    let labels_s = source
        .labels
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("source {} carries no labels", args.source.display())))?;
    let target = load_features(&args.target)?;

    let (_, logits_s) = forward(&params, &source.features)?;
    let (_, logits_t) = forward(&params, &target.features)?;
    let preds_s: Vec<usize> = predictions(&logits_s).iter().map(|&p| p as usize).collect();
    let preds_t: Vec<usize> = predictions(&logits_t).iter().map(|&p| p as usize).collect();

    let c = params.class_count();
    let (p_s, q_t, confusion) = plug_in_estimates(&preds_s, labels_s, &preds_t, c)?;
    let est = bbse_solve(&q_t, &confusion, &p_s)?;
    write_json(&args.out.join("shift.json"), &est)?;
    Ok(())
}

fn bench_dataset(m: usize, c: usize, d: usize, seed: u64) -> CliResult<FeatureSet> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * d);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let y = i % c;
        labels.push(y as i64);
        for k in 0..d {
            let center = if k == y % d { 2.0 } else { 0.0 };
            data.push(center + rng.gen_range(-1.0..1.0));
        }
    }
    Ok(FeatureSet::labeled(DenseMatrix::new(m, d, data)?, labels)?)
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let grid: Result<Vec<usize>, _> = args.m_grid.split(',').map(|t| t.trim().parse()).collect();
    let grid = grid.map_err(|_| CliError::usage(format!("bad m grid '{}'", args.m_grid)))?;
    if grid.is_empty() || args.classes < 2 {
        return Err(CliError::usage("need a sample grid and at least 2 classes"));
    }
    ensure_out_dir(&args.out)?;

    let ky = KernelSpec::gaussian(1.0)?;
    let mut csv = String::from("path,m,seconds,max_abs_error_vs_naive\n");
    for &m in &grid {
        let data = bench_dataset(m, args.classes, args.dim, args.seed)?;
        let kz = KernelSpec::gaussian(median_bandwidth(&data.features)?)?;
        let op = fit_cme(&data, &kz, &ky, 1e-3)?;

        let mut naive_value = None;
        let paths: Vec<(&str, ComputePath)> = vec![
            ("naive", ComputePath::Naive),
            ("woodbury", ComputePath::Woodbury),
            (
                "rff",
                ComputePath::Rff {
                    rank: args.rff_rank,
                    seed: args.seed,
                },
            ),
        ];
        for (name, path) in paths {
            if args.skip_naive && name == "naive" {
                continue;
            }
            let start = Instant::now();
            let value = mcmd_squared_within_path(&op, 0, 1, path)?;
            let seconds = start.elapsed().as_secs_f64();
            if name == "naive" {
                naive_value = Some(value);
            }
            let err = naive_value
                .map(|nv| (value - nv).abs().to_string())
                .unwrap_or_default();
            csv.push_str(&format!("{name},{m},{seconds},{err}\n"));
            eprintln!("{name} m={m}: {seconds:.4}s");
        }
    }
    let path = args.out.join("bench.csv");
    let mut f = fs::File::create(&path)?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}
