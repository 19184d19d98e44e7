//! `hiernav`: hierarchy preparation, synthetic data generation, training,
//! TNR calibration, OOD scoring, thresholded inference, evaluation, sweeps,
//! and the end-to-end synthetic benchmark.
//!
//! Exit codes: 0 success, 1 validation error (bad flags or malformed input
//! files), 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hiernav_core::benchmark::{run_bench, write_report, BenchConfig};
use hiernav_core::data::{
    generate_synthetic_features, generate_synthetic_hierarchy, read_dataset,
    select_holdout_subtrees, write_dataset, Band, Dataset, SplitSpec,
};
use hiernav_core::evaluation::{
    confusion_to_csv, hierarchical_outcomes, sweep_to_csv, tnr_sweep, ErrorMode, OodPool,
};
use hiernav_core::hierarchy::{Granularity, Hierarchy, NodeId};
use hiernav_core::inference::{
    calibrate, hierarchical_infer, table_from_csv, table_to_csv, ThresholdMode,
};
use hiernav_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use hiernav_core::scoring::{msp_score, score_sample};
use hiernav_core::training::{log_to_csv, train_sgd, LossConfig, Objective, TrainConfig};

#[derive(Parser)]
#[command(name = "hiernav", version, about = "Hierarchical softmax classification with OOD inference at variable granularity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hierarchy file utilities.
    Hierarchy {
        #[command(subcommand)]
        command: HierarchyCommand,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Holdout split utilities.
    Split {
        #[command(subcommand)]
        command: SplitCommand,
    },
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Calibrate stopping thresholds at a target TNR on validation data.
    Calibrate(CalibrateArgs),
    /// Write per-sample OOD scores for a dataset.
    Score(ScoreArgs),
    /// Thresholded hierarchical inference over a dataset.
    Infer(InferArgs),
    /// Evaluate predictions against ground-truth nodes.
    Eval(EvalArgs),
    /// TNR sweep with per-grid-point recalibration.
    Sweep(SweepArgs),
    /// End-to-end synthetic benchmark; writes the full CSV report.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum HierarchyCommand {
    /// Remove single-child nodes (root collapses onto an internal child).
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge minimum-entropy internal nodes until a target internal count.
    EntropyPrune {
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset supplying per-leaf sample counts.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target_internal: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print node counts and depth statistics.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a synthetic hierarchy and Gaussian diffusion features.
    Gen {
        /// Per-level branching factors, comma separated (e.g. 3,3,3,3).
        #[arg(long, value_delimiter = ',')]
        branching: Vec<usize>,
        #[arg(long)]
        dim: usize,
        /// Per-level diffusion scales, comma separated.
        #[arg(long, value_delimiter = ',')]
        level_scales: Vec<f64>,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        per_leaf: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_hierarchy: PathBuf,
        #[arg(long)]
        out_data: PathBuf,
    },
}

#[derive(Subcommand)]
enum SplitCommand {
    /// Select holdout subtrees per depth band and write the split file.
    Make {
        #[arg(long)]
        hierarchy: PathBuf,
        /// Bands as granularity:depth_min:depth_max:prob, comma separated
        /// (e.g. coarse:1:1:0.25,fine:4:4:0.25).
        #[arg(long, value_delimiter = ',')]
        bands: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value = "hierarchical")]
    objective: String,
    #[arg(long, default_value_t = 1)]
    trunk_layers: usize,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by the decay factor.
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    lr_milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr_decay: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tnr: f64,
    /// node or path
    #[arg(long, default_value = "node")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Predictions CSV: sample_index,node_name.
    #[arg(long)]
    preds: PathBuf,
    /// Ground-truth CSV: sample_index,node_name.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_confusion: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// OOD pool file: dataset format whose labels are the mapped
    /// ground-truth nodes (internal nodes allowed).
    #[arg(long)]
    ood: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.8,0.9,0.95,0.99")]
    grid: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Validation errors exit 1, runtime failures exit 2.
enum CliError {
    Validation(String),
    Runtime(String),
}

type CliResult<T = ()> = Result<T, CliError>;

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_to_string(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_hierarchy(path: &Path) -> CliResult<Hierarchy> {
    Hierarchy::parse(&read_to_string(path)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path, h: &Hierarchy) -> CliResult<Dataset> {
    read_dataset(&read_to_string(path)?, h)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, h: &Hierarchy) -> CliResult<ModelParams> {
    load_checkpoint(&read_to_string(path)?, h)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Dataset-format file whose labels may be any node (used for OOD pools
/// labelled with mapped ground-truth nodes).
fn load_pool(path: &Path, h: &Hierarchy) -> CliResult<(Vec<Vec<f64>>, Vec<NodeId>)> {
    let text = read_to_string(path)?;
    let bad = |msg: String| CliError::Validation(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let dim: usize = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("dim="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| bad("missing dim=<d> header".into()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, values) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("line {}: malformed line", i + 2)))?;
        let node = h
            .id_of(name)
            .ok_or_else(|| bad(format!("line {}: unknown node {name:?}", i + 2)))?;
        let row: Vec<f64> = values
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        if row.len() != dim {
            return Err(bad(format!("line {}: expected {dim} features", i + 2)));
        }
        features.push(row);
        labels.push(node);
    }
    Ok((features, labels))
}

fn parse_mode(s: &str) -> CliResult<ThresholdMode> {
    ThresholdMode::parse(s)
        .ok_or_else(|| CliError::Validation(format!("unknown mode {s:?} (use node or path)")))
}

/// CSV of `sample_index,node_name` rows.
fn load_node_csv(path: &Path, h: &Hierarchy) -> CliResult<Vec<NodeId>> {
    let text = read_to_string(path)?;
    let mut rows: BTreeMap<usize, NodeId> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("sample_index")) {
            continue;
        }
        let err = |msg: String| CliError::Validation(format!("{}: line {}: {msg}", path.display(), i + 1));
        let (idx, name) = line
            .split_once(',')
            .ok_or_else(|| err("expected sample_index,node_name".into()))?;
        let idx: usize = idx.trim().parse().map_err(|e| err(format!("{e}")))?;
        let node = h
            .id_of(name.trim())
            .ok_or_else(|| err(format!("unknown node {name:?}")))?;
        rows.insert(idx, node);
    }
    Ok(rows.into_values().collect())
}

fn cmd_hierarchy(cmd: HierarchyCommand) -> CliResult {
    match cmd {
        HierarchyCommand::Prune { input, out } => {
            let h = load_hierarchy(&input)?;
            write_file(&out, &h.prune_single_child().to_text())
        }
        HierarchyCommand::EntropyPrune {
            input,
            data,
            target_internal,
            out,
        } => {
            let h = load_hierarchy(&input)?;
            let ds = load_data(&data, &h)?;
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for s in &ds.samples {
                *counts.entry(h.name(s.label).to_string()).or_insert(0) += 1;
            }
            let pruned = h.entropy_prune(&counts, target_internal).map_err(validation)?;
            write_file(&out, &pruned.to_text())
        }
        HierarchyCommand::Stats { input } => {
            let h = load_hierarchy(&input)?;
            println!("nodes: {}", h.len());
            println!("leaves: {}", h.num_leaves());
            println!("internal: {}", h.num_internals());
            println!("max_depth: {}", h.max_depth());
            Ok(())
        }
    }
}

fn cmd_data(cmd: DataCommand) -> CliResult {
    match cmd {
        DataCommand::Gen {
            branching,
            dim,
            level_scales,
            noise,
            per_leaf,
            seed,
            out_hierarchy,
            out_data,
        } => {
            let h = generate_synthetic_hierarchy(&branching).map_err(validation)?;
            let ds = generate_synthetic_features(&h, dim, &level_scales, noise, per_leaf, seed)
                .map_err(validation)?;
            write_file(&out_hierarchy, &h.to_text())?;
            write_file(&out_data, &write_dataset(&ds, &h))
        }
    }
}

fn parse_band(spec: &str) -> CliResult<Band> {
    let parts: Vec<&str> = spec.split(':').collect();
    let err = || CliError::Validation(format!("band {spec:?}: expected granularity:depth_min:depth_max:prob"));
    if parts.len() != 4 {
        return Err(err());
    }
    Ok(Band {
        granularity: Granularity::parse(parts[0]).ok_or_else(err)?,
        depth_min: parts[1].parse().map_err(|_| err())?,
        depth_max: parts[2].parse().map_err(|_| err())?,
        prob: parts[3].parse().map_err(|_| err())?,
    })
}

fn cmd_split(cmd: SplitCommand) -> CliResult {
    match cmd {
        SplitCommand::Make {
            hierarchy,
            bands,
            seed,
            out,
        } => {
            let h = load_hierarchy(&hierarchy)?;
            let bands = bands
                .iter()
                .map(|b| parse_band(b))
                .collect::<CliResult<Vec<Band>>>()?;
            let spec = SplitSpec { bands, seed };
            let selected = select_holdout_subtrees(&h, &spec).map_err(validation)?;
            let mut text = String::new();
            for (name, g) in selected {
                text.push_str(&format!("{name}\t{}\n", g.as_str()));
            }
            write_file(&out, &text)
        }
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let h = load_hierarchy(&args.hierarchy)?;
    let train = load_data(&args.data, &h)?;
    let val = args.val.as_deref().map(|p| load_data(p, &h)).transpose()?;
    let objective = match args.objective.as_str() {
        "hierarchical" => Objective::Hierarchical,
        "flat" => Objective::Flat,
        other => {
            return Err(CliError::Validation(format!(
                "unknown objective {other:?} (use hierarchical or flat)"
            )))
        }
    };
    let params0 = ModelParams::init(
        &h,
        &ModelConfig {
            input_dim: train.dim,
            trunk_layers: args.trunk_layers,
            hidden_dim: args.hidden_dim,
            with_flat_head: objective == Objective::Flat,
            seed: args.seed,
        },
    );
    let tcfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        lr_decay_factor: args.lr_decay,
        lr_milestones: args.lr_milestones,
        seed: args.seed,
    };
    let lcfg = LossConfig::new(&h, args.alpha, args.beta);
    let (params, log) = train_sgd(&params0, &h, &train, val.as_ref(), &tcfg, &lcfg, objective)
        .map_err(runtime)?;
    write_file(&args.out, &save_checkpoint(&params, &h))?;
    if let Some(log_path) = args.log {
        write_file(&log_path, &log_to_csv(&log))?;
    }
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult {
    let h = load_hierarchy(&args.hierarchy)?;
    let params = load_model(&args.model, &h)?;
    let val = load_data(&args.data, &h)?;
    let mode = parse_mode(&args.mode)?;
    let table = calibrate(&params, &h, &val, args.tnr, mode).map_err(validation)?;
    write_file(&args.out, &table_to_csv(&table, &h))
}

fn cmd_score(args: ScoreArgs) -> CliResult {
    let h = load_hierarchy(&args.hierarchy)?;
    let params = load_model(&args.model, &h)?;
    let ds = load_data(&args.data, &h)?;
    let with_msp = params.flat_head.is_some();
    let mut out = String::from(if with_msp {
        "sample_index,predicted_leaf_name,path_prob,h_mean,h_min,msp\n"
    } else {
        "sample_index,predicted_leaf_name,path_prob,h_mean,h_min\n"
    });
    for (i, s) in ds.samples.iter().enumerate() {
        let sc = score_sample(&params, &h, &s.features).map_err(runtime)?;
        out.push_str(&format!(
            "{i},{},{},{},{}",
            h.name(sc.predicted_leaf),
            sc.path_probability,
            sc.h_mean,
            sc.h_min
        ));
        if with_msp {
            let m = msp_score(&params, &s.features).map_err(runtime)?;
            out.push_str(&format!(",{m}"));
        }
        out.push('\n');
    }
    write_file(&args.out, &out)
}

fn cmd_infer(args: InferArgs) -> CliResult {
    let h = load_hierarchy(&args.hierarchy)?;
    let params = load_model(&args.model, &h)?;
    let ds = load_data(&args.data, &h)?;
    let table = table_from_csv(&read_to_string(&args.thresholds)?, &h).map_err(validation)?;
    let mut out = String::from("sample_index,node_name\n");
    for (i, s) in ds.samples.iter().enumerate() {
        let pred = hierarchical_infer(&params, &h, &s.features, &table).map_err(runtime)?;
        out.push_str(&format!("{i},{}\n", h.name(pred)));
    }
    write_file(&args.out, &out)
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let h = load_hierarchy(&args.hierarchy)?;
    let preds = load_node_csv(&args.preds, &h)?;
    let gts = load_node_csv(&args.labels, &h)?;
    let o = hierarchical_outcomes(&preds, &gts, &h).map_err(validation)?;
    println!("samples: {}", o.count);
    println!("accuracy: {:.6}", o.accuracy);
    println!("lenient_accuracy: {:.6}", o.lenient_accuracy);
    println!("avg_hierarchy_distance: {:.6}", o.avg_distance);
    for (mode, name) in [
        (ErrorMode::Correct, "correct"),
        (ErrorMode::UnderPrediction, "under_prediction"),
        (ErrorMode::OverPrediction, "over_prediction"),
        (ErrorMode::StandardError, "standard_error"),
    ] {
        println!("{name}: {}", o.modes.get(&mode).copied().unwrap_or(0));
    }
    if let Some(path) = args.out_confusion {
        write_file(&path, &confusion_to_csv(&o.confusion))?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let h = load_hierarchy(&args.hierarchy)?;
    let params = load_model(&args.model, &h)?;
    let val = load_data(&args.val, &h)?;
    let test = load_data(&args.test, &h)?;
    let pools = match &args.ood {
        Some(path) => {
            let (features, gt_nodes) = load_pool(path, &h)?;
            vec![OodPool {
                granularity: Granularity::Fine,
                features,
                gt_nodes,
            }]
        }
        None => Vec::new(),
    };
    for t in &args.grid {
        if !(0.0 < *t && *t < 1.0) {
            return Err(CliError::Validation(format!("grid value {t} outside (0, 1)")));
        }
    }
    let points = tnr_sweep(&params, &h, &val, &test, &pools, &args.grid).map_err(runtime)?;
    write_file(&args.out, &sweep_to_csv(&points))
}

fn cmd_bench(args: BenchArgs) -> CliResult {
    let cfg = BenchConfig::default_with_seed(args.seed);
    let report = run_bench(&cfg).map_err(runtime)?;
    write_report(&report, &args.out).map_err(runtime)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Hierarchy { command } => cmd_hierarchy(command),
        Command::Data { command } => cmd_data(command),
        Command::Split { command } => cmd_split(command),
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Score(args) => cmd_score(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful exits; anything else is a
            // validation error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
