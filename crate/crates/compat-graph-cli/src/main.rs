//! Command-line entry point: train, evaluate, sweep context budgets,
//! predict single pairs, generate synthetic datasets, and check gradients.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors. Every command is deterministic given its `--seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use compat_graph::eval::{self, EvalConfig};
use compat_graph::gradcheck::GradCheck;
use compat_graph::graph::Graph;
use compat_graph::io::{
    load_checkpoint, load_edges, load_features, load_outfits, load_questions, save_checkpoint,
    SyntheticConfig,
};
use compat_graph::numeric::Matrix;
use compat_graph::trainer::{self, GaeModel, TrainConfig};

/// Tolerance the gradient check must meet.
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "compat-graph",
    version,
    about = "Context-conditioned item compatibility prediction",
    after_help = "The COMPAT_GRAPH_THREADS environment variable caps internal \
                  parallelism (0 or unset = automatic)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a feature matrix and relation graph
    Train(TrainArgs),
    /// Fill-in-the-blank accuracy of a trained model
    EvalFitb(EvalFitbArgs),
    /// Outfit compatibility ROC-AUC of a trained model
    EvalCompat(EvalCompatArgs),
    /// Evaluate both tasks across several context budgets
    KSweep(KSweepArgs),
    /// Edge probability for one pair of items
    Predict(PredictArgs),
    /// Generate a synthetic dataset with planted style structure
    GenSynthetic(GenSyntheticArgs),
    /// Verify model gradients against central finite differences
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Feature matrix file (header `N F`, then N rows)
    #[arg(long)]
    features: PathBuf,
    /// Edge list file (`i j` per line)
    #[arg(long)]
    edges: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Maximum training iterations
    #[arg(long, default_value_t = 4000)]
    iters: usize,
    /// Per-iteration probability that a node loses all incident edges
    #[arg(long = "p-drop", default_value_t = 0.15)]
    p_drop: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional training-log CSV (one row per validation)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFitbArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// Question file (`answer | partial | choices` per line)
    #[arg(long)]
    questions: PathBuf,
    /// BFS context budget per query item
    #[arg(long)]
    k: usize,
    /// Optional per-question CSV output
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCompatArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// Labelled outfit file (`label item item ...` per line)
    #[arg(long)]
    outfits: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct KSweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    outfits: PathBuf,
    /// Context budgets to evaluate, e.g. `0,3,15`
    #[arg(long = "k-list", value_delimiter = ',', required = true)]
    k_list: Vec<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// The two item ids to score
    #[arg(long, num_args = 2, value_names = ["I", "J"])]
    pair: Vec<usize>,
    #[arg(long)]
    k: usize,
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// TOML generator config; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for features/edges/outfits/questions
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::EvalFitb(args) => cmd_eval_fitb(args),
        Command::EvalCompat(args) => cmd_eval_compat(args),
        Command::KSweep(args) => cmd_k_sweep(args),
        Command::Predict(args) => cmd_predict(args),
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::CheckGrad(args) => cmd_check_grad(args),
    }
}

fn load_dataset(features: &Path, edges: &Path) -> Result<(Matrix, Graph)> {
    let x = load_features(features)
        .with_context(|| format!("reading features from {}", features.display()))?;
    let edge_list =
        load_edges(edges).with_context(|| format!("reading edges from {}", edges.display()))?;
    let g = Graph::build(x.rows(), &edge_list)
        .with_context(|| format!("building the graph from {}", edges.display()))?;
    Ok((x, g))
}

fn load_model(path: &Path) -> Result<GaeModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_model_inputs(model: &GaeModel, x: &Matrix) -> Result<()> {
    if model.config.input_dim != x.cols() {
        bail!(
            "model expects {} input features but the feature file has {}",
            model.config.input_dim,
            x.cols()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (x, g) = load_dataset(&args.features, &args.edges)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        max_iterations: args.iters,
        p_drop: args.p_drop,
        seed: args.seed,
        ..TrainConfig::default()
    };
    eprintln!(
        "training on {} nodes / {} edges ({} iterations max, seed {})",
        g.num_nodes(),
        g.num_edges(),
        config.max_iterations,
        config.seed
    );
    let (model, log) = trainer::train(&x, &g, &config).context("training failed")?;
    save_checkpoint(&model, &args.out)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    if let Some(log_path) = &args.log {
        fs::write(log_path, log.to_csv())
            .with_context(|| format!("writing training log {}", log_path.display()))?;
    }
    println!(
        "trained {} iterations, best validation AUC {:.4} at iteration {}{}",
        log.loss_history.len(),
        log.best_val_auc,
        log.best_iteration,
        if log.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_eval_fitb(args: EvalFitbArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (x, g) = load_dataset(&args.features, &args.edges)?;
    check_model_inputs(&model, &x)?;
    let questions = load_questions(&args.questions)
        .with_context(|| format!("reading questions from {}", args.questions.display()))?;
    let cfg = EvalConfig::new(args.k);
    let outcomes = eval::fitb_results(&model, &x, &g, &questions, &cfg)?;
    let accuracy =
        outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64;
    if let Some(csv) = &args.csv {
        let mut out = String::from("index,answer,chosen,correct,scores\n");
        for (idx, (q, o)) in questions.iter().zip(&outcomes).enumerate() {
            let scores: Vec<String> = o.scores.iter().map(|s| format!("{s:.6}")).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                idx,
                q.answer_index,
                o.chosen,
                u8::from(o.correct),
                scores.join(";")
            );
        }
        let _ = writeln!(out, "summary,accuracy,{accuracy:.6}");
        fs::write(csv, out).with_context(|| format!("writing {}", csv.display()))?;
    }
    println!(
        "FITB accuracy: {:.4} (k={}, {} questions)",
        accuracy,
        args.k,
        outcomes.len()
    );
    Ok(())
}

fn cmd_eval_compat(args: EvalCompatArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (x, g) = load_dataset(&args.features, &args.edges)?;
    check_model_inputs(&model, &x)?;
    let outfits = load_outfits(&args.outfits)
        .with_context(|| format!("reading outfits from {}", args.outfits.display()))?;
    let cfg = EvalConfig::new(args.k);
    let outcomes = eval::outfit_results(&model, &x, &g, &outfits, &cfg)?;
    let valid: Vec<f64> = outcomes.iter().filter(|o| o.valid).map(|o| o.score).collect();
    let invalid: Vec<f64> = outcomes
        .iter()
        .filter(|o| !o.valid)
        .map(|o| o.score)
        .collect();
    let auc = eval::roc_auc(&valid, &invalid).context("scoring outfits")?;
    if let Some(csv) = &args.csv {
        let mut out = String::from("index,label,score\n");
        for (idx, o) in outcomes.iter().enumerate() {
            let _ = writeln!(out, "{},{},{:.6}", idx, u8::from(o.valid), o.score);
        }
        let _ = writeln!(out, "summary,auc,{auc:.6}");
        fs::write(csv, out).with_context(|| format!("writing {}", csv.display()))?;
    }
    println!(
        "compatibility AUC: {:.4} (k={}, {} valid / {} invalid outfits)",
        auc,
        args.k,
        valid.len(),
        invalid.len()
    );
    Ok(())
}

fn cmd_k_sweep(args: KSweepArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (x, g) = load_dataset(&args.features, &args.edges)?;
    check_model_inputs(&model, &x)?;
    let questions = load_questions(&args.questions)
        .with_context(|| format!("reading questions from {}", args.questions.display()))?;
    let outfits = load_outfits(&args.outfits)
        .with_context(|| format!("reading outfits from {}", args.outfits.display()))?;
    let rows = eval::k_sweep(&model, &x, &g, &questions, &outfits, &args.k_list)?;
    let mut out = String::from("k,fitb_accuracy,compat_auc\n");
    for row in &rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", row.k, row.fitb_accuracy, row.compat_auc);
    }
    print!("{out}");
    if let Some(csv) = &args.csv {
        fs::write(csv, &out).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (x, g) = load_dataset(&args.features, &args.edges)?;
    check_model_inputs(&model, &x)?;
    let (i, j) = (args.pair[0], args.pair[1]);
    for node in [i, j] {
        if node >= g.num_nodes() {
            bail!("item {node} out of range (dataset has {} items)", g.num_nodes());
        }
    }
    let cfg = EvalConfig::new(args.k);
    let query = [i, j];
    let (h, remap) = eval::context_embeddings(&model, &x, &g, &query, &cfg)?;
    let (p, _) = compat_graph::decoder::decode_pair(
        h.row(remap.to_new(i).expect("query node present")),
        h.row(remap.to_new(j).expect("query node present")),
        &model.decoder,
    )?;
    println!("{p:.6}");
    Ok(())
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => SyntheticConfig::from_toml_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dataset = compat_graph::io::gen_synthetic(&config).context("generating dataset")?;
    let bundle = dataset
        .write_bundle(&args.out)
        .with_context(|| format!("writing dataset under {}", args.out.display()))?;
    println!(
        "wrote {} nodes, {} edges, {} outfits, {} questions to {}",
        config.num_nodes(),
        dataset.edges.len(),
        dataset.test_outfits.len(),
        dataset.questions.len(),
        args.out.display()
    );
    println!("features: {}", bundle.features.display());
    println!("edges: {}", bundle.edges.display());
    if let Some(p) = &bundle.outfits {
        println!("outfits: {}", p.display());
    }
    if let Some(p) = &bundle.questions {
        println!("questions: {}", p.display());
    }
    Ok(())
}

fn cmd_check_grad(args: CheckGradArgs) -> Result<()> {
    let check = GradCheck::new(args.seed);
    let err = check.max_rel_error(1e-5);
    println!("max relative gradient error: {err:.3e}");
    if err >= GRAD_CHECK_TOLERANCE {
        bail!("gradient check failed: {err:.3e} >= {GRAD_CHECK_TOLERANCE:.0e}");
    }
    println!("gradient check passed (tolerance {GRAD_CHECK_TOLERANCE:.0e})");
    Ok(())
}
