use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use invtrain::io::write_atomic;
use invtrain::train::{self, CHECKPOINT_FILE};
use invtrain::{AblationGrid, CausalDag, Checkpoint, ChipSpec, Dataset, Mode, Split, TrainConfig, TrainError};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Confounder-robust classification training with dual invariance, plus
/// exact causal checks on discrete models.
#[derive(Debug, Parser)]
#[command(name = "invtrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic confounded chip dataset.
    GenData(GenDataArgs),
    /// Train one network and write checkpoint, metrics and log.
    Train(TrainArgs),
    /// Run the mode x shots x seeds ablation grid.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Check backdoor adjustment against the interventional oracle.
    ScmCheck(ScmCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// JSON chip spec; missing fields take defaults.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; its spec is the base for regenerated cells.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated shots per class.
    #[arg(long, value_delimiter = ',', required = true)]
    shots: Vec<usize>,
    #[arg(long)]
    seeds: usize,
    /// Comma-separated subset of V1,V2,V3,FULL.
    #[arg(long, value_delimiter = ',', default_value = "V1,V2,V3,FULL")]
    modes: Vec<Mode>,
    /// CSV output; the summary goes next to it with a `.summary.csv` suffix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file, or a run directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Debug, Args)]
struct ScmCheckArgs {
    /// JSON DAG document with nodes, edges and cpts.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    treatment: String,
    #[arg(long)]
    outcome: String,
    /// Comma-separated adjustment set (may be empty).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    adjust: Vec<String>,
}

fn threads() -> Result<usize> {
    match std::env::var("INVTRAIN_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("INVTRAIN_THREADS=`{v}` is not a count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec: ChipSpec = read_json(&args.spec)?;
    let manifest = invtrain::datagen::generate_dataset(&spec, &args.out)?;
    println!(
        "wrote {} train + {} test chips to {}",
        manifest.splits.train,
        manifest.splits.test,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let config: TrainConfig = read_json(&args.config)?;
    let data = load_dataset(&args.data)?;
    let outcome = train::train_run(&config, &data)?;
    fs::create_dir_all(&args.out)?;
    outcome.write_to(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&outcome.metrics)?);
    Ok(())
}

fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    let config: TrainConfig = read_json(&args.config)?;
    let data = load_dataset(&args.data)?;
    let grid = AblationGrid {
        modes: args.modes.clone(),
        shots: args.shots.clone(),
        seeds: args.seeds,
        threads: threads()?,
    };
    let table = train::ablate(&config, data.spec(), &grid)?;
    write_atomic(&args.out, table.to_csv().as_bytes())?;
    let mut summary_path = args.out.clone().into_os_string();
    summary_path.push(".summary.csv");
    let summary = table.summary_csv();
    write_atomic(Path::new(&summary_path), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let path = if args.checkpoint.is_dir() {
        args.checkpoint.join(CHECKPOINT_FILE)
    } else {
        args.checkpoint.clone()
    };
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let data = load_dataset(&args.data)?;
    let metrics = train::evaluate(&ckpt, &data, args.split)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn scm_check(args: &ScmCheckArgs) -> Result<()> {
    let text = fs::read_to_string(&args.graph).with_context(|| format!("reading {}", args.graph.display()))?;
    let dag = CausalDag::from_json(&text)?;
    let (x, y) = (args.treatment.as_str(), args.outcome.as_str());
    let z: Vec<&str> = args.adjust.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
    let admissible = dag.backdoor_criterion(x, y, &z)?;
    let card = dag.variables()[dag.node(x)?].cardinality;
    let mut rows = Vec::with_capacity(card);
    let mut worst = 0.0f64;
    for value in 0..card {
        let oracle = dag.interventional_oracle(x, value, y)?;
        let observational = dag.conditional(y, x, value).ok().map(|d| d.probs);
        let adjusted = if admissible {
            let d = dag.backdoor_adjust(x, value, y, &z)?;
            worst = worst.max(d.max_abs_diff(&oracle));
            Some(d.probs)
        } else {
            None
        };
        rows.push(serde_json::json!({
            "value": value,
            "interventional": oracle.probs,
            "observational": observational,
            "adjusted": adjusted,
        }));
    }
    let report = serde_json::json!({
        "treatment": x,
        "outcome": y,
        "adjust": z,
        "backdoor_criterion": admissible,
        "max_abs_diff": if admissible { Some(worst) } else { None },
        "rows": rows,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !admissible {
        bail!("{{{}}} does not satisfy the backdoor criterion for {x} -> {y}", z.join(", "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(threads()?).build_global()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ScmCheck(a) => scm_check(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Diverged { .. })));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_RUNTIME })
        }
    }
}
