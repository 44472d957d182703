//! Command-line entry point: dataset generation, forest fitting and
//! prediction, complexity diagnostics, and experiment campaigns.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forestlab::analysis::{bias_variance_decompose, effective_dof, mse};
use forestlab::dataset::{Dataset, RngStream};
use forestlab::dgp::{calibrate_sigma2, generate, write_with_sidecar, DgpName, DgpSpec};
use forestlab::ensemble::{fit_forest_with_stream, Forest, ForestConfig};
use forestlab::error::{Error, Result};
use forestlab::harness::{run_campaign, ExperimentConfig};
use forestlab::tree::{Task, TreeConfig};
use forestlab::Real;

#[derive(Parser)]
#[command(name = "forestlab", version, about = "Tree-ensemble simulation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV plus a JSON sidecar.
    Generate(GenerateArgs),
    /// Fit a forest on a dataset CSV and serialize it.
    Fit(FitArgs),
    /// Predict with a serialized forest on a dataset CSV.
    Predict(PredictArgs),
    /// Estimate effective degrees of freedom of a forest on a fixed design.
    Dof(DofArgs),
    /// Monte Carlo bias-variance decomposition of a forest.
    Bvd(BvdArgs),
    /// Run (or resume) an experiment campaign from a JSON config.
    Experiment(ExperimentArgs),
    /// Inspect a serialized forest.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// DGP name (mars, marsadd, hmars, hmarsadd, hidden2d, band2d_class, sphere3d_class).
    #[arg(long)]
    dgp: String,
    #[arg(long)]
    n: usize,
    /// Signal-to-noise ratio; required for regression DGPs, forbidden for classification.
    #[arg(long)]
    snr: Option<f64>,
    /// Extra uniform noise features appended after the base features.
    #[arg(long, default_value_t = 0)]
    noise_features: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// regression or classification.
    #[arg(long, default_value = "regression")]
    task: String,
    /// Fraction of features considered per split, in (0,1].
    #[arg(long, default_value_t = 1.0)]
    mtry: f64,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// Leaf budget per tree; 0 grows full depth.
    #[arg(long, default_value_t = 0)]
    maxnodes: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DofArgs {
    #[arg(long)]
    dgp: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    snr: f64,
    #[arg(long, default_value_t = 1.0)]
    mtry: f64,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// Leaf budget per tree; 0 grows full depth.
    #[arg(long, default_value_t = 200)]
    maxnodes: usize,
    #[arg(long, default_value_t = 100)]
    replications: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct BvdArgs {
    #[arg(long)]
    dgp: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    snr: f64,
    #[arg(long, default_value_t = 1.0)]
    mtry: f64,
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// Leaf budget per tree; 0 grows full depth.
    #[arg(long, default_value_t = 200)]
    maxnodes: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    noise_features: usize,
    #[arg(long, default_value_t = 2000)]
    test_points: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the number of available CPUs.
    #[arg(long)]
    workers: Option<usize>,
    /// Resume an interrupted campaign (the default; completed jobs are
    /// always skipped when config and output directory match).
    #[arg(long, default_value_t = true)]
    resume: bool,
    /// Overrides the config's output_dir and the FORESTLAB_OUT variable.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Print the per-feature first-depth table as CSV.
    #[arg(long, conflicts_with = "tree")]
    feature_depths: bool,
    /// Dump tree k of the ensemble as text.
    #[arg(long)]
    tree: Option<usize>,
}

fn maxnodes_opt(maxnodes: usize) -> Option<usize> {
    if maxnodes == 0 {
        None
    } else {
        Some(maxnodes)
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let name = DgpName::parse(&args.dgp)?;
    let spec = DgpSpec {
        name,
        n: args.n,
        snr: args.snr,
        extra_noise_features: args.noise_features,
        seed: args.seed,
    };
    let data = generate::<Real>(&spec)?;
    write_with_sidecar(&data, &args.out)?;
    println!(
        "wrote {} rows x {} features to {}",
        data.dataset.n_rows(),
        data.dataset.n_features(),
        args.out.display()
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let task = Task::parse(&args.task)?;
    let tree = TreeConfig::new(task)
        .with_mtry(args.mtry)
        .with_max_leaf_nodes(maxnodes_opt(args.maxnodes));
    tree.validate()?;
    let data = Dataset::<Real>::from_csv_path(&args.data)?;
    let stream = RngStream::new(args.seed);
    let config = ForestConfig::new(args.trees, tree, args.seed);
    let forest = fit_forest_with_stream(&data, &config, &stream)?;
    forest.save(&args.model_out)?;
    let train_mse = mse(&forest.predict(&data)?, data.response())?;
    println!("fit {} trees; train MSE {train_mse}", args.trees);
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let forest = Forest::<Real>::load(&args.model)?;
    let data = Dataset::<Real>::from_csv_path(&args.data)?;
    let preds = forest.predict(&data)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["prediction"])?;
    for p in &preds {
        wtr.write_record([format!("{p}")])?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::runtime(e.to_string()))?;
    std::fs::write(&args.out, bytes)?;
    let err = mse(&preds, data.response())?;
    println!("wrote {} predictions; MSE vs response {err}", preds.len());
    Ok(())
}

fn cmd_dof(args: &DofArgs) -> Result<()> {
    let name = DgpName::parse(&args.dgp)?;
    if name.is_classification() {
        return Err(Error::invalid("dof requires a regression DGP"));
    }
    let stream = RngStream::new(args.seed);
    let sigma2 = calibrate_sigma2(name, args.snr)?;
    let design = generate::<Real>(&DgpSpec {
        name,
        n: args.n,
        snr: Some(args.snr),
        extra_noise_features: 0,
        seed: stream.child(0).key(),
    })?;
    let truth: Vec<f64> = design.dataset.truth().unwrap().to_vec();
    let columns: Vec<Vec<f64>> = (0..design.dataset.n_features())
        .map(|j| design.dataset.feature(j).to_vec())
        .collect();
    let names = design.dataset.feature_names().to_vec();
    let tree = TreeConfig::new(Task::Regression)
        .with_mtry(args.mtry)
        .with_max_leaf_nodes(maxnodes_opt(args.maxnodes));
    tree.validate()?;
    let est = effective_dof(
        &truth,
        sigma2,
        args.replications,
        &stream.child(1),
        |y, rep_stream| {
            let data = Dataset::new(columns.clone(), y.to_vec(), None, names.clone())?;
            let config = ForestConfig::new(args.trees, tree.clone(), rep_stream.key());
            let forest = fit_forest_with_stream(&data, &config, rep_stream)?;
            forest.predict(&data).map(|v| v.to_vec())
        },
    )?;
    println!(
        "dof {} se {} (n {}, replications {})",
        est.dof, est.standard_error, args.n, args.replications
    );
    Ok(())
}

fn cmd_bvd(args: &BvdArgs) -> Result<()> {
    let name = DgpName::parse(&args.dgp)?;
    if name.is_classification() {
        return Err(Error::invalid("bvd requires a regression DGP"));
    }
    let tree = TreeConfig::new(Task::Regression)
        .with_mtry(args.mtry)
        .with_max_leaf_nodes(maxnodes_opt(args.maxnodes));
    tree.validate()?;
    if args.trials < 2 {
        return Err(Error::invalid("bvd needs at least 2 trials"));
    }
    let stream = RngStream::new(args.seed);
    let sigma2 = calibrate_sigma2(name, args.snr)?;
    let test = generate::<Real>(&DgpSpec {
        name,
        n: args.test_points,
        snr: Some(args.snr),
        extra_noise_features: args.noise_features,
        seed: stream.child(0).key(),
    })?;
    let truth: Vec<f64> = test.dataset.truth().unwrap().to_vec();
    let mut preds = Vec::with_capacity(args.trials);
    for t in 0..args.trials {
        let tstream = stream.child(1).child(t as u64);
        let train = generate::<Real>(&DgpSpec {
            name,
            n: args.n,
            snr: Some(args.snr),
            extra_noise_features: args.noise_features,
            seed: tstream.child(0).key(),
        })?;
        let config = ForestConfig::new(args.trees, tree.clone(), tstream.key());
        let forest = fit_forest_with_stream(&train.dataset, &config, &tstream.child(1))?;
        preds.push(forest.predict(&test.dataset)?.to_vec());
    }
    let d = bias_variance_decompose(&preds, &truth, sigma2)?;
    println!(
        "bias2 {} variance {} noise {} total_mse {}",
        d.bias2, d.variance, d.noise, d.total_mse
    );
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_json_path(&args.config)?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = Some(dir.clone());
    }
    if config.output_dir.is_none() {
        config.output_dir = std::env::var_os("FORESTLAB_OUT").map(PathBuf::from);
    }
    let _ = args.resume; // campaigns always resume; the flag documents intent
    let workers = args.workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    let summary = run_campaign(&config, workers)?;
    println!(
        "campaign {} complete: {} rows ({} jobs run, {} skipped) in {}",
        config.recipe,
        summary.total_rows,
        summary.jobs_run,
        summary.jobs_skipped,
        summary.dir.display()
    );
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let forest = Forest::<Real>::load(&args.model)?;
    if let Some(k) = args.tree {
        let trees = forest.trees();
        if k >= trees.len() {
            return Err(Error::invalid(format!(
                "tree index {k} out of range; forest has {} trees",
                trees.len()
            )));
        }
        print!("{}", trees[k].to_text());
        return Ok(());
    }
    if args.feature_depths {
        let names: Vec<String> = (1..=forest.n_features()).map(|j| format!("x{j}")).collect();
        let table = forest.first_depth_table(&names)?;
        println!("feature,mean_first_depth,usage_fraction");
        for (name, mean, usage) in table {
            let mean = mean.map_or(String::new(), |m| format!("{m}"));
            println!("{name},{mean},{usage}");
        }
        return Ok(());
    }
    println!(
        "forest: {} trees, {} features, task {}",
        forest.trees().len(),
        forest.n_features(),
        forest.task().as_str()
    );
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Dof(args) => cmd_dof(args),
        Command::Bvd(args) => cmd_bvd(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
