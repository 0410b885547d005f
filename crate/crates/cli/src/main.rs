use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use subselnet::harness::{
    evaluate_run, regenerate_reports, run_all, ExperimentConfig, HarnessError, MultiSeedReport, Pipeline,
    RunReport, Stage, StageOutcome, StageStatus,
};

#[derive(Parser)]
#[command(
    name = "subselnet",
    version,
    about = "Architecture-aware training subset selection"
)]
struct Cli {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Seed for single-stage commands; restricts run-all to this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the per-architecture worker pool.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample the architecture space and split it 70/10/20.
    GenSpace,
    /// Build the dataset and its train/val/test rows.
    MakeData,
    /// Train the model zoo on the training rows.
    PretrainZoo,
    /// Fit the graph encoder on the architecture space.
    TrainEncoder,
    /// Fit the model approximator on the zoo.
    TrainApproximator,
    /// Fit the inductive scorer for every budget.
    TrainInductive,
    /// Choose subsets for every test architecture, method and budget.
    Select,
    /// Train each test architecture on each chosen subset and on all rows.
    TrainOnSubset,
    /// Compute metrics for the run.
    Evaluate,
    /// Rebuild reports and CSVs from the run directory alone.
    Report,
    /// Run every stage for every seed.
    RunAll,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenSpace => Stage::Space,
            Command::MakeData => Stage::Data,
            Command::PretrainZoo => Stage::Zoo,
            Command::TrainEncoder => Stage::Encoder,
            Command::TrainApproximator => Stage::Approximator,
            Command::TrainInductive => Stage::Inductive,
            Command::Select => Stage::Select,
            Command::TrainOnSubset => Stage::Downstream,
            Command::Evaluate => Stage::Evaluate,
            Command::Report | Command::RunAll => return None,
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let c = ExperimentConfig::default();
            c.validate()?;
            Ok(c)
        }
    }
}

fn print_stage(o: &StageOutcome) {
    match o.status {
        StageStatus::Ran => println!("{:<20} ran in {:.2}s", o.stage.name(), o.seconds),
        StageStatus::Skipped => println!("{:<20} up to date", o.stage.name()),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn print_report(r: &RunReport) {
    println!(
        "seed {} ({} test architectures, {} training rows)",
        r.seed,
        r.test_archs.len(),
        r.n_train
    );
    println!(
        "{:<28} {:>6} {:>9} {:>9} {:>8} {:>8} {:>7}",
        "method", "b", "rar", "speedup", "tau", "jaccard", "failed"
    );
    for s in &r.summary {
        println!(
            "{:<28} {:>6} {:>9} {:>9} {:>8} {:>8} {:>7}",
            s.method,
            s.b,
            fmt(s.rar_mean),
            fmt(s.speedup),
            fmt(s.kendall_tau),
            fmt(s.jaccard),
            s.n_failed
        );
    }
}

fn print_aggregate(a: &MultiSeedReport) {
    println!("seeds {:?}", a.seeds);
    if a.mixed_machines {
        println!("warning: timings come from different machines");
    }
    for r in &a.rows {
        println!(
            "{:<28} b={:<6} rar {} ± {}  speedup {}",
            r.method,
            r.b_frac,
            fmt(r.rar_mean),
            fmt(r.rar_std),
            fmt(r.speedup_mean)
        );
    }
    for c in &a.comparisons {
        println!(
            "{} vs {} (b={}): {} pairs, rar {:.4} vs {:.4}, wins {} losses {} ties {}, p = {:.4}",
            c.method,
            c.baseline,
            c.b_frac,
            c.n_pairs,
            c.method_rar,
            c.baseline_rar,
            c.sign_test.wins,
            c.sign_test.losses,
            c.sign_test.ties,
            c.sign_test.p_value
        );
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if matches!(cli.command, Command::Report) {
        let (reports, agg) = regenerate_reports(&cli.run_dir)?;
        for r in &reports {
            print_report(r);
        }
        if let Some(a) = agg {
            print_aggregate(&a);
        }
        return Ok(());
    }
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command.stage() {
        Some(stage) => {
            let seed = cli.seed.unwrap_or(config.seeds[0]);
            let p = Pipeline::new(config, &cli.run_dir, seed, workers)?;
            let outcome = p.run_stage(stage)?;
            print_stage(&outcome);
            if stage == Stage::Evaluate {
                print_report(&evaluate_run(&cli.run_dir)?);
            }
        }
        None => {
            if let Some(s) = cli.seed {
                config.seeds = vec![s];
            }
            let (outcomes, agg) = run_all(&config, &cli.run_dir, workers)?;
            for o in &outcomes {
                o.stages.iter().for_each(print_stage);
                print_report(&o.report);
            }
            if let Some(a) = agg {
                print_aggregate(&a);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
