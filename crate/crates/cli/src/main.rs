//! `svyint`: probability/nonprobability survey integration from the shell.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use survey_integrate::pipeline::{run_pipeline, Command, RunConfig};
use survey_integrate::types::Factor;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Simulate,
    FitPropensity,
    Estimate,
    Bias,
    Compose,
    Evaluate,
    ModelFit,
    ModelPredict,
    Sweep,
    Run,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::FitPropensity => Command::FitPropensity,
            Cmd::Estimate => Command::Estimate,
            Cmd::Bias => Command::Bias,
            Cmd::Compose => Command::Compose,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::ModelFit => Command::ModelFit,
            Cmd::ModelPredict => Command::ModelPredict,
            Cmd::Sweep => Command::Sweep,
            Cmd::Run => Command::Run,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Group {
    Overall,
    Age,
    Race,
    Education,
}

impl From<Group> for Factor {
    fn from(g: Group) -> Self {
        match g {
            Group::Overall => Factor::Overall,
            Group::Age => Factor::Age,
            Group::Race => Factor::Race,
            Group::Education => Factor::Education,
        }
    }
}

/// Integrate probability and nonprobability survey samples.
///
/// Flags override values from `--config`.
#[derive(Debug, Parser)]
#[command(name = "svyint", version)]
struct Cli {
    command: Cmd,

    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run replicates on the calling thread only.
    #[arg(long)]
    sequential: bool,

    #[arg(long)]
    layout: Option<PathBuf>,
    /// Population spec (TOML) for simulate and sweep.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    ps: Option<PathBuf>,
    #[arg(long)]
    nps: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    aux_ps: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    aux_nps: Vec<PathBuf>,
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    estimates: Vec<PathBuf>,
    #[arg(long)]
    bias: Option<PathBuf>,
    /// Previously fitted propensity model (JSON).
    #[arg(long)]
    propensity: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,

    #[arg(long, value_delimiter = ',')]
    groups: Vec<Group>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    pi_clip: Option<f64>,
    #[arg(long = "bootstrap-B")]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sweep_sizes: Vec<usize>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    shrinkage: Option<f64>,
    #[arg(long)]
    min_node_size: Option<usize>,
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn config(cli: Cli) -> survey_integrate::Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.command = cli.command.into();
    set(&mut c.output, cli.out);
    set(&mut c.seed, cli.seed);
    c.sequential |= cli.sequential;

    let i = &mut c.inputs;
    for (slot, v) in [
        (&mut i.layout, cli.layout),
        (&mut i.population, cli.population),
        (&mut i.ps, cli.ps),
        (&mut i.nps, cli.nps),
        (&mut i.benchmark, cli.benchmark),
        (&mut i.bias, cli.bias),
        (&mut i.propensity, cli.propensity),
        (&mut i.model, cli.model),
    ] {
        if v.is_some() {
            *slot = v;
        }
    }
    for (slot, v) in [
        (&mut i.aux_ps, cli.aux_ps),
        (&mut i.aux_nps, cli.aux_nps),
        (&mut i.estimates, cli.estimates),
    ] {
        if !v.is_empty() {
            *slot = v;
        }
    }
    if !cli.groups.is_empty() {
        c.groups = cli.groups.into_iter().map(Factor::from).collect();
    }
    if !cli.sweep_sizes.is_empty() {
        c.simulation.sweep_sizes = cli.sweep_sizes;
    }
    set(&mut c.propensity.tol, cli.tol);
    set(&mut c.propensity.max_iter, cli.max_iter);
    set(&mut c.propensity.pi_clip, cli.pi_clip);
    set(&mut c.bootstrap_replicates, cli.bootstrap_b);
    set(&mut c.simulation.replicates, cli.replicates);
    set(&mut c.gbm.n_trees, cli.trees);
    set(&mut c.gbm.max_depth, cli.depth);
    set(&mut c.gbm.shrinkage, cli.shrinkage);
    set(&mut c.gbm.min_node_size, cli.min_node_size);
    Ok(c)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = config(cli).and_then(|c| run_pipeline(&c));
    match result {
        Ok(meta) => {
            for o in &meta.outputs {
                println!("{o}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
