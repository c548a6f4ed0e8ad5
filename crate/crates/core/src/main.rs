use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use climath::experiment::{
    evaluate_run, export_plotdata, generate, import_observations, run, spectra_run, truth_constants, RunConfig,
    RunOptions, ScenarioId,
};
use climath::Result;

#[derive(Parser)]
#[command(name = "climath", version, about = "Source inversion for advection-diffusion problems with NTK-weighted PINNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario preset: A1, A2, B or C.
    #[arg(long, short)]
    scenario: Option<String>,
    /// Start from a TOML config instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Relative noise level, e.g. 0.01.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    sensors: Option<usize>,
    /// Use the published network sizes and iteration counts.
    #[arg(long)]
    paper_scale: bool,
    /// Dotted override, e.g. `train.adam_steps=200`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, short)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the truth and write sampled observations.
    Generate(ConfigArgs),
    /// Full run: data, training, metrics and manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train on an external observation file instead of synthetic data.
        #[arg(long)]
        obs: Option<PathBuf>,
        /// Log every reported step to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Recompute metrics for a finished run.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write gridded plot data for a finished run.
    ExportPlots {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Kernel spectra and traces at initialization.
    Spectra {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Forward problem: true coefficients fixed, boundary split by axis.
        #[arg(long)]
        forward: bool,
    },
    /// Validate an observation file, optionally copying it into a directory.
    ImportObs {
        path: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn effective_config(a: &ConfigArgs) -> Result<RunConfig> {
    let base = match (&a.config, &a.scenario) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| climath::Error::io(path, e))?;
            RunConfig::from_toml(&text)?
        }
        (None, Some(s)) => RunConfig::preset(s.parse::<ScenarioId>()?, a.paper_scale),
        (None, None) => return Err(climath::Error::Config("either --scenario or --config is required".into())),
    };
    let mut sets = Vec::new();
    if let Some(s) = a.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(n) = a.noise {
        sets.push(format!("data.noise={n}"));
    }
    if let Some(n) = a.sensors {
        sets.push(format!("data.sensors={n}"));
    }
    sets.extend(a.overrides.iter().cloned());
    let cfg = base.with_overrides(&sets)?;
    println!("# effective config\n{}", cfg.to_toml());
    println!("# truth constants");
    for (k, v) in truth_constants() {
        println!("{k} = {v}");
    }
    println!();
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = effective_config(&a)?;
            let (m, _, data) = generate(&cfg, &a.out_dir)?;
            println!(
                "wrote {} observations and {} boundary data to {} ({} files)",
                data.observations.len(),
                data.boundary_data.len(),
                a.out_dir.display(),
                m.files.len()
            );
        }
        Command::Train { cfg: a, obs, verbose } => {
            let cfg = effective_config(&a)?;
            let external = obs.as_deref().map(|p| import_observations(p, None)).transpose()?;
            let mut opts = RunOptions {
                external,
                progress: None,
            };
            if verbose {
                opts.progress = Some(Box::new(|r| {
                    eprintln!("step {:>6}  total {:.6e}  {}  weights {}", r.step, r.total, r.components, r.weights)
                }));
            }
            let out = run(&cfg, &a.out_dir, opts)?;
            if let Some(s) = out.history.lbfgs_stalled_at {
                println!("L-BFGS stalled at step {s}");
            }
            print!("{}", out.metrics.to_csv());
        }
        Command::Evaluate { run_dir } => {
            print!("{}", evaluate_run(&run_dir)?.to_csv());
        }
        Command::ExportPlots { run_dir } => {
            for f in export_plotdata(&run_dir)? {
                println!("plots/{f}");
            }
        }
        Command::Spectra { cfg: a, forward } => {
            let cfg = effective_config(&a)?;
            let (records, traces) = spectra_run(&cfg, &a.out_dir, forward)?;
            println!("traces at initialization: {traces}");
            println!("{} eigenvalues written to {}", records.len(), a.out_dir.join("spectra.csv").display());
        }
        Command::ImportObs { path, out_dir } => {
            let obs = import_observations(&path, out_dir.as_deref())?;
            let acc = obs.entries.iter().filter(|e| e.tau.kind_name() == "accumulative").count();
            println!(
                "{} observations in {} dimensions ({} pointwise, {} accumulative)",
                obs.len(),
                obs.dims,
                obs.len() - acc,
                acc
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
