use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use echo_koopman::config::ExperimentConfig;
use echo_koopman::experiment::{
    export_trace, predict_trace, reference_trace, run_photon_echo, run_sweep, train_model,
    write_report,
};
use echo_koopman::model_io;

#[derive(Parser)]
#[command(
    name = "echo-koopman",
    version,
    about = "Photon-echo reference simulations and Koopman surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output file or directory, depending on the subcommand.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// RK45 ensemble reference; writes <out>/reference.csv.
    Simulate(Common),
    /// Trains the configured surrogate and saves it to <out>.
    Train(Common),
    /// Loads a saved surrogate and writes <out>/prediction.csv.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Reference, training, prediction and error report in one run.
    Echo(Common),
    /// Runs the config's [sweep] table and writes the CSV to <out>.
    Sweep(Common),
}

fn setup(c: &Common) -> Result<ExperimentConfig> {
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("stage setup: cannot build thread pool")?;
    }
    let mut cfg = ExperimentConfig::load(&c.config).context("stage config")?;
    if let Some(seed) = c.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("stage output: cannot create {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = setup(&c)?;
            let reference = reference_trace(&cfg).context("stage reference")?;
            out_dir(&c.out)?;
            export_trace(&reference, c.out.join("reference.csv")).context("stage output")?;
        }
        Command::Train(c) => {
            let cfg = setup(&c)?;
            let model = train_model(&cfg).context("stage train")?;
            model_io::save(&model, &c.out).context("stage output")?;
        }
        Command::Predict { common: c, model } => {
            let cfg = setup(&c)?;
            let model = model_io::load(&model).context("stage load-model")?;
            let prediction = predict_trace(&cfg, &model)
                .context("stage predict")?
                .context("stage predict: surrogate diverged")?;
            out_dir(&c.out)?;
            export_trace(&prediction, c.out.join("prediction.csv")).context("stage output")?;
        }
        Command::Echo(c) => {
            let cfg = setup(&c)?;
            let run = run_photon_echo(&cfg).context("stage echo")?;
            out_dir(&c.out)?;
            export_trace(&run.reference, c.out.join("reference.csv")).context("stage output")?;
            if let Some(p) = &run.prediction {
                export_trace(p, c.out.join("prediction.csv")).context("stage output")?;
            }
            write_report(&run.report, c.out.join("report.csv")).context("stage output")?;
            println!(
                "l2 = {:.6e}, rel_peak = {:.6e}",
                run.report.l2, run.report.rel_peak
            );
        }
        Command::Sweep(c) => {
            let cfg = setup(&c)?;
            let table = run_sweep(&cfg).context("stage sweep")?;
            if let Some(dir) = c.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                out_dir(dir)?;
            }
            table.write(&c.out).context("stage output")?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
