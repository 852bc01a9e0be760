use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use barrier_synth::FitMode;
use barrier_synth_cli::config::PipelineConfig;
use barrier_synth_cli::exit::{self, StageFailure};
use barrier_synth_cli::pipeline::Run;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "barrier-synth",
    version,
    about = "Synthesize control barrier functions from hard state constraints"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "barrier-synth.toml")]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sampling seed; overrides `sampling.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate the configuration and exit without touching the output directory.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Draw and classify states until the feasible set estimate settles.
    Sample,
    /// Extract boundary points from the stored samples.
    Boundary,
    /// Fit uniform, non-uniform and multi-candidate barrier functions.
    Fit,
    /// Run the safety-filtered closed loop from every configured start.
    Simulate,
    /// Run all stages and write the report.
    Pipeline,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.sampling.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    if cli.dry_run {
        println!("configuration ok: {} -> {}", cli.config.display(), out.display());
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(StageFailure::new(exit::USAGE, "--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }

    let mut run = Run::new(cfg, out)?;
    match cli.command {
        Command::Sample => {
            run.force.push("sample".into());
            run.sample()?;
        }
        Command::Boundary => {
            let samples = run.load_samples()?;
            run.force.push("boundary".into());
            run.boundary(&samples)?;
        }
        Command::Fit => {
            let samples = run.load_samples()?;
            let boundary = run.load_boundary(&samples)?;
            let mut fits = Vec::new();
            for mode in run.cfg.fit_modes() {
                let r = run.fit(mode, &samples, &boundary, fits.last())?;
                fits.push(r);
            }
        }
        Command::Simulate => {
            let fits = run
                .cfg
                .fit_modes()
                .into_iter()
                .map(|m: FitMode| run.load_fit(m))
                .collect::<anyhow::Result<Vec<_>>>()?;
            run.simulate(&fits)?;
        }
        Command::Pipeline => {
            run.pipeline()?;
        }
    }
    Ok(())
}
