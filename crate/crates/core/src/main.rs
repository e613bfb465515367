use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use woodflow::config::PipelineConfig;
use woodflow::pipeline;
use woodflow::{Error, Result};

/// Humidity deformation of wood from scan pairs: optical flow, strain and
/// swelling coefficients.
#[derive(Parser, Debug)]
#[command(name = "woodflow", version)]
struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// TOML pipeline configuration.
    #[arg(long, short, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Pair selector: initial, chain, all or a list like "dry-wet,A/dry-mid".
    #[arg(long, global = true, value_name = "SELECTOR")]
    pairs: Option<String>,
    /// Number of pairs processed concurrently.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Disable illumination compensation (beta = 0).
    #[arg(long, global = true)]
    no_illum: bool,
    /// Remove the average rigid motion and estimate the flow a second time.
    #[arg(long, global = true)]
    rerun_registration: bool,
    /// Seed for synthetic textures and noise.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment, de-rotate, align and crop the scans.
    Preprocess,
    /// Estimate flow and illumination for the selected pairs.
    Flow,
    /// Strain fields, coefficient profiles and cracks.
    Strain,
    /// Markdown summary per face.
    Report,
    /// Run synthetic catalog cases through flow and strain.
    Synth {
        /// Case name; repeatable. Default: the whole catalog.
        #[arg(long = "case", value_name = "NAME")]
        cases: Vec<String>,
    },
    /// preprocess, flow, strain and report.
    All,
}

fn effective_config(opts: &GlobalOpts, needs_file: bool) -> Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(path) => PipelineConfig::load(path)?,
        None if needs_file => return Err(Error::Config("--config is required for this command".into())),
        None => PipelineConfig::default(),
    };
    if let Some(out) = &opts.out {
        cfg.out_dir = out.clone();
    }
    if let Some(p) = &opts.pairs {
        cfg.pairs = p.clone();
    }
    if let Some(w) = opts.workers {
        cfg.workers = w;
    }
    if opts.no_illum {
        cfg.solver.beta = 0.0;
    }
    if opts.rerun_registration {
        cfg.flow.rerun_registration = true;
    }
    if opts.seed.is_some() {
        cfg.seed = opts.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let needs_file = !matches!(cli.command, Command::Synth { .. } | Command::Report);
    let cfg = effective_config(&cli.opts, needs_file)?;
    match &cli.command {
        Command::Preprocess => pipeline::cmd_preprocess(&cfg).map(drop),
        Command::Flow => pipeline::cmd_flow(&cfg).map(drop),
        Command::Strain => pipeline::cmd_strain(&cfg).map(drop),
        Command::Report => {
            for p in pipeline::cmd_report(&cfg)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Synth { cases } => {
            let manifest = pipeline::cmd_synth(&cfg, cases)?;
            for (name, rec) in &manifest.synth {
                if let Some(s) = &rec.synth {
                    println!(
                        "{name}: endpoint error mean {:.4} px, p95 {:.4} px",
                        s.endpoint_error_mean, s.endpoint_error_p95
                    );
                }
            }
            Ok(())
        }
        Command::All => {
            for p in pipeline::cmd_all(&cfg)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.opts.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
