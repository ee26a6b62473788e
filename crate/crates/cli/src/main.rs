use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spectral_guidance_cli::config;
use spectral_guidance_cli::error::CliError;
use spectral_guidance_cli::plot::{emit_plot, PlotSpec};
use spectral_guidance_cli::runner;

#[derive(Parser)]
#[command(name = "specguide", version, about = "Spectral guidance experiments")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// Run the experiment in a config file.
    Run {
        config: PathBuf,
        /// Write outputs here instead of the configured output_dir.
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
    },
    /// Render a CSV table with a TOML plot spec.
    Plot {
        table: PathBuf,
        spec: PathBuf,
        /// Defaults to the table path with an .svg extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config } => {
            let c = config::load(&config)?;
            println!("{}: valid {} config", config.display(), c.kind.name());
        }
        Command::Run { config, output_dir } => {
            let c = config::load(&config)?;
            let m = runner::run(&c, output_dir.as_deref())?;
            let root = output_dir.unwrap_or_else(|| c.output_dir());
            println!("wrote {} files to {}", m.files.len() + 1, root.display());
        }
        Command::Plot { table, spec, output } => {
            let s = PlotSpec::load(&spec)?;
            let out = output.unwrap_or_else(|| table.with_extension("svg"));
            emit_plot(&table, &s, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
