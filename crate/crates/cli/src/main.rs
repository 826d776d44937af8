use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psam_cli::sweep::{run_sweep, SweepParam};
use psam_cli::{CliError, PipelineConfig, Stage, Workspace, OUTPUT_ROOT_ENV};

#[derive(Parser, Debug)]
#[command(
    name = "psam",
    version,
    about = "Label-free nuclei detection and segmentation pipeline"
)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set pseudo.beta=4.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory holding all stage outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "psam-output")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset.
    SynthData,
    /// Pretrain the encoder on the proxy task.
    Pretrain,
    /// Compute self-activation maps for the training images.
    Activate,
    /// Cluster activation maps into tri-state pseudo masks.
    Pseudomask,
    /// Train the detection network on the pseudo masks.
    TrainNdn,
    /// Predict probability maps, trimaps and nucleus centers.
    Detect,
    /// Rasterize Voronoi labels from the detected centers.
    Voronoi,
    /// Train the segmentation network under the joint loss.
    TrainNsn,
    /// Segment the test images.
    Segment,
    /// Score the test split and write the results CSV.
    Evaluate,
    /// Run every stage up to `--to` (default: evaluate), skipping finished ones.
    Run {
        #[arg(long, default_value = "evaluate")]
        to: String,
    },
    /// Run the chain once per value of one parameter and chart the scores.
    Sweep {
        /// beta, lambda, layer or proxy-task
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print the resolved configuration and its hash.
    PrintConfig,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::SynthData => Stage::SynthData,
            Command::Pretrain => Stage::Pretrain,
            Command::Activate => Stage::Activate,
            Command::Pseudomask => Stage::Pseudomask,
            Command::TrainNdn => Stage::TrainNdn,
            Command::Detect => Stage::Detect,
            Command::Voronoi => Stage::Voronoi,
            Command::TrainNsn => Stage::TrainNsn,
            Command::Segment => Stage::Segment,
            Command::Evaluate => Stage::Evaluate,
            _ => return None,
        })
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(stage) = cli.command.stage() {
        let ws = Workspace::new(&cli.output_root, cfg)?;
        let out = ws.run_stage(stage)?;
        if out.skipped {
            println!("{stage}: up-to-date ({})", out.dir.display());
        } else {
            println!("{stage}: done ({})", out.dir.display());
        }
        return Ok(());
    }
    match cli.command {
        Command::Run { to } => {
            let ws = Workspace::new(&cli.output_root, cfg)?;
            for out in ws.run_to(to.parse()?)? {
                let state = if out.skipped { "up-to-date" } else { "done" };
                println!("{}: {state} ({})", out.stage, out.dir.display());
            }
        }
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let report = run_sweep(&cli.output_root, &cfg, param, &values)?;
            println!("sweep table: {}", report.csv.display());
            println!("sweep chart: {}", report.chart.display());
            if report.failures() > 0 {
                return Err(CliError::Runtime(format!(
                    "{} of {} sweep values failed; see {}",
                    report.failures(),
                    report.rows.len(),
                    report.csv.display()
                )));
            }
        }
        Command::PrintConfig => {
            let ws = Workspace::new(&cli.output_root, cfg)?;
            println!("# config hash {}", ws.config_hash());
            print!("{}", ws.config().to_toml());
        }
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
