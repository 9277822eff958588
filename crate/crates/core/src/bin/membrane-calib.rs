use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use membrane_calib::cli::{self, CliError};

#[derive(Parser)]
#[command(version, about = "Membrane-phantom calibration of 3-D ultrasound probes")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic acquisition session with ground truth.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also render the bead-phantom session.
        #[arg(long)]
        beads: bool,
    },
    /// Fit the membrane plane to digitized surface points.
    Precalibrate {
        /// Whitespace-separated `x y z` rows.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the probe calibration from membrane volumes.
    Calibrate {
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        precalib: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay the calibrated membrane on the extraction slices.
    Backtest {
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        precalib: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibration precision and bead reconstruction accuracy.
    Evaluate {
        /// Directory of `.cal` files.
        #[arg(long)]
        calibs: PathBuf,
        #[arg(long)]
        beads: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Simulate { config, seed, out, beads } => {
            let mut config = cli::load_config(config.as_deref(), seed)?;
            config.beads |= beads;
            let summary = cli::cmd_simulate(&config, &out)?;
            println!(
                "wrote {} volumes and {} bead volumes to {}",
                summary.volumes.len(),
                summary.bead_volumes.len(),
                out.display()
            );
        }
        Command::Precalibrate { points, out } => {
            let file = cli::cmd_precalibrate(&points, &out)?;
            println!("rms {:.6} mm, {} outlier(s)", file.rms, file.outliers.len());
        }
        Command::Calibrate { volumes, poses, precalib, config, seed, out } => {
            let config = cli::load_config(config.as_deref(), seed)?;
            let result = cli::cmd_calibrate(&volumes, &poses, &precalib, &config, &out)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", result.run.feature.to_table("feature extraction precision"));
        }
        Command::Backtest { volumes, poses, precalib, calib, config, out } => {
            let config = cli::load_config(config.as_deref(), None)?;
            let rows = cli::cmd_backtest(&volumes, &poses, &precalib, &calib, &config, &out)?;
            let failed = rows.iter().filter(|r| r.distance_mm.is_none()).count();
            if failed > 0 {
                eprintln!("warning: {failed} slice(s) without an extracted line");
            }
            println!("wrote {} overlays to {}", rows.len(), out.display());
        }
        Command::Evaluate { calibs, beads, config, out } => {
            let config = cli::load_config(config.as_deref(), None)?;
            print!("{}", cli::cmd_evaluate(&calibs, beads.as_deref(), &config, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
