use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tobe_core::io;
use tobe_core::pipeline::{
    self, Experiment, Status, BMODE_FILE, CHANNELS_FILE, DECODED_FILE, ENVELOPE_FILE,
    METRICS_FILE, RF_FILE,
};
use tobe_core::ChannelData;

/// Simulate, reconstruct and compare FORCES, TPW and VLS imaging on
/// bias-switchable row-column arrays.
#[derive(Parser)]
#[command(name = "tobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; stage commands also read their inputs from it.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "TOBE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate channel data into channels.rccd.
    Simulate(Common),
    /// Polarity-correct and decode channels.rccd into decoded.rccd.
    Decode(Common),
    /// Beamform decoded.rccd into rf.raw.
    Beamform(Common),
    /// Envelope-detect rf.raw into envelope.raw and bmode.pgm.
    Postproc(Common),
    /// Measure envelope.raw into metrics.csv.
    Metrics(Common),
    /// Run every stage and write a manifest.
    Run(Common),
    /// Image one phantom with several methods.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Proceed even if the methods use different transmit counts.
        #[arg(long)]
        override_fairness: bool,
    },
    /// Acquire and stitch a walking-FORCES volume.
    Volume(Common),
}

fn load(common: &Common) -> Result<Experiment> {
    let exp = Experiment::load(&common.config)?;
    Ok(match common.seed {
        Some(seed) => exp.with_seed(seed)?,
        None => exp,
    })
}

fn read_channels(path: &Path) -> Result<ChannelData> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(ChannelData::read_rccd(std::io::BufReader::new(file))?)
}

fn write_channels(path: &Path, data: &ChannelData) -> Result<()> {
    fs::write(path, data.to_rccd_bytes()?).with_context(|| format!("writing {}", path.display()))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate(c) => {
            let exp = load(&c)?;
            fs::create_dir_all(&c.out)?;
            write_channels(&c.out.join(CHANNELS_FILE), &exp.simulate()?)?;
        }
        Command::Decode(c) => {
            let exp = load(&c)?;
            let raw = read_channels(&c.out.join(CHANNELS_FILE))?;
            write_channels(&c.out.join(DECODED_FILE), &exp.decode(&raw)?)?;
        }
        Command::Beamform(c) => {
            let exp = load(&c)?;
            let decoded = read_channels(&c.out.join(DECODED_FILE))?;
            io::write_raw_grid(&c.out.join(RF_FILE), &exp.beamform(&decoded)?)?;
        }
        Command::Postproc(c) => {
            let exp = load(&c)?;
            let rf = io::read_raw_grid(&c.out.join(RF_FILE))?;
            let b = exp.postproc(rf)?;
            io::write_raw_grid(&c.out.join(ENVELOPE_FILE), &b.envelope)?;
            fs::write(c.out.join(BMODE_FILE), io::pgm_bytes(&b.db, 0, b.dynamic_range_db)?)?;
        }
        Command::Metrics(c) => {
            let exp = load(&c)?;
            let env = io::read_raw_grid(&c.out.join(ENVELOPE_FILE))?;
            let file = fs::File::create(c.out.join(METRICS_FILE))?;
            exp.metrics(&env)?.write_csv(file)?;
        }
        Command::Run(c) => {
            let m = pipeline::run(&load(&c)?, &c.out)?;
            report(&c.out, m.status);
        }
        Command::Compare {
            common,
            override_fairness,
        } => {
            let (_, m) = pipeline::compare(&load(&common)?, &common.out, override_fairness)?;
            report(&common.out, m.status);
        }
        Command::Volume(c) => {
            let m = pipeline::volume(&load(&c)?, &c.out)?;
            report(&c.out, m.status);
        }
    }
    Ok(())
}

fn report(out: &Path, status: Status) {
    log::info!("{:?}: artifacts in {}", status, out.display());
}

fn threads(command: &Command) -> Option<usize> {
    match command {
        Command::Simulate(c)
        | Command::Decode(c)
        | Command::Beamform(c)
        | Command::Postproc(c)
        | Command::Metrics(c)
        | Command::Run(c)
        | Command::Volume(c)
        | Command::Compare { common: c, .. } => c.threads,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = threads(&cli.command) {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
