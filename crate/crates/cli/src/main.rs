use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qpath::config::{Preset, RunConfig};
use qpath::pipeline::{cmd_figure, cmd_mlp, cmd_reconstruct, cmd_simulate, Figure};
use qpath::Error;

#[derive(Parser)]
#[command(name = "qpath", version, about = "Quantum trajectories and most likely paths of a weakly measured qubit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble of trajectories.
    Simulate(Common),
    /// Solve for the most likely path between boundary states.
    Mlp {
        #[command(flatten)]
        common: Common,
        /// Horizon in seconds; may be repeated.
        #[arg(long = "T", visible_alias = "horizon")]
        horizons: Vec<f64>,
        /// Also run the variational check around each path.
        #[arg(long)]
        variational: bool,
    },
    /// Reproduce the artifacts behind a figure.
    Figure {
        /// One of fig3, fig4, figS2, figS3, figS4.
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Propagate the state through a recorded readout.
    Reconstruct {
        /// CSV with columns t_seconds and r (or v_volts).
        record: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration laid over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trajectories.
    #[arg(long)]
    n: Option<usize>,
    /// Rabi frequency divided by 2 pi, Hz.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long = "xi", allow_negative_numbers = true)]
    x_i: Option<f64>,
    #[arg(long = "zi", allow_negative_numbers = true)]
    z_i: Option<f64>,
    #[arg(long = "xf", allow_negative_numbers = true)]
    x_f: Option<f64>,
    #[arg(long = "zf", allow_negative_numbers = true)]
    z_f: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = "QPATH_OUT", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self, default: Preset) -> qpath::Result<RunConfig> {
        let preset = match &self.preset {
            Some(name) => name.parse()?,
            None => default,
        };
        let mut cfg = RunConfig::layered(preset, self.config.as_deref())?;
        macro_rules! set {
            ($($opt:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$opt { cfg.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            n => n,
            omega => omega_hz,
            tau => tau,
            gamma => gamma,
            dt => dt,
            duration => duration,
            x_i => initial.x,
            z_i => initial.z,
            x_f => selection.x_f,
            z_f => selection.z_f,
            window => selection.window,
            percentile => percentile,
        );
        cfg.workers = self.workers.or(cfg.workers);
        if cfg.workers == Some(0) {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        cfg.out = Some(self.out.clone());
        Ok(cfg)
    }
}

fn run(cli: Cli) -> qpath::Result<PathBuf> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.resolve(Preset::Fig2c)?;
            cmd_simulate(&cfg, &c.out)?;
            Ok(c.out)
        }
        Command::Mlp {
            common,
            horizons,
            variational,
        } => {
            let mut cfg = common.resolve(Preset::Fig4)?;
            if !horizons.is_empty() {
                cfg.horizons = horizons;
            }
            cfg.variational |= variational;
            cmd_mlp(&cfg, &common.out)?;
            Ok(common.out)
        }
        Command::Figure { name, common } => {
            let figure: Figure = name.parse()?;
            let cfg = common.resolve(figure.preset())?;
            cmd_figure(figure, &cfg, &common.out)?;
            Ok(common.out)
        }
        Command::Reconstruct { record, common } => {
            let cfg = common.resolve(Preset::Fig2c)?;
            cmd_reconstruct(&record, &cfg, &common.out)?;
            Ok(common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            log::info!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
