use clap::{Parser, Subcommand};
use pdeo::cli;
use pdeo::config::TrainConfig;
use pdeo::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pdeo",
    about = "CPU Gaussian-splatting trainer with a viscous position optimizer"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a 2D image target.
    Fit2d {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run_fit2d")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force deterministic output (zeroed wall-clock column).
        #[arg(long)]
        deterministic: bool,
    },
    /// Fit a 3D Gaussian cloud from orthographic views.
    Fit3d {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run_fit3d")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Run the analytic-vs-numeric gradient and quadrature suites.
    Gradcheck {
        /// Random configurations per mode.
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a verification probe and write probe_<kind>.csv.
    Probe {
        /// One of: scaling, impact, decay, fixedpoint.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "run_probe")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        lambda_g: f64,
    },
    /// Run the ablation grid and write ablate.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run_ablate")]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn load_config(
    path: &Option<PathBuf>,
    mode: Option<pdeo::config::Mode>,
    seed: Option<u64>,
    deterministic: bool,
) -> Result<TrainConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = mode {
        if path.is_none() {
            cfg.mode = m;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::InvalidConfig(_) | Error::Usage(_) => ExitCode::from(2),
        Error::NonFiniteLoss(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn run() -> Result<ExitCode, Error> {
    let args = Args::parse();
    match args.command {
        Command::Fit2d {
            config,
            out,
            seed,
            deterministic,
        } => {
            let cfg = load_config(
                &config,
                Some(pdeo::config::Mode::Image2d),
                seed,
                deterministic,
            )?;
            let result = cli::run_fit2d(&cfg, &out)?;
            if let Some(m) = result.metrics.last() {
                println!(
                    "done: {} iterations, final psnr {:.2} dB, {} gaussians",
                    result.metrics.len(),
                    m.psnr,
                    m.count
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit3d {
            config,
            out,
            seed,
            deterministic,
        } => {
            let cfg = load_config(
                &config,
                Some(pdeo::config::Mode::Ortho3d),
                seed,
                deterministic,
            )?;
            let result = cli::run_fit3d(&cfg, &out)?;
            if let Some(m) = result.metrics.last() {
                println!(
                    "done: {} iterations, final psnr {:.2} dB, {} gaussians",
                    result.metrics.len(),
                    m.psnr,
                    m.count
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { cases, seed } => {
            let pass = cli::run_gradcheck_cmd(cases, seed)?;
            Ok(if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Probe {
            kind,
            out,
            lambda_g,
        } => {
            cli::run_probe(&kind, &out, lambda_g)?;
            println!("wrote {}", out.join(format!("probe_{kind}.csv")).display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config, out, seeds } => {
            let cfg = load_config(&config, None, None, true)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad seed `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            cli::run_ablate(&cfg, &out, &seeds)?;
            println!("wrote {}", out.join("ablate.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
