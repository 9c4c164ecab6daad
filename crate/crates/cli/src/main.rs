use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lasdi::fom::{ParameterPoint, TimeMode};
use lasdi::train::TrainEvent;
use lasdi_cli::pipeline::{cmd_evaluate, cmd_generate, cmd_heatmap, cmd_infer, cmd_train, summarize, Layout};
use lasdi_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "lasdi", version, about = "Latent-dynamics reduced-order model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON); the desk profile when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    rollout: Option<Switch>,

    #[arg(long = "time-mode", global = true)]
    time_mode: Option<Mode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the full-order model on every grid point.
    Generate,
    /// Train the autoencoder, latent coefficients and GP surrogate.
    Train {
        /// Print a loss line every this many epochs.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Predict one trajectory from its initial condition.
    Infer {
        #[arg(long, value_parser = parse_theta)]
        theta: ParameterPoint,
    },
    /// Relative error of every grid point against the generated data.
    Evaluate,
    /// Dense error matrix from errors.csv.
    Heatmap,
    /// Print the resolved configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Fixed,
    Variable,
}

fn parse_theta(s: &str) -> Result<ParameterPoint, String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `nu,omega`, got `{s}`"))?;
    let nu: f64 = a.trim().parse().map_err(|e| format!("bad nu `{a}`: {e}"))?;
    let omega: f64 = b.trim().parse().map_err(|e| format!("bad omega `{b}`: {e}"))?;
    ParameterPoint::new(nu, omega).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.rollout {
        cfg.rollout = matches!(r, Switch::On);
    }
    if let Some(m) = cli.time_mode {
        cfg.fom.time_mode = match m {
            Mode::Fixed => TimeMode::Fixed,
            Mode::Variable => TimeMode::Variable,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate => {
            let cfg = load_config(&cli)?;
            let m = cmd_generate(&cfg, &cli.out)?;
            println!(
                "wrote {} trajectories to {}",
                m.entries.len(),
                Layout::new(&cli.out).data_dir().display()
            );
        }
        Command::Train { log_every } => {
            let cfg = load_config(&cli)?;
            let every = log_every.max(1);
            let mut log = |ev: TrainEvent| match ev {
                TrainEvent::Epoch(r) if r.epoch % every == 0 || r.epoch == 1 => {
                    let ro = r.rollout.map_or_else(|| "n/a".into(), |v| format!("{v:.4e}"));
                    eprintln!(
                        "epoch {:>6}  total {:.4e}  recon {:.4e}  ld {:.4e}  rollout {ro}  ({} params, {:.1}s)",
                        r.epoch, r.total, r.recon, r.ld, r.n_train_params, r.wall_seconds
                    );
                }
                TrainEvent::Epoch(_) => {}
                other => eprintln!("{other:?}"),
            };
            let out = cmd_train(&cfg, &cli.out, &mut log)?;
            println!(
                "trained {} epochs on {} parameter points; artifacts in {}",
                out.history.len(),
                out.items.len(),
                Layout::new(&cli.out).model_dir().display()
            );
        }
        Command::Infer { theta } => {
            let inf = cmd_infer(&cli.out, theta, None)?;
            if inf.extrapolating {
                eprintln!(
                    "warning: ({}, {}) lies outside the training parameter box; the GP is extrapolating",
                    theta.nu, theta.omega
                );
            }
            println!(
                "wrote {} frames to {}",
                inf.trajectory.n_frames(),
                inf.path.display()
            );
        }
        Command::Evaluate => {
            let rows = cmd_evaluate(&cli.out)?;
            let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
            let (max, median) = summarize(&errs);
            println!(
                "{} points: max error {max:.4e}, median {median:.4e}; see {}",
                rows.len(),
                Layout::new(&cli.out).errors().display()
            );
        }
        Command::Heatmap => {
            let layout = Layout::new(&cli.out);
            let map = cmd_heatmap(&layout.errors())?;
            println!(
                "wrote {}x{} heatmap to {}",
                map.nu.len(),
                map.omega.len(),
                layout.heatmap().display()
            );
        }
        Command::Config => {
            let cfg = load_config(&cli)?;
            println!("{}", serde_json::to_string_pretty(&cfg.resolved())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
