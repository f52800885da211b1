use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vodp_cli::RobustnessFlags;

/// Vision-only diffusion policy on a deterministic 2-D pick-and-place
/// testbed: demo generation, training, closed-loop evaluation, ablations,
/// robustness suites, and gradient checks.
#[derive(Parser)]
#[command(name = "vodp", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct RobustnessArgs {
    /// Cube size scale (e.g. 0.7, 1.0, 1.6)
    #[arg(long)]
    cube_size: Option<f32>,
    /// Cube color: orange|blue|green|yellow
    #[arg(long)]
    cube_color: Option<String>,
    /// Background: table|white|pink|blue
    #[arg(long)]
    background: Option<String>,
    /// Lighting: normal|switch|blink
    #[arg(long)]
    lighting: Option<String>,
}

impl RobustnessArgs {
    fn flags(&self) -> RobustnessFlags {
        RobustnessFlags {
            cube_size: self.cube_size,
            cube_color: self.cube_color.clone(),
            background: self.background.clone(),
            lighting: self.lighting.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert demonstrations into a dataset file
    GenDemos {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        robustness: RobustnessArgs,
    },
    /// Train a policy on a demonstration dataset
    Train {
        /// key=value config file (defaults used when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Observation history length (1 or 3)
        #[arg(long)]
        history: Option<usize>,
        /// full|no_geo|no_sem
        #[arg(long)]
        modality: Option<String>,
        /// pool|mlp
        #[arg(long)]
        downsample: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop evaluation of a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 48)]
        episodes: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// First evaluation seed (training used 0..count)
        #[arg(long, default_value_t = 10000)]
        seed: u64,
        /// How many of the 8 sampled actions to execute before re-planning
        #[arg(long, default_value_t = 4)]
        exec_horizon: usize,
        /// Run the scripted expert instead of the checkpoint (harness self-test)
        #[arg(long, default_value_t = false)]
        expert: bool,
        /// Write the full report as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        robustness: RobustnessArgs,
    },
    /// Run one of the four robustness suites against a checkpoint
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        /// size|appearance|illumination|background
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 10000)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        exec_horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the modality/downsampling ablation matrix
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 10000)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        exec_horizon: usize,
    },
    /// Finite-difference checks of every op and the end-to-end loss
    GradCheck {
        /// Corrupt one analytic gradient to prove the harness catches it
        #[arg(long, hide = true, default_value_t = false)]
        sabotage: bool,
    },
}

fn run(cli: Cli) -> vodp::Result<bool> {
    match cli.cmd {
        Cmd::GenDemos { count, seed, out, robustness } => {
            vodp_cli::cmd_gen_demos(count, seed, &out, &robustness.flags())?;
            Ok(true)
        }
        Cmd::Train { config, data, out, history, modality, downsample, epochs, batch, seed } => {
            let cfg = vodp_cli::resolve_train_config(
                config.as_deref(),
                history,
                modality.as_deref(),
                downsample.as_deref(),
                epochs,
                batch,
                seed,
            )?;
            vodp_cli::cmd_train(&cfg, &data, &out)?;
            Ok(true)
        }
        Cmd::Eval { ckpt, episodes, repeats, seed, exec_horizon, expert, out, robustness } => {
            vodp_cli::cmd_eval(&ckpt, episodes, repeats, seed, exec_horizon, &robustness.flags(), expert, out.as_deref())?;
            Ok(true)
        }
        Cmd::Robustness { ckpt, suite, episodes, repeats, seed, exec_horizon, out } => {
            let suite = suite.parse()?;
            vodp_cli::cmd_robustness(&ckpt, suite, episodes, repeats, seed, exec_horizon, out.as_deref())?;
            Ok(true)
        }
        Cmd::Ablate { config, data, out, epochs, episodes, repeats, seed, exec_horizon } => {
            let cfg = vodp_cli::resolve_train_config(config.as_deref(), None, None, None, epochs, None, None)?;
            vodp_cli::cmd_ablate(&cfg, &data, &out, episodes, repeats, seed, exec_horizon)?;
            Ok(true)
        }
        Cmd::GradCheck { sabotage } => {
            let outcomes = vodp_cli::cmd_grad_check(sabotage)?;
            Ok(outcomes.iter().all(|o| o.pass))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successes; real usage errors exit 1
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ vodp::Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
