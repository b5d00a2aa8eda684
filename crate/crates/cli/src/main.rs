mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mim_core::checkpoint::load_checkpoint;

use crate::config::{parse_override, read_config_file, Assignment, DiagnoseRun, EvalRun, GenDataRun, RunConfig, TrainRun};
use crate::error::CliResult;

/// Spatiotemporal sequence prediction with Memory In Memory networks.
#[derive(Parser)]
#[command(name = "mim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-glyph dataset.
    GenData(GenDataArgs),
    /// Train a network, or resume training from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, optionally with the copy baseline.
    Eval(EvalArgs),
    /// Report gate saturation rates per layer and timestamp.
    DiagnoseGates(DiagnoseArgs),
}

/// Options shared by every command. Precedence is config file, then
/// `--set`, then dedicated flags.
#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output path (a file for gen-data, a directory otherwise).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sequences.
    #[arg(long)]
    count: Option<usize>,
}

/// Network flags accepted by train (to build) and eval (to cross-check).
#[derive(Args)]
struct NetworkFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// Disable the non-stationary module of every MIM block.
    #[arg(long)]
    no_mim_n: bool,
    /// Disable the stationary module of every MIM block.
    #[arg(long)]
    no_mim_s: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    network: NetworkFlags,
    /// Training dataset (.mimd).
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Total number of steps, counted from zero even when resuming.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    network: NetworkFlags,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Also score a baseline (`copy` repeats the last input frame).
    #[arg(long, value_name = "NAME")]
    baseline: Option<String>,
    /// Report MSE and MAE on the unit or 0..255 scale.
    #[arg(long, value_name = "unit|255")]
    scale: Option<String>,
    /// Comma-separated CSI thresholds on the chosen scale.
    #[arg(long, value_name = "LIST")]
    thresholds: Option<String>,
    /// Also report sharpness.
    #[arg(long)]
    sharpness: bool,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// `auto`, `forget` or `ratio`.
    #[arg(long)]
    mode: Option<String>,
    /// 1-based layer index, or `all`.
    #[arg(long)]
    layer: Option<String>,
}

/// Collects flag values as assignments applied after the file and `--set`.
#[derive(Default)]
struct Flags(Vec<Assignment>);

impl Flags {
    fn add(&mut self, flag: &str, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.0.push(Assignment {
                key: key.to_owned(),
                value: v.to_string(),
                origin: format!("--{flag}"),
            });
        }
    }

    fn path(&mut self, flag: &str, key: &str, value: Option<&PathBuf>) {
        self.add(flag, key, value.map(|p| p.display().to_string()));
    }

    fn network(&mut self, n: &NetworkFlags) {
        self.add("seed", "seed", n.seed);
        self.add("layers", "layers", n.layers);
        self.add("channels", "channels", n.channels);
        self.add("kernel", "kernel", n.kernel);
        self.add("no-mim-n", "mim_n", n.no_mim_n.then_some(false));
        self.add("no-mim-s", "mim_s", n.no_mim_s.then_some(false));
    }
}

fn assignments(common: &Common, flags: Flags) -> CliResult<Vec<Assignment>> {
    let mut all = match &common.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    for s in &common.set {
        all.push(parse_override(s)?);
    }
    all.extend(flags.0);
    if let Some(out) = &common.out {
        all.push(Assignment {
            key: "out".to_owned(),
            value: out.display().to_string(),
            origin: "--out".to_owned(),
        });
    }
    Ok(all)
}

fn resolve<C: RunConfig + Default>(common: &Common, flags: Flags) -> CliResult<C> {
    let mut run = C::default();
    run.apply(&assignments(common, flags)?)?;
    Ok(run)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut f = Flags::default();
            f.add("seed", "seed", a.seed);
            f.add("count", "count", a.count);
            commands::gen_data(&resolve::<GenDataRun>(&a.common, f)?)
        }
        Command::Train(a) => {
            let mut f = Flags::default();
            f.network(&a.network);
            f.path("data", "data", a.data.as_ref());
            f.add("steps", "steps", a.steps);
            f.path("resume", "resume", a.resume.as_ref());
            let all = assignments(&a.common, f)?;
            // A resumed run starts from the checkpoint's settings, so only
            // the keys being changed need to be repeated.
            let resume = all
                .iter()
                .rev()
                .find(|x| x.key == "resume" && !x.value.is_empty())
                .map(|x| load_checkpoint(&x.value))
                .transpose()?;
            let mut run = TrainRun::default();
            if let Some(ckpt) = &resume {
                commands::seed_from_checkpoint(&mut run, ckpt)?;
            }
            run.apply(&all)?;
            commands::train(&run, resume)
        }
        Command::Eval(a) => {
            let mut f = Flags::default();
            f.network(&a.network);
            f.path("checkpoint", "checkpoint", a.checkpoint.as_ref());
            f.path("data", "data", a.data.as_ref());
            f.add("baseline", "baseline", a.baseline);
            f.add("scale", "scale", a.scale);
            f.add("thresholds", "thresholds", a.thresholds);
            f.add("sharpness", "sharpness", a.sharpness.then_some(true));
            commands::eval(&resolve::<EvalRun>(&a.common, f)?)
        }
        Command::DiagnoseGates(a) => {
            let mut f = Flags::default();
            f.path("checkpoint", "checkpoint", a.checkpoint.as_ref());
            f.path("data", "data", a.data.as_ref());
            f.add("threshold", "threshold", a.threshold);
            f.add("mode", "mode", a.mode);
            f.add("layer", "layer", a.layer);
            commands::diagnose_gates(&resolve::<DiagnoseRun>(&a.common, f)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
