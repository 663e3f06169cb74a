//! `nettraj`: build networks, synthesize corpora, train, predict and score.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::WindowMode;
use config::RunConfig;
use error::Result;

#[derive(Parser)]
#[command(name = "nettraj", version, about = "Vehicle trajectory prediction on road networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Road network utilities.
    #[command(subcommand)]
    Network(NetworkCommand),
    /// Generate a synthetic network and trajectory corpus.
    Synth(SynthCmd),
    /// Rewrite trajectories as node sequences plus direction labels.
    Encode(EncodeCmd),
    /// Train a model; writes log.csv, per-epoch checkpoints and model.ckpt.
    Train(TrainCmd),
    /// Predict the next edges of each trajectory.
    Predict(PredictCmd),
    /// Score predictions against ground truth (both `traj_id,edges`).
    Evaluate(EvaluateCmd),
    /// First-order Markov chain baseline on the tail windows of a test set.
    BaselineMc(BaselineCmd),
    /// Export spatial and temporal attention weights as CSV.
    AttnDump(AttnCmd),
}

#[derive(Subcommand)]
enum NetworkCommand {
    /// Label every edge with a direction and write the labeled edge table.
    Build(NetworkBuildCmd),
    /// Print size, direction revision rate and out-degree histogram.
    Stats(NetworkArgs),
}

#[derive(Args)]
struct NetFiles {
    /// Nodes CSV (`id,lat,lon`).
    #[arg(long)]
    nodes: PathBuf,
    /// Edges CSV (`id,source,target`).
    #[arg(long)]
    edges: PathBuf,
}

#[derive(Args)]
struct NetworkArgs {
    #[command(flatten)]
    files: NetFiles,
    /// Number of direction intervals.
    #[arg(long, default_value_t = 8)]
    k: usize,
}

#[derive(Args)]
struct NetworkBuildCmd {
    #[command(flatten)]
    net: NetworkArgs,
    /// Labeled edges CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV listing every edge whose label was revised.
    #[arg(long)]
    revisions: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCmd {
    /// `grid:W,H` or `irregular:N,AVG_DEGREE,JITTER_DEG`.
    #[arg(long)]
    topology: String,
    /// `uniform`, `straight:P` or `second-order:RULE_SEED`.
    #[arg(long, default_value = "uniform")]
    rule: String,
    /// Number of trajectories.
    #[arg(long, default_value_t = 1000)]
    trajectories: usize,
    /// Edges per trajectory.
    #[arg(long, default_value_t = 20)]
    length: usize,
    /// Number of distinct drivers.
    #[arg(long, default_value_t = 10)]
    drivers: usize,
    /// Number of direction intervals.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write train.csv and test.csv, the last fraction going to test.
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    /// Output directory for nodes.csv, edges.csv and trajectories.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeCmd {
    #[command(flatten)]
    net: NetworkArgs,
    /// Trajectory CSV (`traj_id,time_slot,weather,driver_id,edges`).
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Every setting may come from `--config` (`key = value` lines) and be
/// overridden by the flag of the same name.
#[derive(Args)]
struct TrainCmd {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    nodes: Option<String>,
    #[arg(long, value_name = "PATH")]
    edges: Option<String>,
    /// Training trajectories.
    #[arg(long, value_name = "PATH")]
    trajectories: Option<String>,
    /// Validation trajectories; defaults to the tail windows of the training set.
    #[arg(long, value_name = "PATH")]
    val: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Direction intervals [default: 8]
    #[arg(long, value_name = "N")]
    k: Option<String>,
    /// Node embedding size [default: 256]
    #[arg(long, value_name = "N")]
    node_dim: Option<String>,
    /// Direction embedding size [default: 256]
    #[arg(long, value_name = "N")]
    dir_dim: Option<String>,
    /// LSTM hidden size [default: 512]
    #[arg(long, value_name = "N")]
    hidden: Option<String>,
    /// LSTM layers [default: 2]
    #[arg(long, value_name = "N")]
    layers: Option<String>,
    /// Time-slot embedding size [default: 32]
    #[arg(long, value_name = "N")]
    time_dim: Option<String>,
    /// Weather embedding size [default: 32]
    #[arg(long, value_name = "N")]
    weather_dim: Option<String>,
    /// Driver embedding size [default: 32]
    #[arg(long, value_name = "N")]
    driver_dim: Option<String>,
    /// Input window length [default: 10]
    #[arg(long, value_name = "N")]
    l_in: Option<String>,
    /// Prediction length [default: 5]
    #[arg(long, value_name = "N")]
    l_out: Option<String>,
    /// full, fsa, no-sa, fta, no-ta or no-dtr [default: full]
    #[arg(long, value_name = "NAME")]
    variant: Option<String>,
    /// Driver table size; defaults to the largest driver id seen plus one.
    #[arg(long, value_name = "N")]
    driver_vocab: Option<String>,
    /// Parallel streams per batch [default: 20]
    #[arg(long, value_name = "N")]
    batch_size: Option<String>,
    /// Window stride [default: 5]
    #[arg(long, value_name = "N")]
    slide: Option<String>,
    /// Initial learning rate [default: 0.5]
    #[arg(long, value_name = "X")]
    lr: Option<String>,
    /// Per-epoch learning-rate factor [default: 0.8]
    #[arg(long, value_name = "X")]
    lr_decay: Option<String>,
    /// [default: 10]
    #[arg(long, value_name = "N")]
    epochs: Option<String>,
    /// [default: 0.1]
    #[arg(long, value_name = "X")]
    dropout: Option<String>,
    /// Epochs for the ground-truth probability to reach 0 [default: epochs]
    #[arg(long, value_name = "N")]
    sampling_epochs: Option<String>,
    /// Global gradient norm limit [default: 5]
    #[arg(long, value_name = "X")]
    clip_norm: Option<String>,
    /// [default: 0]
    #[arg(long, value_name = "N")]
    seed: Option<String>,
    /// respect or concat-faithful [default: respect]
    #[arg(long, value_name = "MODE")]
    boundary_mode: Option<String>,
    /// Masked decoding for validation [default: true]
    #[arg(long, value_name = "BOOL")]
    masked_eval: Option<String>,
}

impl TrainCmd {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        let overrides = [
            ("nodes", &self.nodes),
            ("edges", &self.edges),
            ("trajectories", &self.trajectories),
            ("val", &self.val),
            ("out", &self.out),
            ("k", &self.k),
            ("node-dim", &self.node_dim),
            ("dir-dim", &self.dir_dim),
            ("hidden", &self.hidden),
            ("layers", &self.layers),
            ("time-dim", &self.time_dim),
            ("weather-dim", &self.weather_dim),
            ("driver-dim", &self.driver_dim),
            ("l-in", &self.l_in),
            ("l-out", &self.l_out),
            ("variant", &self.variant),
            ("driver-vocab", &self.driver_vocab),
            ("batch-size", &self.batch_size),
            ("slide", &self.slide),
            ("lr", &self.lr),
            ("lr-decay", &self.lr_decay),
            ("epochs", &self.epochs),
            ("dropout", &self.dropout),
            ("sampling-epochs", &self.sampling_epochs),
            ("clip-norm", &self.clip_norm),
            ("seed", &self.seed),
            ("boundary-mode", &self.boundary_mode),
            ("masked-eval", &self.masked_eval),
        ];
        debug_assert_eq!(overrides.len(), config::KEYS.len());
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Hold out the last l_out edges as truth.
    Tail,
    /// Forecast past the end of each trajectory.
    Last,
}

#[derive(Args)]
struct PredictCmd {
    #[command(flatten)]
    net: NetFiles,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    /// Predicted edge sequences (`traj_id,edges`).
    #[arg(long)]
    out: PathBuf,
    /// Also write the held-out edges (tail mode only).
    #[arg(long)]
    truth_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Tail)]
    mode: ModeArg,
    /// Allow directions with no matching edge (the prediction stops there).
    #[arg(long)]
    unmasked: bool,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Report CSV (`metric,value`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-trajectory CSV (`traj_id,edit,matches`).
    #[arg(long)]
    details: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineCmd {
    #[command(flatten)]
    net: NetFiles,
    /// Trajectories to count transitions on.
    #[arg(long)]
    train: PathBuf,
    /// Trajectories to predict.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 10)]
    l_in: usize,
    #[arg(long, default_value_t = 5)]
    l_out: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth_out: Option<PathBuf>,
    /// Report CSV (`metric,value`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AttnCmd {
    #[command(flatten)]
    net: NetFiles,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    /// Directory for spatial.csv and temporal.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Only the first N trajectories.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    unmasked: bool,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Network(NetworkCommand::Build(c)) => {
            commands::network_build(&c.net.files.nodes, &c.net.files.edges, c.net.k, &c.out, c.revisions.as_deref())
        }
        Command::Network(NetworkCommand::Stats(c)) => commands::network_stats(&c.files.nodes, &c.files.edges, c.k),
        Command::Synth(c) => commands::synth(commands::SynthArgs {
            topology: &c.topology,
            rule: &c.rule,
            trajectories: c.trajectories,
            length: c.length,
            drivers: c.drivers,
            k: c.k,
            seed: c.seed,
            test_fraction: c.test_fraction,
            out: &c.out,
        }),
        Command::Encode(c) => {
            commands::encode_cmd(&c.net.files.nodes, &c.net.files.edges, c.net.k, &c.trajectories, &c.out)
        }
        Command::Train(c) => commands::train_cmd(&c.run_config()?),
        Command::Predict(c) => commands::predict(commands::PredictArgs {
            nodes: &c.net.nodes,
            edges: &c.net.edges,
            model: &c.model,
            trajectories: &c.trajectories,
            out: &c.out,
            truth_out: c.truth_out.as_deref(),
            mode: match c.mode {
                ModeArg::Tail => WindowMode::Tail,
                ModeArg::Last => WindowMode::Last,
            },
            masked: !c.unmasked,
        }),
        Command::Evaluate(c) => commands::evaluate(&c.pred, &c.truth, c.out.as_deref(), c.details.as_deref()),
        Command::BaselineMc(c) => commands::baseline_mc(commands::BaselineArgs {
            nodes: &c.net.nodes,
            edges: &c.net.edges,
            train: &c.train,
            test: &c.test,
            l_in: c.l_in,
            l_out: c.l_out,
            out: &c.out,
            truth_out: c.truth_out.as_deref(),
            report: c.report.as_deref(),
        }),
        Command::AttnDump(c) => commands::attn_dump(commands::AttnArgs {
            nodes: &c.net.nodes,
            edges: &c.net.edges,
            model: &c.model,
            trajectories: &c.trajectories,
            out_dir: &c.out_dir,
            limit: c.limit,
            masked: !c.unmasked,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
            e.exit_code()
        }
    }
}
