use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};

use vtrain_core::game::{self, GameError, Outcome};
use vtrain_core::merkle::{Digest, MerkleError, MerkleTree};
use vtrain_core::protocol::{
    self, estimate_log_entries, threshold_search, training_data, ProtocolError, RunOptions,
};
use vtrain_core::roundlog::{self, LogError, LogReader};
use vtrain_core::run::{write_weights, RunConfigFile, RunReport};
use vtrain_core::simnet::{DeviceProfile, LayerSpec, Rng};

mod exit {
    pub const OK: u8 = 0;
    pub const DISPUTE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const PROTOCOL: u8 = 4;
}

#[derive(Parser)]
#[command(
    name = "vtrain",
    version,
    about = "Replicable training with rounding logs and checkpoint disputes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, writing the rounding log, checkpoint tree, final weights and a report.
    Train {
        config: PathBuf,
        /// Overrides the trainer profile in the config.
        #[arg(long)]
        profile: Option<DeviceProfile>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Replay a run from its rounding log, save the auditor's checkpoint tree
    /// beside the log and compare roots.
    Audit {
        config: PathBuf,
        /// Defaults to the config's auditor profile, then its trainer profile.
        #[arg(long)]
        profile: Option<DeviceProfile>,
        /// Defaults to the log path named in the config.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long = "expect-root")]
        expect_root: Option<Digest>,
    },
    /// Answer dispute challenges for a checkpoint tree.
    Serve {
        tree: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Challenge a serving trainer with a local checkpoint tree.
    Dispute {
        tree: PathBuf,
        #[arg(long)]
        connect: String,
        /// Seconds to wait for each reply.
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
    },
    /// Search the logging threshold for one layer.
    Threshold {
        /// dense, relu, sigmoid or softmax_cross_entropy.
        #[arg(long)]
        layer: String,
        /// `INxOUT` for dense layers, the width otherwise.
        #[arg(long)]
        shape: String,
        #[arg(long = "b_r", default_value_t = 32)]
        b_r: u32,
        #[arg(long, value_delimiter = ',', default_value = "sequential,pairwise")]
        profiles: Vec<DeviceProfile>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 40)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a rounding log's header and direction histogram.
    InspectLog { path: PathBuf },
    /// Predict the rounding log size for a config.
    Estimate { config: PathBuf },
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    fn usage(msg: impl std::fmt::Display) -> Self {
        Self::new(exit::USAGE, anyhow::anyhow!("{msg}"))
    }
}

fn log_code(e: &LogError) -> u8 {
    match e {
        LogError::Io { .. } => exit::IO,
        _ => exit::PROTOCOL,
    }
}

fn merkle_code(e: &MerkleError) -> u8 {
    match e {
        MerkleError::Io(_) => exit::IO,
        _ => exit::PROTOCOL,
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        let code = match &e {
            ProtocolError::InvalidConfig(_) => exit::USAGE,
            ProtocolError::Io(_) => exit::IO,
            ProtocolError::Log(l) => log_code(l),
            ProtocolError::Merkle(m) => merkle_code(m),
            _ => exit::PROTOCOL,
        };
        Self::new(code, e)
    }
}

impl From<LogError> for Failure {
    fn from(e: LogError) -> Self {
        Self::new(log_code(&e), e)
    }
}

impl From<MerkleError> for Failure {
    fn from(e: MerkleError) -> Self {
        Self::new(merkle_code(&e), e)
    }
}

impl From<GameError> for Failure {
    fn from(e: GameError) -> Self {
        let code = match e {
            GameError::Io(_) => exit::IO,
            _ => exit::PROTOCOL,
        };
        Self::new(code, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(exit::IO, e)
    }
}

type CmdResult = Result<u8, Failure>;

fn load_config(path: &Path) -> Result<RunConfigFile, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(|e| Failure::new(exit::USAGE, e))?;
    RunConfigFile::parse(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(|e| Failure::new(exit::USAGE, e))
}

fn cmd_train(config: &Path, profile: Option<DeviceProfile>, out: &Path) -> CmdResult {
    let mut file = load_config(config)?;
    if let Some(p) = profile {
        file.train.trainer_profile = p;
    }
    let cfg = &file.train;
    fs::create_dir_all(out)?;
    let paths = file.paths.under(out);

    let result = protocol::train_file(cfg, &paths.log, &RunOptions::default())?;
    result.run.tree.save(&paths.tree)?;
    write_weights(&paths.weights, &result.run.final_weights, cfg.b_m)?;
    let log_bytes = fs::metadata(&paths.log)?.len();
    let report = RunReport::for_training(cfg, &result, log_bytes, &training_data(cfg)?)?;
    fs::write(&paths.report, report.to_json())?;

    eprintln!(
        "trained {} steps on {} in {:.3}s; log {} ({} entries, {} bytes)",
        report.steps,
        cfg.trainer_profile,
        report.wall_seconds,
        paths.log.display(),
        result.log.entry_count,
        log_bytes
    );
    println!("{}", report.root);
    Ok(exit::OK)
}

fn cmd_audit(
    config: &Path,
    profile: Option<DeviceProfile>,
    log: Option<PathBuf>,
    expect_root: Option<Digest>,
) -> CmdResult {
    let file = load_config(config)?;
    let cfg = &file.train;
    let profile = profile
        .or_else(|| file.auditor_profile.clone())
        .unwrap_or_else(|| cfg.trainer_profile.clone());
    let log = log.unwrap_or_else(|| file.paths.log.clone());

    let out = protocol::audit_file(cfg, &profile, &log)?;
    // The auditor's own commitments, for a later dispute.
    let tree_path = log.with_extension("audit.vtmt");
    out.run.tree.save(&tree_path)?;
    eprintln!("auditor checkpoint tree written to {}", tree_path.display());
    let report = RunReport::for_audit(cfg, &profile, &out, &training_data(cfg)?)?;
    println!("{}", report.to_json());

    match expect_root {
        None => Ok(exit::OK),
        Some(expected) if expected == out.run.root() => {
            eprintln!("root matches: {expected}");
            Ok(exit::OK)
        }
        Some(expected) => {
            eprintln!(
                "root mismatch: expected {expected}, computed {}",
                out.run.root()
            );
            Ok(exit::DISPUTE)
        }
    }
}

fn cmd_serve(tree: &Path, listen: &str) -> CmdResult {
    let tree = MerkleTree::load(tree)?;
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    println!("listening on {addr}");
    std::io::stdout().flush()?;
    eprintln!(
        "serving root {} over {} checkpoints",
        tree.root(),
        tree.leaf_count()
    );
    for end in game::serve(&tree, &listener, Some(game::DEFAULT_TIMEOUT), None)? {
        eprintln!("session ended: {end:?}");
    }
    Ok(exit::OK)
}

fn cmd_dispute(tree_path: &Path, connect: &str, timeout: f64) -> CmdResult {
    if !(timeout.is_finite() && timeout > 0.0) {
        return Err(Failure::usage(format!(
            "timeout must be a positive number of seconds, got {timeout}"
        )));
    }
    let tree = MerkleTree::load(tree_path)?;
    let run_id = tree_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = game::challenge(&tree, connect, Duration::from_secs_f64(timeout), &run_id)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Failure::new(exit::PROTOCOL, e))?
    );
    Ok(match report.outcome {
        Outcome::TrainingVerified => exit::OK,
        Outcome::DisputeAtLeaf { .. } | Outcome::TrainerUnresponsive => exit::DISPUTE,
        Outcome::ScheduleMismatch { .. } => exit::PROTOCOL,
    })
}

fn parse_dims(shape: &str) -> Result<Vec<usize>, Failure> {
    shape
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Failure::usage(format!("cannot parse shape {shape:?}")))
}

fn cmd_threshold(
    layer: &str,
    shape: &str,
    b_r: u32,
    profiles: &[DeviceProfile],
    samples: usize,
    iters: usize,
    seed: u64,
) -> CmdResult {
    let [p1, p2] = profiles else {
        return Err(Failure::usage("--profiles takes exactly two profiles"));
    };
    let dims = parse_dims(shape)?;
    let (spec, width) = match (layer, dims.as_slice()) {
        ("dense", &[inputs, outputs]) => (LayerSpec::Dense { inputs, outputs }, inputs),
        ("dense", _) => return Err(Failure::usage("dense layers take --shape INxOUT")),
        ("relu", &[w]) => (LayerSpec::Relu, w),
        ("sigmoid", &[w]) => (LayerSpec::Sigmoid, w),
        ("softmax_cross_entropy", &[w]) => (LayerSpec::SoftmaxCrossEntropy, w),
        _ => {
            return Err(Failure::usage(format!(
                "unsupported layer {layer:?} with shape {shape:?}"
            )))
        }
    };
    let tau = threshold_search(
        &spec,
        width,
        b_r,
        (p1, p2),
        samples,
        iters,
        &mut Rng::new(seed),
    )?;
    eprintln!("tau = {:.4} * 2^-23", tau / 2f64.powi(-23));
    println!("{tau:e}");
    Ok(exit::OK)
}

fn cmd_inspect_log(path: &Path) -> CmdResult {
    let mut reader = LogReader::open(path)?;
    let header = *reader.header();
    let [down, ignore, up] = roundlog::histogram(&mut reader)?;
    let bytes = fs::metadata(path)?.len();
    println!("b_r: {}", header.b_r);
    println!("compressed: {}", header.compressed);
    println!("entries: {}", header.entry_count);
    println!("file bytes: {bytes}");
    println!("down: {down}");
    println!("ignore: {ignore}");
    println!("up: {up}");
    Ok(exit::OK)
}

fn cmd_estimate(config: &Path) -> CmdResult {
    let file = load_config(config)?;
    let est = estimate_log_entries(&file.train);
    println!(
        "{}",
        serde_json::to_string_pretty(&est).map_err(|e| Failure::new(exit::PROTOCOL, e))?
    );
    Ok(exit::OK)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train {
            config,
            profile,
            out,
        } => cmd_train(&config, profile, &out),
        Command::Audit {
            config,
            profile,
            log,
            expect_root,
        } => cmd_audit(&config, profile, log, expect_root),
        Command::Serve { tree, listen } => cmd_serve(&tree, &listen),
        Command::Dispute {
            tree,
            connect,
            timeout,
        } => cmd_dispute(&tree, &connect, timeout),
        Command::Threshold {
            layer,
            shape,
            b_r,
            profiles,
            samples,
            iters,
            seed,
        } => cmd_threshold(&layer, &shape, b_r, &profiles, samples, iters, seed),
        Command::InspectLog { path } => cmd_inspect_log(&path),
        Command::Estimate { config } => cmd_estimate(&config),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on bad arguments.
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
