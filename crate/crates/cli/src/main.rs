mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "racesim", version, about = "Closed-loop racing simulation and sim-to-real evaluation")]
struct Cli {
    /// Require an explicit --seed wherever randomness is involved.
    #[arg(long, global = true)]
    ci: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Digital-twin tools.
    #[command(subcommand)]
    Twin(TwinCmd),
    /// Simulation server.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Connect the built-in pure-pursuit driver to a running server.
    Drive(DriveArgs),
    /// Run the scan matcher over the scans stored in a run log.
    Localize(LocalizeArgs),
    /// Metrics over run logs.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Synthetic test scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
}

#[derive(Subcommand)]
enum TwinCmd {
    /// Point cloud -> filtered, simplified mesh -> 2D track map.
    Build(TwinBuildArgs),
}

#[derive(Args)]
struct TwinBuildArgs {
    /// Point cloud (.ply or .xyz).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Run config whose [twin] and [localize] sections are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Writes mesh.json, map.json, grid.json and report.json here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ply,
    Xyz,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Serve one lockstep session and write its run log.
    Run(SimRunArgs),
}

#[derive(Args)]
struct SimRunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Track map JSON, overriding the config.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// 0 picks a free port; the address is printed on stderr.
    #[arg(long, default_value_t = 5555)]
    port: u16,
    /// Stop after this many ticks.
    #[arg(long)]
    ticks: Option<u64>,
    /// Simulated duration in seconds (converted to ticks).
    #[arg(long, conflicts_with = "ticks")]
    duration: Option<f64>,
    /// Per-command timeout in milliseconds.
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long, default_value = "hold")]
    on_timeout: racesim::bridge::TimeoutPolicy,
    /// Store scans in the run log.
    #[arg(long)]
    log_scans: bool,
    #[arg(long, default_value = "run.jsonl")]
    log: PathBuf,
    /// Also run the built-in driver in-process.
    #[arg(long)]
    drive: bool,
    #[command(flatten)]
    driver: DriverOpts,
}

#[derive(Args, Clone)]
struct DriverOpts {
    #[arg(long, value_enum, default_value = "gt")]
    mode: Mode,
    /// Reference trajectory CSV, overriding the config.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Map or grid JSON used for scan matching, overriding the config map.
    #[arg(long)]
    localize_map: Option<PathBuf>,
    /// Target speed, m/s.
    #[arg(long)]
    speed: Option<f64>,
    /// Write the scan-matching estimates here.
    #[arg(long)]
    estimates: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Steer from ground-truth poses.
    Gt,
    /// Steer from scan-matching estimates.
    Se,
}

#[derive(Args)]
struct DriveArgs {
    #[arg(long, default_value = "127.0.0.1:5555")]
    connect: String,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    driver: DriverOpts,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Grid JSON, or a track map JSON to rasterize.
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial pose `x,y,psi`; defaults to the config start pose.
    #[arg(long, value_parser = parse_pose)]
    initial: Option<racesim::geometry::Pose2>,
    /// Estimate log; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Lap time and lateral-deviation gaps between a sim and a real log.
    Gap(GapArgs),
    /// Position and heading RMSE of an estimate log against a truth log.
    Rmse(RmseArgs),
    /// Reduction of a gap relative to a baseline gap.
    Reduce(ReduceArgs),
    /// Per-lap metrics of one log.
    Laps(LapsArgs),
}

#[derive(Args)]
struct GapArgs {
    #[arg(long)]
    sim: PathBuf,
    #[arg(long)]
    real: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Baseline sim log; reductions are reported against its gap.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Treat the reference as an open path.
    #[arg(long)]
    open: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RmseArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(long)]
    baseline: f64,
    #[arg(long)]
    ours: f64,
}

#[derive(Args)]
struct LapsArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    open: bool,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Stadium track: cloud, true map, reference and a run config.
    GenOval(GenOvalArgs),
}

#[derive(Args)]
struct GenOvalArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "ply")]
    format: Format,
}

fn parse_pose(s: &str) -> Result<racesim::geometry::Pose2, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("invalid number {t:?}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, psi] => Ok(racesim::geometry::Pose2::new(x, y, psi)),
        _ => Err("expected x,y,psi".into()),
    }
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub fn internal(e: impl Display) -> CliError {
    CliError { code: 1, msg: e.to_string() }
}

pub fn bad_input(e: impl Display) -> CliError {
    CliError { code: 2, msg: e.to_string() }
}

pub fn environment(e: impl Display) -> CliError {
    CliError { code: 3, msg: e.to_string() }
}

pub fn connectivity(e: impl Display) -> CliError {
    CliError { code: 4, msg: e.to_string() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Twin(TwinCmd::Build(a)) => commands::twin_build(a),
        Command::Sim(SimCmd::Run(a)) => commands::sim_run(a, cli.ci),
        Command::Drive(a) => commands::drive(a),
        Command::Localize(a) => commands::localize(a),
        Command::Eval(EvalCmd::Gap(a)) => commands::eval_gap(a),
        Command::Eval(EvalCmd::Rmse(a)) => commands::eval_rmse(a),
        Command::Eval(EvalCmd::Reduce(a)) => commands::eval_reduce(a),
        Command::Eval(EvalCmd::Laps(a)) => commands::eval_laps(a),
        Command::Scenario(ScenarioCmd::GenOval(a)) => commands::gen_oval(a, cli.ci),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
