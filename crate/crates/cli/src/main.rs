//! `polymap`: staged command-line front end for the road-boundary mapper.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use polymap::config::Config;
use polymap::simulator::SceneKind;
use polymap::Error;

#[derive(Debug, Parser)]
#[command(
    name = "polymap",
    version,
    about = "Vector road-boundary maps from LiDAR scans"
)]
struct Cli {
    /// TOML configuration file; defaults apply where it is silent.
    #[arg(long, global = true, env = "POLYMAP_CONFIG")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set slam.node_spacing=12`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scene and drive it, writing scans, motion and ground truth.
    Simulate(SimulateArgs),
    /// Dead-reckon a motion log.
    Odometry(OdometryArgs),
    /// Build one local grid map per graph node.
    Fuse(FuseArgs),
    /// Turn local grid maps into polyline maps.
    Vectorize(VectorizeArgs),
    /// Register one polyline map against another.
    Match(MatchArgs),
    /// Full mapping run: graph, loop closure, optimization and map assembly.
    Slam(SlamArgs),
    /// Error tables for trajectories and matching.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Render artifacts to SVG.
    Plot(PlotArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SceneArg {
    Straight,
    Corner,
    Loop,
    Clutter,
}

impl From<SceneArg> for SceneKind {
    fn from(s: SceneArg) -> Self {
        match s {
            SceneArg::Straight => SceneKind::Straight,
            SceneArg::Corner => SceneKind::Corner,
            SceneArg::Loop => SceneKind::Loop,
            SceneArg::Clutter => SceneKind::Clutter,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scene: SceneArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives scene.json, scans.vscn, motion.csv and truth.csv.
    #[arg(long)]
    out: PathBuf,
    /// Write the scan log as text instead of binary.
    #[arg(long)]
    text: bool,
}

/// Where dead reckoning starts: `x,y,theta`, or a trajectory CSV whose first
/// row is used.
#[derive(Debug, Args)]
struct StartArgs {
    #[arg(long)]
    start: String,
}

#[derive(Debug, Args)]
struct OdometryArgs {
    #[arg(long)]
    motion: PathBuf,
    /// Report states at these scan times instead of at every motion sample.
    #[arg(long)]
    scans: Option<PathBuf>,
    #[command(flatten)]
    start: StartArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    scans: PathBuf,
    #[command(flatten)]
    start: StartArgs,
    /// Output directory; receives nodes.csv and lgm_NNNN.vlgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VectorizeArgs {
    /// A grid file, or a directory of lgm_NNNN.vlgm files.
    #[arg(long)]
    lgm: PathBuf,
    /// Output file (simplified map) or directory (lvm_NNNN.json).
    #[arg(long)]
    out: PathBuf,
    /// Single-file mode: also write the raw map here.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Initial guess `x,y,theta` of the source frame in the target frame.
    #[arg(long, default_value = "0,0,0")]
    initial: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SlamArgs {
    /// Motion log (monolithic run).
    #[arg(long, requires_all = ["scans", "start"], conflicts_with_all = ["nodes", "lvms"])]
    motion: Option<PathBuf>,
    #[arg(long)]
    scans: Option<PathBuf>,
    #[arg(long)]
    start: Option<String>,
    /// nodes.csv from `fuse` (staged run).
    #[arg(long, requires = "lvms")]
    nodes: Option<PathBuf>,
    /// Directory of per-node maps from `vectorize`.
    #[arg(long)]
    lvms: Option<PathBuf>,
    /// Output directory; receives map.json, trajectory.csv, graph.txt and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Position errors of trajectories against ground truth.
    Trajectory {
        #[arg(long, required = true)]
        estimate: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simplified vs raw polyline matching vs point ICP on simulated pairs.
    Matching {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Pairs per scene kind.
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
    /// scene.json from `simulate`; curbs are drawn in grey.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    lgm: Vec<PathBuf>,
    /// Polyline maps in their own frames, placed at their source pose.
    #[arg(long)]
    lvm: Vec<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    trajectory: Vec<PathBuf>,
}

/// Process exit status of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Results were written but an iterative solver stopped on its budget.
    NotConverged,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_)
        | Error::Io(_)
        | Error::InvalidConfig(_)
        | Error::InvalidParams(_)
        | Error::InvalidPolyline(_)
        | Error::NonFinite
        | Error::NonMonotonicTime { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match Config::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("polymap: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => stages::simulate(&config, a.scene.into(), a.seed, &a.out, a.text),
        Command::Odometry(a) => stages::odometry(
            &config,
            &a.motion,
            a.scans.as_deref(),
            &a.start.start,
            &a.out,
        ),
        Command::Fuse(a) => stages::fuse(&config, &a.motion, &a.scans, &a.start.start, &a.out),
        Command::Vectorize(a) => stages::vectorize(&config, &a.lgm, &a.out, a.raw.as_deref()),
        Command::Match(a) => stages::match_maps(&config, &a.source, &a.target, &a.initial, &a.out),
        Command::Slam(a) => match (a.motion, a.scans, a.start, a.nodes, a.lvms) {
            (Some(m), Some(s), Some(st), None, None) => {
                stages::slam_raw(&config, &m, &s, &st, &a.out)
            }
            (None, None, None, Some(n), Some(l)) => stages::slam_staged(&config, &n, &l, &a.out),
            _ => Err(Error::InvalidParams(
                "slam needs either --motion, --scans and --start, or --nodes and --lvms".into(),
            )),
        },
        Command::Eval(EvalCommand::Trajectory {
            estimate,
            truth,
            out,
        }) => stages::eval_trajectory(&estimate, &truth, out.as_deref()),
        Command::Eval(EvalCommand::Matching { seed, count, out }) => {
            stages::eval_matching(&config, seed, count, out.as_deref())
        }
        Command::Plot(a) => stages::plot(&config, &a),
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(Status::Ok)
        }
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("polymap: solver did not converge; results were written and flagged");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("polymap: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
