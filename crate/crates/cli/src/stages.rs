use std::fs;
use std::path::{Path, PathBuf};

use polymap::config::Config;
use polymap::grid::occupied_cells;
use polymap::io::{self, TrajectoryRow};
use polymap::matching::icl_match;
use polymap::odometry::{run, MotionSample, OdoState};
use polymap::plot::{Plot, Style};
use polymap::pose_graph::OptimizeStats;
use polymap::scenarios::{evaluate_pair, match_pairs, PairOutcome};
use polymap::simulator::{drive, generate_scene, SceneKind, SceneSpec, SimScans};
use polymap::slam::{
    finish, frame_evidence, fuse_node, lgm_to_lvms, run_pipeline, scan_states, select_nodes,
    trajectory_error, ScanSource, SlamOutput, TrajectoryError,
};
use polymap::vectorize::Lvm;
use polymap::{Error, Pose2, Result};
use serde::Serialize;

use crate::{PlotArgs, Status};

fn parse_pose(s: &str) -> Result<Pose2> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse(format!("expected x,y,theta, got {s:?}")))?;
    match v[..] {
        [x, y, theta] if v.iter().all(|x| x.is_finite()) => Ok(Pose2::new(x, y, theta)),
        _ => Err(Error::Parse(format!("expected x,y,theta, got {s:?}"))),
    }
}

/// Initial filter state from `x,y,theta` or the first row of a trajectory
/// file. A literal pose is timed one sample period before the first motion
/// sample.
fn start_state(spec: &str, motion: &[MotionSample], config: &Config) -> Result<OdoState> {
    let var = config.odometry.initial_variance;
    if Path::new(spec).is_file() {
        let first = io::read_trajectory(Path::new(spec))?[0];
        return Ok(OdoState::new(first.pose(), first.timestamp, var));
    }
    let pose = parse_pose(spec)?;
    let period = match motion {
        [a, b, ..] => b.timestamp - a.timestamp,
        _ => 0.0,
    };
    Ok(OdoState::new(pose, motion[0].timestamp - period, var))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn numbered(dir: &Path, stem: &str, id: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{id:04}.{ext}"))
}

pub fn simulate(
    config: &Config,
    kind: SceneKind,
    seed: u64,
    out: &Path,
    text: bool,
) -> Result<Status> {
    let scene = generate_scene(kind, &config.scene, seed)?;
    let log = drive(&scene, &config.drive, &config.noise, seed)?;
    create_dir(out)?;
    io::write_json(&out.join("scene.json"), &scene)?;
    let scans = SimScans {
        scene: &scene,
        log: &log,
        lidar: config.lidar.clone(),
    };
    let frames = (0..scans.len()).map(|i| scans.frame(i));
    let n = if text {
        io::write_scan_log_text(&out.join("scans.txt"), frames)?
    } else {
        io::write_scan_log(&out.join("scans.vscn"), frames)?
    };
    io::write_motion(&out.join("motion.csv"), &log.motion)?;
    let truth: Vec<TrajectoryRow> = log
        .scan_indices
        .iter()
        .map(|k| TrajectoryRow::new(log.times[*k], log.truth[*k]))
        .collect();
    io::write_trajectory(&out.join("truth.csv"), &truth)?;
    let length: f64 = log
        .truth
        .windows(2)
        .map(|w| w[0].translation().distance(w[1].translation()))
        .sum();
    println!(
        "{kind:?} scene, seed {seed}: {n} scans, {} motion samples, {length:.1} m driven",
        log.motion.len()
    );
    Ok(Status::Ok)
}

fn dead_reckon(config: &Config, motion: &Path, start: &str) -> Result<Vec<OdoState>> {
    let motion = io::read_motion(motion)?;
    let initial = start_state(start, &motion, config)?;
    run(initial, &motion, &config.odometry)
}

pub fn odometry(
    config: &Config,
    motion: &Path,
    scans: Option<&Path>,
    start: &str,
    out: &Path,
) -> Result<Status> {
    let mut states = dead_reckon(config, motion, start)?;
    if let Some(scans) = scans {
        states = scan_states(&states, &io::read_scan_log(scans)?.timestamps());
    }
    let rows: Vec<TrajectoryRow> = states
        .iter()
        .map(|s| TrajectoryRow::new(s.last_timestamp, s.pose))
        .collect();
    io::write_trajectory(out, &rows)?;
    let last = states.last().expect("non-empty");
    println!("{} states, {:.1} m travelled", rows.len(), last.distance);
    Ok(Status::Ok)
}

pub fn fuse(
    config: &Config,
    motion: &Path,
    scans: &Path,
    start: &str,
    out: &Path,
) -> Result<Status> {
    // inputs are fully checked before anything is written
    let log = io::read_scan_log(scans)?;
    let states = dead_reckon(config, motion, start)?;
    let pc = config.pipeline();
    let at_scans = scan_states(&states, &log.timestamps());
    let evidence = (0..log.len())
        .map(|i| frame_evidence(&log.frame(i)?, &pc.grid, pc.slam.evidence_resolution))
        .collect::<Result<Vec<_>>>()?;
    let nodes = select_nodes(&at_scans, &pc.slam);
    create_dir(out)?;
    io::write_nodes(&out.join("nodes.csv"), &nodes)?;
    for n in &nodes {
        let lgm = fuse_node(n, &at_scans, &evidence, &pc.grid, &pc.slam)?;
        io::write_lgm(&numbered(out, "lgm", n.id, "vlgm"), &lgm)?;
    }
    println!("{} scans fused into {} node grids", log.len(), nodes.len());
    Ok(Status::Ok)
}

fn grid_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut files: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let id = name
                .strip_prefix("lgm_")?
                .strip_suffix(".vlgm")?
                .parse()
                .ok()?;
            Some((id, p))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no lgm_NNNN.vlgm files",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn vectorize(config: &Config, lgm: &Path, out: &Path, raw: Option<&Path>) -> Result<Status> {
    if lgm.is_dir() {
        let files = grid_files(lgm)?;
        let grids = files
            .iter()
            .map(|(id, p)| Ok((*id, io::read_lgm(p)?)))
            .collect::<Result<Vec<_>>>()?;
        create_dir(out)?;
        for (id, g) in &grids {
            let (r, s) = lgm_to_lvms(g, &config.vectorize)?;
            io::write_lvm(&numbered(out, "lvm", *id, "json"), &s)?;
            io::write_lvm(&numbered(out, "lvm", *id, "raw.json"), &r)?;
        }
        println!("{} grids vectorized", grids.len());
    } else {
        let (r, s) = lgm_to_lvms(&io::read_lgm(lgm)?, &config.vectorize)?;
        io::write_lvm(out, &s)?;
        if let Some(p) = raw {
            io::write_lvm(p, &r)?;
        }
        println!(
            "{} raw nodes, {} after simplification",
            r.node_count(),
            s.node_count()
        );
    }
    Ok(Status::Ok)
}

pub fn match_maps(
    config: &Config,
    source: &Path,
    target: &Path,
    initial: &str,
    out: &Path,
) -> Result<Status> {
    let (src, dst) = (io::read_lvm(source)?, io::read_lvm(target)?);
    let initial = parse_pose(initial)?;
    let m = icl_match(&src, &dst, initial, &config.matching)?;
    io::write_match(out, &m)?;
    let t = m.transform;
    println!(
        "transform ({:.4}, {:.4}, {:.3} deg), mean |r| {:.4} m over {} nodes, {} iterations{}",
        t.x,
        t.y,
        t.theta.to_degrees(),
        m.mean_abs_residual,
        m.correspondence_count,
        m.iterations,
        if m.degenerate { ", degenerate" } else { "" }
    );
    Ok(if m.converged {
        Status::Ok
    } else {
        Status::NotConverged
    })
}

fn write_slam(out: &Path, result: &SlamOutput) -> Result<Status> {
    create_dir(out)?;
    io::write_map(&out.join("map.json"), &result.map)?;
    let rows: Vec<TrajectoryRow> = result
        .nodes
        .iter()
        .zip(result.optimized_poses())
        .map(|(n, p)| TrajectoryRow::new(n.timestamp, p))
        .collect();
    io::write_trajectory(&out.join("trajectory.csv"), &rows)?;
    let dr: Vec<TrajectoryRow> = result
        .nodes
        .iter()
        .map(|n| TrajectoryRow::new(n.timestamp, n.pose))
        .collect();
    io::write_trajectory(&out.join("dead_reckoning.csv"), &dr)?;
    io::write_graph(&out.join("graph.txt"), &result.graph)?;
    io::write_json(&out.join("report.json"), &result.report)?;
    let r = &result.report;
    println!(
        "{} nodes, {} loop closures from {} candidates, map of {} polylines / {} nodes",
        r.nodes,
        r.loop_closures,
        r.loop_candidates_tried,
        result.map.polylines.len(),
        result.map.node_count()
    );
    let converged = r.optimizations.iter().all(|s: &OptimizeStats| s.converged);
    Ok(if converged {
        Status::Ok
    } else {
        Status::NotConverged
    })
}

pub fn slam_raw(
    config: &Config,
    motion: &Path,
    scans: &Path,
    start: &str,
    out: &Path,
) -> Result<Status> {
    let log = io::read_scan_log(scans)?;
    let motion = io::read_motion(motion)?;
    let initial = start_state(start, &motion, config)?;
    let result = run_pipeline(
        &motion,
        initial,
        &log,
        &log.timestamps(),
        &config.pipeline(),
    )?;
    write_slam(out, &result)
}

pub fn slam_staged(config: &Config, nodes: &Path, lvms: &Path, out: &Path) -> Result<Status> {
    let nodes = io::read_nodes(nodes)?;
    let maps = nodes
        .iter()
        .map(|n| io::read_lvm(&numbered(lvms, "lvm", n.id, "json")))
        .collect::<Result<Vec<Lvm>>>()?;
    let result = finish(nodes, maps, &config.pipeline())?;
    write_slam(out, &result)
}

/// Truth pose at `t`, interpolated between rows.
fn truth_at(truth: &[TrajectoryRow], t: f64) -> Pose2 {
    let i = truth.partition_point(|r| r.timestamp < t);
    if i == 0 {
        return truth[0].pose();
    }
    if i == truth.len() {
        return truth[i - 1].pose();
    }
    let (a, b) = (&truth[i - 1], &truth[i]);
    if b.timestamp == t {
        return b.pose();
    }
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let dth = polymap::geometry::wrap_angle(b.theta - a.theta);
    Pose2::new(
        a.x + w * (b.x - a.x),
        a.y + w * (b.y - a.y),
        a.theta + w * dth,
    )
}

#[derive(Debug, Serialize)]
struct TrajectoryReport {
    file: String,
    poses: usize,
    error: TrajectoryError,
    final_error: f64,
}

pub fn eval_trajectory(estimates: &[PathBuf], truth: &Path, out: Option<&Path>) -> Result<Status> {
    let truth = io::read_trajectory(truth)?;
    let mut reports = Vec::new();
    println!(
        "{:<32} {:>6} {:>9} {:>9} {:>9} {:>9}",
        "trajectory", "poses", "mean (m)", "max (m)", "rmse (m)", "end (m)"
    );
    for path in estimates {
        let rows = io::read_trajectory(path)?;
        let est: Vec<Pose2> = rows.iter().map(TrajectoryRow::pose).collect();
        let gt: Vec<Pose2> = rows.iter().map(|r| truth_at(&truth, r.timestamp)).collect();
        let error = trajectory_error(&est, &gt)?;
        let final_error = est
            .last()
            .expect("non-empty")
            .translation()
            .distance(gt.last().expect("non-empty").translation());
        let file = path.display().to_string();
        println!(
            "{file:<32} {:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            rows.len(),
            error.mean,
            error.max,
            error.rmse,
            final_error
        );
        reports.push(TrajectoryReport {
            file,
            poses: rows.len(),
            error,
            final_error,
        });
    }
    if let Some(out) = out {
        io::write_json(out, &reports)?;
    }
    Ok(Status::Ok)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn eval_matching(
    config: &Config,
    seed: u64,
    count: usize,
    out: Option<&Path>,
) -> Result<Status> {
    let mut outcomes: Vec<PairOutcome> = Vec::new();
    for kind in [SceneKind::Straight, SceneKind::Corner, SceneKind::Clutter] {
        for pair in match_pairs(kind, count, &config.pairs, seed)? {
            outcomes.push(evaluate_pair(&pair, &config.matching, &config.grid)?);
        }
    }
    println!(
        "{:<9} {:<11} {:>10} {:>9} {:>10} {:>11} {:>6}",
        "scene", "method", "|dt| (m)", "rel (%)", "|dth| (deg)", "median (ms)", "iters"
    );
    let groups: [(&str, Option<SceneKind>); 4] = [
        ("straight", Some(SceneKind::Straight)),
        ("corner", Some(SceneKind::Corner)),
        ("clutter", Some(SceneKind::Clutter)),
        ("all", None),
    ];
    for (name, kind) in groups {
        let sel: Vec<&PairOutcome> = outcomes
            .iter()
            .filter(|o| kind.is_none_or(|k| o.kind == k))
            .collect();
        type Pick = fn(&PairOutcome) -> polymap::scenarios::MethodOutcome;
        let methods: [(&str, Pick); 3] = [
            ("simplified", |o| o.simplified),
            ("raw", |o| o.raw),
            ("points", |o| o.points),
        ];
        for (label, pick) in methods {
            let m: Vec<_> = sel.iter().map(|o| pick(o)).collect();
            println!(
                "{name:<9} {label:<11} {:>10.4} {:>9.2} {:>10.3} {:>11.3} {:>6.1}",
                mean(m.iter().map(|x| x.abs_error)),
                100.0 * mean(m.iter().map(|x| x.rel_error)),
                mean(m.iter().map(|x| x.rot_error.to_degrees())),
                1e3 * median(m.iter().map(|x| x.seconds).collect()),
                mean(m.iter().map(|x| x.iterations as f64)),
            );
        }
    }
    if let Some(out) = out {
        io::write_json(out, &outcomes)?;
    }
    Ok(Status::Ok)
}

const PALETTE: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd"];

pub fn plot(_config: &Config, a: &PlotArgs) -> Result<Status> {
    let mut plot = Plot::new();
    plot.title = a.title.clone();
    if let Some(p) = &a.scene {
        let scene: SceneSpec = io::read_json(p)?;
        for c in &scene.curbs {
            plot.polyline(c, &Pose2::identity(), Style::new("#999999", 0.1));
        }
    }
    for p in &a.lgm {
        let g = io::read_lgm(p)?;
        plot.mask(&occupied_cells(&g), &g.config, &g.anchor, "#bbbbbb");
    }
    for p in &a.lvm {
        let lvm = io::read_lvm(p)?;
        plot.lvm(&lvm, &lvm.source_pose, Style::new("#d62728", 0.12));
    }
    if let Some(p) = &a.map {
        for line in io::read_map(p)?.polylines {
            plot.polyline(&line, &Pose2::identity(), Style::new("#000000", 0.15));
        }
    }
    if let Some(p) = &a.graph {
        plot.graph(&io::read_graph(p)?);
    }
    for (i, p) in a.trajectory.iter().enumerate() {
        let poses: Vec<Pose2> = io::read_trajectory(p)?
            .iter()
            .map(TrajectoryRow::pose)
            .collect();
        plot.trajectory(&poses, Style::new(PALETTE[i % PALETTE.len()], 0.3));
    }
    fs::write(&a.out, plot.to_svg()).map_err(|e| Error::Io(format!("{}: {e}", a.out.display())))?;
    Ok(Status::Ok)
}
