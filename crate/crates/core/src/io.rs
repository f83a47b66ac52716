//! On-disk formats used between pipeline stages.
//!
//! | artifact | format |
//! |---|---|
//! | scan log | binary `VSCN` or text, see [`read_scan_log`] |
//! | motion log | CSV `timestamp,velocity,steering_angle,compass_heading,gyro_rate` |
//! | trajectory | CSV `timestamp,x,y,theta` |
//! | graph nodes | CSV, one [`NodeRecord`] per row |
//! | local grid map | binary `VLGM`, see [`write_lgm`] |
//! | LVM / vector map | JSON, see [`LvmDocument`] |
//! | match result | JSON, see [`MatchRecord`] |
//! | pose graph | text `NODE`/`EDGE` lines, see [`write_graph`] |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concatenate::VectorMap;
use crate::error::{Error, Result};
use crate::geometry::{BoundaryKind, Point2, Point3, Polyline, Pose2};
use crate::grid::{GridCell, GridConfig, OccupancyGrid, ScanFrame};
use crate::matching::MatchResult;
use crate::odometry::MotionSample;
use crate::pose_graph::{EdgeKind, GraphEdge, PoseGraph};
use crate::slam::{NodeRecord, ScanSource};
use crate::vectorize::Lvm;

fn parse_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(e.to_string())
}

// ---------------------------------------------------------------- scan logs

pub const SCAN_MAGIC: [u8; 4] = *b"VSCN";
const SCAN_VERSION: u32 = 1;

/// Writes frames in the binary layout: magic `VSCN`, `u32` version, then per
/// frame an `f64` timestamp, a `u32` point count and `count` little-endian
/// `f32` triples. Returns the number of frames written.
pub fn write_scan_log(
    path: &Path,
    frames: impl IntoIterator<Item = Result<ScanFrame>>,
) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SCAN_MAGIC)?;
    w.write_all(&SCAN_VERSION.to_le_bytes())?;
    let mut n = 0;
    for frame in frames {
        let frame = frame?;
        let count = u32::try_from(frame.points.len())
            .map_err(|_| Error::InvalidParams("frame too large".into()))?;
        w.write_all(&frame.timestamp.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for p in &frame.points {
            for v in [p.x, p.y, p.z] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Writes frames as text: a `frame <timestamp> <count>` line followed by
/// `count` lines of `x y z`. Lines starting with `#` are comments.
pub fn write_scan_log_text(
    path: &Path,
    frames: impl IntoIterator<Item = Result<ScanFrame>>,
) -> Result<usize> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut n = 0;
    for frame in frames {
        let frame = frame?;
        writeln!(w, "frame {} {}", frame.timestamp, frame.points.len())?;
        for p in &frame.points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

#[derive(Debug, Clone, Copy)]
struct FrameEntry {
    offset: u64,
    timestamp: f64,
    count: u32,
}

#[derive(Debug, Clone)]
enum ScanStore {
    /// Frames are read on demand from the file.
    Binary {
        path: PathBuf,
        entries: Vec<FrameEntry>,
    },
    Text(Vec<ScanFrame>),
}

/// A parsed scan log; binary logs are indexed and read lazily.
#[derive(Debug, Clone)]
pub struct ScanLog {
    store: ScanStore,
}

impl ScanLog {
    pub fn timestamps(&self) -> Vec<f64> {
        match &self.store {
            ScanStore::Binary { entries, .. } => entries.iter().map(|e| e.timestamp).collect(),
            ScanStore::Text(frames) => frames.iter().map(|f| f.timestamp).collect(),
        }
    }
}

impl ScanSource for ScanLog {
    fn len(&self) -> usize {
        match &self.store {
            ScanStore::Binary { entries, .. } => entries.len(),
            ScanStore::Text(frames) => frames.len(),
        }
    }

    fn frame(&self, i: usize) -> Result<ScanFrame> {
        match &self.store {
            ScanStore::Text(frames) => frames.frame(i),
            ScanStore::Binary { path, entries } => {
                let e = entries.get(i).ok_or(Error::EmptyFrame)?;
                let mut f = File::open(path)?;
                f.seek(SeekFrom::Start(e.offset))?;
                let mut buf = vec![0u8; e.count as usize * 12];
                f.read_exact(&mut buf)?;
                let points = buf
                    .chunks_exact(12)
                    .map(|c| {
                        let v = |k: usize| {
                            f32::from_le_bytes(c[k..k + 4].try_into().expect("4 bytes")) as f64
                        };
                        Point3::try_new(v(0), v(4), v(8))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ScanFrame {
                    timestamp: e.timestamp,
                    points,
                })
            }
        }
    }
}

/// Opens a scan log in either layout. A log without frames is an error.
pub fn read_scan_log(path: &Path) -> Result<ScanLog> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic)?;
    let store = if n == 4 && magic == SCAN_MAGIC {
        index_binary(path, f)?
    } else {
        ScanStore::Text(parse_text_log(BufReader::new(File::open(path)?))?)
    };
    let log = ScanLog { store };
    if log.is_empty() {
        return Err(Error::Parse(format!(
            "{}: scan log contains no frames",
            path.display()
        )));
    }
    let times = log.timestamps();
    if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::NonMonotonicTime {
            previous: w[0],
            current: w[1],
        });
    }
    Ok(log)
}

fn index_binary(path: &Path, mut f: File) -> Result<ScanStore> {
    let len = f.metadata()?.len();
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(parse_err)?;
    let version = u32::from_le_bytes(word);
    if version != SCAN_VERSION {
        return Err(Error::Parse(format!(
            "unsupported scan log version {version}"
        )));
    }
    let mut pos = 8u64;
    let mut entries = Vec::new();
    let mut header = [0u8; 12];
    while pos < len {
        f.read_exact(&mut header)
            .map_err(|_| Error::Parse("truncated frame header".into()))?;
        let timestamp = f64::from_le_bytes(header[..8].try_into().expect("8 bytes"));
        let count = u32::from_le_bytes(header[8..].try_into().expect("4 bytes"));
        if !timestamp.is_finite() {
            return Err(Error::NonFinite);
        }
        let offset = pos + 12;
        pos = offset + count as u64 * 12;
        if pos > len {
            return Err(Error::Parse("truncated frame body".into()));
        }
        f.seek(SeekFrom::Start(pos))?;
        entries.push(FrameEntry {
            offset,
            timestamp,
            count,
        });
    }
    Ok(ScanStore::Binary {
        path: path.to_path_buf(),
        entries,
    })
}

fn parse_text_log(r: impl BufRead) -> Result<Vec<ScanFrame>> {
    let mut frames = Vec::new();
    let mut expected = 0usize;
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: &str| Error::Parse(format!("line {}: {msg}", no + 1));
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| at(&format!("bad number {s:?}")))
        };
        if fields[0] == "frame" {
            if expected > 0 {
                return Err(at("frame ended early"));
            }
            let [_, t, c] = fields[..] else {
                return Err(at("expected `frame <timestamp> <count>`"));
            };
            expected = c.parse().map_err(|_| at("bad point count"))?;
            frames.push(ScanFrame {
                timestamp: num(t)?,
                points: Vec::with_capacity(expected),
            });
            continue;
        }
        let [x, y, z] = fields[..] else {
            return Err(at("expected `x y z`"));
        };
        if expected == 0 {
            return Err(at("point outside a frame"));
        }
        let frame = frames.last_mut().expect("inside a frame");
        frame
            .points
            .push(Point3::try_new(num(x)?, num(y)?, num(z)?)?);
        expected -= 1;
    }
    if expected > 0 {
        return Err(Error::Parse("last frame is truncated".into()));
    }
    Ok(frames)
}

// ---------------------------------------------------------------- CSV logs

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
            _ => parse_err(e),
        })?;
    r.deserialize().map(|row| row.map_err(parse_err)).collect()
}

pub fn write_motion(path: &Path, samples: &[MotionSample]) -> Result<()> {
    write_csv(path, samples)
}

pub fn read_motion(path: &Path) -> Result<Vec<MotionSample>> {
    let rows: Vec<MotionSample> = read_csv(path)?;
    if rows.is_empty() {
        return Err(Error::Parse(format!(
            "{}: motion log is empty",
            path.display()
        )));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl TrajectoryRow {
    pub fn new(timestamp: f64, pose: Pose2) -> Self {
        Self {
            timestamp,
            x: pose.x,
            y: pose.y,
            theta: pose.theta,
        }
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.theta)
    }
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let rows: Vec<TrajectoryRow> = read_csv(path)?;
    if rows.is_empty() {
        return Err(Error::Parse(format!(
            "{}: trajectory is empty",
            path.display()
        )));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct NodeRow {
    id: usize,
    scan: usize,
    timestamp: f64,
    x: f64,
    y: f64,
    theta: f64,
    distance: f64,
    heading_variance: f64,
}

pub fn write_nodes(path: &Path, nodes: &[NodeRecord]) -> Result<()> {
    write_csv(
        path,
        nodes.iter().map(|n| NodeRow {
            id: n.id,
            scan: n.scan,
            timestamp: n.timestamp,
            x: n.pose.x,
            y: n.pose.y,
            theta: n.pose.theta,
            distance: n.distance,
            heading_variance: n.heading_variance,
        }),
    )
}

pub fn read_nodes(path: &Path) -> Result<Vec<NodeRecord>> {
    let rows: Vec<NodeRow> = read_csv(path)?;
    let nodes: Vec<NodeRecord> = rows
        .into_iter()
        .map(|r| NodeRecord {
            id: r.id,
            scan: r.scan,
            timestamp: r.timestamp,
            pose: Pose2::new(r.x, r.y, r.theta),
            distance: r.distance,
            heading_variance: r.heading_variance,
        })
        .collect();
    if nodes.is_empty() || nodes.iter().enumerate().any(|(i, n)| n.id != i) {
        return Err(Error::Parse(format!(
            "{}: node ids must be 0, 1, 2, ...",
            path.display()
        )));
    }
    Ok(nodes)
}

// ---------------------------------------------------------------- grids

pub const LGM_MAGIC: [u8; 4] = *b"VLGM";
const LGM_VERSION: u32 = 1;

fn is_blank(c: &GridCell) -> bool {
    let d = GridCell::default();
    c.log_odds.to_bits() == d.log_odds.to_bits()
        && c.z_min.to_bits() == d.z_min.to_bits()
        && c.z_max.to_bits() == d.z_max.to_bits()
        && c.z_delta.to_bits() == d.z_delta.to_bits()
}

/// Binary snapshot: magic `VLGM`, `u32` version, `u32` length and JSON text
/// of the grid config, anchor pose as three `f64`, `u64` frame count, `u32`
/// number of stored cells, then per stored cell a `u32` row-major index and
/// `log_odds, z_min, z_max, z_delta` as `f64`. Cells still at their initial
/// value are omitted. All values are little-endian and round-trip exactly;
/// per-cell point references are not stored.
pub fn write_lgm(path: &Path, lgm: &OccupancyGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let config = serde_json::to_vec(&lgm.config).map_err(parse_err)?;
    w.write_all(&LGM_MAGIC)?;
    w.write_all(&LGM_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    for v in lgm.anchor.as_array() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&lgm.frame_count.to_le_bytes())?;
    let stored: Vec<(usize, &GridCell)> = lgm
        .cells()
        .iter()
        .enumerate()
        .filter(|(_, c)| !is_blank(c))
        .collect();
    w.write_all(&(stored.len() as u32).to_le_bytes())?;
    for (i, c) in stored {
        w.write_all(&(i as u32).to_le_bytes())?;
        for v in [c.log_odds, c.z_min, c.z_max, c.z_delta] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_lgm(path: &Path) -> Result<OccupancyGrid> {
    let mut r = BufReader::new(File::open(path)?);
    let truncated = |_| Error::Parse(format!("{}: truncated grid file", path.display()));
    let mut u32buf = [0u8; 4];
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(truncated)?;
    if u32buf != LGM_MAGIC {
        return Err(Error::Parse(format!("{}: not a grid file", path.display())));
    }
    r.read_exact(&mut u32buf).map_err(truncated)?;
    if u32::from_le_bytes(u32buf) != LGM_VERSION {
        return Err(Error::Parse("unsupported grid file version".into()));
    }
    r.read_exact(&mut u32buf).map_err(truncated)?;
    let mut config = vec![0u8; u32::from_le_bytes(u32buf) as usize];
    r.read_exact(&mut config).map_err(truncated)?;
    let config: GridConfig = serde_json::from_slice(&config).map_err(parse_err)?;
    let mut next_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut f64buf).map_err(truncated)?;
        Ok(f64::from_le_bytes(f64buf))
    };
    let anchor = Pose2::new(next_f64(&mut r)?, next_f64(&mut r)?, next_f64(&mut r)?);
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(truncated)?;
    let frame_count = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u32buf).map_err(truncated)?;
    let stored = u32::from_le_bytes(u32buf) as usize;
    let total = config.rows * config.cols;
    let mut cells = vec![GridCell::default(); total];
    for _ in 0..stored {
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let i = u32::from_le_bytes(u32buf) as usize;
        if i >= total {
            return Err(Error::Parse(format!("cell index {i} out of range")));
        }
        let c = &mut cells[i];
        c.log_odds = next_f64(&mut r)?;
        c.z_min = next_f64(&mut r)?;
        c.z_max = next_f64(&mut r)?;
        c.z_delta = next_f64(&mut r)?;
    }
    OccupancyGrid::from_parts(config, cells, frame_count, anchor)
}

// ---------------------------------------------------------------- vector maps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolylineDocument {
    pub kind: BoundaryKind,
    pub nodes: Vec<[f64; 2]>,
}

/// JSON form of an LVM. A global vector map uses the same layout with an
/// identity `source_pose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvmDocument {
    pub simplified: bool,
    /// `[x, y, theta]`.
    pub source_pose: [f64; 3],
    pub polylines: Vec<PolylineDocument>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl From<&Lvm> for LvmDocument {
    fn from(lvm: &Lvm) -> Self {
        Self {
            simplified: lvm.simplified,
            source_pose: lvm.source_pose.as_array().map(round6),
            polylines: lvm
                .polylines
                .iter()
                .map(|l| PolylineDocument {
                    kind: l.kind(),
                    nodes: l
                        .nodes()
                        .iter()
                        .map(|p| [round6(p.x), round6(p.y)])
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<LvmDocument> for Lvm {
    type Error = Error;

    fn try_from(doc: LvmDocument) -> Result<Self> {
        let [x, y, theta] = doc.source_pose;
        Ok(Lvm {
            polylines: doc
                .polylines
                .into_iter()
                .map(|p| {
                    Polyline::new(
                        p.nodes
                            .into_iter()
                            .map(|[x, y]| Point2::new(x, y))
                            .collect(),
                        p.kind,
                    )
                })
                .collect::<Result<_>>()?,
            source_pose: Pose2::new(x, y, theta),
            simplified: doc.simplified,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Node coordinates are written with at most six decimals.
pub fn write_lvm(path: &Path, lvm: &Lvm) -> Result<()> {
    write_json(path, &LvmDocument::from(lvm))
}

pub fn read_lvm(path: &Path) -> Result<Lvm> {
    read_json::<LvmDocument>(path)?.try_into()
}

pub fn write_map(path: &Path, map: &VectorMap) -> Result<()> {
    let lvm = Lvm {
        polylines: map.polylines.clone(),
        source_pose: Pose2::identity(),
        simplified: true,
    };
    write_lvm(path, &lvm)
}

pub fn read_map(path: &Path) -> Result<VectorMap> {
    Ok(VectorMap {
        polylines: read_lvm(path)?.polylines,
    })
}

// ---------------------------------------------------------------- match results

/// JSON record of one registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// `[x, y, theta]` of the source frame in the target frame.
    pub transform: [f64; 3],
    pub iterations: usize,
    pub mean_abs_residual: f64,
    pub rms_residual: f64,
    pub correspondence_count: usize,
    pub degenerate: bool,
    pub converged: bool,
    /// Condition number of the final normal matrix; absent when singular.
    pub condition: Option<f64>,
    /// Upper triangle of the information matrix, row by row.
    pub information: [f64; 6],
}

impl From<&MatchResult> for MatchRecord {
    fn from(m: &MatchResult) -> Self {
        let i = &m.information;
        Self {
            transform: m.transform.as_array(),
            iterations: m.iterations,
            mean_abs_residual: m.mean_abs_residual,
            rms_residual: m.rms_residual,
            correspondence_count: m.correspondence_count,
            degenerate: m.degenerate,
            converged: m.converged,
            condition: m.condition.is_finite().then_some(m.condition),
            information: [i[0][0], i[0][1], i[0][2], i[1][1], i[1][2], i[2][2]],
        }
    }
}

pub fn write_match(path: &Path, m: &MatchResult) -> Result<()> {
    write_json(path, &MatchRecord::from(m))
}

pub fn read_match(path: &Path) -> Result<MatchRecord> {
    read_json(path)
}

// ---------------------------------------------------------------- pose graphs

fn upper(m: &[[f64; 3]; 3]) -> [f64; 6] {
    [m[0][0], m[0][1], m[0][2], m[1][1], m[1][2], m[2][2]]
}

fn full(u: [f64; 6]) -> [[f64; 3]; 3] {
    [[u[0], u[1], u[2]], [u[1], u[3], u[4]], [u[2], u[4], u[5]]]
}

/// One `NODE id x y theta` line per node, then one
/// `EDGE kind from to dx dy dtheta i00 i01 i02 i11 i12 i22` line per edge.
pub fn write_graph(path: &Path, graph: &PoseGraph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, n) in graph.nodes.iter().enumerate() {
        writeln!(w, "NODE {i} {} {} {}", n.pose.x, n.pose.y, n.pose.theta)?;
    }
    for e in &graph.edges {
        let kind = match e.kind {
            EdgeKind::Odometry => "odometry",
            EdgeKind::Matching => "matching",
        };
        let m = e.measurement;
        write!(
            w,
            "EDGE {kind} {} {} {} {} {}",
            e.from, e.to, m.x, m.y, m.theta
        )?;
        for v in upper(&e.information) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_graph(path: &Path) -> Result<PoseGraph> {
    let r = BufReader::new(File::open(path)?);
    let mut graph = PoseGraph::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let at = |msg: &str| Error::Parse(format!("{}:{}: {msg}", path.display(), no + 1));
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| at(&format!("bad number {s:?}")))
        };
        let idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| at(&format!("bad index {s:?}")))
        };
        match f.first().copied() {
            None => continue,
            Some(t) if t.starts_with('#') => continue,
            Some("NODE") if f.len() == 5 => {
                if idx(f[1])? != graph.nodes.len() {
                    return Err(at("node ids must be consecutive from 0"));
                }
                graph.add_node(Pose2::new(num(f[2])?, num(f[3])?, num(f[4])?));
            }
            Some("EDGE") if f.len() == 13 => {
                let kind = match f[1] {
                    "odometry" => EdgeKind::Odometry,
                    "matching" => EdgeKind::Matching,
                    other => return Err(at(&format!("unknown edge kind {other:?}"))),
                };
                let mut u = [0.0; 6];
                for (k, s) in f[7..].iter().enumerate() {
                    u[k] = num(s)?;
                }
                graph
                    .add_edge(GraphEdge {
                        from: idx(f[2])?,
                        to: idx(f[3])?,
                        measurement: Pose2::new(num(f[4])?, num(f[5])?, num(f[6])?),
                        information: full(u),
                        kind,
                    })
                    .map_err(|e| at(&e.to_string()))?;
            }
            Some(_) => return Err(at("expected a NODE or EDGE record")),
        }
    }
    Ok(graph)
}
