//! Occupancy grid substrate: per-frame projection, two-step ground
//! elimination, obstacle marking and multi-frame log-odds fusion into a
//! local grid map (LGM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3, Pose2};

/// Height band (relative to local ground) in which obstacles matter to the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpan {
    pub z_low: f64,
    pub z_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Cells along the vehicle x axis (forward).
    pub rows: usize,
    /// Cells along the vehicle y axis (right).
    pub cols: usize,
    /// Cell edge length (m).
    pub resolution: f64,
    /// Cell whose center coincides with the vehicle origin.
    pub anchor_row: usize,
    pub anchor_col: usize,
    /// Edge length, in cells, of the coarse blocks used for the ground statistic.
    pub upsample_factor: usize,
    /// Number of lowest returns averaged into a block's ground height.
    pub m_lowest: usize,
    /// Height above block ground beyond which a return is an obstacle (m).
    pub obstacle_height_delta: f64,
    pub vehicle_span: VehicleSpan,
    pub logodds_hit: f64,
    pub logodds_miss: f64,
    pub logodds_clamp: f64,
    pub occupancy_threshold: f64,
    /// Keep per-cell indices into the source frame.
    pub retain_point_refs: bool,
    /// Apply free-space updates along virtual-scan rays during fusion.
    pub miss_updates: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 401,
            cols: 151,
            resolution: 0.2,
            anchor_row: 200,
            anchor_col: 75,
            upsample_factor: 2,
            m_lowest: 5,
            obstacle_height_delta: 0.15,
            vehicle_span: VehicleSpan {
                z_low: 0.1,
                z_high: 2.0,
            },
            logodds_hit: 0.85,
            logodds_miss: -0.4,
            logodds_clamp: 10.0,
            occupancy_threshold: 0.65,
            retain_point_refs: true,
            miss_updates: true,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("grid: {m}")));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be positive");
        }
        if !(self.resolution > 0.0) {
            return bad("resolution must be positive");
        }
        if self.anchor_row >= self.rows || self.anchor_col >= self.cols {
            return bad("anchor cell outside the grid");
        }
        if self.upsample_factor == 0 || self.m_lowest == 0 {
            return bad("upsample_factor and m_lowest must be >= 1");
        }
        if !(self.occupancy_threshold > 0.0 && self.occupancy_threshold < 1.0) {
            return bad("occupancy_threshold must lie in (0, 1)");
        }
        if !(self.logodds_hit > 0.0 && self.logodds_miss < 0.0) {
            return bad("need logodds_hit > 0 > logodds_miss");
        }
        if !(self.logodds_clamp > 0.0) {
            return bad("logodds_clamp must be positive");
        }
        if self.vehicle_span.z_low > self.vehicle_span.z_high {
            return bad("vehicle_span z_low exceeds z_high");
        }
        Ok(())
    }

    /// Lower x bound of the grid in the vehicle frame.
    pub fn x_min(&self) -> f64 {
        -(self.anchor_row as f64 + 0.5) * self.resolution
    }

    /// Lower y bound of the grid in the vehicle frame.
    pub fn y_min(&self) -> f64 {
        -(self.anchor_col as f64 + 0.5) * self.resolution
    }

    pub fn x_max(&self) -> f64 {
        self.x_min() + self.rows as f64 * self.resolution
    }

    pub fn y_max(&self) -> f64 {
        self.y_min() + self.cols as f64 * self.resolution
    }

    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let u = ((p.x - self.x_min()) / self.resolution).floor();
        let v = ((p.y - self.y_min()) / self.resolution).floor();
        if u >= 0.0 && v >= 0.0 && u < self.rows as f64 && v < self.cols as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Point2 {
        Point2::new(
            self.x_min() + (r as f64 + 0.5) * self.resolution,
            self.y_min() + (c as f64 + 0.5) * self.resolution,
        )
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.cell_of(p).is_some()
    }

    fn block_dims(&self) -> (usize, usize) {
        let f = self.upsample_factor;
        (self.rows.div_ceil(f), self.cols.div_ceil(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub log_odds: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_delta: f64,
    /// Indices into the source frame's points.
    pub point_refs: Option<Vec<u32>>,
}

impl Default for GridCell {
    fn default() -> Self {
        Self {
            log_odds: 0.0,
            z_min: f64::INFINITY,
            z_max: f64::NEG_INFINITY,
            z_delta: 0.0,
            point_refs: None,
        }
    }
}

impl GridCell {
    pub fn is_populated(&self) -> bool {
        self.z_max >= self.z_min
    }

    pub fn probability(&self) -> f64 {
        logistic(self.log_odds)
    }
}

pub fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// One timestamped 3D point cloud expressed in the vehicle frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanFrame {
    pub timestamp: f64,
    pub points: Vec<Point3>,
}

/// Row-major boolean raster sized like the grid it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    pub rows: usize,
    pub cols: usize,
    bits: Vec<bool>,
}

impl CellMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i / self.cols, i % self.cols))
    }
}

/// Output of [`eliminate_ground`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundLabels {
    /// Per-point obstacle flag, indexed like the source frame.
    pub obstacle: Vec<bool>,
    /// Ground height of every coarse block (NaN where the block is empty).
    pub block_ground: Vec<f64>,
    block_cols: usize,
    factor: usize,
}

impl GroundLabels {
    pub fn obstacle_count(&self) -> usize {
        self.obstacle.iter().filter(|b| **b).count()
    }

    pub fn ground_of_cell(&self, r: usize, c: usize) -> f64 {
        self.block_ground[(r / self.factor) * self.block_cols + c / self.factor]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub config: GridConfig,
    cells: Vec<GridCell>,
    pub frame_count: u64,
    /// World pose of the grid's vehicle frame.
    pub anchor: Pose2,
}

impl OccupancyGrid {
    pub fn new(config: GridConfig, anchor: Pose2) -> Result<Self> {
        config.validate()?;
        let n = config.rows * config.cols;
        Ok(Self {
            config,
            cells: vec![GridCell::default(); n],
            frame_count: 0,
            anchor,
        })
    }

    pub(crate) fn from_parts(
        config: GridConfig,
        cells: Vec<GridCell>,
        frame_count: u64,
        anchor: Pose2,
    ) -> Result<Self> {
        config.validate()?;
        if cells.len() != config.rows * config.cols {
            return Err(Error::Parse(format!(
                "expected {} cells, found {}",
                config.rows * config.cols,
                cells.len()
            )));
        }
        Ok(Self {
            config,
            cells,
            frame_count,
            anchor,
        })
    }

    pub fn rows(&self) -> usize {
        self.config.rows
    }

    pub fn cols(&self) -> usize {
        self.config.cols
    }

    pub fn cell(&self, r: usize, c: usize) -> &GridCell {
        &self.cells[r * self.config.cols + c]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut GridCell {
        &mut self.cells[r * self.config.cols + c]
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    /// Adds `delta` to one cell's log-odds and clamps to `±logodds_clamp`.
    pub fn update_log_odds(&mut self, r: usize, c: usize, delta: f64) {
        let clamp = self.config.logodds_clamp;
        let cell = self.cell_mut(r, c);
        cell.log_odds = (cell.log_odds + delta).clamp(-clamp, clamp);
    }

    /// Visits the cells crossed by the ray `origin + t·dir`, `t ∈ [0, t_max]`,
    /// in traversal order. `visit(r, c, t_enter)` returns `true` to stop.
    /// Returns the parameter at which the walk stopped or left the grid.
    pub fn walk_ray(
        &self,
        origin: Point2,
        dir: Point2,
        t_max: f64,
        visit: impl FnMut(usize, usize, f64) -> bool,
    ) -> RayWalk {
        walk_ray(&self.config, origin, dir, t_max, visit)
    }
}

/// Outcome of [`OccupancyGrid::walk_ray`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayWalk {
    /// Visitor requested a stop upon entering a cell at parameter `t`.
    Stopped { t: f64 },
    /// Ray left the grid (or reached `t_max`) at parameter `t`.
    Exited { t: f64 },
    /// Ray never intersects the grid.
    Missed,
}

pub(crate) fn walk_ray(
    cfg: &GridConfig,
    origin: Point2,
    dir: Point2,
    t_max: f64,
    mut visit: impl FnMut(usize, usize, f64) -> bool,
) -> RayWalk {
    let res = cfg.resolution;
    let (x0, y0) = (cfg.x_min(), cfg.y_min());
    let (x1, y1) = (cfg.x_max(), cfg.y_max());

    // slab clip against the grid box
    let mut t0: f64 = 0.0;
    let mut t1 = t_max;
    for (o, d, lo, hi) in [(origin.x, dir.x, x0, x1), (origin.y, dir.y, y0, y1)] {
        if d.abs() < 1e-300 {
            if o < lo || o >= hi {
                return RayWalk::Missed;
            }
        } else {
            let (mut a, mut b) = ((lo - o) / d, (hi - o) / d);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
    }
    if t0 > t1 {
        return RayWalk::Missed;
    }

    let start = origin + dir * t0;
    let rows = cfg.rows as i64;
    let cols = cfg.cols as i64;
    let mut r = (((start.x - x0) / res).floor() as i64).clamp(0, rows - 1);
    let mut c = (((start.y - y0) / res).floor() as i64).clamp(0, cols - 1);

    let (step_r, delta_r, mut next_r) = axis_setup(dir.x, start.x, x0, r, res, t0);
    let (step_c, delta_c, mut next_c) = axis_setup(dir.y, start.y, y0, c, res, t0);

    let mut t_enter = t0;
    loop {
        if visit(r as usize, c as usize, t_enter) {
            return RayWalk::Stopped { t: t_enter };
        }
        if next_r < next_c {
            t_enter = next_r;
            r += step_r;
            next_r += delta_r;
        } else {
            t_enter = next_c;
            c += step_c;
            next_c += delta_c;
        }
        if t_enter > t1 || r < 0 || c < 0 || r >= rows || c >= cols {
            return RayWalk::Exited { t: t1 };
        }
    }
}

fn axis_setup(d: f64, p: f64, lo: f64, idx: i64, res: f64, t0: f64) -> (i64, f64, f64) {
    if d > 0.0 {
        let boundary = lo + (idx + 1) as f64 * res;
        (1, res / d, t0 + (boundary - p) / d)
    } else if d < 0.0 {
        let boundary = lo + idx as f64 * res;
        (-1, -res / d, t0 + (boundary - p) / d)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

/// Bins a frame into a fresh single-frame grid, tracking per-cell height
/// statistics. Points outside the grid extent are dropped.
pub fn project_scan(frame: &ScanFrame, config: &GridConfig) -> Result<OccupancyGrid> {
    if frame.points.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let mut grid = OccupancyGrid::new(config.clone(), Pose2::identity())?;
    for (i, p) in frame.points.iter().enumerate() {
        let Some((r, c)) = config.cell_of(p.xy()) else {
            continue;
        };
        let retain = config.retain_point_refs;
        let cell = grid.cell_mut(r, c);
        cell.z_min = cell.z_min.min(p.z);
        cell.z_max = cell.z_max.max(p.z);
        cell.z_delta = cell.z_max - cell.z_min;
        if retain {
            cell.point_refs.get_or_insert_with(Vec::new).push(i as u32);
        }
    }
    Ok(grid)
}

/// Labels every point of `frame` as obstacle or ground. Within each coarse
/// block of `upsample_factor²` cells the ground height is the mean of the
/// `m_lowest` smallest z values; points higher than that by more than
/// `obstacle_height_delta` are obstacles.
pub fn eliminate_ground(grid: &OccupancyGrid, frame: &ScanFrame) -> Result<GroundLabels> {
    let cfg = &grid.config;
    if !cfg.retain_point_refs {
        return Err(Error::InvalidParams(
            "ground elimination needs point references (retain_point_refs)".into(),
        ));
    }
    let f = cfg.upsample_factor;
    let (brows, bcols) = cfg.block_dims();
    let mut labels = GroundLabels {
        obstacle: vec![false; frame.points.len()],
        block_ground: vec![f64::NAN; brows * bcols],
        block_cols: bcols,
        factor: f,
    };
    let mut refs: Vec<u32> = Vec::new();
    let mut zs: Vec<f64> = Vec::new();
    for br in 0..brows {
        for bc in 0..bcols {
            refs.clear();
            for r in br * f..((br + 1) * f).min(cfg.rows) {
                for c in bc * f..((bc + 1) * f).min(cfg.cols) {
                    if let Some(pr) = &grid.cell(r, c).point_refs {
                        refs.extend_from_slice(pr);
                    }
                }
            }
            if refs.is_empty() {
                continue;
            }
            zs.clear();
            zs.extend(refs.iter().map(|&i| frame.points[i as usize].z));
            let m = cfg.m_lowest.min(zs.len());
            if m < zs.len() {
                zs.select_nth_unstable_by(m - 1, f64::total_cmp);
            }
            let ground = zs[..m].iter().sum::<f64>() / m as f64;
            labels.block_ground[br * bcols + bc] = ground;
            for &i in &refs {
                if frame.points[i as usize].z > ground + cfg.obstacle_height_delta {
                    labels.obstacle[i as usize] = true;
                }
            }
        }
    }
    Ok(labels)
}

/// Marks original-resolution cells containing at least one obstacle point
/// inside the vehicle's vertical span above the block ground.
pub fn mark_obstacles(grid: &OccupancyGrid, frame: &ScanFrame, labels: &GroundLabels) -> CellMask {
    let cfg = &grid.config;
    let mut mask = CellMask::new(cfg.rows, cfg.cols);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let Some(refs) = &grid.cell(r, c).point_refs else {
                continue;
            };
            let ground = labels.ground_of_cell(r, c);
            let lo = ground + cfg.vehicle_span.z_low;
            let hi = ground + cfg.vehicle_span.z_high;
            let hit = refs.iter().any(|&i| {
                let z = frame.points[i as usize].z;
                labels.obstacle[i as usize] && z >= lo && z <= hi
            });
            if hit {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Single-frame segmentation: projection, ground elimination, obstacle marking.
pub fn segment_frame(frame: &ScanFrame, config: &GridConfig) -> Result<CellMask> {
    let grid = project_scan(frame, config)?;
    let labels = eliminate_ground(&grid, frame)?;
    Ok(mark_obstacles(&grid, frame, &labels))
}

/// Per-frame evidence ready to be fused: obstacle cells and free-space rays,
/// both in the frame's own vehicle coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameEvidence {
    /// Sensor origin (normally the vehicle origin).
    pub origin: Point2,
    /// Centers of cells observed as obstacles.
    pub hits: Vec<Point2>,
    /// End points of free-space rays; cells from `origin` up to (excluding)
    /// the end cell are observed free.
    pub ray_ends: Vec<Point2>,
}

impl FrameEvidence {
    /// Every masked cell as a hit, no free-space rays.
    pub fn from_mask(mask: &CellMask, config: &GridConfig) -> Self {
        Self {
            origin: Point2::default(),
            hits: mask
                .iter_set()
                .map(|(r, c)| config.cell_center(r, c))
                .collect(),
            ray_ends: Vec::new(),
        }
    }
}

/// Fuses one frame into the LGM by additive log-odds updates. `pose` maps the
/// frame's vehicle coordinates into the LGM's. Each LGM cell receives at most
/// one update per frame; a hit overrides a miss.
pub fn fuse_frame(
    lgm: &mut OccupancyGrid,
    evidence: &FrameEvidence,
    frame_config: &GridConfig,
    pose: &Pose2,
) -> Result<()> {
    if !extents_overlap(frame_config, &lgm.config, pose) {
        return Err(Error::PoseOutOfBounds);
    }
    let cfg = lgm.config.clone();
    const NONE: u8 = 0;
    const MISS: u8 = 1;
    const HIT: u8 = 2;
    let mut stamp = vec![NONE; cfg.rows * cfg.cols];

    for h in &evidence.hits {
        if let Some((r, c)) = cfg.cell_of(pose.transform_point(*h)) {
            stamp[r * cfg.cols + c] = HIT;
        }
    }
    if cfg.miss_updates {
        let o = pose.transform_point(evidence.origin);
        for end in &evidence.ray_ends {
            let e = pose.transform_point(*end);
            let v = e - o;
            let len = v.norm();
            if len <= 0.0 {
                continue;
            }
            let dir = v * (1.0 / len);
            let end_cell = cfg.cell_of(e);
            walk_ray(&cfg, o, dir, len, |r, c, _| {
                if Some((r, c)) == end_cell {
                    return true;
                }
                let s = &mut stamp[r * cfg.cols + c];
                if *s == NONE {
                    *s = MISS;
                }
                false
            });
        }
    }
    for (i, s) in stamp.iter().enumerate() {
        let delta = match *s {
            HIT => cfg.logodds_hit,
            MISS => cfg.logodds_miss,
            _ => continue,
        };
        lgm.update_log_odds(i / cfg.cols, i % cfg.cols, delta);
    }
    lgm.frame_count += 1;
    Ok(())
}

/// Cells whose occupancy probability exceeds the configured threshold.
pub fn occupied_cells(lgm: &OccupancyGrid) -> CellMask {
    let cfg = &lgm.config;
    let mut mask = CellMask::new(cfg.rows, cfg.cols);
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            if lgm.cell(r, c).probability() > cfg.occupancy_threshold {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Separating-axis test between the frame grid (placed by `pose`) and the LGM.
fn extents_overlap(frame: &GridConfig, lgm: &GridConfig, pose: &Pose2) -> bool {
    let corners = |c: &GridConfig| {
        [
            Point2::new(c.x_min(), c.y_min()),
            Point2::new(c.x_max(), c.y_min()),
            Point2::new(c.x_max(), c.y_max()),
            Point2::new(c.x_min(), c.y_max()),
        ]
    };
    let a = corners(lgm);
    let b = corners(frame).map(|p| pose.transform_point(p));
    let axes = [
        Point2::new(1.0, 0.0),
        Point2::new(0.0, 1.0),
        pose.rotate(Point2::new(1.0, 0.0)),
        pose.rotate(Point2::new(0.0, 1.0)),
    ];
    axes.iter().all(|ax| {
        let (amin, amax) = project_range(&a, *ax);
        let (bmin, bmax) = project_range(&b, *ax);
        amin < bmax && bmin < amax
    })
}

fn project_range(pts: &[Point2; 4], ax: Point2) -> (f64, f64) {
    pts.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p.dot(ax);
            (lo.min(d), hi.max(d))
        })
}
