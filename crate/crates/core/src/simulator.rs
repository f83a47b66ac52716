//! Synthetic road scenes, multi-beam LiDAR scans and noisy drives with full
//! ground truth.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, BoundaryKind, Point2, Point3, Polyline, Pose2};
use crate::grid::ScanFrame;
use crate::odometry::MotionSample;
use crate::slam::ScanSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Straight,
    Corner,
    Loop,
    Clutter,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "straight" => Ok(Self::Straight),
            "corner" => Ok(Self::Corner),
            "loop" => Ok(Self::Loop),
            "clutter" => Ok(Self::Clutter),
            other => Err(Error::Parse(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    /// Curb-to-curb road width (m).
    pub width: f64,
    /// Road length for Straight and Clutter, leg length for Corner (m).
    pub length: f64,
    /// Loop footprint along x and y (m).
    pub loop_size: (f64, f64),
    /// Centerline corner radius of the loop (m).
    pub corner_radius: f64,
    pub curb_height: f64,
    /// Driveway openings per curb side; each adds short returns leading away
    /// from the road. Loop sides use `driveway_spacing` instead.
    pub driveways: usize,
    /// Mean spacing of driveway openings along loop curbs (m); 0 disables.
    pub driveway_spacing: f64,
    pub driveway_width: f64,
    pub driveway_depth: f64,
    pub parked_cars: usize,
    pub poles: usize,
    pub ground_z: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 8.0,
            length: 100.0,
            loop_size: (400.0, 300.0),
            corner_radius: 20.0,
            curb_height: 0.3,
            driveways: 0,
            driveway_spacing: 25.0,
            driveway_width: 5.0,
            driveway_depth: 4.0,
            parked_cars: 6,
            poles: 8,
            ground_z: 0.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self, kind: SceneKind) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if !(self.width > 0.0 && self.length > 0.0 && self.curb_height > 0.0) {
            return bad("width, length and curb_height must be positive");
        }
        if self.driveways > 0 && self.driveway_width * self.driveways as f64 >= self.length * 0.8 {
            return bad("driveways do not fit along the road");
        }
        if kind == SceneKind::Loop {
            let (a, b) = self.loop_size;
            if !(self.corner_radius > self.width && 2.0 * self.corner_radius < a.min(b)) {
                return bad("loop corner radius must exceed the width and fit the footprint");
            }
        }
        Ok(())
    }
}

/// Axis-aligned (in its own frame) box obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleBox {
    pub center: Point2,
    pub half_length: f64,
    pub half_width: f64,
    pub heading: f64,
    pub height: f64,
}

impl ObstacleBox {
    pub fn corners(&self) -> [Point2; 4] {
        let p = Pose2::new(self.center.x, self.center.y, self.heading);
        let (l, w) = (self.half_length, self.half_width);
        [(l, w), (-l, w), (-l, -w), (l, -w)].map(|(x, y)| p.transform_point(Point2::new(x, y)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub curbs: Vec<Polyline>,
    pub curb_height: f64,
    pub obstacles: Vec<ObstacleBox>,
    pub ground_z: f64,
    /// Lower-left and upper-right corners of the scene.
    pub extent: (Point2, Point2),
    /// Drive centerline; closed routes end on their first node.
    pub route: Polyline,
    pub seed: u64,
}

impl SceneSpec {
    pub fn contains(&self, p: Point2) -> bool {
        let (lo, hi) = self.extent;
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y
    }

    pub fn route_is_closed(&self) -> bool {
        let n = self.route.nodes();
        n[0].distance(n[n.len() - 1]) < 1e-9
    }
}

fn line(pts: Vec<Point2>) -> Polyline {
    Polyline::from_points_dedup(pts, BoundaryKind::RoadBoundary)
        .expect("scene polylines have distinct nodes")
}

/// Splits the straight curb `y = side·w/2` over `x ∈ [x0, x1]` at the given
/// opening starts, adding returns of `depth` leading away from the road.
fn straight_curb(x0: f64, x1: f64, y: f64, openings: &[f64], p: &SceneParams) -> Vec<Polyline> {
    let out_y = y + y.signum() * p.driveway_depth;
    let mut pieces = Vec::new();
    let mut start = vec![Point2::new(x0, y)];
    for &g in openings {
        let mut piece = std::mem::take(&mut start);
        piece.push(Point2::new(g, y));
        piece.push(Point2::new(g, out_y));
        pieces.push(line(piece));
        let e = g + p.driveway_width;
        start = vec![Point2::new(e, out_y), Point2::new(e, y)];
    }
    start.push(Point2::new(x1, y));
    pieces.push(line(start));
    pieces
}

fn jittered(n: usize, lo: f64, hi: f64, margin: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let span = (hi - lo) / n as f64;
    (0..n)
        .map(|k| {
            let slack = (span - margin).max(0.0);
            lo + k as f64 * span + rng.gen_range(0.0..=slack)
        })
        .collect()
}

fn extent_of(
    curbs: &[Polyline],
    obstacles: &[ObstacleBox],
    route: &Polyline,
    margin: f64,
) -> (Point2, Point2) {
    let pts = curbs
        .iter()
        .flat_map(|c| c.nodes().iter().copied())
        .chain(obstacles.iter().flat_map(|o| o.corners()))
        .chain(route.nodes().iter().copied());
    let (mut lo, mut hi) = (
        Point2::new(f64::MAX, f64::MAX),
        Point2::new(f64::MIN, f64::MIN),
    );
    for p in pts {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (
        lo - Point2::new(margin, margin),
        hi + Point2::new(margin, margin),
    )
}

/// Rounded-rectangle loop sampled every ~1 m, starting on the first long side
/// heading +x. `offset` shifts it outward (positive) or inward.
fn rounded_rect(a: f64, b: f64, r: f64, offset: f64, start_x: f64) -> Vec<Point2> {
    let rr = r + offset;
    let corners = [
        (Point2::new(a - r, r), -FRAC_PI_2),
        (Point2::new(a - r, b - r), 0.0),
        (Point2::new(r, b - r), FRAC_PI_2),
        (Point2::new(r, r), PI),
    ];
    let mut pts = vec![Point2::new(start_x, -offset)];
    let straight = |from: Point2, to: Point2, pts: &mut Vec<Point2>| {
        let n = (from.distance(to)).ceil().max(1.0) as usize;
        pts.extend((1..=n).map(|k| from.lerp(to, k as f64 / n as f64)));
    };
    for (c, a0) in corners {
        let entry = c + Point2::new(a0.cos(), a0.sin()) * rr;
        let from = *pts.last().unwrap();
        straight(from, entry, &mut pts);
        let steps = ((FRAC_PI_2 * rr).ceil() as usize).max(4);
        pts.extend((1..=steps).map(|k| {
            let ang = a0 + FRAC_PI_2 * k as f64 / steps as f64;
            c + Point2::new(ang.cos(), ang.sin()) * rr
        }));
    }
    let from = *pts.last().unwrap();
    straight(from, Point2::new(start_x, -offset), &mut pts);
    pts
}

/// Cuts driveway openings into a closed outer or inner loop curb. `outward`
/// is the sign that moves away from the road (+1 outer, -1 inner).
fn loop_curb(
    ring: Vec<Point2>,
    spacing: f64,
    p: &SceneParams,
    outward: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Polyline> {
    let ring_line = line(ring);
    if spacing <= 0.0 {
        return vec![ring_line];
    }
    let arcs = ring_line.arc_lengths();
    let total = arcs[arcs.len() - 1];
    let n = (total / spacing).floor().max(1.0) as usize;
    let nodes = ring_line.nodes();
    // keep openings on straight stretches: both ends and the middle must
    // share a direction with their neighbours
    let direction = |s: f64| {
        let i = arcs.partition_point(|a| *a <= s).clamp(1, nodes.len() - 1);
        let d = nodes[i] - nodes[i - 1];
        d * (1.0 / d.norm())
    };
    let at = |s: f64| {
        let i = arcs.partition_point(|a| *a <= s).clamp(1, nodes.len() - 1);
        let t = (s - arcs[i - 1]) / (arcs[i] - arcs[i - 1]);
        nodes[i - 1].lerp(nodes[i], t)
    };
    let mut cuts: Vec<f64> = jittered(n, 0.0, total, p.driveway_width + 10.0, rng)
        .into_iter()
        .filter(|&s| {
            let d0 = direction(s - 5.0);
            let d1 = direction(s + p.driveway_width + 5.0);
            s > 5.0 && s + p.driveway_width + 5.0 < total && d0.dot(d1) > 0.9999
        })
        .collect();
    cuts.sort_by(f64::total_cmp);
    let mut pieces = Vec::new();
    let mut current: Vec<Point2> = vec![nodes[0]];
    let mut next_node = 1;
    for s in cuts {
        let e = s + p.driveway_width;
        while next_node < nodes.len() && arcs[next_node] < s {
            current.push(nodes[next_node]);
            next_node += 1;
        }
        let ds = direction(s);
        // left normal points outward for a counter-clockwise outer ring
        let out = ds.perp() * (-outward);
        let gs = at(s);
        current.push(gs);
        current.push(gs + out * p.driveway_depth);
        pieces.push(line(std::mem::take(&mut current)));
        let ge = at(e);
        current = vec![ge + out * p.driveway_depth, ge];
        while next_node < nodes.len() && arcs[next_node] <= e {
            next_node += 1;
        }
    }
    current.extend(nodes[next_node..].iter().copied());
    pieces.push(line(current));
    pieces
}

/// Deterministic scene for `kind`.
pub fn generate_scene(kind: SceneKind, params: &SceneParams, seed: u64) -> Result<SceneSpec> {
    params.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = params.width / 2.0;
    let (curbs, obstacles, route) = match kind {
        SceneKind::Straight | SceneKind::Clutter => {
            let l = params.length;
            let mut curbs = Vec::new();
            for side in [-1.0, 1.0] {
                let openings = if params.driveways > 0 {
                    jittered(
                        params.driveways,
                        5.0,
                        l - 5.0,
                        params.driveway_width + 5.0,
                        &mut rng,
                    )
                } else {
                    Vec::new()
                };
                curbs.extend(straight_curb(0.0, l, side * h, &openings, params));
            }
            let mut obstacles = Vec::new();
            if kind == SceneKind::Clutter {
                for x in jittered(params.parked_cars, 5.0, l - 5.0, 6.0, &mut rng) {
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    obstacles.push(ObstacleBox {
                        center: Point2::new(x + 2.25, side * (h - 1.1)),
                        half_length: 2.25,
                        half_width: 0.9,
                        heading: 0.0,
                        height: 1.5,
                    });
                }
                for x in jittered(params.poles, 2.0, l - 2.0, 1.0, &mut rng) {
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    obstacles.push(ObstacleBox {
                        center: Point2::new(x, side * (h + 1.0)),
                        half_length: 0.15,
                        half_width: 0.15,
                        heading: 0.0,
                        height: 3.0,
                    });
                }
            }
            let route = line(vec![Point2::new(0.0, 0.0), Point2::new(l, 0.0)]);
            (curbs, obstacles, route)
        }
        SceneKind::Corner => {
            let l = params.length;
            let outer = line(vec![
                Point2::new(-l, -h),
                Point2::new(h, -h),
                Point2::new(h, l),
            ]);
            let inner = line(vec![
                Point2::new(-l, h),
                Point2::new(-h, h),
                Point2::new(-h, l),
            ]);
            let r = h;
            let mut route = vec![Point2::new(-l, 0.0), Point2::new(-r, 0.0)];
            let c = Point2::new(-r, r);
            route.extend((1..=16).map(|k| {
                let a = -FRAC_PI_2 + FRAC_PI_2 * k as f64 / 16.0;
                c + Point2::new(a.cos(), a.sin()) * r
            }));
            route.push(Point2::new(0.0, l));
            (vec![outer, inner], Vec::new(), line(route))
        }
        SceneKind::Loop => {
            let (a, b) = params.loop_size;
            let r = params.corner_radius;
            let start = r + 30.0;
            let route = line(rounded_rect(a, b, r, 0.0, start));
            // a negative offset shrinks the ring: that is the inner curb
            let mut curbs = loop_curb(
                rounded_rect(a, b, r, h, start),
                params.driveway_spacing,
                params,
                1.0,
                &mut rng,
            );
            curbs.extend(loop_curb(
                rounded_rect(a, b, r, -h, start),
                params.driveway_spacing,
                params,
                -1.0,
                &mut rng,
            ));
            (curbs, Vec::new(), route)
        }
    };
    let extent = extent_of(&curbs, &obstacles, &route, 20.0);
    Ok(SceneSpec {
        kind,
        curbs,
        curb_height: params.curb_height,
        obstacles,
        ground_z: params.ground_z,
        extent,
        route,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarParams {
    pub rings: usize,
    /// Lowest and highest beam elevation (deg).
    pub elevation_range: (f64, f64),
    /// Horizontal step between firings (deg).
    pub azimuth_step: f64,
    /// Sensor height above the ground (m).
    pub mount_height: f64,
    pub max_range: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            rings: 32,
            elevation_range: (-24.8, 2.0),
            azimuth_step: 0.4,
            mount_height: 1.8,
            max_range: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Ground,
    Curb,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScan {
    /// Vehicle-frame points; z is height above the scene's ground plane.
    pub points: Vec<Point3>,
    pub sources: Vec<PointSource>,
    pub true_pose: Pose2,
    pub timestamp: f64,
}

impl SimScan {
    pub fn frame(&self) -> ScanFrame {
        ScanFrame {
            timestamp: self.timestamp,
            points: self.points.clone(),
        }
    }
}

/// Vertical ribbon spanning `[z0, z1]` above ground over segment `a..b`.
#[derive(Debug, Clone, Copy)]
struct Ribbon {
    a: Point2,
    b: Point2,
    z1: f64,
    source: PointSource,
}

fn ribbons(scene: &SceneSpec) -> impl Iterator<Item = Ribbon> + '_ {
    let curbs = scene.curbs.iter().flat_map(move |c| {
        c.segments().map(move |(a, b)| Ribbon {
            a,
            b,
            z1: scene.curb_height,
            source: PointSource::Curb,
        })
    });
    let boxes = scene.obstacles.iter().flat_map(|o| {
        let c = o.corners();
        (0..4).map(move |i| Ribbon {
            a: c[i],
            b: c[(i + 1) % 4],
            z1: o.height,
            source: PointSource::Obstacle,
        })
    });
    curbs.chain(boxes)
}

/// Horizontal distance along unit `dir` from `o` to segment `a..b`.
fn ray_segment(o: Point2, dir: Point2, a: Point2, b: Point2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-15 {
        return None;
    }
    let w = a - o;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    (t > 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step keeps per-stream seeds decorrelated
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One full revolution from `pose`. Points carry isotropic Gaussian noise of
/// `noise_sigma` per axis.
pub fn simulate_scan(
    scene: &SceneSpec,
    pose: Pose2,
    noise_sigma: f64,
    seed: u64,
    lidar: &LidarParams,
) -> Result<SimScan> {
    if !scene.contains(pose.translation()) {
        return Err(Error::PoseOutsideScene);
    }
    if !(noise_sigma >= 0.0) || lidar.rings == 0 || !(lidar.azimuth_step > 0.0) {
        return Err(Error::InvalidParams("bad lidar or noise parameters".into()));
    }
    let origin = pose.translation();
    let reach = lidar.max_range;
    let near: Vec<Ribbon> = ribbons(scene)
        .filter(|r| crate::geometry::clamp_to_segment(origin, r.a, r.b).0 <= reach)
        .collect();
    let (e_lo, e_hi) = lidar.elevation_range;
    let elevations: Vec<f64> = (0..lidar.rings)
        .map(|k| {
            let f = if lidar.rings == 1 {
                0.0
            } else {
                k as f64 / (lidar.rings - 1) as f64
            };
            (e_lo + f * (e_hi - e_lo)).to_radians()
        })
        .collect();
    let n_az = (360.0 / lidar.azimuth_step).round() as usize;
    let h = lidar.mount_height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut points = Vec::new();
    let mut sources = Vec::new();
    let mut crossings: Vec<(f64, &Ribbon)> = Vec::new();
    for ia in 0..n_az {
        let az = ia as f64 * TAU / n_az as f64;
        let local_dir = Point2::new(az.cos(), az.sin());
        let dir = pose.rotate(local_dir);
        crossings.clear();
        crossings.extend(
            near.iter()
                .filter_map(|r| ray_segment(origin, dir, r.a, r.b).map(|t| (t, r))),
        );
        crossings.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &e in &elevations {
            let slope = e.tan();
            let ground = (slope < 0.0).then(|| h / -slope);
            let wall = crossings.iter().find(|(t, r)| {
                let z = h + t * slope;
                (0.0..=r.z1).contains(&z) && ground.is_none_or(|g| *t <= g)
            });
            let (range, z, src) = match (wall, ground) {
                (Some((t, r)), _) => (*t, h + t * slope, r.source),
                (None, Some(g)) => (g, 0.0, PointSource::Ground),
                (None, None) => continue,
            };
            if range / e.cos() > reach {
                continue;
            }
            let p = local_dir * range;
            let mut q = Point3::new(p.x, p.y, z + scene.ground_z);
            if noise_sigma > 0.0 {
                q.x += normal.sample(&mut rng);
                q.y += normal.sample(&mut rng);
                q.z += normal.sample(&mut rng);
            }
            points.push(q);
            sources.push(src);
        }
    }
    Ok(SimScan {
        points,
        sources,
        true_pose: pose,
        timestamp: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveParams {
    pub speed: f64,
    /// Motion samples per second.
    pub motion_rate: f64,
    /// One scan every this many motion samples.
    pub scan_every: usize,
    /// Distance to drive (m); `None` drives the whole route (plus `revisit`
    /// on closed routes). Closed routes wrap around past their end.
    pub distance: Option<f64>,
    /// Arc length along the route where the drive starts (m).
    pub start: f64,
    pub wheelbase: f64,
    /// Extra distance driven past the end of a closed route when `distance`
    /// is `None`, so the start is revisited (m).
    pub revisit: f64,
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            speed: 10.0,
            motion_rate: 50.0,
            scan_every: 5,
            distance: None,
            start: 0.0,
            wheelbase: 2.7,
            revisit: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// White noise on each point coordinate (m).
    pub scan_sigma: f64,
    pub velocity_sigma: f64,
    /// Velocity readings are rounded to multiples of this (m/s); 0 disables.
    pub velocity_quantum: f64,
    pub steering_sigma: f64,
    pub compass_sigma: f64,
    /// Slowly varying compass disturbance: stationary sigma (rad) and
    /// correlation time (s).
    pub compass_drift_sigma: f64,
    pub compass_drift_tau: f64,
    pub gyro_bias: f64,
    pub gyro_sigma: f64,
}

impl NoiseParams {
    pub fn none() -> Self {
        Self {
            scan_sigma: 0.0,
            velocity_sigma: 0.0,
            velocity_quantum: 0.0,
            steering_sigma: 0.0,
            compass_sigma: 0.0,
            compass_drift_sigma: 0.0,
            compass_drift_tau: 1.0,
            gyro_bias: 0.0,
            gyro_sigma: 0.0,
        }
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            scan_sigma: 0.02,
            velocity_sigma: 0.02,
            velocity_quantum: 0.01,
            steering_sigma: 0.05f64.to_radians(),
            compass_sigma: 0.5f64.to_radians(),
            compass_drift_sigma: 0.3f64.to_radians(),
            compass_drift_tau: 300.0,
            gyro_bias: 0.02f64.to_radians(),
            gyro_sigma: 0.05f64.to_radians(),
        }
    }
}

/// A simulated drive: motion stream, ground truth and scan schedule. Scans
/// are generated on demand by [`DriveLog::scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveLog {
    /// Truth at every motion instant; `truth[0]` is the start, `motion[k]`
    /// moves `truth[k]` to `truth[k + 1]`.
    pub truth: Vec<Pose2>,
    pub times: Vec<f64>,
    pub motion: Vec<MotionSample>,
    /// Indices into `truth` at which scans are taken.
    pub scan_indices: Vec<usize>,
    pub scan_sigma: f64,
    pub seed: u64,
}

impl DriveLog {
    pub fn scan_count(&self) -> usize {
        self.scan_indices.len()
    }

    pub fn scan(&self, scene: &SceneSpec, i: usize, lidar: &LidarParams) -> Result<SimScan> {
        let k = self.scan_indices[i];
        let mut s = simulate_scan(
            scene,
            self.truth[k],
            self.scan_sigma,
            sub_seed(self.seed, 1000 + i as u64),
            lidar,
        )?;
        s.timestamp = self.times[k];
        Ok(s)
    }
}

/// Scans of a drive generated lazily, for feeding the mapping pipeline.
pub struct SimScans<'a> {
    pub scene: &'a SceneSpec,
    pub log: &'a DriveLog,
    pub lidar: LidarParams,
}

impl SimScans<'_> {
    pub fn times(&self) -> Vec<f64> {
        self.log
            .scan_indices
            .iter()
            .map(|k| self.log.times[*k])
            .collect()
    }
}

impl ScanSource for SimScans<'_> {
    fn len(&self) -> usize {
        self.log.scan_count()
    }

    fn frame(&self, i: usize) -> Result<ScanFrame> {
        Ok(self.log.scan(self.scene, i, &self.lidar)?.frame())
    }
}

fn route_point(route: &Polyline, arcs: &[f64], s: f64) -> Point2 {
    let nodes = route.nodes();
    let total = arcs[arcs.len() - 1];
    let s = s.clamp(0.0, total);
    let i = arcs.partition_point(|a| *a < s).clamp(1, nodes.len() - 1);
    let t = (s - arcs[i - 1]) / (arcs[i] - arcs[i - 1]);
    nodes[i - 1].lerp(nodes[i], t)
}

/// Pose on the route at arc length `s` (clamped), heading along the local
/// tangent.
pub fn route_pose(scene: &SceneSpec, s: f64) -> Pose2 {
    let arcs = scene.route.arc_lengths();
    let total = arcs[arcs.len() - 1];
    let eps = 0.05;
    let s = s.clamp(0.0, total);
    let (a, b) = ((s - eps).max(0.0), (s + eps).min(total));
    let (pa, pb) = (
        route_point(&scene.route, &arcs, a),
        route_point(&scene.route, &arcs, b),
    );
    let p = route_point(&scene.route, &arcs, s);
    let d = pb - pa;
    Pose2::new(p.x, p.y, d.y.atan2(d.x))
}

/// Total route length (m).
pub fn route_length(scene: &SceneSpec) -> f64 {
    scene.route.length()
}

/// Drives the scene's route at constant speed. Truth headings are chord
/// headings between consecutive motion instants, so noise-free samples
/// integrate back to the truth exactly.
pub fn drive(
    scene: &SceneSpec,
    params: &DriveParams,
    noise: &NoiseParams,
    seed: u64,
) -> Result<DriveLog> {
    if !(params.speed > 0.0 && params.motion_rate > 0.0 && params.scan_every > 0) {
        return Err(Error::InvalidParams(
            "speed, motion_rate and scan_every must be positive".into(),
        ));
    }
    let arcs = scene.route.arc_lengths();
    let total = arcs[arcs.len() - 1];
    // closed routes may be driven past their end, wrapping onto the start
    let closed = scene.route_is_closed();
    let remaining = total - params.start;
    let distance = match params.distance {
        Some(d) if closed => d,
        Some(d) => d.min(remaining),
        None if closed => remaining + params.revisit,
        None => remaining,
    };
    if !(distance > 0.0 && params.start >= 0.0) {
        return Err(Error::InvalidParams(
            "drive start lies beyond the route end".into(),
        ));
    }
    let dt = 1.0 / params.motion_rate;
    let step = params.speed * dt;
    let n = (distance / step).round().max(1.0) as usize;
    let positions: Vec<Point2> = (0..=n)
        .map(|k| {
            let s = params.start + distance * k as f64 / n as f64;
            let s = if closed && s > total {
                s.rem_euclid(total)
            } else {
                s
            };
            route_point(&scene.route, &arcs, s)
        })
        .collect();
    if positions.iter().any(|p| !scene.contains(*p)) {
        return Err(Error::PoseOutsideScene);
    }
    let chord = |k: usize| {
        let d = positions[k + 1] - positions[k];
        d.y.atan2(d.x)
    };
    let mut headings = vec![chord(0)];
    for k in 0..n {
        let h = headings[k] + wrap_angle(chord(k) - headings[k]);
        headings.push(h);
    }
    let truth: Vec<Pose2> = positions
        .iter()
        .zip(&headings)
        .map(|(p, h)| Pose2::new(p.x, p.y, *h))
        .collect();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut g = || std.sample(&mut rng);
    let phi = (-dt / noise.compass_drift_tau.max(1e-9)).exp();
    let drive_sigma = noise.compass_drift_sigma * (1.0 - phi * phi).sqrt();
    // the compass is aligned with the initial fix, so its drift starts at zero
    let mut drift = 0.0;
    let motion = (0..n)
        .map(|k| {
            let chord_len = positions[k].distance(positions[k + 1]);
            let v_true = chord_len / dt;
            let yaw_rate = (headings[k + 1] - headings[k]) / dt;
            let steer_true = (yaw_rate * params.wheelbase / v_true).atan();
            drift = phi * drift + drive_sigma * g();
            let mut v = v_true + noise.velocity_sigma * g();
            if noise.velocity_quantum > 0.0 {
                v = (v / noise.velocity_quantum).round() * noise.velocity_quantum;
            }
            MotionSample {
                timestamp: times[k + 1],
                velocity: v,
                steering_angle: steer_true + noise.steering_sigma * g(),
                compass_heading: wrap_angle(headings[k + 1] + drift + noise.compass_sigma * g()),
                gyro_rate: yaw_rate + noise.gyro_bias + noise.gyro_sigma * g(),
            }
        })
        .collect();
    let scan_indices = (0..=n).step_by(params.scan_every).collect();
    Ok(DriveLog {
        truth,
        times,
        motion,
        scan_indices,
        scan_sigma: noise.scan_sigma,
        seed,
    })
}
