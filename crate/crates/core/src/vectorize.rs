//! Local grid map to local vectorization map (LVM): a 360° virtual scan is
//! cast through the occupancy mask, hits and border misses are clustered by
//! ray order, clusters become polylines, and polylines are simplified with
//! Ramer-Douglas-Peucker.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clamp_to_segment, BoundaryKind, Point2, Polyline, Pose2};
use crate::grid::{walk_ray, CellMask, FrameEvidence, GridConfig, RayWalk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorizeParams {
    /// Angular step between virtual-scan rays (rad).
    pub angular_resolution: f64,
    /// Largest gap between consecutive candidates of one cluster (m).
    pub gap_threshold: f64,
    /// RDP tolerance (m).
    pub epsilon: f64,
    /// Rays stop here when nothing was hit (m).
    pub max_range: f64,
}

impl Default for VectorizeParams {
    fn default() -> Self {
        Self {
            angular_resolution: 0.5f64.to_radians(),
            gap_threshold: 1.0,
            epsilon: 0.15,
            max_range: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HitKind {
    /// Ray stopped at an occupied cell.
    Hit,
    /// Ray left the grid (or ran out of range).
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayIntersection {
    pub ray_id: usize,
    pub point: Point2,
    pub range: f64,
    pub kind: HitKind,
}

/// Ray fan whose ids increase clockwise (NED heading order).
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualScan {
    pub origin: Point2,
    pub angular_resolution: f64,
    pub max_range: f64,
    /// `(id, direction)` pairs; direction measured like a heading.
    pub rays: Vec<(usize, f64)>,
}

impl VirtualScan {
    pub fn new(origin: Point2, angular_resolution: f64, max_range: f64) -> Result<Self> {
        if !(angular_resolution > 0.0) {
            return Err(Error::InvalidParams(
                "angular_resolution must be positive".into(),
            ));
        }
        let n = (TAU / angular_resolution).round();
        if n < 3.0 || (n * angular_resolution - TAU).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "angular_resolution {angular_resolution} does not divide 2π"
            )));
        }
        let n = n as usize;
        let rays = (0..n).map(|i| (i, i as f64 * TAU / n as f64)).collect();
        Ok(Self {
            origin,
            angular_resolution,
            max_range,
            rays,
        })
    }

    /// One intersection per ray: the entry point of the first occupied cell,
    /// or the point where the ray leaves the grid.
    pub fn cast(&self, mask: &CellMask, config: &GridConfig) -> Result<Vec<RayIntersection>> {
        if !config.contains(self.origin) {
            return Err(Error::OriginOutsideGrid);
        }
        Ok(self
            .rays
            .iter()
            .map(|&(id, angle)| {
                let dir = Point2::new(angle.cos(), angle.sin());
                let walk = walk_ray(config, self.origin, dir, self.max_range, |r, c, _| {
                    mask.get(r, c)
                });
                let (t, kind) = match walk {
                    RayWalk::Stopped { t } => (t, HitKind::Hit),
                    RayWalk::Exited { t } => (t, HitKind::Miss),
                    RayWalk::Missed => (0.0, HitKind::Miss),
                };
                RayIntersection {
                    ray_id: id,
                    point: self.origin + dir * t,
                    range: t,
                    kind,
                }
            })
            .collect())
    }
}

pub fn cast_virtual_scan(
    mask: &CellMask,
    config: &GridConfig,
    origin: Point2,
    angular_resolution: f64,
) -> Result<Vec<RayIntersection>> {
    VirtualScan::new(origin, angular_resolution, f64::INFINITY)?.cast(mask, config)
}

/// Candidates grouped by ray order and kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub kind: BoundaryKind,
    pub members: Vec<RayIntersection>,
}

fn boundary_kind(k: HitKind) -> BoundaryKind {
    match k {
        HitKind::Hit => BoundaryKind::RoadBoundary,
        HitKind::Miss => BoundaryKind::InfiniteBoundary,
    }
}

/// Splits the ray-ordered candidates wherever the kind changes or, between
/// two hits, the gap exceeds `gap_threshold`. Consecutive misses always join
/// since they trace the continuous grid border. The seam between the last
/// and first ray is joined when the same rule allows it.
pub fn cluster_candidates(intersections: &[RayIntersection], gap_threshold: f64) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for it in intersections {
        let joins = clusters.last().is_some_and(|c| {
            let prev = c.members.last().expect("clusters are never empty");
            joinable(prev, it, gap_threshold)
        });
        if joins {
            clusters.last_mut().unwrap().members.push(*it);
        } else {
            clusters.push(Cluster {
                kind: boundary_kind(it.kind),
                members: vec![*it],
            });
        }
    }
    if clusters.len() >= 2 {
        let first = &clusters[0].members[0];
        let last_cluster = clusters.last().unwrap();
        let last = last_cluster.members.last().unwrap();
        if joinable(last, first, gap_threshold) {
            let tail = clusters.pop().unwrap();
            let mut members = tail.members;
            members.extend_from_slice(&clusters[0].members);
            clusters[0].members = members;
        }
    }
    clusters
}

fn joinable(a: &RayIntersection, b: &RayIntersection, gap_threshold: f64) -> bool {
    a.kind == b.kind && (a.kind == HitKind::Miss || a.point.distance(b.point) <= gap_threshold)
}

/// Local vectorization map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lvm {
    pub polylines: Vec<Polyline>,
    /// World pose of the frame the polylines are expressed in.
    pub source_pose: Pose2,
    pub simplified: bool,
}

impl Lvm {
    pub fn road_boundaries(&self) -> impl Iterator<Item = &Polyline> {
        self.polylines
            .iter()
            .filter(|p| p.kind() == BoundaryKind::RoadBoundary)
    }

    pub fn node_count(&self) -> usize {
        self.polylines.iter().map(Polyline::len).sum()
    }

    pub fn road_node_count(&self) -> usize {
        self.road_boundaries().map(Polyline::len).sum()
    }

    /// Rounds every coordinate to 1e-6 m, the persisted precision.
    pub fn quantized(&self) -> Lvm {
        let q = |v: f64| (v * 1e6).round() / 1e6;
        Lvm {
            polylines: self
                .polylines
                .iter()
                .filter_map(|p| {
                    Polyline::from_points_dedup(
                        p.nodes().iter().map(|n| Point2::new(q(n.x), q(n.y))),
                        p.kind(),
                    )
                })
                .collect(),
            source_pose: self.source_pose,
            simplified: self.simplified,
        }
    }
}

/// Clusters with at least two distinct points become polylines, nodes in
/// ray order. Single-point clusters are dropped.
pub fn build_polylines(clusters: &[Cluster], source_pose: Pose2) -> Lvm {
    let polylines = clusters
        .iter()
        .filter_map(|c| Polyline::from_points_dedup(c.members.iter().map(|m| m.point), c.kind))
        .collect();
    Lvm {
        polylines,
        source_pose,
        simplified: false,
    }
}

/// Indices of the nodes kept by Ramer-Douglas-Peucker with tolerance `epsilon`.
pub fn rdp_keep(points: &[Point2], epsilon: f64) -> Vec<usize> {
    let n = points.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (a, b) = (points[lo], points[hi]);
        let mut worst = (0usize, -1.0f64);
        for (i, p) in points.iter().enumerate().take(hi).skip(lo + 1) {
            let d = clamp_to_segment(*p, a, b).0;
            if d > worst.1 {
                worst = (i, d);
            }
        }
        if worst.1 > epsilon {
            keep[worst.0] = true;
            stack.push((lo, worst.0));
            stack.push((worst.0, hi));
        }
    }
    keep.iter()
        .enumerate()
        .filter(|(_, k)| **k)
        .map(|(i, _)| i)
        .collect()
}

pub fn simplify_polyline(line: &Polyline, epsilon: f64) -> Polyline {
    let keep = rdp_keep(line.nodes(), epsilon);
    let nodes: Vec<Point2> = keep.iter().map(|&i| line.nodes()[i]).collect();
    Polyline::new(nodes, line.kind()).expect("subset of a valid polyline keeping both endpoints")
}

/// Replaces every polyline by its RDP simplification.
pub fn simplify_rdp(lvm: &Lvm, epsilon: f64) -> Lvm {
    Lvm {
        polylines: lvm
            .polylines
            .iter()
            .map(|p| simplify_polyline(p, epsilon))
            .collect(),
        source_pose: lvm.source_pose,
        simplified: true,
    }
}

/// Mask to raw and simplified LVMs, scanning from the grid's anchor cell.
pub fn vectorize(
    mask: &CellMask,
    config: &GridConfig,
    source_pose: Pose2,
    params: &VectorizeParams,
) -> Result<(Lvm, Lvm)> {
    let origin = config.cell_center(config.anchor_row, config.anchor_col);
    let scan = VirtualScan::new(origin, params.angular_resolution, params.max_range)?;
    let hits = scan.cast(mask, config)?;
    let clusters = cluster_candidates(&hits, params.gap_threshold);
    let raw = build_polylines(&clusters, source_pose);
    let simplified = simplify_rdp(&raw, params.epsilon);
    Ok((raw, simplified))
}

/// Virtual-scan preprocessing of a single-frame mask: only the first occupied
/// cell along each ray is kept as an obstacle, and each hitting ray yields a
/// free-space segment from the sensor to that cell.
pub fn virtual_scan_evidence(
    mask: &CellMask,
    config: &GridConfig,
    angular_resolution: f64,
) -> Result<FrameEvidence> {
    let origin = config.cell_center(config.anchor_row, config.anchor_col);
    let scan = VirtualScan::new(origin, angular_resolution, f64::INFINITY)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut hits = Vec::new();
    let mut ray_ends = Vec::new();
    for ri in scan.cast(mask, config)? {
        if ri.kind != HitKind::Hit {
            continue;
        }
        let dir = (ri.point - origin) * (1.0 / ri.range.max(1e-12));
        let inside = origin + dir * (ri.range + 1e-6);
        if let Some(cell) = config.cell_of(inside) {
            if seen.insert(cell) {
                hits.push(config.cell_center(cell.0, cell.1));
            }
        }
        ray_ends.push(inside);
    }
    Ok(FrameEvidence {
        origin,
        hits,
        ray_ends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config() -> GridConfig {
        GridConfig {
            rows: 101,
            cols: 101,
            anchor_row: 50,
            anchor_col: 50,
            ..GridConfig::default()
        }
    }

    fn mask_with(cfg: &GridConfig, pts: impl IntoIterator<Item = Point2>) -> CellMask {
        let mut m = CellMask::new(cfg.rows, cfg.cols);
        for p in pts {
            if let Some((r, c)) = cfg.cell_of(p) {
                m.set(r, c, true);
            }
        }
        m
    }

    #[test]
    fn empty_mask_all_miss_on_border() {
        let cfg = GridConfig::default();
        let hits = cast_virtual_scan(
            &CellMask::new(cfg.rows, cfg.cols),
            &cfg,
            Point2::default(),
            0.5f64.to_radians(),
        )
        .unwrap();
        assert_eq!(hits.len(), 720);
        for h in &hits {
            assert_eq!(h.kind, HitKind::Miss);
            let on_x =
                (h.point.x - cfg.x_min()).abs() < 1e-9 || (h.point.x - cfg.x_max()).abs() < 1e-9;
            let on_y =
                (h.point.y - cfg.y_min()).abs() < 1e-9 || (h.point.y - cfg.y_max()).abs() < 1e-9;
            assert!(on_x || on_y, "{:?}", h.point);
        }
        let clusters = cluster_candidates(&hits, 1.0);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].kind, BoundaryKind::InfiniteBoundary);
    }

    #[test]
    fn single_cell_hit_at_entry_face() {
        let cfg = GridConfig::default();
        let mask = mask_with(&cfg, [Point2::new(2.0, 0.0)]);
        let hits = cast_virtual_scan(&mask, &cfg, Point2::default(), 0.5f64.to_radians()).unwrap();
        assert_eq!(hits[0].kind, HitKind::Hit);
        // face of the cell spanning [1.9, 2.1]
        assert!((hits[0].range - 1.9).abs() < 1e-12);
        assert!(hits[0].point.distance(Point2::new(1.9, 0.0)) < 1e-12);
    }

    #[test]
    fn ring_hits_at_radius() {
        let cfg = GridConfig::default();
        let ring = (0..3600).map(|k| {
            let a = k as f64 * TAU / 3600.0;
            Point2::new(5.0 * a.cos(), 5.0 * a.sin())
        });
        let mask = mask_with(&cfg, ring);
        let hits = cast_virtual_scan(&mask, &cfg, Point2::default(), 0.5f64.to_radians()).unwrap();
        let diag = 0.2 * 2f64.sqrt();
        for h in &hits {
            assert_eq!(h.kind, HitKind::Hit);
            assert!(
                (h.range - 5.0).abs() <= diag,
                "ray {} range {}",
                h.ray_id,
                h.range
            );
        }
    }

    #[test]
    fn origin_outside_rejected() {
        let cfg = GridConfig::default();
        let m = CellMask::new(cfg.rows, cfg.cols);
        assert_eq!(
            cast_virtual_scan(&m, &cfg, Point2::new(100.0, 0.0), 1f64.to_radians()),
            Err(Error::OriginOutsideGrid)
        );
    }

    #[test]
    fn corridor_clusters_and_polylines() {
        let cfg = small_config();
        // walls along x at y = ±5.0 (cell centres), spanning the whole grid
        let walls = (0..1000).flat_map(|i| {
            let x = -10.0 + i as f64 * 0.02;
            [Point2::new(x, 5.0), Point2::new(x, -5.0)]
        });
        let mask = mask_with(&cfg, walls);
        let hits = cast_virtual_scan(&mask, &cfg, Point2::default(), 0.5f64.to_radians()).unwrap();
        let clusters = cluster_candidates(&hits, 1.0);
        let road = clusters
            .iter()
            .filter(|c| c.kind == BoundaryKind::RoadBoundary)
            .count();
        let inf = clusters
            .iter()
            .filter(|c| c.kind == BoundaryKind::InfiniteBoundary)
            .count();
        assert_eq!((road, inf), (2, 2));

        let lvm = build_polylines(&clusters, Pose2::identity());
        let roads: Vec<_> = lvm.road_boundaries().collect();
        assert_eq!(roads.len(), 2);
        let diag = 0.2 * 2f64.sqrt();
        for line in roads {
            let wall_y = if line.nodes()[0].y > 0.0 { 5.0 } else { -5.0 };
            let truth = Polyline::new(
                vec![
                    Point2::new(line.nodes()[0].x, wall_y),
                    Point2::new(line.nodes().last().unwrap().x, wall_y),
                ],
                BoundaryKind::RoadBoundary,
            )
            .unwrap();
            assert!(crate::geometry::hausdorff(line, &truth, 0.05) <= diag);
            // ray order is clockwise: x decreases on the +y wall
            let ids: Vec<_> = line
                .nodes()
                .windows(2)
                .map(|w| (w[1] - w[0]).x.signum())
                .collect();
            assert!(ids.iter().all(|s| *s == ids[0]));
        }
    }

    #[test]
    fn distant_hits_split() {
        let mk = |id, x: f64| RayIntersection {
            ray_id: id,
            point: Point2::new(x, 0.0),
            range: x,
            kind: HitKind::Hit,
        };
        let c = cluster_candidates(&[mk(0, 1.0), mk(1, 4.0)], 1.0);
        assert_eq!(c.len(), 2);
        let lvm = build_polylines(&c, Pose2::identity());
        assert!(lvm.polylines.is_empty());
        let c = cluster_candidates(&[mk(0, 1.0), mk(1, 1.5)], 1.0);
        assert_eq!(build_polylines(&c, Pose2::identity()).polylines[0].len(), 2);
    }

    #[test]
    fn rdp_examples() {
        let line = Polyline::new(
            (0..100).map(|i| Point2::new(i as f64 * 0.1, 0.0)).collect(),
            BoundaryKind::RoadBoundary,
        )
        .unwrap();
        assert_eq!(simplify_polyline(&line, 0.1).len(), 2);
        let corner = Polyline::new(
            vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 1.0),
                Point2::new(2.0, 0.0),
            ],
            BoundaryKind::RoadBoundary,
        )
        .unwrap();
        assert_eq!(simplify_polyline(&corner, 0.1).len(), 3);
    }

    proptest! {
        #[test]
        fn rdp_bound_and_idempotence(pts in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 2..60), eps in 0.01..2.0f64) {
            let Some(line) = Polyline::from_points_dedup(pts.into_iter().map(|(x, y)| Point2::new(x, y)), BoundaryKind::RoadBoundary) else {
                return Ok(());
            };
            let simple = simplify_polyline(&line, eps);
            prop_assert_eq!(simple.nodes()[0], line.nodes()[0]);
            prop_assert_eq!(simple.nodes().last(), line.nodes().last());
            // brute force: every original node lies within eps of the simplified polyline
            for p in line.nodes() {
                prop_assert!(simple.distance_to(*p) <= eps + 1e-12);
            }
            prop_assert_eq!(simplify_polyline(&simple, eps), simple);
        }

        #[test]
        fn hit_ranges_monotone_under_mask_growth(seed_cells in proptest::collection::vec((0usize..101, 0usize..101), 0..40),
                                                 extra in proptest::collection::vec((0usize..101, 0usize..101), 1..40)) {
            let cfg = small_config();
            let mut m = CellMask::new(cfg.rows, cfg.cols);
            for (r, c) in seed_cells { if (r, c) != (50, 50) { m.set(r, c, true); } }
            let before = cast_virtual_scan(&m, &cfg, Point2::default(), 2f64.to_radians()).unwrap();
            for (r, c) in extra { if (r, c) != (50, 50) { m.set(r, c, true); } }
            let after = cast_virtual_scan(&m, &cfg, Point2::default(), 2f64.to_radians()).unwrap();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(a.range <= b.range + 1e-12);
            }
        }
    }
}
