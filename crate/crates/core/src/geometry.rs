//! Planar rigid-body algebra and the segment/polyline primitives shared by
//! every stage of the pipeline.
//!
//! All frames follow the planar NED convention: `x` points north (vehicle
//! forward), `y` points east (vehicle right) and headings grow clockwise when
//! viewed from above. Algebraically this is the ordinary right-handed SE(2).

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum separation between consecutive polyline nodes and segment endpoints.
pub const NODE_EPS: f64 = 1e-9;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Checked constructor rejecting NaN and infinities.
    pub fn try_new(x: f64, y: f64) -> Result<Self> {
        if x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(Error::NonFinite)
        }
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    /// Counter-rotation by +90° in the algebraic sense: `(-y, x)`.
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self> {
        if x.is_finite() && y.is_finite() && z.is_finite() {
            Ok(Self { x, y, z })
        } else {
            Err(Error::NonFinite)
        }
    }

    pub fn xy(self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

/// Rigid planar pose. `theta` is kept wrapped to `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// `self ⊕ other`: apply `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `inverse(self) ⊕ other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Rotate only (no translation).
    pub fn rotate(&self, v: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        Point2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

impl Mul for Pose2 {
    type Output = Pose2;
    fn mul(self, rhs: Pose2) -> Pose2 {
        self.compose(&rhs)
    }
}

/// Free-function form of [`Pose2::compose`].
pub fn se2_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

/// Free-function form of [`Pose2::inverse`].
pub fn se2_inverse(a: &Pose2) -> Pose2 {
    a.inverse()
}

/// Boundary label carried by every polyline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// Obstacle boundary observed by virtual-scan hits.
    RoadBoundary,
    /// Free-space limit where virtual-scan rays left the grid.
    InfiniteBoundary,
}

/// Ordered list of at least two distinct nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    nodes: Vec<Point2>,
    kind: BoundaryKind,
}

impl Polyline {
    /// Validating constructor.
    pub fn new(nodes: Vec<Point2>, kind: BoundaryKind) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidPolyline(format!(
                "needs at least 2 nodes, got {}",
                nodes.len()
            )));
        }
        if nodes.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite);
        }
        if let Some(i) = nodes
            .windows(2)
            .position(|w| w[0].distance(w[1]) <= NODE_EPS)
        {
            return Err(Error::InvalidPolyline(format!(
                "nodes {i} and {} coincide",
                i + 1
            )));
        }
        Ok(Self { nodes, kind })
    }

    /// Drops consecutive duplicates before validating. Returns `None` when
    /// fewer than two distinct nodes remain.
    pub fn from_points_dedup(
        points: impl IntoIterator<Item = Point2>,
        kind: BoundaryKind,
    ) -> Option<Self> {
        let mut nodes: Vec<Point2> = Vec::new();
        for p in points {
            if !p.is_finite() {
                return None;
            }
            if nodes.last().is_none_or(|q| q.distance(p) > NODE_EPS) {
                nodes.push(p);
            }
        }
        Polyline::new(nodes, kind).ok()
    }

    pub fn nodes(&self) -> &[Point2] {
        &self.nodes
    }

    pub fn kind(&self) -> BoundaryKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn segment(&self, i: usize) -> (Point2, Point2) {
        (self.nodes[i], self.nodes[i + 1])
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.nodes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| a.distance(b)).sum()
    }

    /// Cumulative arc length at each node.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut s = 0.0;
        out.push(0.0);
        for (a, b) in self.segments() {
            s += a.distance(b);
            out.push(s);
        }
        out
    }

    pub fn reversed(&self) -> Polyline {
        let mut nodes = self.nodes.clone();
        nodes.reverse();
        Polyline {
            nodes,
            kind: self.kind,
        }
    }

    /// Nearest point on the polyline to `p`: (distance, segment index, foot).
    pub fn project(&self, p: Point2) -> (f64, usize, Point2) {
        let mut best = (f64::INFINITY, 0, self.nodes[0]);
        for (i, (a, b)) in self.segments().enumerate() {
            let (d, foot, _) = clamp_to_segment(p, a, b);
            if d < best.0 {
                best = (d, i, foot);
            }
        }
        best
    }

    /// Distance from `p` to the polyline.
    pub fn distance_to(&self, p: Point2) -> f64 {
        self.project(p).0
    }
}

/// Result of projecting a point onto a closed segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentProjection {
    pub distance: f64,
    pub foot: Point2,
    /// Unit normal of `b - a`, oriented toward `p` when the foot is interior.
    pub normal: Point2,
    /// Segment parameter of the foot in `[0, 1]`.
    pub t: f64,
}

/// Distance, foot point and normal from `p` to the closed segment `[a, b]`.
pub fn point_to_segment(p: Point2, a: Point2, b: Point2) -> Result<SegmentProjection> {
    let d = b - a;
    let len = d.norm();
    if len < NODE_EPS {
        return Err(Error::DegenerateSegment);
    }
    let t = ((p - a).dot(d) / (len * len)).clamp(0.0, 1.0);
    let foot = a + d * t;
    let mut normal = d.perp() * (1.0 / len);
    if normal.dot(p - foot) < 0.0 {
        normal = -normal;
    }
    Ok(SegmentProjection {
        distance: p.distance(foot),
        foot,
        normal,
        t,
    })
}

/// Unchecked clamp projection used in hot loops; tolerates zero-length
/// segments by returning the endpoint distance.
pub(crate) fn clamp_to_segment(p: Point2, a: Point2, b: Point2) -> (f64, Point2, f64) {
    let d = b - a;
    let l2 = d.norm_squared();
    if l2 <= 0.0 {
        return (p.distance(a), a, 0.0);
    }
    let t = ((p - a).dot(d) / l2).clamp(0.0, 1.0);
    let foot = a + d * t;
    (p.distance(foot), foot, t)
}

/// Applies `pose` (rotation then translation) to every node.
pub fn transform_polyline(pose: &Pose2, line: &Polyline) -> Polyline {
    Polyline {
        nodes: line
            .nodes
            .iter()
            .map(|p| pose.transform_point(*p))
            .collect(),
        kind: line.kind,
    }
}

/// Intersection of two closed segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentIntersection {
    None,
    /// Single crossing at parameters `t` on the first and `u` on the second segment.
    Point {
        point: Point2,
        t: f64,
        u: f64,
    },
    /// Collinear overlap, reported by its two endpoints (parameters on the first segment).
    Overlap {
        start: Point2,
        end: Point2,
        t0: f64,
        t1: f64,
    },
}

/// Exact segment-segment intersection in floating point.
pub fn intersect_segments(p0: Point2, p1: Point2, q0: Point2, q1: Point2) -> SegmentIntersection {
    let r = p1 - p0;
    let s = q1 - q0;
    let denom = r.cross(s);
    let qp = q0 - p0;
    let rr = r.norm_squared();
    let ss = s.norm_squared();
    if rr <= 0.0 || ss <= 0.0 {
        return SegmentIntersection::None;
    }
    let scale = (rr * ss).sqrt();
    if denom.abs() <= 1e-12 * scale {
        // Parallel; collinear only if q0 lies on the line through p.
        if qp.cross(r).abs() > 1e-12 * rr.sqrt().max(1.0) * qp.norm().max(1.0) {
            return SegmentIntersection::None;
        }
        let ta = qp.dot(r) / rr;
        let tb = (q1 - p0).dot(r) / rr;
        let (lo, hi) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        let t0 = lo.max(0.0);
        let t1 = hi.min(1.0);
        if t0 > t1 {
            return SegmentIntersection::None;
        }
        return SegmentIntersection::Overlap {
            start: p0 + r * t0,
            end: p0 + r * t1,
            t0,
            t1,
        };
    }
    let t = qp.cross(s) / denom;
    let u = qp.cross(r) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        SegmentIntersection::Point {
            point: p0 + r * t,
            t,
            u,
        }
    } else {
        SegmentIntersection::None
    }
}

/// Symmetric Hausdorff distance between two polylines, evaluated on nodes
/// and on segment samples spaced at most `step` apart.
pub fn hausdorff(a: &Polyline, b: &Polyline, step: f64) -> f64 {
    directed_hausdorff(a, b, step).max(directed_hausdorff(b, a, step))
}

fn directed_hausdorff(a: &Polyline, b: &Polyline, step: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (p, q) in a.segments() {
        let n = ((p.distance(q) / step).ceil() as usize).max(1);
        for k in 0..=n {
            let s = p.lerp(q, k as f64 / n as f64);
            worst = worst.max(b.distance_to(s));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Pose2, b: Pose2, tol: f64) -> bool {
        (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && wrap_angle(a.theta - b.theta).abs() < tol
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(3.0, -1.0, 0.5);
        assert_eq!(Pose2::identity().compose(&p), p);
        let t = Pose2::new(1.0, 0.0, 0.0);
        assert_eq!(t.compose(&t), Pose2::new(2.0, 0.0, 0.0));
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2).compose(&t);
        assert!(close(r, Pose2::new(0.0, 1.0, FRAC_PI_2), 1e-15));
    }

    #[test]
    fn inverse_examples() {
        assert!(close(
            Pose2::identity().inverse(),
            Pose2::identity(),
            0.0 + 1e-300
        ));
        assert!(close(
            Pose2::new(1.0, 0.0, 0.0).inverse(),
            Pose2::new(-1.0, 0.0, 0.0),
            1e-15
        ));
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2).inverse();
        assert!(close(r, Pose2::new(0.0, 0.0, -FRAC_PI_2), 1e-15));
    }

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn segment_examples() {
        let a = Point2::new(-1.0, 0.0);
        let b = Point2::new(1.0, 0.0);
        let r = point_to_segment(Point2::new(0.0, 1.0), a, b).unwrap();
        assert_eq!(r.distance, 1.0);
        assert_eq!(r.foot, Point2::new(0.0, 0.0));
        assert_eq!(r.normal, Point2::new(0.0, 1.0));
        let r = point_to_segment(Point2::new(2.0, 0.0), a, b).unwrap();
        assert_eq!(r.distance, 1.0);
        assert_eq!(r.foot, b);
        let r = point_to_segment(Point2::new(0.5, 0.0), a, b).unwrap();
        assert_eq!(r.distance, 0.0);
        let r = point_to_segment(Point2::new(0.0, -2.0), a, b).unwrap();
        assert_eq!(r.normal, Point2::new(0.0, -1.0));
    }

    #[test]
    fn degenerate_segment_rejected() {
        let a = Point2::new(1.0, 1.0);
        assert_eq!(
            point_to_segment(Point2::new(0.0, 0.0), a, a + Point2::new(1e-10, 0.0)),
            Err(Error::DegenerateSegment)
        );
    }

    #[test]
    fn transform_examples() {
        let line = Polyline::new(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)],
            BoundaryKind::RoadBoundary,
        )
        .unwrap();
        assert_eq!(transform_polyline(&Pose2::identity(), &line), line);
        let moved = transform_polyline(&Pose2::new(1.0, 2.0, 0.0), &line);
        assert_eq!(
            moved.nodes(),
            &[Point2::new(1.0, 2.0), Point2::new(2.0, 2.0)]
        );
        let line = Polyline::new(
            vec![Point2::new(1.0, 0.0), Point2::new(2.0, 0.0)],
            BoundaryKind::InfiniteBoundary,
        )
        .unwrap();
        let flipped = transform_polyline(&Pose2::new(0.0, 0.0, PI), &line);
        assert!(flipped.nodes()[0].distance(Point2::new(-1.0, 0.0)) < 1e-15);
        assert!(flipped.nodes()[1].distance(Point2::new(-2.0, 0.0)) < 1e-15);
        assert_eq!(flipped.kind(), BoundaryKind::InfiniteBoundary);
    }

    #[test]
    fn polyline_validation() {
        let p = Point2::new(0.0, 0.0);
        assert!(Polyline::new(vec![p], BoundaryKind::RoadBoundary).is_err());
        assert!(Polyline::new(vec![p, p], BoundaryKind::RoadBoundary).is_err());
        assert!(Polyline::new(
            vec![p, Point2::new(f64::NAN, 0.0)],
            BoundaryKind::RoadBoundary
        )
        .is_err());
        let d =
            Polyline::from_points_dedup([p, p, Point2::new(1.0, 0.0)], BoundaryKind::RoadBoundary)
                .unwrap();
        assert_eq!(d.len(), 2);
        assert!(Point2::try_new(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn segment_intersection_cases() {
        let o = Point2::new(0.0, 0.0);
        match intersect_segments(
            Point2::new(-1.0, -1.0),
            Point2::new(1.0, 1.0),
            Point2::new(-1.0, 1.0),
            Point2::new(1.0, -1.0),
        ) {
            SegmentIntersection::Point { point, t, u } => {
                assert!(point.distance(o) < 1e-15);
                assert!((t - 0.5).abs() < 1e-15 && (u - 0.5).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        match intersect_segments(
            o,
            Point2::new(10.0, 0.0),
            Point2::new(8.0, 0.0),
            Point2::new(18.0, 0.0),
        ) {
            SegmentIntersection::Overlap { start, end, .. } => {
                assert_eq!(start, Point2::new(8.0, 0.0));
                assert_eq!(end, Point2::new(10.0, 0.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            intersect_segments(
                o,
                Point2::new(1.0, 0.0),
                Point2::new(0.0, 1.0),
                Point2::new(1.0, 1.0)
            ),
            SegmentIntersection::None
        );
    }

    fn pose_strategy() -> impl Strategy<Value = Pose2> {
        (-100.0..100.0f64, -100.0..100.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn group_laws(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let id = a.compose(&a.inverse());
            prop_assert!(close(id, Pose2::identity(), 1e-12));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(l, r, 1e-12));
            prop_assert!(l.theta > -PI && l.theta <= PI);
        }

        #[test]
        fn transform_is_rigid(pose in pose_strategy(), pts in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 2..12)) {
            let pts: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
            if let Some(line) = Polyline::from_points_dedup(pts, BoundaryKind::RoadBoundary) {
                let moved = transform_polyline(&pose, &line);
                prop_assert_eq!(moved.len(), line.len());
                for i in 0..line.len() {
                    for j in 0..line.len() {
                        let d0 = line.nodes()[i].distance(line.nodes()[j]);
                        let d1 = moved.nodes()[i].distance(moved.nodes()[j]);
                        prop_assert!((d0 - d1).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn segment_distance_matches_sampling(px in -5.0..5.0f64, py in -5.0..5.0f64,
                                             ax in -3.0..3.0f64, ay in -3.0..3.0f64,
                                             bx in -3.0..3.0f64, by in -3.0..3.0f64) {
            let (p, a, b) = (Point2::new(px, py), Point2::new(ax, ay), Point2::new(bx, by));
            prop_assume!(a.distance(b) > 1e-3);
            let r = point_to_segment(p, a, b).unwrap();
            // coarse pass, then dense resampling around the coarse minimum
            let n = 1000;
            let best = (0..=n)
                .min_by(|&i, &j| {
                    let di = p.distance(a.lerp(b, i as f64 / n as f64));
                    let dj = p.distance(a.lerp(b, j as f64 / n as f64));
                    di.total_cmp(&dj)
                })
                .unwrap();
            let lo = (best as f64 - 2.0).max(0.0) / n as f64;
            let hi = (best as f64 + 2.0).min(n as f64) / n as f64;
            let m = 100_000;
            let sampled = (0..=m)
                .map(|k| p.distance(a.lerp(b, lo + (hi - lo) * k as f64 / m as f64)))
                .fold(f64::INFINITY, f64::min);
            prop_assert!((sampled - r.distance).abs() < 1e-6);
            prop_assert!((r.normal.norm() - 1.0).abs() < 1e-12);
        }
    }
}
