//! Iterative closest line registration of two LVMs.
//!
//! Source nodes are pulled onto target segments by minimizing the sum of
//! squared point-to-line distances, re-linearized about the current
//! transform every iteration.

pub mod baseline;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2, Polyline, Pose2};
use crate::spatial::SegmentIndex;
use crate::vectorize::Lvm;

/// Tolerance on the segment parameter for the foot-point test at polyline ends.
const FOOT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub initial_rejection: f64,
    /// Factor applied to the rejection threshold after every iteration.
    pub rejection_decay: f64,
    pub rejection_floor: f64,
    pub max_iterations: usize,
    pub translation_tol: f64,
    pub rotation_tol: f64,
    /// Condition number above which the normal matrix is degenerate.
    pub condition_bound: f64,
    /// Lower bound on the residual sigma used to scale the information matrix.
    pub min_sigma: f64,
    pub min_correspondences: usize,
    /// Bucket size of the target segment index (m).
    pub index_cell: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            initial_rejection: 1.0,
            rejection_decay: 0.7,
            rejection_floor: 0.3,
            max_iterations: 50,
            translation_tol: 1e-4,
            rotation_tol: 1e-5,
            condition_bound: 1e6,
            min_sigma: 0.01,
            min_correspondences: 3,
            index_cell: 2.0,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_rejection", self.initial_rejection),
            ("rejection_floor", self.rejection_floor),
            ("translation_tol", self.translation_tol),
            ("rotation_tol", self.rotation_tol),
            ("condition_bound", self.condition_bound),
            ("min_sigma", self.min_sigma),
            ("index_cell", self.index_cell),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParams(format!(
                "{name} must be positive, got {v}"
            )));
        }
        if !(self.rejection_decay > 0.0 && self.rejection_decay <= 1.0) {
            return Err(Error::InvalidParams(
                "rejection_decay must lie in (0, 1]".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParams(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Rejection threshold used at iteration `k` (0-based).
    pub fn rejection_at(&self, k: usize) -> f64 {
        (self.initial_rejection * self.rejection_decay.powi(k as i32)).max(self.rejection_floor)
    }
}

/// A source node paired with the target segment it is pulled onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// (polyline, node) in the source LVM.
    pub source_node_index: (usize, usize),
    /// (polyline, segment) in the target LVM.
    pub target_segment: (usize, usize),
    /// Left unit normal of the target segment.
    pub normal: Point2,
    /// Distance of the transformed node to the segment's line along `normal`.
    pub signed_distance: f64,
    /// Source node in the source frame.
    pub source_point: Point2,
    /// Source node mapped by the current transform.
    pub point: Point2,
    /// First node of the target segment.
    pub anchor: Point2,
}

/// Nearest-segment lookup over the road boundaries of a target LVM.
#[derive(Debug, Clone)]
pub struct TargetIndex {
    index: SegmentIndex<(usize, usize)>,
    /// Segment count per target polyline, by polyline index.
    segment_counts: Vec<usize>,
}

impl TargetIndex {
    pub fn new(target: &Lvm, cell: f64) -> Self {
        let segs = road_polylines(target)
            .flat_map(|(pi, line)| {
                line.segments()
                    .enumerate()
                    .map(move |(si, (a, b))| (a, b, (pi, si)))
            })
            .collect();
        let segment_counts = target
            .polylines
            .iter()
            .map(Polyline::segment_count)
            .collect();
        Self {
            index: SegmentIndex::new(segs, cell),
            segment_counts,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.index.segments().is_empty()
    }

    /// Correspondence for one transformed node, if any segment within
    /// `threshold` passes the foot-point test.
    fn lookup(&self, p: Point2, threshold: f64) -> Option<(usize, usize, Point2, Point2)> {
        self.index
            .within(p, threshold)
            .into_iter()
            .find_map(|(i, _)| {
                let (a, b, (pi, si)) = self.index.segments()[i];
                let d = b - a;
                let t = (p - a).dot(d) / d.norm_squared();
                let last = self.segment_counts[pi] - 1;
                let beyond =
                    (si == 0 && t < -FOOT_TOLERANCE) || (si == last && t > 1.0 + FOOT_TOLERANCE);
                (!beyond).then_some((pi, si, a, b))
            })
    }
}

fn road_polylines(lvm: &Lvm) -> impl Iterator<Item = (usize, &Polyline)> {
    lvm.polylines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind() == crate::geometry::BoundaryKind::RoadBoundary)
}

fn source_nodes(source: &Lvm) -> Vec<((usize, usize), Point2)> {
    road_polylines(source)
        .flat_map(|(pi, l)| {
            l.nodes()
                .iter()
                .enumerate()
                .map(move |(ni, p)| ((pi, ni), *p))
        })
        .collect()
}

fn require_road(lvm: &Lvm, which: &str) -> Result<()> {
    if road_polylines(lvm).next().is_none() {
        return Err(Error::InvalidParams(format!(
            "{which} LVM has no road boundary"
        )));
    }
    Ok(())
}

fn correspond(
    nodes: &[((usize, usize), Point2)],
    index: &TargetIndex,
    current: &Pose2,
    threshold: f64,
) -> Vec<Correspondence> {
    nodes
        .iter()
        .filter_map(|&(id, sp)| {
            let p = current.transform_point(sp);
            let (pi, si, a, b) = index.lookup(p, threshold)?;
            let normal = (b - a).perp() * (1.0 / a.distance(b));
            let signed_distance = normal.dot(p - a);
            (signed_distance.abs() <= threshold).then_some(Correspondence {
                source_node_index: id,
                target_segment: (pi, si),
                normal,
                signed_distance,
                source_point: sp,
                point: p,
                anchor: a,
            })
        })
        .collect()
}

/// Pairs every road-boundary node of `source`, mapped by `current`, with its
/// nearest admissible target segment within `rejection_threshold`.
pub fn find_correspondences(
    source: &Lvm,
    target: &Lvm,
    current: &Pose2,
    rejection_threshold: f64,
) -> Result<Vec<Correspondence>> {
    require_road(source, "source")?;
    require_road(target, "target")?;
    let index = TargetIndex::new(target, MatchParams::default().index_cell);
    let out = correspond(&source_nodes(source), &index, current, rejection_threshold);
    if out.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    Ok(out)
}

/// Gauss-Newton system of the linearized point-to-line objective, in the
/// left-increment parametrization `(dx, dy, dθ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEquations {
    pub h: Matrix3<f64>,
    pub g: Vector3<f64>,
    /// RMS distance of the linearization points from the origin; the θ
    /// column is divided by it before conditioning is assessed.
    pub lever_arm: f64,
}

impl NormalEquations {
    pub fn assemble(corrs: &[Correspondence]) -> Self {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        let mut lever = 0.0;
        for c in corrs {
            let j = Vector3::new(c.normal.x, c.normal.y, c.normal.dot(c.point.perp()));
            h += j * j.transpose();
            g += j * c.signed_distance;
            lever += c.point.norm_squared();
        }
        let lever_arm = if corrs.is_empty() {
            1.0
        } else {
            (lever / corrs.len() as f64).sqrt().max(1e-9)
        };
        Self { h, g, lever_arm }
    }

    fn scale(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0 / self.lever_arm))
    }

    /// Condition number of the scaled normal matrix; infinite if singular.
    pub fn condition(&self) -> f64 {
        let s = self.scale();
        let eig = SymmetricEigen::new(s * self.h * s);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if min <= 0.0 || max <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Minimizer of the linearized objective. Directions whose scaled
    /// eigenvalue falls below `max / condition_bound` are left unchanged.
    pub fn solve_truncated(&self, condition_bound: f64) -> Vector3<f64> {
        let s = self.scale();
        let eig = SymmetricEigen::new(s * self.h * s);
        let max = eig.eigenvalues.max();
        let rhs = eig.eigenvectors.transpose() * (s * -self.g);
        let mut y = Vector3::zeros();
        for k in 0..3 {
            let l = eig.eigenvalues[k];
            if max > 0.0 && l > max / condition_bound {
                y[k] = rhs[k] / l;
            }
        }
        s * (eig.eigenvectors * y)
    }
}

fn increment_pose(d: &Vector3<f64>) -> Pose2 {
    Pose2::new(d[0], d[1], d[2])
}

/// Sum of squared line distances with the correspondences held fixed, after
/// applying the left increment `delta`.
pub fn fixed_objective(corrs: &[Correspondence], delta: &Pose2) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let r = c.normal.dot(delta.transform_point(c.point) - c.anchor);
            r * r
        })
        .sum()
}

/// One least-squares step over fixed correspondences.
pub fn solve_step(corrs: &[Correspondence], condition_bound: f64) -> Result<Pose2> {
    if corrs.len() < 3 {
        return Err(Error::InvalidParams(format!(
            "need at least 3 correspondences, got {}",
            corrs.len()
        )));
    }
    let ne = NormalEquations::assemble(corrs);
    let condition = ne.condition();
    if condition > condition_bound {
        return Err(Error::SingularSystem { condition });
    }
    Ok(increment_pose(&ne.solve_truncated(condition_bound)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Maps source-frame points into the target frame.
    pub transform: Pose2,
    pub iterations: usize,
    pub mean_abs_residual: f64,
    pub rms_residual: f64,
    pub correspondence_count: usize,
    pub degenerate: bool,
    /// Scaled condition number of the final normal matrix.
    pub condition: f64,
    /// False if the iteration cap was hit with the last increment above tolerance.
    pub converged: bool,
    /// Inverse covariance of `transform`, perturbed on the right.
    pub information: [[f64; 3]; 3],
}

impl MatchResult {
    pub fn information_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.information[r][c])
    }
}

/// Registers `source` onto `target` starting from `initial`.
pub fn icl_match(
    source: &Lvm,
    target: &Lvm,
    initial: Pose2,
    params: &MatchParams,
) -> Result<MatchResult> {
    params.validate()?;
    require_road(source, "source")?;
    require_road(target, "target")?;
    let index = TargetIndex::new(target, params.index_cell);
    let nodes = source_nodes(source);

    let mut transform = initial;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_condition = f64::INFINITY;
    while iterations < params.max_iterations {
        let threshold = params.rejection_at(iterations);
        iterations += 1;
        let corrs = correspond(&nodes, &index, &transform, threshold);
        if corrs.is_empty() {
            return Err(Error::NoCorrespondences);
        }
        let ne = NormalEquations::assemble(&corrs);
        last_condition = ne.condition();
        let full = ne.solve_truncated(params.condition_bound);
        let before = fixed_objective(&corrs, &Pose2::identity());
        let mut step = full;
        let mut delta = increment_pose(&step);
        for _ in 0..20 {
            if fixed_objective(&corrs, &delta) <= before {
                break;
            }
            step *= 0.5;
            delta = increment_pose(&step);
        }
        if fixed_objective(&corrs, &delta) > before {
            delta = Pose2::identity();
        }
        transform = delta.compose(&transform);
        let small = delta.x.hypot(delta.y) < params.translation_tol
            && delta.theta.abs() < params.rotation_tol;
        if small {
            converged = true;
            break;
        }
    }

    let threshold = params.rejection_at(iterations.saturating_sub(1));
    let corrs = correspond(&nodes, &index, &transform, threshold);
    if corrs.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let n = corrs.len() as f64;
    let mean_abs = corrs.iter().map(|c| c.signed_distance.abs()).sum::<f64>() / n;
    let rms = (corrs.iter().map(|c| c.signed_distance.powi(2)).sum::<f64>() / n).sqrt();
    let sigma = rms.max(params.min_sigma);
    let info = right_information(&corrs, &transform) / (sigma * sigma);
    Ok(MatchResult {
        transform,
        iterations,
        mean_abs_residual: mean_abs,
        rms_residual: rms,
        correspondence_count: corrs.len(),
        degenerate: !(last_condition <= params.condition_bound),
        condition: last_condition,
        converged,
        information: std::array::from_fn(|r| std::array::from_fn(|c| info[(r, c)])),
    })
}

/// Normal matrix with respect to a right perturbation of `transform`, the
/// parametrization pose-graph edges use.
fn right_information(corrs: &[Correspondence], transform: &Pose2) -> Matrix3<f64> {
    corrs.iter().fold(Matrix3::zeros(), |acc, c| {
        let nr = transform.inverse().rotate(c.normal);
        let j = Vector3::new(nr.x, nr.y, nr.dot(c.source_point.perp()));
        acc + j * j.transpose()
    })
}

/// Sum of squared line distances under `transform` with freshly chosen
/// correspondences, and the number of contributing nodes.
pub fn objective(
    source: &Lvm,
    target: &Lvm,
    transform: &Pose2,
    rejection_threshold: f64,
) -> (f64, usize) {
    let index = TargetIndex::new(target, MatchParams::default().index_cell);
    let corrs = correspond(
        &source_nodes(source),
        &index,
        transform,
        rejection_threshold,
    );
    (fixed_objective(&corrs, &Pose2::identity()), corrs.len())
}

/// Translational error of `result` against `ground_truth`, absolute and
/// relative to the true motion.
pub fn match_error(result: &Pose2, ground_truth: &Pose2) -> Result<(f64, f64)> {
    let motion = ground_truth.translation().norm();
    if motion < 1e-6 {
        return Err(Error::ZeroMotion);
    }
    let abs = result.translation().distance(ground_truth.translation());
    Ok((abs, abs / motion))
}

/// Heading error of `result` against `ground_truth` (rad, wrapped).
pub fn rotation_error(result: &Pose2, ground_truth: &Pose2) -> f64 {
    wrap_angle(result.theta - ground_truth.theta).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundaryKind;
    use proptest::prelude::*;

    fn lvm(lines: &[&[(f64, f64)]]) -> Lvm {
        Lvm {
            polylines: lines
                .iter()
                .map(|l| {
                    Polyline::new(
                        l.iter().map(|&(x, y)| Point2::new(x, y)).collect(),
                        BoundaryKind::RoadBoundary,
                    )
                    .unwrap()
                })
                .collect(),
            source_pose: Pose2::identity(),
            simplified: true,
        }
    }

    fn moved(l: &Lvm, t: &Pose2) -> Lvm {
        Lvm {
            polylines: l
                .polylines
                .iter()
                .map(|p| crate::geometry::transform_polyline(t, p))
                .collect(),
            ..l.clone()
        }
    }

    fn l_shape() -> Lvm {
        // densely noded so every node sits on a segment interior of its copy
        let a: Vec<(f64, f64)> = (0..=10).map(|i| (i as f64, 0.0)).collect();
        let b: Vec<(f64, f64)> = (0..=10).map(|i| (0.0, i as f64)).collect();
        lvm(&[&a, &b])
    }

    #[test]
    fn self_match_distance_zero() {
        let t = l_shape();
        let c = find_correspondences(&t, &t, &Pose2::identity(), 1.0).unwrap();
        assert_eq!(c.len(), t.road_node_count());
        assert!(c.iter().all(|c| c.signed_distance == 0.0));
    }

    #[test]
    fn parallel_offset_same_sign() {
        let target = lvm(&[&[(0.0, 0.0), (20.0, 0.0)]]);
        let source = lvm(&[&[(2.0, 0.3), (5.0, 0.3), (9.0, 0.3), (15.0, 0.3)]]);
        let c = find_correspondences(&source, &target, &Pose2::identity(), 1.0).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|c| (c.signed_distance - 0.3).abs() < 1e-12));
    }

    #[test]
    fn full_rejection() {
        let target = lvm(&[&[(0.0, 0.0), (20.0, 0.0)]]);
        let source = lvm(&[&[(2.0, 5.0), (15.0, 5.0)]]);
        assert_eq!(
            find_correspondences(&source, &target, &Pose2::identity(), 1.0),
            Err(Error::NoCorrespondences)
        );
    }

    #[test]
    fn foot_point_beyond_end_rejected() {
        let target = lvm(&[&[(0.0, 0.0), (10.0, 0.0)]]);
        let source = lvm(&[&[(10.5, 0.1), (12.0, 0.1)]]);
        assert_eq!(
            find_correspondences(&source, &target, &Pose2::identity(), 1.0),
            Err(Error::NoCorrespondences)
        );
    }

    #[test]
    fn zero_residual_identity_step() {
        let t = l_shape();
        let c = find_correspondences(&t, &t, &Pose2::identity(), 1.0).unwrap();
        assert_eq!(solve_step(&c, 1e6).unwrap(), Pose2::identity());
    }

    #[test]
    fn straight_line_tangent_shift_is_singular() {
        let target = lvm(&[&[(0.0, 0.0), (5.0, 0.0), (10.0, 0.0), (20.0, 0.0)]]);
        let source = moved(&target, &Pose2::new(0.5, 0.0, 0.0));
        let c = find_correspondences(&source, &target, &Pose2::identity(), 1.0).unwrap();
        assert!(matches!(
            solve_step(&c, 1e6),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn l_shape_single_step_recovers_translation() {
        let target = l_shape();
        let source = moved(&target, &Pose2::new(0.2, -0.1, 0.0));
        let c = find_correspondences(&source, &target, &Pose2::identity(), 1.0).unwrap();
        let step = solve_step(&c, 1e6).unwrap();
        // Hand-assembled normal equations: nodes on the x axis constrain y
        // only, nodes on the y axis constrain x only, so each axis averages
        // its own residuals and rotation is pinned by the lever arms.
        let x_rows: Vec<_> = c.iter().filter(|c| c.normal.x.abs() > 0.5).collect();
        let y_rows: Vec<_> = c.iter().filter(|c| c.normal.y.abs() > 0.5).collect();
        let ex = -x_rows
            .iter()
            .map(|c| c.signed_distance * c.normal.x)
            .sum::<f64>()
            / x_rows.len() as f64;
        let ey = -y_rows
            .iter()
            .map(|c| c.signed_distance * c.normal.y)
            .sum::<f64>()
            / y_rows.len() as f64;
        assert!((ex + 0.2).abs() < 1e-12 && (ey - 0.1).abs() < 1e-12);
        assert!((step.x - ex).abs() < 1e-6);
        assert!((step.y - ey).abs() < 1e-6);
        assert!(step.theta.abs() < 1e-6);
    }

    #[test]
    fn self_match_one_iteration() {
        let t = l_shape();
        let r = icl_match(&t, &t, Pose2::identity(), &MatchParams::default()).unwrap();
        assert_eq!(r.transform, Pose2::identity());
        assert_eq!(r.iterations, 1);
        assert_eq!(r.mean_abs_residual, 0.0);
        assert!(r.converged && !r.degenerate);
    }

    #[test]
    fn recovers_rigid_offset() {
        let target = lvm(&[
            &[(-10.0, 4.0), (0.0, 4.0), (3.0, 8.0), (3.0, 20.0)],
            &[(-10.0, -4.0), (5.0, -4.0), (9.0, 1.0), (9.0, 20.0)],
        ]);
        let truth = Pose2::new(0.5, 0.2, 2f64.to_radians());
        // source frame sees the target geometry through truth⁻¹
        let dense = densify(&moved(&target, &truth.inverse()), 0.5);
        let r = icl_match(&dense, &target, Pose2::identity(), &MatchParams::default()).unwrap();
        assert!(r.converged && !r.degenerate);
        assert!(r.transform.translation().distance(truth.translation()) < 1e-4);
        assert!(rotation_error(&r.transform, &truth) < 1e-5);
    }

    #[test]
    fn match_error_cases() {
        let g = Pose2::new(0.74, 0.0, 0.0);
        assert_eq!(match_error(&g, &g).unwrap(), (0.0, 0.0));
        let (a, r) = match_error(&Pose2::new(0.67, 0.0, 0.0), &g).unwrap();
        assert!((a - 0.07).abs() < 1e-12);
        assert!((r - 0.0946).abs() < 1e-4);
        assert_eq!(match_error(&g, &Pose2::identity()), Err(Error::ZeroMotion));
    }

    #[test]
    fn information_is_symmetric_positive() {
        let t = l_shape();
        let s = moved(&t, &Pose2::new(0.05, 0.02, 0.001));
        let r = icl_match(&s, &t, Pose2::identity(), &MatchParams::default()).unwrap();
        let info = r.information_matrix();
        assert_eq!(info, info.transpose());
        assert!(SymmetricEigen::new(info).eigenvalues.min() > 0.0);
    }

    fn densify(l: &Lvm, step: f64) -> Lvm {
        Lvm {
            polylines: l
                .polylines
                .iter()
                .map(|p| {
                    let mut pts = vec![p.nodes()[0]];
                    for (a, b) in p.segments() {
                        let n = (a.distance(b) / step).ceil().max(1.0) as usize;
                        pts.extend((1..=n).map(|k| a.lerp(b, k as f64 / n as f64)));
                    }
                    Polyline::new(pts, p.kind()).unwrap()
                })
                .collect(),
            ..l.clone()
        }
    }

    proptest! {
        #[test]
        fn step_never_increases_fixed_objective(
            dx in -0.5f64..0.5, dy in -0.5f64..0.5, dth in -0.05f64..0.05,
        ) {
            let target = l_shape();
            let source = moved(&target, &Pose2::new(dx, dy, dth));
            let c = find_correspondences(&source, &target, &Pose2::identity(), 2.0).unwrap();
            let ne = NormalEquations::assemble(&c);
            let step = increment_pose(&ne.solve_truncated(1e6));
            let before = fixed_objective(&c, &Pose2::identity());
            // the linearized optimum can overshoot only at second order in the angle
            prop_assert!(fixed_objective(&c, &step) <= before + 1e-9 + 100.0 * dth * dth * before);
        }

        #[test]
        fn inverse_direction_consistent(
            dx in -0.6f64..0.6, dy in -0.6f64..0.6, dth in -0.05f64..0.05,
        ) {
            let a = densify(&lvm(&[
                &[(-10.0, 4.0), (0.0, 4.0), (3.0, 8.0), (3.0, 20.0)],
                &[(-10.0, -4.0), (5.0, -4.0), (9.0, 1.0), (9.0, 20.0)],
            ]), 0.5);
            let g = Pose2::new(dx, dy, dth);
            let b = moved(&a, &g.inverse());
            let p = MatchParams::default();
            let ab = icl_match(&b, &a, Pose2::identity(), &p).unwrap();
            let ba = icl_match(&a, &b, Pose2::identity(), &p).unwrap();
            let loop_ = ab.transform.compose(&ba.transform);
            prop_assert!(loop_.translation().norm() < 2.0 * p.translation_tol);
            prop_assert!(loop_.theta.abs() < 2.0 * p.rotation_tol);
        }
    }
}
