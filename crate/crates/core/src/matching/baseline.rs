//! Point-to-point ICP over raw 2D point sets.

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2};
use crate::spatial::PointIndex;

use super::MatchParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatch {
    pub transform: Pose2,
    pub iterations: usize,
    pub rms_residual: f64,
    pub pair_count: usize,
    pub converged: bool,
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn align_pairs(src: &[Point2], dst: &[Point2]) -> Result<Pose2> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(Error::NoCorrespondences);
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Point2::default(), |a, p| a + *p) * (1.0 / n);
    let cd = dst.iter().fold(Point2::default(), |a, p| a + *p) * (1.0 / n);
    let (mut sdot, mut scross) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (*s - cs, *d - cd);
        sdot += a.dot(b);
        scross += a.cross(b);
    }
    let theta = scross.atan2(sdot);
    let rot = Pose2::new(0.0, 0.0, theta);
    let t = cd - rot.rotate(cs);
    Ok(Pose2::new(t.x, t.y, theta))
}

/// Registers `source` onto `target` by nearest-point pairing, with the same
/// rejection schedule and stopping rule as the line-based matcher.
pub fn icp_points(
    source: &[Point2],
    target: &[Point2],
    initial: Pose2,
    params: &MatchParams,
) -> Result<PointMatch> {
    params.validate()?;
    let index = PointIndex::new(target.to_vec(), params.index_cell);
    let mut transform = initial;
    let mut iterations = 0;
    let mut converged = false;
    let pairs = |t: &Pose2, threshold: f64| -> (Vec<Point2>, Vec<Point2>) {
        source
            .iter()
            .filter_map(|s| {
                let p = t.transform_point(*s);
                index.nearest(p, threshold).map(|(i, _)| (p, target[i]))
            })
            .unzip()
    };
    while iterations < params.max_iterations {
        let threshold = params.rejection_at(iterations);
        iterations += 1;
        let (moved, matched) = pairs(&transform, threshold);
        let delta = align_pairs(&moved, &matched)?;
        transform = delta.compose(&transform);
        if delta.x.hypot(delta.y) < params.translation_tol
            && delta.theta.abs() < params.rotation_tol
        {
            converged = true;
            break;
        }
    }
    let (moved, matched) = pairs(
        &transform,
        params.rejection_at(iterations.saturating_sub(1)),
    );
    if moved.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    let rms = (moved
        .iter()
        .zip(&matched)
        .map(|(a, b)| a.distance(*b).powi(2))
        .sum::<f64>()
        / moved.len() as f64)
        .sqrt();
    Ok(PointMatch {
        transform,
        iterations,
        rms_residual: rms,
        pair_count: moved.len(),
        converged,
    })
}
