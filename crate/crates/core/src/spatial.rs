//! Uniform-bucket spatial hashes for nearest segment / nearest point queries.

use std::collections::HashMap;

use crate::geometry::{clamp_to_segment, Point2};

fn bucket(p: Point2, cell: f64) -> (i64, i64) {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
}

/// Segments bucketed by bounding box.
#[derive(Debug, Clone)]
pub struct SegmentIndex<T> {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
    segments: Vec<(Point2, Point2, T)>,
}

impl<T: Copy> SegmentIndex<T> {
    pub fn new(segments: Vec<(Point2, Point2, T)>, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, (a, b, _)) in segments.iter().enumerate() {
            let lo = bucket(Point2::new(a.x.min(b.x), a.y.min(b.y)), cell);
            let hi = bucket(Point2::new(a.x.max(b.x), a.y.max(b.y)), cell);
            for bx in lo.0..=hi.0 {
                for by in lo.1..=hi.1 {
                    buckets.entry((bx, by)).or_default().push(i as u32);
                }
            }
        }
        Self {
            cell,
            buckets,
            segments,
        }
    }

    pub fn segments(&self) -> &[(Point2, Point2, T)] {
        &self.segments
    }

    /// All segments within `radius` by clamped distance, nearest first, ties
    /// by index.
    pub fn within(&self, p: Point2, radius: f64) -> Vec<(usize, f64)> {
        let lo = bucket(p - Point2::new(radius, radius), self.cell);
        let hi = bucket(p + Point2::new(radius, radius), self.cell);
        let mut ids: Vec<u32> = (lo.0..=hi.0)
            .flat_map(|bx| (lo.1..=hi.1).map(move |by| (bx, by)))
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let mut out: Vec<(usize, f64)> = ids
            .into_iter()
            .filter_map(|i| {
                let (a, b, _) = self.segments[i as usize];
                let d = clamp_to_segment(p, a, b).0;
                (d <= radius).then_some((i as usize, d))
            })
            .collect();
        out.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        out
    }

    /// Nearest segment by clamped distance among those within `radius`.
    /// Ties resolve to the lowest segment index.
    pub fn nearest(&self, p: Point2, radius: f64) -> Option<(usize, f64)> {
        let lo = bucket(p - Point2::new(radius, radius), self.cell);
        let hi = bucket(p + Point2::new(radius, radius), self.cell);
        let mut best: Option<(usize, f64)> = None;
        for bx in lo.0..=hi.0 {
            for by in lo.1..=hi.1 {
                let Some(ids) = self.buckets.get(&(bx, by)) else {
                    continue;
                };
                for &i in ids {
                    let (a, b, _) = self.segments[i as usize];
                    let d = clamp_to_segment(p, a, b).0;
                    if d > radius {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bi, bd)) => d < bd || (d == bd && (i as usize) < bi),
                    };
                    if better {
                        best = Some((i as usize, d));
                    }
                }
            }
        }
        best
    }
}

/// Points bucketed on a uniform grid.
#[derive(Debug, Clone)]
pub struct PointIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
    points: Vec<Point2>,
}

impl PointIndex {
    pub fn new(points: Vec<Point2>, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(bucket(*p, cell)).or_default().push(i as u32);
        }
        Self {
            cell,
            buckets,
            points,
        }
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn nearest(&self, p: Point2, radius: f64) -> Option<(usize, f64)> {
        let lo = bucket(p - Point2::new(radius, radius), self.cell);
        let hi = bucket(p + Point2::new(radius, radius), self.cell);
        let mut best: Option<(usize, f64)> = None;
        for bx in lo.0..=hi.0 {
            for by in lo.1..=hi.1 {
                let Some(ids) = self.buckets.get(&(bx, by)) else {
                    continue;
                };
                for &i in ids {
                    let d = p.distance(self.points[i as usize]);
                    if d <= radius
                        && best.is_none_or(|(bi, bd)| d < bd || (d == bd && (i as usize) < bi))
                    {
                        best = Some((i as usize, d));
                    }
                }
            }
        }
        best
    }
}
