//! Merging of overlapping, registered polylines into the global vector map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersect_segments, Point2, Polyline, SegmentIntersection, NODE_EPS};

/// Default proximity buffer for overlap and stitching (m).
pub const DEFAULT_BUFFER: f64 = 0.5;

/// Inclusive node index ranges of each polyline lying within the buffer of
/// the other.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapHint {
    pub a_nodes: Option<(usize, usize)>,
    pub b_nodes: Option<(usize, usize)>,
}

impl OverlapHint {
    pub fn overlaps(&self) -> bool {
        self.a_nodes.is_some() || self.b_nodes.is_some()
    }
}

fn proximate_range(nodes: &[Point2], other: &Polyline, buffer: f64) -> Option<(usize, usize)> {
    let near = |p: &Point2| other.distance_to(*p) <= buffer;
    let lo = nodes.iter().position(near)?;
    let hi = nodes.iter().rposition(near)?;
    Some((lo, hi))
}

pub fn find_overlaps(a: &Polyline, b: &Polyline, buffer: f64) -> OverlapHint {
    OverlapHint {
        a_nodes: proximate_range(a.nodes(), b, buffer),
        b_nodes: proximate_range(b.nodes(), a, buffer),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub point: Point2,
    /// Segment index on `a`.
    pub a_segment: usize,
    /// Segment index on `b`.
    pub b_segment: usize,
    /// Arc length of `point` along `a`.
    pub a_arc: f64,
}

fn bbox_apart(p0: Point2, p1: Point2, q0: Point2, q1: Point2) -> bool {
    p0.x.max(p1.x) < q0.x.min(q1.x) - NODE_EPS
        || q0.x.max(q1.x) < p0.x.min(p1.x) - NODE_EPS
        || p0.y.max(p1.y) < q0.y.min(q1.y) - NODE_EPS
        || q0.y.max(q1.y) < p0.y.min(p1.y) - NODE_EPS
}

/// All segment-segment intersections of `a` and `b`, collinear overlaps
/// contributing both overlap ends, ordered by arc length along `a` with
/// coincident points merged.
pub fn intersect_polylines(a: &Polyline, b: &Polyline) -> Vec<Crossing> {
    let arcs = a.arc_lengths();
    let mut out = Vec::new();
    for (i, (p0, p1)) in a.segments().enumerate() {
        for (j, (q0, q1)) in b.segments().enumerate() {
            if bbox_apart(p0, p1, q0, q1) {
                continue;
            }
            let seg_len = p0.distance(p1);
            let mut push = |point: Point2, t: f64| {
                out.push(Crossing {
                    point,
                    a_segment: i,
                    b_segment: j,
                    a_arc: arcs[i] + t * seg_len,
                })
            };
            match intersect_segments(p0, p1, q0, q1) {
                SegmentIntersection::None => {}
                SegmentIntersection::Point { point, t, .. } => push(point, t),
                SegmentIntersection::Overlap { start, end, t0, t1 } => {
                    push(start, t0);
                    push(end, t1);
                }
            }
        }
    }
    out.sort_by(|x, y| x.a_arc.total_cmp(&y.a_arc));
    out.dedup_by(|x, y| x.point.distance(y.point) <= NODE_EPS);
    out
}

/// Arc length along `line` of the projection of `p`.
fn arc_of(line: &Polyline, arcs: &[f64], p: Point2) -> f64 {
    let (_, seg, foot) = line.project(p);
    arcs[seg] + line.nodes()[seg].distance(foot)
}

fn tangent_at(line: &Polyline, p: Point2) -> Point2 {
    let (_, seg, _) = line.project(p);
    let (a, b) = line.segment(seg);
    (b - a) * (1.0 / a.distance(b))
}

/// Exact crossings plus, for each polyline end lying within `buffer` of the
/// other polyline's interior, the midpoint of that end and its foot on the
/// other. Feet landing on the other's end nodes are skipped so that gaps
/// between disjoint polylines are never bridged.
pub fn stitch_points(a: &Polyline, b: &Polyline, buffer: f64) -> Vec<Point2> {
    let mut pts: Vec<Point2> = intersect_polylines(a, b)
        .into_iter()
        .map(|c| c.point)
        .collect();
    for (line, other) in [(a, b), (b, a)] {
        let nodes = line.nodes();
        let ends = [other.nodes()[0], other.nodes()[other.len() - 1]];
        for end in [nodes[0], nodes[nodes.len() - 1]] {
            let (d, _, foot) = other.project(end);
            if d <= buffer && ends.iter().all(|e| e.distance(foot) > NODE_EPS) {
                pts.push(end.lerp(foot, 0.5));
            }
        }
    }
    pts
}

/// Nodes of `line` with arc length strictly inside `(lo, hi)`.
fn nodes_between<'a>(
    line: &'a Polyline,
    arcs: &'a [f64],
    lo: f64,
    hi: f64,
) -> impl Iterator<Item = Point2> + 'a {
    line.nodes()
        .iter()
        .zip(arcs)
        .filter(move |(_, s)| **s > lo + NODE_EPS && **s < hi - NODE_EPS)
        .map(|(p, _)| *p)
}

/// Joins `a` and `b` through `stitches`: the lead-in comes from whichever
/// polyline reaches further back, the stretches between stitches alternate
/// between the two, and the tail follows whichever continues further.
pub fn concatenate(a: &Polyline, b: &Polyline, stitches: &[Point2]) -> Result<Polyline> {
    if a.kind() != b.kind() {
        return Err(Error::KindMismatch);
    }
    if stitches.is_empty() {
        return Err(Error::NoIntersections);
    }
    let along: f64 = stitches
        .iter()
        .map(|p| tangent_at(a, *p).dot(tangent_at(b, *p)))
        .sum();
    let b = if along < 0.0 { b.reversed() } else { b.clone() };
    let (arcs_a, arcs_b) = (a.arc_lengths(), b.arc_lengths());

    let mut keyed: Vec<(f64, f64, Point2)> = stitches
        .iter()
        .map(|p| (arc_of(a, &arcs_a, *p), arc_of(&b, &arcs_b, *p), *p))
        .collect();
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut chain: Vec<(f64, f64, Point2)> = Vec::with_capacity(keyed.len());
    for k in keyed {
        match chain.last() {
            Some(last) if k.0 <= last.0 + NODE_EPS || k.1 <= last.1 + NODE_EPS => {}
            _ => chain.push(k),
        }
    }
    if chain.is_empty() {
        return Err(Error::NoIntersections);
    }

    let lines = [(a, &arcs_a), (&b, &arcs_b)];
    let pos = |s: &(f64, f64, Point2), which: usize| if which == 0 { s.0 } else { s.1 };
    let first = chain[0];
    let last = chain[chain.len() - 1];

    let lead = if first.1 > first.0 { 1 } else { 0 };
    let (line, arcs) = lines[lead];
    let mut out: Vec<Point2> =
        nodes_between(line, arcs, f64::NEG_INFINITY, pos(&first, lead)).collect();
    out.push(first.2);

    let mut which = 1 - lead;
    for w in chain.windows(2) {
        let (line, arcs) = lines[which];
        out.extend(nodes_between(
            line,
            arcs,
            pos(&w[0], which),
            pos(&w[1], which),
        ));
        out.push(w[1].2);
        which = 1 - which;
    }

    let rem_a = arcs_a[arcs_a.len() - 1] - last.0;
    let rem_b = arcs_b[arcs_b.len() - 1] - last.1;
    let tail = if rem_b > rem_a { 1 } else { 0 };
    let (line, arcs) = lines[tail];
    out.extend(nodes_between(line, arcs, pos(&last, tail), f64::INFINITY));

    Polyline::from_points_dedup(out, a.kind())
        .ok_or_else(|| Error::InvalidPolyline("concatenation collapsed to a point".into()))
}

/// Overlap test, stitch search and concatenation in one call; `None` when
/// the polylines should stay separate.
pub fn merge(a: &Polyline, b: &Polyline, buffer: f64) -> Option<Polyline> {
    if a.kind() != b.kind() || !find_overlaps(a, b, buffer).overlaps() {
        return None;
    }
    concatenate(a, b, &stitch_points(a, b, buffer)).ok()
}

/// Global polyline map assembled by repeated merging.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorMap {
    pub polylines: Vec<Polyline>,
}

impl VectorMap {
    /// Adds `line`, folding in every existing polyline it merges with.
    pub fn insert(&mut self, line: Polyline, buffer: f64) {
        let mut line = line;
        loop {
            let hit = self
                .polylines
                .iter()
                .enumerate()
                .find_map(|(i, p)| merge(p, &line, buffer).map(|m| (i, m)));
            match hit {
                Some((i, merged)) => {
                    self.polylines.remove(i);
                    line = merged;
                }
                None => break,
            }
        }
        self.polylines.push(line);
    }

    pub fn node_count(&self) -> usize {
        self.polylines.iter().map(Polyline::len).sum()
    }

    /// Rounds every coordinate to 1e-6 m, the persisted precision.
    pub fn quantized(&self) -> VectorMap {
        let q = |v: f64| (v * 1e6).round() / 1e6;
        VectorMap {
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
        }
    }
}
