//! Pose graph with odometry and matching constraints, loop-closure search
//! and a damped Gauss-Newton optimizer over an envelope Cholesky solve.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2, Pose2};
use crate::matching::{icl_match, MatchParams};
use crate::vectorize::Lvm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Matching,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub pose: Pose2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Pose of `to` in the frame of `from`.
    pub measurement: Pose2,
    pub information: [[f64; 3]; 3],
    pub kind: EdgeKind,
}

impl GraphEdge {
    pub fn new(
        from: usize,
        to: usize,
        measurement: Pose2,
        information: Matrix3<f64>,
        kind: EdgeKind,
    ) -> Self {
        Self {
            from,
            to,
            measurement,
            information: std::array::from_fn(|r| std::array::from_fn(|c| information[(r, c)])),
            kind,
        }
    }

    pub fn information_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.information[r][c])
    }
}

fn check_information(info: &Matrix3<f64>) -> bool {
    let scale = info.abs().max().max(1e-300);
    info.iter().all(|v| v.is_finite())
        && (info - info.transpose()).abs().max() <= 1e-9 * scale
        && info.cholesky().is_some()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node and returns its id.
    pub fn add_node(&mut self, pose: Pose2) -> usize {
        let id = self.nodes.len();
        self.nodes.push(GraphNode { id, pose });
        id
    }

    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<()> {
        let n = self.nodes.len();
        if edge.from == edge.to || edge.from >= n || edge.to >= n {
            return Err(Error::InvalidParams(format!(
                "edge {} -> {} does not join two distinct existing nodes",
                edge.from, edge.to
            )));
        }
        if !check_information(&edge.information_matrix()) {
            return Err(Error::NonPositiveDefinite {
                edge: self.edges.len(),
            });
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn poses(&self) -> Vec<Pose2> {
        self.nodes.iter().map(|n| n.pose).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .edges
            .iter()
            .position(|e| !check_information(&e.information_matrix()))
        {
            return Err(Error::NonPositiveDefinite { edge: i });
        }
        if self.nodes.is_empty() {
            return Ok(());
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.from].push(e.to);
            adj[e.to].push(e.from);
        }
        let mut seen = vec![false; self.nodes.len()];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if seen.iter().all(|s| *s) {
            Ok(())
        } else {
            Err(Error::DisconnectedGraph)
        }
    }

    /// Sum of squared Mahalanobis residuals over all edges.
    pub fn objective(&self) -> f64 {
        objective_at(&self.edges, &self.poses())
    }
}

/// SE(2) error `measurement⁻¹ ⊕ (xi⁻¹ ⊕ xj)` as `(dx, dy, dθ)`.
pub fn residual(edge: &GraphEdge, xi: &Pose2, xj: &Pose2) -> Vector3<f64> {
    let e = edge.measurement.inverse().compose(&xi.between(xj));
    Vector3::new(e.x, e.y, wrap_angle(e.theta))
}

/// Residual and its Jacobians with respect to additive `(x, y, θ)`
/// perturbations of `xi` and `xj`.
pub fn linearize_edge(
    edge: &GraphEdge,
    xi: &Pose2,
    xj: &Pose2,
) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let dt = xj.translation() - xi.translation();
    let rz_t = Pose2::new(0.0, 0.0, -edge.measurement.theta);
    let ri_t = Pose2::new(0.0, 0.0, -xi.theta);
    let rzi_t = rz_t.compose(&ri_t);
    // columns of (R_z R_i)ᵀ
    let cx = rzi_t.rotate(Point2::new(1.0, 0.0));
    let cy = rzi_t.rotate(Point2::new(0.0, 1.0));
    let dth = -rzi_t.rotate(dt.perp());
    let a = Matrix3::new(-cx.x, -cy.x, dth.x, -cx.y, -cy.y, dth.y, 0.0, 0.0, -1.0);
    let b = Matrix3::new(cx.x, cy.x, 0.0, cx.y, cy.y, 0.0, 0.0, 0.0, 1.0);
    (residual(edge, xi, xj), a, b)
}

fn objective_at(edges: &[GraphEdge], poses: &[Pose2]) -> f64 {
    edges
        .iter()
        .map(|e| {
            let r = residual(e, &poses[e.from], &poses[e.to]);
            (r.transpose() * e.information_matrix() * r)[0]
        })
        .sum()
}

/// Symmetric positive-definite matrix in envelope (skyline) storage: row `i`
/// holds columns `first[i]..=i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Skyline {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl Skyline {
    /// Zero matrix whose row `i` may be nonzero from column `first[i]` on.
    pub fn zeros(first: Vec<usize>) -> Self {
        let rows = first
            .iter()
            .enumerate()
            .map(|(i, f)| vec![0.0; i + 1 - f])
            .collect();
        Self { first, rows }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Entry `(i, j)` of the lower triangle; zero outside the envelope.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    /// Adds `v` at `(i, j)`, `j ≤ i`, which must lie inside the envelope.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i]);
        self.rows[i][j - self.first[i]] += v;
    }

    /// Stored entry count.
    pub fn envelope_size(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// In-place Cholesky factorization `A = L Lᵀ`; returns `Err` with the
    /// failing pivot if the matrix is not positive definite.
    pub fn factor(mut self) -> std::result::Result<SkylineCholesky, usize> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let mut s = self.rows[i][j - fi];
                for k in k0..j {
                    s -= self.rows[i][k - fi] * self.rows[j][k - fj];
                }
                if j < i {
                    s /= self.rows[j][j - fj];
                } else {
                    if !(s > 0.0) {
                        return Err(i);
                    }
                    s = s.sqrt();
                }
                self.rows[i][j - fi] = s;
            }
        }
        Ok(SkylineCholesky { l: self })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkylineCholesky {
    l: Skyline,
}

impl SkylineCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = self.l.first[i];
            let row = &self.l.rows[i];
            let s: f64 = (fi..i).map(|k| row[k - fi] * y[k]).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.l.first[i];
            let row = &self.l.rows[i];
            y[i] /= row[i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= row[k - fi] * yi;
            }
        }
        y
    }
}

/// Gauss-Newton normal equations over the free nodes (all but node 0), in
/// envelope storage. Returns `(H, g)` with `g = Jᵀ Ω r`.
pub fn normal_equations(graph: &PoseGraph) -> (Skyline, Vec<f64>) {
    let n = graph.nodes.len().saturating_sub(1);
    let mut first: Vec<usize> = (0..3 * n).map(|i| i - i % 3).collect();
    for e in &graph.edges {
        if e.from == 0 || e.to == 0 {
            continue;
        }
        let (lo, hi) = (e.from.min(e.to) - 1, e.from.max(e.to) - 1);
        for f in &mut first[3 * hi..3 * hi + 3] {
            *f = (*f).min(3 * lo);
        }
    }
    let mut h = Skyline::zeros(first);
    let mut g = vec![0.0; 3 * n];
    let poses = graph.poses();
    for e in &graph.edges {
        let (r, a, b) = linearize_edge(e, &poses[e.from], &poses[e.to]);
        let info = e.information_matrix();
        let blocks = [(e.from, a), (e.to, b)];
        for &(u, ju) in &blocks {
            if u == 0 {
                continue;
            }
            let gu = ju.transpose() * info * r;
            for k in 0..3 {
                g[3 * (u - 1) + k] += gu[k];
            }
            for &(v, jv) in &blocks {
                if v == 0 || v > u {
                    continue;
                }
                let huv = ju.transpose() * info * jv;
                for p in 0..3 {
                    for q in 0..3 {
                        let (i, j) = (3 * (u - 1) + p, 3 * (v - 1) + q);
                        if j <= i && (u != v || q <= p) {
                            h.add(i, j, huv[(p, q)]);
                        }
                    }
                }
            }
        }
    }
    (h, g)
}

/// Solves `(H + λI) δ = −g` and returns one additive increment per node,
/// zero for the anchored node 0.
pub fn linear_step(graph: &PoseGraph, lambda: f64) -> Result<Vec<Vector3<f64>>> {
    let (mut h, g) = normal_equations(graph);
    for i in 0..h.dim() {
        h.add(i, i, lambda);
    }
    let chol = h.factor().map_err(|_| Error::SingularSystem {
        condition: f64::INFINITY,
    })?;
    let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
    let d = chol.solve(&rhs);
    Ok(std::iter::once(Vector3::zeros())
        .chain(d.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])))
        .collect())
}

fn apply(poses: &[Pose2], step: &[Vector3<f64>]) -> Vec<Pose2> {
    poses
        .iter()
        .zip(step)
        .map(|(p, d)| Pose2::new(p.x + d[0], p.y + d[1], p.theta + d[2]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeParams {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-9,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeStats {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
    /// False when the iteration budget ran out before the objective settled.
    pub converged: bool,
}

/// Damped iterative relinearization with node 0 held fixed. The damping is
/// multiplied by ten after a rejected step and divided by ten after an
/// accepted one.
pub fn optimize(graph: &mut PoseGraph, params: &OptimizeParams) -> Result<OptimizeStats> {
    graph.validate()?;
    let initial = graph.objective();
    let mut stats = OptimizeStats {
        initial_objective: initial,
        final_objective: initial,
        iterations: 0,
        history: vec![initial],
        converged: true,
    };
    if graph.nodes.len() < 2 {
        return Ok(stats);
    }
    let mut lambda = params.initial_damping;
    let mut current = initial;
    stats.converged = false;
    while stats.iterations < params.max_iterations {
        stats.iterations += 1;
        let step = match linear_step(graph, lambda) {
            Ok(s) => s,
            Err(_) => {
                lambda *= 10.0;
                continue;
            }
        };
        let candidate = apply(&graph.poses(), &step);
        let value = objective_at(&graph.edges, &candidate);
        if value <= current {
            for (n, p) in graph.nodes.iter_mut().zip(candidate) {
                n.pose = p;
            }
            let decrease = current - value;
            current = value;
            stats.history.push(value);
            lambda = (lambda / 10.0).max(1e-12);
            if decrease < params.tolerance {
                stats.converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            // no step lowers the objective: a minimum
            if lambda > 1e12 {
                stats.converged = true;
                break;
            }
        }
    }
    stats.final_objective = current;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopParams {
    pub radius: f64,
    pub min_index_gap: usize,
    /// Largest accepted mean absolute match residual (m).
    pub error_threshold: f64,
    pub min_correspondences: usize,
    pub matching: MatchParams,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            radius: 10.0,
            min_index_gap: 30,
            error_threshold: 0.2,
            min_correspondences: 20,
            // the seed carries the drift accumulated around the loop
            matching: MatchParams {
                initial_rejection: 3.0,
                ..MatchParams::default()
            },
        }
    }
}

/// Nodes within `radius` of `current_id` whose ids differ from it by at
/// least `min_index_gap`, nearest first.
pub fn detect_loop_candidates(
    graph: &PoseGraph,
    current_id: usize,
    radius: f64,
    min_index_gap: usize,
) -> Vec<usize> {
    let Some(cur) = graph.nodes.get(current_id) else {
        return Vec::new();
    };
    let here = cur.pose.translation();
    let mut found: Vec<(f64, usize)> = graph
        .nodes
        .iter()
        .filter(|n| n.id.abs_diff(current_id) >= min_index_gap)
        .map(|n| (n.pose.translation().distance(here), n.id))
        .filter(|(d, _)| *d <= radius)
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.into_iter().map(|(_, id)| id).collect()
}

/// Matches the LVM of `current_id` against that of `candidate_id`, seeded
/// with the graph's relative pose estimate, and returns a matching edge from
/// the candidate to the current node if the match is accepted.
pub fn try_close_loop(
    graph: &PoseGraph,
    lvms: &[Lvm],
    current_id: usize,
    candidate_id: usize,
    params: &LoopParams,
) -> Option<GraphEdge> {
    let (cur, cand) = (graph.nodes.get(current_id)?, graph.nodes.get(candidate_id)?);
    let (src, dst) = (lvms.get(current_id)?, lvms.get(candidate_id)?);
    let guess = cand.pose.between(&cur.pose);
    let m = icl_match(src, dst, guess, &params.matching).ok()?;
    let accepted = m.mean_abs_residual <= params.error_threshold
        && !m.degenerate
        && m.correspondence_count >= params.min_correspondences;
    if !accepted {
        return None;
    }
    let info = m.information_matrix();
    check_information(&info).then(|| {
        GraphEdge::new(
            candidate_id,
            current_id,
            m.transform,
            info,
            EdgeKind::Matching,
        )
    })
}
