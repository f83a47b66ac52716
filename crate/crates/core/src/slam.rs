//! Offline mapping pipeline: dead reckoning, per-node local grid maps,
//! vectorization, registration, loop closure and graph optimization.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::concatenate::{VectorMap, DEFAULT_BUFFER};
use crate::error::{Error, Result};
use crate::geometry::{transform_polyline, wrap_angle, BoundaryKind, Pose2};
use crate::grid::{
    fuse_frame, occupied_cells, segment_frame, FrameEvidence, GridConfig, OccupancyGrid, ScanFrame,
};
use crate::matching::{icl_match, MatchParams};
use crate::odometry::{relative_pose, run, state_at, MotionSample, OdoState, OdometryParams};
use crate::pose_graph::{
    detect_loop_candidates, optimize, try_close_loop, EdgeKind, GraphEdge, LoopParams,
    OptimizeParams, OptimizeStats, PoseGraph,
};
use crate::vectorize::{vectorize, virtual_scan_evidence, Lvm, VectorizeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamParams {
    /// Travel between graph nodes (m).
    pub node_spacing: f64,
    /// Heading change that also triggers a new node (deg).
    pub node_turn: f64,
    /// Frames within this travel distance of a node are fused into its LGM (m).
    pub fusion_window: f64,
    /// Angular resolution of the per-frame virtual scan used to derive
    /// free-space evidence (deg).
    pub evidence_resolution: f64,
    /// Also add matching edges between consecutive nodes. Off by default:
    /// over one node spacing the odometry is the more accurate constraint.
    pub sequential_matching: bool,
    /// Largest mean residual accepted for a sequential matching edge (m).
    pub sequential_error_threshold: f64,
    /// Loop-closure candidates tried per node, nearest first.
    pub max_loop_candidates: usize,
    pub merge_buffer: f64,
}

impl Default for SlamParams {
    fn default() -> Self {
        Self {
            node_spacing: 10.0,
            node_turn: 30.0,
            fusion_window: 40.0,
            evidence_resolution: 0.5,
            sequential_matching: false,
            sequential_error_threshold: 0.2,
            max_loop_candidates: 3,
            merge_buffer: DEFAULT_BUFFER,
        }
    }
}

/// Everything the pipeline needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub vectorize: VectorizeParams,
    pub odometry: OdometryParams,
    pub matching: MatchParams,
    pub loop_closure: LoopParams,
    pub optimize: OptimizeParams,
    pub slam: SlamParams,
}

/// Random access to the scans of a drive.
pub trait ScanSource {
    fn len(&self) -> usize;
    fn frame(&self, i: usize) -> Result<ScanFrame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ScanSource for [ScanFrame] {
    fn len(&self) -> usize {
        <[ScanFrame]>::len(self)
    }

    fn frame(&self, i: usize) -> Result<ScanFrame> {
        self.get(i).cloned().ok_or(Error::EmptyFrame)
    }
}

impl ScanSource for Vec<ScanFrame> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, i: usize) -> Result<ScanFrame> {
        self.as_slice().frame(i)
    }
}

/// Dead-reckoned state at every scan.
pub fn scan_states(states: &[OdoState], scan_times: &[f64]) -> Vec<OdoState> {
    scan_times
        .iter()
        .map(|t| state_at(states, *t).expect("non-empty trajectory"))
        .collect()
}

/// Segmentation followed by virtual-scan preprocessing for one frame. An
/// empty frame yields no evidence.
pub fn frame_evidence(
    frame: &ScanFrame,
    grid: &GridConfig,
    resolution_deg: f64,
) -> Result<FrameEvidence> {
    match segment_frame(frame, grid) {
        Ok(mask) => virtual_scan_evidence(&mask, grid, resolution_deg.to_radians()),
        Err(Error::EmptyFrame) => Ok(FrameEvidence::default()),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    /// Scan the node is anchored at.
    pub scan: usize,
    pub timestamp: f64,
    /// Dead-reckoned pose.
    pub pose: Pose2,
    /// Odometer reading (m).
    pub distance: f64,
    /// Heading variance of the filter at the node.
    pub heading_variance: f64,
}

impl NodeRecord {
    pub fn state(&self) -> OdoState {
        OdoState {
            pose: self.pose,
            heading_variance: self.heading_variance,
            last_timestamp: self.timestamp,
            distance: self.distance,
        }
    }
}

/// Picks node scans: the first scan, then whenever travel since the last
/// node reaches `node_spacing` or heading change reaches `node_turn`.
pub fn select_nodes(states: &[OdoState], params: &SlamParams) -> Vec<NodeRecord> {
    let mut out: Vec<NodeRecord> = Vec::new();
    for (i, s) in states.iter().enumerate() {
        let take = match out.last() {
            None => true,
            Some(last) => {
                s.distance - last.distance >= params.node_spacing
                    || wrap_angle(s.pose.theta - last.pose.theta).abs()
                        >= params.node_turn.to_radians()
            }
        };
        if take {
            out.push(NodeRecord {
                id: out.len(),
                scan: i,
                timestamp: s.last_timestamp,
                pose: s.pose,
                distance: s.distance,
                heading_variance: s.heading_variance,
            });
        }
    }
    out
}

/// Fuses every frame within the window around `node` into a grid anchored
/// at the node's dead-reckoned pose.
pub fn fuse_node(
    node: &NodeRecord,
    states: &[OdoState],
    evidence: &[FrameEvidence],
    grid: &GridConfig,
    params: &SlamParams,
) -> Result<OccupancyGrid> {
    let mut lgm = OccupancyGrid::new(grid.clone(), node.pose)?;
    let inv = node.pose.inverse();
    for (s, ev) in states.iter().zip(evidence) {
        if (s.distance - node.distance).abs() > params.fusion_window {
            continue;
        }
        match fuse_frame(&mut lgm, ev, grid, &inv.compose(&s.pose)) {
            Ok(()) | Err(Error::PoseOutOfBounds) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(lgm)
}

/// Raw and simplified LVMs of an LGM, rounded to the persisted precision.
pub fn lgm_to_lvms(lgm: &OccupancyGrid, params: &VectorizeParams) -> Result<(Lvm, Lvm)> {
    let (raw, simplified) = vectorize(&occupied_cells(lgm), &lgm.config, lgm.anchor, params)?;
    Ok((raw.quantized(), simplified.quantized()))
}

fn covariance_information(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let info = cov.try_inverse().unwrap_or_else(Matrix3::identity);
    (info + info.transpose()) * 0.5
}

/// Counters describing one pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlamReport {
    pub nodes: usize,
    pub odometry_edges: usize,
    pub sequential_edges: usize,
    pub degenerate_sequential: usize,
    pub loop_candidates_tried: usize,
    pub loop_closures: usize,
    pub optimizations: Vec<OptimizeStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamOutput {
    pub graph: PoseGraph,
    pub nodes: Vec<NodeRecord>,
    pub lvms: Vec<Lvm>,
    pub map: VectorMap,
    pub report: SlamReport,
}

impl SlamOutput {
    pub fn optimized_poses(&self) -> Vec<Pose2> {
        self.graph.poses()
    }
}

/// Graph construction, loop closure and optimization over per-node LVMs
/// (simplified, in node frames).
pub fn build_and_optimize(
    nodes: &[NodeRecord],
    lvms: &[Lvm],
    config: &PipelineConfig,
) -> Result<(PoseGraph, SlamReport)> {
    if nodes.is_empty() {
        return Err(Error::InvalidParams("no graph nodes".into()));
    }
    let mut graph = PoseGraph::new();
    let mut report = SlamReport {
        nodes: nodes.len(),
        ..SlamReport::default()
    };
    for n in nodes {
        graph.add_node(n.pose);
    }
    for w in nodes.windows(2) {
        let (z, cov) = relative_pose(&w[0].state(), &w[1].state(), &config.odometry);
        graph.add_edge(GraphEdge::new(
            w[0].id,
            w[1].id,
            z,
            covariance_information(&cov),
            EdgeKind::Odometry,
        ))?;
        report.odometry_edges += 1;
        if !config.slam.sequential_matching {
            continue;
        }
        let (src, dst) = (&lvms[w[1].id], &lvms[w[0].id]);
        let m = match icl_match(src, dst, z, &config.matching) {
            Ok(m) => m,
            Err(Error::NoCorrespondences) | Err(Error::InvalidParams(_)) => continue,
            Err(e) => return Err(e),
        };
        if m.degenerate {
            report.degenerate_sequential += 1;
            continue;
        }
        if m.converged
            && m.mean_abs_residual <= config.slam.sequential_error_threshold
            && m.correspondence_count >= config.loop_closure.min_correspondences
        {
            let edge = GraphEdge::new(
                w[0].id,
                w[1].id,
                m.transform,
                m.information_matrix(),
                EdgeKind::Matching,
            );
            if graph.add_edge(edge).is_ok() {
                report.sequential_edges += 1;
            }
        }
    }
    report
        .optimizations
        .push(optimize(&mut graph, &config.optimize)?);

    let lp = &config.loop_closure;
    for cur in 0..nodes.len() {
        let candidates: Vec<usize> =
            detect_loop_candidates(&graph, cur, lp.radius, lp.min_index_gap)
                .into_iter()
                .filter(|c| *c < cur)
                .take(config.slam.max_loop_candidates)
                .collect();
        for cand in candidates {
            report.loop_candidates_tried += 1;
            if let Some(edge) = try_close_loop(&graph, lvms, cur, cand, lp) {
                graph.add_edge(edge)?;
                report.loop_closures += 1;
                report
                    .optimizations
                    .push(optimize(&mut graph, &config.optimize)?);
                break;
            }
        }
    }
    Ok((graph, report))
}

/// World-frame vector map from node LVMs placed at `poses`.
pub fn assemble_map(lvms: &[Lvm], poses: &[Pose2], buffer: f64) -> VectorMap {
    let mut map = VectorMap::default();
    for (lvm, pose) in lvms.iter().zip(poses) {
        for line in lvm
            .polylines
            .iter()
            .filter(|l| l.kind() == BoundaryKind::RoadBoundary)
        {
            map.insert(transform_polyline(pose, line), buffer);
        }
    }
    map.quantized()
}

/// Runs the whole pipeline from raw motion and scans.
pub fn run_pipeline(
    motion: &[MotionSample],
    initial: OdoState,
    scans: &dyn ScanSource,
    scan_times: &[f64],
    config: &PipelineConfig,
) -> Result<SlamOutput> {
    if scans.len() != scan_times.len() {
        return Err(Error::InvalidParams(
            "scan count and scan time count differ".into(),
        ));
    }
    let states = run(initial, motion, &config.odometry)?;
    let at_scans = scan_states(&states, scan_times);
    let evidence = (0..scans.len())
        .map(|i| {
            frame_evidence(
                &scans.frame(i)?,
                &config.grid,
                config.slam.evidence_resolution,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let nodes = select_nodes(&at_scans, &config.slam);
    let lvms = nodes
        .iter()
        .map(|n| {
            let lgm = fuse_node(n, &at_scans, &evidence, &config.grid, &config.slam)?;
            Ok(lgm_to_lvms(&lgm, &config.vectorize)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(nodes, lvms, config)
}

/// Graph stage onward, shared by the monolithic run and the staged CLI.
pub fn finish(
    nodes: Vec<NodeRecord>,
    lvms: Vec<Lvm>,
    config: &PipelineConfig,
) -> Result<SlamOutput> {
    let (graph, report) = build_and_optimize(&nodes, &lvms, config)?;
    let map = assemble_map(&lvms, &graph.poses(), config.slam.merge_buffer);
    Ok(SlamOutput {
        graph,
        nodes,
        lvms,
        map,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub mean: f64,
    pub max: f64,
    pub rmse: f64,
}

/// Position errors of `estimate` against `truth`, pairwise.
pub fn trajectory_error(estimate: &[Pose2], truth: &[Pose2]) -> Result<TrajectoryError> {
    if estimate.is_empty() || estimate.len() != truth.len() {
        return Err(Error::InvalidParams(
            "trajectories must be non-empty and of equal length".into(),
        ));
    }
    let errs: Vec<f64> = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| e.translation().distance(t.translation()))
        .collect();
    let n = errs.len() as f64;
    Ok(TrajectoryError {
        mean: errs.iter().sum::<f64>() / n,
        max: errs.iter().copied().fold(0.0, f64::max),
        rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
    })
}
