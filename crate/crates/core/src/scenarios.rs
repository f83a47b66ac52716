//! Reproducible LVM pairs with known relative pose, built from simulated
//! drives. Used by the evaluation stage and the acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Point2, Pose2};
use crate::grid::{fuse_frame, occupied_cells, CellMask, GridConfig, OccupancyGrid};
use crate::matching::baseline::icp_points;
use crate::matching::{icl_match, match_error, rotation_error, MatchParams};
use crate::simulator::{
    generate_scene, route_length, route_pose, simulate_scan, sub_seed, LidarParams, SceneKind,
    SceneParams, SceneSpec,
};
use crate::slam::{frame_evidence, lgm_to_lvms};
use crate::vectorize::{Lvm, VectorizeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairParams {
    /// Scans fused on each side of the anchor, one per metre of route.
    pub half_window: usize,
    pub noise_sigma: f64,
    pub max_offset: f64,
    /// Largest rotation offset (rad).
    pub max_rotation: f64,
    /// Driveways per side in Straight scenes.
    pub straight_driveways: usize,
    /// Corner pairs are anchored within this arc distance of the apex (m).
    pub corner_span: f64,
    pub evidence_resolution: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            half_window: 10,
            noise_sigma: 0.02,
            max_offset: 0.8,
            max_rotation: 4f64.to_radians(),
            straight_driveways: 4,
            corner_span: 12.0,
            evidence_resolution: 0.5,
        }
    }
}

/// One LVM built in its own anchor frame, with everything needed for the
/// baselines.
#[derive(Debug, Clone)]
pub struct LocalMap {
    pub anchor: Pose2,
    pub raw: Lvm,
    pub simplified: Lvm,
    pub mask: CellMask,
}

impl LocalMap {
    /// Occupied cell centres in the anchor frame.
    pub fn cell_centers(&self, config: &GridConfig) -> Vec<Point2> {
        self.mask
            .iter_set()
            .map(|(r, c)| config.cell_center(r, c))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MatchPair {
    pub kind: SceneKind,
    pub target: LocalMap,
    pub source: LocalMap,
    /// Pose of the source anchor in the target anchor frame.
    pub truth: Pose2,
}

pub fn scene_for(kind: SceneKind, params: &PairParams, seed: u64) -> Result<SceneSpec> {
    let mut sp = SceneParams::default();
    if kind == SceneKind::Straight {
        sp.driveways = params.straight_driveways;
    }
    generate_scene(kind, &sp, seed)
}

/// Fuses scans taken along the route at `arcs` into a grid anchored at
/// `anchor`, then vectorizes it.
pub fn build_local_map(
    scene: &SceneSpec,
    anchor: Pose2,
    arcs: impl IntoIterator<Item = f64>,
    noise_sigma: f64,
    seed: u64,
    evidence_resolution: f64,
) -> Result<LocalMap> {
    let cfg = GridConfig::default();
    let lidar = LidarParams::default();
    let mut lgm = OccupancyGrid::new(cfg.clone(), anchor)?;
    let inv = anchor.inverse();
    for (k, s) in arcs.into_iter().enumerate() {
        let pose = route_pose(scene, s);
        let scan = simulate_scan(scene, pose, noise_sigma, sub_seed(seed, k as u64), &lidar)?;
        let ev = frame_evidence(&scan.frame(), &cfg, evidence_resolution)?;
        match fuse_frame(&mut lgm, &ev, &cfg, &inv.compose(&pose)) {
            Ok(()) | Err(crate::Error::PoseOutOfBounds) => {}
            Err(e) => return Err(e),
        }
    }
    let (raw, simplified) = lgm_to_lvms(&lgm, &VectorizeParams::default())?;
    Ok(LocalMap {
        anchor,
        raw,
        simplified,
        mask: occupied_cells(&lgm),
    })
}

/// `count` pairs from one scene kind. Offsets are uniform in
/// `±max_offset` per axis and `±max_rotation`.
pub fn match_pairs(
    kind: SceneKind,
    count: usize,
    params: &PairParams,
    seed: u64,
) -> Result<Vec<MatchPair>> {
    let seed = sub_seed(seed, kind as u64);
    let scene = scene_for(kind, params, seed)?;
    let total = route_length(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 77));
    let w = params.half_window as f64;
    let (lo, hi) = match kind {
        SceneKind::Corner => (
            total / 2.0 - params.corner_span,
            total / 2.0 + params.corner_span,
        ),
        _ => (w + 5.0, total - w - 5.0),
    };
    (0..count)
        .map(|i| {
            let s = rng.gen_range(lo..=hi);
            let truth = Pose2::new(
                rng.gen_range(-params.max_offset..=params.max_offset),
                rng.gen_range(-params.max_offset..=params.max_offset),
                rng.gen_range(-params.max_rotation..=params.max_rotation),
            );
            let target_anchor = route_pose(&scene, s);
            let window = |phase: f64| {
                (-(params.half_window as i64)..=params.half_window as i64)
                    .map(move |k| s + k as f64 + phase)
            };
            let pair_seed = sub_seed(seed, 1000 + i as u64);
            let target = build_local_map(
                &scene,
                target_anchor,
                window(0.0),
                params.noise_sigma,
                sub_seed(pair_seed, 1),
                params.evidence_resolution,
            )?;
            let source = build_local_map(
                &scene,
                target_anchor.compose(&truth),
                window(0.5),
                params.noise_sigma,
                sub_seed(pair_seed, 2),
                params.evidence_resolution,
            )?;
            Ok(MatchPair {
                kind,
                target,
                source,
                truth,
            })
        })
        .collect()
}

/// One method's result on one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub abs_error: f64,
    pub rel_error: f64,
    /// Heading error (rad).
    pub rot_error: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub kind: SceneKind,
    pub truth: Pose2,
    pub simplified: MethodOutcome,
    pub raw: MethodOutcome,
    pub points: MethodOutcome,
}

fn outcome(
    transform: &Pose2,
    truth: &Pose2,
    iterations: usize,
    seconds: f64,
    degenerate: bool,
) -> Result<MethodOutcome> {
    let (abs_error, rel_error) = match_error(transform, truth)?;
    Ok(MethodOutcome {
        abs_error,
        rel_error,
        rot_error: rotation_error(transform, truth),
        iterations,
        seconds,
        degenerate,
    })
}

/// Runs the three registration methods from an identity guess.
pub fn evaluate_pair(
    pair: &MatchPair,
    params: &MatchParams,
    grid: &GridConfig,
) -> Result<PairOutcome> {
    let line = |src: &Lvm, dst: &Lvm| -> Result<MethodOutcome> {
        let t0 = Instant::now();
        let m = icl_match(src, dst, Pose2::identity(), params)?;
        outcome(
            &m.transform,
            &pair.truth,
            m.iterations,
            t0.elapsed().as_secs_f64(),
            m.degenerate,
        )
    };
    let simplified = line(&pair.source.simplified, &pair.target.simplified)?;
    let raw = line(&pair.source.raw, &pair.target.raw)?;
    let (src, dst) = (
        pair.source.cell_centers(grid),
        pair.target.cell_centers(grid),
    );
    let t0 = Instant::now();
    let m = icp_points(&src, &dst, Pose2::identity(), params)?;
    let points = outcome(
        &m.transform,
        &pair.truth,
        m.iterations,
        t0.elapsed().as_secs_f64(),
        false,
    )?;
    Ok(PairOutcome {
        kind: pair.kind,
        truth: pair.truth,
        simplified,
        raw,
        points,
    })
}
