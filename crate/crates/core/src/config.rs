//! The single configuration document: one TOML section per module plus the
//! simulator and evaluation settings. Angles in simulator and odometry
//! sections are radians; `slam.node_turn` and `slam.evidence_resolution`
//! are degrees.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::matching::MatchParams;
use crate::odometry::OdometryParams;
use crate::pose_graph::{LoopParams, OptimizeParams};
use crate::scenarios::PairParams;
use crate::simulator::{DriveParams, LidarParams, NoiseParams, SceneParams};
use crate::slam::{PipelineConfig, SlamParams};
use crate::vectorize::VectorizeParams;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub vectorize: VectorizeParams,
    pub odometry: OdometryParams,
    pub matching: MatchParams,
    pub loop_closure: LoopParams,
    pub optimize: OptimizeParams,
    pub slam: SlamParams,
    pub scene: SceneParams,
    pub drive: DriveParams,
    pub noise: NoiseParams,
    pub lidar: LidarParams,
    /// Matching-pair generation for the evaluation stage.
    pub pairs: PairParams,
}

impl Config {
    /// Parses `text` after applying `key.path=value` overrides. Values are
    /// TOML literals; anything that does not parse as one is taken as a
    /// string.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Config = table
            .try_into()
            .map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`, or starts from the defaults when there is none.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::InvalidParams(m) => Error::InvalidConfig(m),
            e => e,
        };
        self.grid.validate()?;
        self.matching.validate().map_err(as_config)?;
        self.loop_closure.matching.validate().map_err(as_config)?;
        let positive = [
            ("slam.node_spacing", self.slam.node_spacing),
            ("slam.evidence_resolution", self.slam.evidence_resolution),
            (
                "vectorize.angular_resolution",
                self.vectorize.angular_resolution,
            ),
            ("odometry.wheelbase", self.odometry.wheelbase),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "{k} must be positive, got {v}"
            )));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            grid: self.grid.clone(),
            vectorize: self.vectorize.clone(),
            odometry: self.odometry.clone(),
            matching: self.matching.clone(),
            loop_closure: self.loop_closure.clone(),
            optimize: self.optimize.clone(),
            slam: self.slam.clone(),
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let text = c.to_toml();
        assert!(text.contains("[grid]") && text.contains("[loop_closure.matching]"));
        assert_eq!(Config::parse(&text, &[]).unwrap(), c);
        assert_eq!(Config::parse("", &[]).unwrap(), c);
    }

    #[test]
    fn overrides_and_partial_sections() {
        let c = Config::parse(
            "[slam]\nnode_spacing = 12.5\n",
            &[
                "matching.max_iterations=7".into(),
                "scene.driveways=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.slam.node_spacing, 12.5);
        assert_eq!(c.slam.fusion_window, SlamParams::default().fusion_window);
        assert_eq!(c.matching.max_iterations, 7);
        assert_eq!(c.scene.driveways, 3);
        assert_eq!(c.pipeline().slam.node_spacing, 12.5);
    }

    #[test]
    fn bad_documents_are_rejected() {
        for (text, over) in [
            ("[gird]\nrows = 3\n", vec![]),
            ("[grid]\nrows = \"many\"\n", vec![]),
            ("", vec!["grid.resolution=-1".to_string()]),
            ("", vec!["slam".to_string()]),
            ("not toml at all [", vec![]),
        ] {
            assert!(
                matches!(Config::parse(text, &over), Err(Error::InvalidConfig(_))),
                "{text:?} {over:?}"
            );
        }
    }
}
