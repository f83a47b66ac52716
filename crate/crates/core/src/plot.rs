//! Minimal SVG rendering of grids, polylines, trajectories and graphs.

use std::fmt::Write as _;

use crate::geometry::{BoundaryKind, Point2, Polyline, Pose2};
use crate::grid::{CellMask, GridConfig};
use crate::pose_graph::{EdgeKind, PoseGraph};
use crate::vectorize::Lvm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub stroke: &'static str,
    pub width: f64,
    pub opacity: f64,
}

impl Style {
    pub const fn new(stroke: &'static str, width: f64) -> Self {
        Self {
            stroke,
            width,
            opacity: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Path(Vec<Point2>, Style),
    Square(Point2, f64, &'static str),
    Dot(Point2, f64, &'static str),
}

/// Accumulates world-frame shapes; the view box is fitted on output.
#[derive(Debug, Clone, Default)]
pub struct Plot {
    shapes: Vec<Shape>,
    pub title: Option<String>,
}

impl Plot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn path(&mut self, pts: Vec<Point2>, style: Style) -> &mut Self {
        if pts.len() >= 2 {
            self.shapes.push(Shape::Path(pts, style));
        }
        self
    }

    pub fn polyline(&mut self, line: &Polyline, pose: &Pose2, style: Style) -> &mut Self {
        self.path(
            line.nodes()
                .iter()
                .map(|p| pose.transform_point(*p))
                .collect(),
            style,
        )
    }

    /// Road boundaries in `road`, infinite boundaries dashed grey.
    pub fn lvm(&mut self, lvm: &Lvm, pose: &Pose2, road: Style) -> &mut Self {
        for line in &lvm.polylines {
            let style = match line.kind() {
                BoundaryKind::RoadBoundary => road,
                BoundaryKind::InfiniteBoundary => Style {
                    opacity: 0.35,
                    ..Style::new("#888888", road.width * 0.5)
                },
            };
            self.polyline(line, pose, style);
        }
        self
    }

    pub fn mask(
        &mut self,
        mask: &CellMask,
        config: &GridConfig,
        pose: &Pose2,
        fill: &'static str,
    ) -> &mut Self {
        for (r, c) in mask.iter_set() {
            let p = pose.transform_point(config.cell_center(r, c));
            self.shapes.push(Shape::Square(p, config.resolution, fill));
        }
        self
    }

    pub fn dot(&mut self, p: Point2, radius: f64, fill: &'static str) -> &mut Self {
        self.shapes.push(Shape::Dot(p, radius, fill));
        self
    }

    pub fn trajectory(&mut self, poses: &[Pose2], style: Style) -> &mut Self {
        self.path(poses.iter().map(Pose2::translation).collect(), style)
    }

    /// Nodes as dots, odometry edges thin, matching edges highlighted.
    pub fn graph(&mut self, graph: &PoseGraph) -> &mut Self {
        let poses = graph.poses();
        for e in &graph.edges {
            let style = match e.kind {
                EdgeKind::Odometry => Style::new("#1f77b4", 0.3),
                EdgeKind::Matching => Style::new("#d62728", 0.6),
            };
            self.path(
                vec![poses[e.from].translation(), poses[e.to].translation()],
                style,
            );
        }
        for p in &poses {
            self.dot(p.translation(), 0.6, "#1f77b4");
        }
        self
    }

    fn bounds(&self) -> Option<(Point2, Point2)> {
        let mut pts = self.shapes.iter().flat_map(|s| match s {
            Shape::Path(p, _) => p.clone(),
            Shape::Square(p, _, _) | Shape::Dot(p, _, _) => vec![*p],
        });
        let first = pts.next()?;
        Some(pts.fold((first, first), |(lo, hi), p| {
            (
                Point2::new(lo.x.min(p.x), lo.y.min(p.y)),
                Point2::new(hi.x.max(p.x), hi.y.max(p.y)),
            )
        }))
    }

    /// SVG document with y pointing up in world coordinates.
    pub fn to_svg(&self) -> String {
        let (lo, hi) = self
            .bounds()
            .unwrap_or((Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)));
        let margin = 0.02 * (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
        let (w, h) = (hi.x - lo.x + 2.0 * margin, hi.y - lo.y + 2.0 * margin);
        let px = 1000.0;
        let scale = px / w.max(h);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{:.3} {:.3} {:.3} {:.3}">"#,
            w * scale,
            h * scale,
            lo.x - margin,
            -(hi.y + margin),
            w,
            h
        );
        let _ = writeln!(
            s,
            r#"<rect x="{:.3}" y="{:.3}" width="{w:.3}" height="{h:.3}" fill="white"/>"#,
            lo.x - margin,
            -(hi.y + margin)
        );
        if let Some(t) = &self.title {
            let _ = writeln!(
                s,
                r#"<text x="{:.3}" y="{:.3}" font-size="{:.3}">{}</text>"#,
                lo.x,
                -(hi.y + margin * 0.3),
                margin * 0.6,
                escape(t)
            );
        }
        for shape in &self.shapes {
            match shape {
                Shape::Path(pts, st) => {
                    let d: Vec<String> = pts
                        .iter()
                        .map(|p| format!("{:.3},{:.3}", p.x, -p.y))
                        .collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{:.3}" stroke-opacity="{}"/>"#,
                        d.join(" "),
                        st.stroke,
                        st.width,
                        st.opacity
                    );
                }
                Shape::Square(p, size, fill) => {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.3}" y="{:.3}" width="{size:.3}" height="{size:.3}" fill="{fill}"/>"#,
                        p.x - size / 2.0,
                        -p.y - size / 2.0
                    );
                }
                Shape::Dot(p, r, fill) => {
                    let _ = writeln!(
                        s,
                        r#"<circle cx="{:.3}" cy="{:.3}" r="{r:.3}" fill="{fill}"/>"#,
                        p.x, -p.y
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
