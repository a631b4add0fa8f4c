//! Static SVG snapshots of a scenario or a simulation log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::engine::SimulationLog;
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scene::{AgentId, AgentState, MapModel, Scenario};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Inclusive tick range; `None` means every available tick.
    pub ticks: Option<(usize, usize)>,
    /// Draw every `stride`-th tick of the range (the last is always drawn).
    pub stride: usize,
    /// Pixels per meter.
    pub scale: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            ticks: None,
            stride: 10,
            scale: 4.0,
        }
    }
}

const EGO_COLOR: &str = "#d62728";
const AGENT_COLOR: &str = "#1f77b4";
const MIN_OPACITY: f64 = 0.15;

/// Snapshots as (tick, states) in increasing tick order.
type Frames = Vec<(usize, BTreeMap<AgentId, AgentState>)>;

fn scenario_frames(s: &Scenario) -> Frames {
    let last = s
        .agents
        .iter()
        .map(|a| a.trajectory.end_tick())
        .max()
        .unwrap_or(0);
    (0..=last)
        .map(|t| {
            let states = s
                .agents
                .iter()
                .filter_map(|a| a.trajectory.at_tick(t).map(|st| (a.id.clone(), st.clone())))
                .collect();
            (t, states)
        })
        .collect()
}

fn log_frames(log: &SimulationLog) -> Frames {
    log.ticks
        .iter()
        .map(|r| (r.tick, r.states.clone()))
        .collect()
}

fn pick(frames: Frames, opts: &RenderOptions) -> Result<Frames> {
    if opts.stride == 0 {
        return Err(Error::invalid("render stride must be positive"));
    }
    if !(opts.scale > 0.0 && opts.scale.is_finite()) {
        return Err(Error::invalid("render scale must be positive"));
    }
    let (lo, hi) = match opts.ticks {
        Some((lo, hi)) if lo > hi => return Err(Error::invalid("empty tick range")),
        Some(r) => r,
        None => (0, usize::MAX),
    };
    let inside: Vec<_> = frames
        .into_iter()
        .filter(|(t, _)| *t >= lo && *t <= hi)
        .collect();
    let n = inside.len();
    Ok(inside
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % opts.stride == 0 || i + 1 == n)
        .map(|(_, f)| f)
        .collect())
}

struct View {
    min: Point2<f64>,
    max: Point2<f64>,
    scale: f64,
}

impl View {
    fn fit(map: &MapModel, frames: &Frames, scale: f64) -> Self {
        let mut pts: Vec<Point2<f64>> = Vec::new();
        for d in &map.drivable {
            pts.extend(d.outer.iter().copied());
        }
        for l in &map.lanes {
            pts.extend(l.centerline.points().iter().copied());
        }
        for (_, states) in frames {
            for s in states.values() {
                pts.extend(s.footprint().corners());
            }
        }
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min = Point2::new(min.x.min(p.x), min.y.min(p.y));
            max = Point2::new(max.x.max(p.x), max.y.max(p.y));
        }
        if !min.x.is_finite() {
            min = Point2::new(-10.0, -10.0);
            max = Point2::new(10.0, 10.0);
        }
        let pad = 5.0;
        Self {
            min: Point2::new(min.x - pad, min.y - pad),
            max: Point2::new(max.x + pad, max.y + pad),
            scale,
        }
    }

    /// Map meters to SVG user units (meters, y pointing down).
    fn xy(&self, p: Point2<f64>) -> String {
        format!("{:.3},{:.3}", p.x - self.min.x, self.max.y - p.y)
    }

    fn points(&self, pts: &[Point2<f64>]) -> String {
        pts.iter()
            .map(|&p| self.xy(p))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn svg(map: &MapModel, ego_id: &str, frames: &Frames, scale: f64) -> String {
    let view = View::fit(map, frames, scale);
    let (w, h) = (view.max.x - view.min.x, view.max.y - view.min.y);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.3}\" height=\"{:.3}\" viewBox=\"0 0 {w:.3} {h:.3}\">",
        w * view.scale,
        h * view.scale
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{w:.3}\" height=\"{h:.3}\" fill=\"#ffffff\"/>"
    );
    for d in &map.drivable {
        let mut path = String::new();
        for ring in std::iter::once(&d.outer).chain(&d.holes) {
            let _ = write!(path, "M {} Z ", view.points(ring).replace(' ', " L "));
        }
        let _ = writeln!(
            out,
            "<path class=\"drivable\" d=\"{}\" fill=\"#e6e6e6\" fill-rule=\"evenodd\"/>",
            path.trim_end()
        );
    }
    for l in &map.lanes {
        let _ = writeln!(
            out,
            "<polyline class=\"lane\" points=\"{}\" fill=\"none\" stroke=\"#9a9a9a\" stroke-width=\"0.150\" stroke-dasharray=\"1,1\"/>",
            view.points(l.centerline.points())
        );
    }
    let n = frames.len();
    for (i, (tick, states)) in frames.iter().enumerate() {
        let opacity = if n <= 1 {
            1.0
        } else {
            MIN_OPACITY + (1.0 - MIN_OPACITY) * i as f64 / (n - 1) as f64
        };
        for (id, s) in states {
            let ego = id == ego_id;
            let _ = writeln!(
                out,
                "<polygon class=\"{}\" data-agent=\"{}\" data-tick=\"{tick}\" points=\"{}\" fill=\"{}\" fill-opacity=\"{opacity:.3}\" stroke=\"#222222\" stroke-width=\"0.050\"/>",
                if ego { "ego" } else { "agent" },
                xml_escape(id),
                view.points(&s.footprint().corners()),
                if ego { EGO_COLOR } else { AGENT_COLOR },
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_scenario_svg(s: &Scenario, opts: &RenderOptions) -> Result<String> {
    let frames = pick(scenario_frames(s), opts)?;
    Ok(svg(&s.map, &s.ego_id, &frames, opts.scale))
}

pub fn render_log_svg(log: &SimulationLog, map: &MapModel, opts: &RenderOptions) -> Result<String> {
    let frames = pick(log_frames(log), opts)?;
    Ok(svg(map, &log.ego_id, &frames, opts.scale))
}

/// Renders the log when given, else the scenario's recording.
pub fn render_svg(
    scenario: &Scenario,
    log: Option<&SimulationLog>,
    opts: &RenderOptions,
    path: &Path,
) -> Result<()> {
    let text = match log {
        Some(l) => render_log_svg(l, &scenario.map, opts)?,
        None => render_scenario_svg(scenario, opts)?,
    };
    std::fs::write(path, text)?;
    Ok(())
}
