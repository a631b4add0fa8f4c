//! Versioned JSON scenario documents and simulation logs on disk.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::SimulationLog;
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polyline};
use crate::scene::{
    AgentState, DrivableArea, Lane, MapModel, RecordedAgent, Scenario, Trajectory, TICK_PERIOD,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFileV1 {
    pub format_version: u32,
    pub id: String,
    pub map: MapFile,
    pub agents: Vec<AgentFile>,
    pub duration_ticks: usize,
    pub history_ticks: usize,
    /// Reserved for traffic-light states; carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    #[serde(default)]
    pub lanes: Vec<LaneFile>,
    #[serde(default)]
    pub drivable: Vec<DrivableFile>,
    #[serde(default)]
    pub route: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneFile {
    pub id: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivableFile {
    pub outer: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentFile {
    pub id: String,
    #[serde(default)]
    pub is_ego: bool,
    pub length: f64,
    pub width: f64,
    pub track: Vec<TrackPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub tick: usize,
    pub x: f64,
    pub y: f64,
    /// rad
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Deserializes `text`, reporting the JSON path of the first bad field.
/// Unknown fields fail in strict mode and are logged otherwise.
pub fn parse_json_strict<T: DeserializeOwned>(text: &str, strict: bool) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let mut unknown = Vec::new();
    let value: T = {
        let mut track = |p: serde_ignored::Path<'_>| unknown.push(ignored_path(&p));
        let ignoring = serde_ignored::Deserializer::new(&mut de, &mut track);
        serde_path_to_error::deserialize(ignoring).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(
                if path == "." { "$".into() } else { path },
                e.into_inner().to_string(),
            )
        })?
    };
    de.end()
        .map_err(|e| Error::schema("$", format!("trailing content: {e}")))?;
    if let Some(first) = unknown.first() {
        if strict {
            return Err(Error::schema(first.clone(), "unknown field"));
        }
        for p in &unknown {
            log::warn!("ignoring unknown field {p}");
        }
    }
    Ok(value)
}

/// Same `a.b[0].c` form as the paths serde_path_to_error reports.
fn ignored_path(p: &serde_ignored::Path<'_>) -> String {
    use serde_ignored::Path;
    match p {
        Path::Root => String::new(),
        Path::Seq { parent, index } => format!("{}[{index}]", ignored_path(parent)),
        Path::Map { parent, key } => {
            let head = ignored_path(parent);
            if head.is_empty() {
                key.clone()
            } else {
                format!("{head}.{key}")
            }
        }
        Path::Some { parent }
        | Path::NewtypeStruct { parent }
        | Path::NewtypeVariant { parent } => ignored_path(parent),
    }
}

fn point(p: [f64; 2], path: impl FnOnce() -> String) -> Result<Point2<f64>> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(Point2::new(p[0], p[1]))
    } else {
        Err(Error::schema(path(), "coordinate is not finite"))
    }
}

fn ring(points: &[[f64; 2]], path: &str) -> Result<Vec<Point2<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| point(p, || format!("{path}[{i}]")))
        .collect()
}

fn finite(v: f64, path: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::schema(path(), "value is not finite"))
    }
}

impl ScenarioFileV1 {
    pub fn into_scenario(self) -> Result<Scenario> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        if self.id.is_empty() {
            return Err(Error::schema("id", "scenario id is empty"));
        }
        let mut lanes = Vec::with_capacity(self.map.lanes.len());
        for (i, l) in self.map.lanes.iter().enumerate() {
            let path = format!("map.lanes[{i}].points");
            let centerline = Polyline::new(ring(&l.points, &path)?)
                .map_err(|e| Error::schema(path, e.to_string()))?;
            if let Some(v) = l.speed_limit {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::schema(
                        format!("map.lanes[{i}].speed_limit"),
                        "speed limit must be positive",
                    ));
                }
            }
            if lanes.iter().any(|x: &Lane| x.id == l.id) {
                return Err(Error::schema(
                    format!("map.lanes[{i}].id"),
                    "duplicate lane id",
                ));
            }
            lanes.push(Lane {
                id: l.id.clone(),
                centerline,
                speed_limit: l.speed_limit,
            });
        }
        let mut drivable = Vec::with_capacity(self.map.drivable.len());
        for (i, d) in self.map.drivable.iter().enumerate() {
            let outer_path = format!("map.drivable[{i}].outer");
            let outer = ring(&d.outer, &outer_path)?;
            let mut holes = Vec::with_capacity(d.holes.len());
            for (j, h) in d.holes.iter().enumerate() {
                holes.push(ring(h, &format!("map.drivable[{i}].holes[{j}]"))?);
            }
            drivable.push(
                DrivableArea::new(outer, holes)
                    .map_err(|e| Error::schema(format!("map.drivable[{i}]"), e.to_string()))?,
            );
        }
        let map = MapModel {
            lanes,
            drivable,
            route: self.map.route,
        };

        let egos: Vec<usize> = (0..self.agents.len())
            .filter(|&i| self.agents[i].is_ego)
            .collect();
        let ego_id = match egos.as_slice() {
            [] => return Err(Error::schema("agents", "no ego agent")),
            [i] => self.agents[*i].id.clone(),
            [_, j, ..] => {
                return Err(Error::schema(
                    format!("agents[{j}].is_ego"),
                    "more than one ego agent",
                ))
            }
        };
        let mut agents = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter().enumerate() {
            if a.id.is_empty() {
                return Err(Error::schema(
                    format!("agents[{i}].id"),
                    "agent id is empty",
                ));
            }
            for (name, v) in [("length", a.length), ("width", a.width)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::schema(
                        format!("agents[{i}].{name}"),
                        "must be positive",
                    ));
                }
            }
            if a.track.is_empty() {
                return Err(Error::schema(
                    format!("agents[{i}].track"),
                    "track is empty",
                ));
            }
            let start = a.track[0].tick;
            let mut states = Vec::with_capacity(a.track.len());
            for (j, p) in a.track.iter().enumerate() {
                let at = |f: &str| format!("agents[{i}].track[{j}].{f}");
                if p.tick != start + j {
                    return Err(Error::schema(at("tick"), "ticks must be consecutive"));
                }
                let state = AgentState::new(
                    finite(p.x, || at("x"))?,
                    finite(p.y, || at("y"))?,
                    finite(p.heading, || at("heading"))?,
                    finite(p.vx, || at("vx"))?,
                    finite(p.vy, || at("vy"))?,
                    a.length,
                    a.width,
                )
                .map_err(|e| Error::schema(format!("agents[{i}].track[{j}]"), e.to_string()))?;
                states.push(state);
            }
            agents.push(RecordedAgent {
                id: a.id.clone(),
                trajectory: Trajectory::new(states, TICK_PERIOD, start)?,
            });
        }
        let scenario = Scenario {
            id: self.id,
            map,
            agents,
            ego_id,
            duration_ticks: self.duration_ticks,
            history_ticks: self.history_ticks,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        let pts = |p: &[Point2<f64>]| p.iter().map(|q| [q.x, q.y]).collect::<Vec<_>>();
        Self {
            format_version: FORMAT_VERSION,
            id: s.id.clone(),
            map: MapFile {
                lanes: s
                    .map
                    .lanes
                    .iter()
                    .map(|l| LaneFile {
                        id: l.id.clone(),
                        points: pts(l.centerline.points()),
                        speed_limit: l.speed_limit,
                    })
                    .collect(),
                drivable: s
                    .map
                    .drivable
                    .iter()
                    .map(|d| DrivableFile {
                        outer: pts(&d.outer),
                        holes: d.holes.iter().map(|h| pts(h)).collect(),
                    })
                    .collect(),
                route: s.map.route.clone(),
            },
            agents: s
                .agents
                .iter()
                .map(|a| {
                    let t = &a.trajectory;
                    let first = t.first();
                    AgentFile {
                        id: a.id.clone(),
                        is_ego: a.id == s.ego_id,
                        length: first.length,
                        width: first.width,
                        track: t
                            .states
                            .iter()
                            .enumerate()
                            .map(|(j, st)| TrackPoint {
                                tick: t.start_tick + j,
                                x: st.x,
                                y: st.y,
                                heading: canonical_heading(st.sin_heading, st.cos_heading),
                                vx: st.vx,
                                vy: st.vy,
                            })
                            .collect(),
                    }
                })
                .collect(),
            duration_ticks: s.duration_ticks,
            history_ticks: s.history_ticks,
            signals: None,
        }
    }
}

/// An angle whose sine and cosine reproduce `(s, c)` exactly when one
/// exists near `atan2(s, c)`; reloading it gives back the same state, so
/// repeated saves are byte-identical.
pub fn canonical_heading(s: f64, c: f64) -> f64 {
    let a = s.atan2(c);
    let exact = |h: f64| {
        let (hs, hc) = h.sin_cos();
        hs == s && hc == c
    };
    if exact(a) {
        return a;
    }
    let (mut up, mut down) = (a, a);
    for _ in 0..64 {
        up = up.next_up();
        if exact(up) {
            return up;
        }
        down = down.next_down();
        if exact(down) {
            return down;
        }
    }
    a
}

pub fn parse_scenario(text: &str, strict: bool) -> Result<Scenario> {
    parse_json_strict::<ScenarioFileV1>(text, strict)?.into_scenario()
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    load_scenario_with(path, true)
}

pub fn load_scenario_with(path: &Path, strict: bool) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, strict)
}

pub fn scenario_to_string(s: &Scenario) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&ScenarioFileV1::from_scenario(s))?;
    text.push('\n');
    Ok(text)
}

pub fn save_scenario(s: &Scenario, path: &Path) -> Result<()> {
    std::fs::write(path, scenario_to_string(s)?)?;
    Ok(())
}

/// Every `.json` scenario in `dir`, sorted by file name.
pub fn load_scenario_dir(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no scenario files in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            load_scenario(p).map_err(|e| match e {
                Error::Schema { path, message } => Error::Schema {
                    path: format!("{}: {path}", p.display()),
                    message,
                },
                other => other,
            })
        })
        .collect()
}

pub fn log_to_string(log: &SimulationLog) -> Result<String> {
    let mut text = serde_json::to_string_pretty(log)?;
    text.push('\n');
    Ok(text)
}

pub fn save_log(log: &SimulationLog, path: &Path) -> Result<()> {
    std::fs::write(path, log_to_string(log)?)?;
    Ok(())
}

pub fn load_log(path: &Path) -> Result<SimulationLog> {
    let text = std::fs::read_to_string(path)?;
    parse_json_strict(&text, true)
}

/// Writes `contents` to a sibling temp file and renames it into place, so
/// a failed run never leaves a truncated output behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
