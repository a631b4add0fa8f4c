//! Agents, trajectories, maps and scenarios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_polygon, validate_ring, wrap_angle, OrientedBox, Point2, Polyline};

pub type AgentId = String;

/// Simulation tick period in seconds (10 Hz).
pub const TICK_PERIOD: f64 = 0.1;

const HEADING_NORM_TOL: f64 = 1e-9;

/// Kinematic state of one agent at one tick. Heading is stored as a unit
/// (sin, cos) pair and velocity in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub sin_heading: f64,
    pub cos_heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn new(
        x: f64,
        y: f64,
        heading: f64,
        vx: f64,
        vy: f64,
        length: f64,
        width: f64,
    ) -> Result<Self> {
        let (s, c) = heading.sin_cos();
        Self::from_components(x, y, s, c, vx, vy, length, width)
    }

    /// Builds a state from raw components, renormalizing (sin, cos).
    #[allow(clippy::too_many_arguments)]
    pub fn from_components(
        x: f64,
        y: f64,
        sin_heading: f64,
        cos_heading: f64,
        vx: f64,
        vy: f64,
        length: f64,
        width: f64,
    ) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::invalid(format!(
                "agent extents must be positive, got {length} x {width}"
            )));
        }
        let fields = [x, y, sin_heading, cos_heading, vx, vy, length, width];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("agent state has non-finite field"));
        }
        let norm = sin_heading.hypot(cos_heading);
        if norm == 0.0 {
            return Err(Error::invalid("heading vector is zero"));
        }
        let (sin_heading, cos_heading) = if (norm - 1.0).abs() <= f64::EPSILON {
            (sin_heading, cos_heading)
        } else {
            (sin_heading / norm, cos_heading / norm)
        };
        Ok(Self {
            x,
            y,
            sin_heading,
            cos_heading,
            vx,
            vy,
            length,
            width,
        })
    }

    #[inline]
    pub fn heading(&self) -> f64 {
        self.sin_heading.atan2(self.cos_heading)
    }

    #[inline]
    pub fn position(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }

    #[inline]
    pub fn velocity(&self) -> Point2<f64> {
        Point2::new(self.vx, self.vy)
    }

    /// Magnitude of the velocity vector.
    #[inline]
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Velocity component along the heading (negative when reversing).
    #[inline]
    pub fn signed_speed(&self) -> f64 {
        self.vx * self.cos_heading + self.vy * self.sin_heading
    }

    pub fn heading_is_normalized(&self) -> bool {
        (self.sin_heading * self.sin_heading + self.cos_heading * self.cos_heading - 1.0).abs()
            <= HEADING_NORM_TOL
    }

    /// Same state moved by `dt` seconds at constant velocity.
    pub fn propagate(&self, dt: f64) -> Self {
        Self {
            x: self.x + self.vx * dt,
            y: self.y + self.vy * dt,
            ..*self
        }
    }

    pub fn footprint(&self) -> OrientedBox<f64> {
        footprint(self)
    }
}

/// Vehicle footprint rectangle of a state.
pub fn footprint(state: &AgentState) -> OrientedBox<f64> {
    OrientedBox {
        center: state.position(),
        half_length: state.length / 2.0,
        half_width: state.width / 2.0,
        heading: wrap_angle(state.heading()),
    }
}

/// Time-indexed sequence of states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub tick_period: f64,
    pub start_tick: usize,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, tick_period: f64, start_tick: usize) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("trajectory is empty"));
        }
        if !(tick_period > 0.0) {
            return Err(Error::invalid("tick period must be positive"));
        }
        Ok(Self {
            states,
            tick_period,
            start_tick,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Last covered tick (inclusive).
    pub fn end_tick(&self) -> usize {
        self.start_tick + self.states.len() - 1
    }

    pub fn covers(&self, tick: usize) -> bool {
        tick >= self.start_tick && tick <= self.end_tick()
    }

    pub fn at_tick(&self, tick: usize) -> Option<&AgentState> {
        tick.checked_sub(self.start_tick)
            .and_then(|i| self.states.get(i))
    }

    pub fn first(&self) -> &AgentState {
        &self.states[0]
    }

    pub fn last(&self) -> &AgentState {
        self.states.last().expect("non-empty trajectory")
    }

    /// Sub-trajectory over the inclusive tick range, clipped to coverage.
    pub fn slice(&self, from: usize, to: usize) -> Option<Trajectory> {
        let from = from.max(self.start_tick);
        let to = to.min(self.end_tick());
        if from > to {
            return None;
        }
        let a = from - self.start_tick;
        let b = to - self.start_tick;
        Some(Trajectory {
            states: self.states[a..=b].to_vec(),
            tick_period: self.tick_period,
            start_tick: from,
        })
    }
}

/// Sum of consecutive Euclidean distances.
pub fn path_length(traj: &Trajectory) -> Result<f64> {
    if traj.len() < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            got: traj.len(),
        });
    }
    Ok(traj
        .states
        .windows(2)
        .map(|w| w[0].position().distance(w[1].position()))
        .sum())
}

const MIN_SEGMENT: f64 = 1e-6;

/// Mean over interior points of |Δ tangent heading| / local arc length.
pub fn mean_abs_curvature(traj: &Trajectory) -> Result<f64> {
    if traj.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: traj.len(),
        });
    }
    let mut total = 0.0;
    for w in traj.states.windows(3) {
        let d_in = w[1].position() - w[0].position();
        let d_out = w[2].position() - w[1].position();
        let (l_in, l_out) = (d_in.norm(), d_out.norm());
        if l_in < MIN_SEGMENT || l_out < MIN_SEGMENT {
            continue;
        }
        let dh = wrap_angle(d_out.angle() - d_in.angle());
        total += dh.abs() / (0.5 * (l_in + l_out));
    }
    Ok(total / (traj.len() - 2) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub id: String,
    pub centerline: Polyline<f64>,
    /// m/s
    pub speed_limit: Option<f64>,
}

/// Simple polygon with optional holes.
#[derive(Clone, Debug, PartialEq)]
pub struct DrivableArea {
    pub outer: Vec<Point2<f64>>,
    pub holes: Vec<Vec<Point2<f64>>>,
}

impl DrivableArea {
    pub fn new(outer: Vec<Point2<f64>>, holes: Vec<Vec<Point2<f64>>>) -> Result<Self> {
        let outer = validate_ring(outer)?;
        let holes = holes
            .into_iter()
            .map(validate_ring)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { outer, holes })
    }

    /// Boundary points (of the outer ring or a hole) count as inside.
    pub fn contains(&self, p: Point2<f64>) -> bool {
        if !point_in_polygon(p, &self.outer) {
            return false;
        }
        self.holes
            .iter()
            .all(|h| !point_in_polygon(p, h) || on_ring_boundary(p, h))
    }
}

fn on_ring_boundary(p: Point2<f64>, ring: &[Point2<f64>]) -> bool {
    let n = ring.len();
    (0..n).any(|i| {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let ab = b - a;
        let ap = p - a;
        ab.cross(ap) == 0.0 && ap.dot(ab) >= 0.0 && ap.dot(ab) <= ab.norm_sq()
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapModel {
    pub lanes: Vec<Lane>,
    pub drivable: Vec<DrivableArea>,
    /// Ordered lane ids the ego is expected to follow.
    pub route: Vec<String>,
}

impl MapModel {
    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn route_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.route.iter().filter_map(|id| self.lane(id))
    }

    /// Lane whose centerline is closest to `p`, with the projection.
    pub fn nearest_lane(
        &self,
        p: Point2<f64>,
    ) -> Option<(&Lane, crate::geometry::PolylineProjection<f64>)> {
        nearest_of(self.lanes.iter(), p)
    }

    /// Nearest lane whose direction at the projection is within `max_angle`
    /// of `heading`, so crossing lanes at junctions are not confused.
    pub fn nearest_aligned_lane(
        &self,
        p: Point2<f64>,
        heading: f64,
        max_angle: f64,
    ) -> Option<(&Lane, crate::geometry::PolylineProjection<f64>)> {
        let dir = Point2::from_angle(heading);
        let min_cos = max_angle.cos();
        let mut best: Option<(f64, &Lane, _)> = None;
        for lane in &self.lanes {
            let pr = lane.centerline.project(p);
            if pr.tangent.dot(dir) < min_cos {
                continue;
            }
            let d = pr.foot.distance(p);
            if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                best = Some((d, lane, pr));
            }
        }
        best.map(|(_, l, pr)| (l, pr))
    }

    /// Like [`MapModel::nearest_lane`] but restricted to the route (falls
    /// back to all lanes when the route is empty).
    pub fn nearest_route_lane(
        &self,
        p: Point2<f64>,
    ) -> Option<(&Lane, crate::geometry::PolylineProjection<f64>)> {
        if self.route.is_empty() {
            self.nearest_lane(p)
        } else {
            nearest_of(self.route_lanes(), p)
        }
    }
}

fn nearest_of<'a>(
    lanes: impl Iterator<Item = &'a Lane>,
    p: Point2<f64>,
) -> Option<(&'a Lane, crate::geometry::PolylineProjection<f64>)> {
    let mut best: Option<(f64, &Lane, _)> = None;
    for lane in lanes {
        let pr = lane.centerline.project(p);
        let d = pr.foot.distance(p);
        if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
            best = Some((d, lane, pr));
        }
    }
    best.map(|(_, l, pr)| (l, pr))
}

/// True iff `p` lies inside some drivable polygon and outside its holes.
pub fn point_in_drivable(p: Point2<f64>, map: &MapModel) -> bool {
    map.drivable.iter().any(|a| a.contains(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordedAgent {
    pub id: AgentId,
    pub trajectory: Trajectory,
}

/// The unit of evaluation: a map, recorded agent tracks and an ego.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub map: MapModel,
    pub agents: Vec<RecordedAgent>,
    pub ego_id: AgentId,
    pub duration_ticks: usize,
    pub history_ticks: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let ego_count = self.agents.iter().filter(|a| a.id == self.ego_id).count();
        match ego_count {
            0 => return Err(Error::schema("agents", "no ego agent")),
            1 => {}
            _ => return Err(Error::schema("agents", "ego agent appears more than once")),
        }
        if self.duration_ticks <= self.history_ticks {
            return Err(Error::schema(
                "duration_ticks",
                "duration_ticks must exceed history_ticks",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            if !seen.insert(a.id.as_str()) {
                return Err(Error::schema(
                    format!("agents[{i}].id"),
                    "duplicate agent id",
                ));
            }
            let t = &a.trajectory;
            if t.start_tick != 0 || !t.covers(self.history_ticks) {
                return Err(Error::schema(
                    format!("agents[{i}].track"),
                    format!("track must cover ticks [0, {}]", self.history_ticks),
                ));
            }
            if a.id == self.ego_id && !t.covers(self.duration_ticks) {
                return Err(Error::schema(
                    format!("agents[{i}].track"),
                    format!("ego track must cover ticks [0, {}]", self.duration_ticks),
                ));
            }
        }
        for (i, id) in self.map.route.iter().enumerate() {
            if self.map.lane(id).is_none() {
                return Err(Error::schema(
                    format!("map.route[{i}]"),
                    format!("unknown lane {id}"),
                ));
            }
        }
        Ok(())
    }

    pub fn agent(&self, id: &str) -> Option<&RecordedAgent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn ego(&self) -> &RecordedAgent {
        self.agent(&self.ego_id)
            .expect("validated scenario has an ego")
    }

    pub fn non_ego(&self) -> impl Iterator<Item = &RecordedAgent> {
        self.agents.iter().filter(move |a| a.id != self.ego_id)
    }
}
