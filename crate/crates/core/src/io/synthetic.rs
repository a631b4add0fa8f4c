//! Synthetic scenario families with analytic or IDM-generated recordings.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::idm::{advance_on_path, find_leader_on_path, leader_acceleration, IdmParams};
use crate::diffusion::rng_for;
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polyline};
use crate::scene::{
    AgentId, AgentState, DrivableArea, Lane, MapModel, RecordedAgent, Scenario, Trajectory,
    TICK_PERIOD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    StraightCruise,
    CarFollowing,
    LeadBrake,
    LaneMerge,
    CrossingJunction,
    StoppedObstacle,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 6] = [
        SyntheticKind::StraightCruise,
        SyntheticKind::CarFollowing,
        SyntheticKind::LeadBrake,
        SyntheticKind::LaneMerge,
        SyntheticKind::CrossingJunction,
        SyntheticKind::StoppedObstacle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::StraightCruise => "straight_cruise",
            SyntheticKind::CarFollowing => "car_following",
            SyntheticKind::LeadBrake => "lead_brake",
            SyntheticKind::LaneMerge => "lane_merge",
            SyntheticKind::CrossingJunction => "crossing_junction",
            SyntheticKind::StoppedObstacle => "stopped_obstacle",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    /// m/s
    pub ego_speed: f64,
    pub duration_ticks: usize,
    pub history_ticks: usize,
    /// m/s, on every lane
    pub speed_limit: f64,
    /// m
    pub lane_width: f64,
    /// Drivable margin beyond the lane edges, m.
    pub margin: f64,
    /// Distance from the ego to the stopped obstacle, m.
    pub obstacle_distance: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            ego_speed: 10.0,
            duration_ticks: 100,
            history_ticks: 20,
            speed_limit: 15.0,
            lane_width: 3.7,
            margin: 1.0,
            obstacle_distance: 60.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.ego_speed, self.speed_limit, self.lane_width];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(
                "speeds and lane width must be positive".into(),
            ));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be nonnegative".into()));
        }
        if !(self.obstacle_distance >= 10.0 && self.obstacle_distance.is_finite()) {
            return Err(Error::Config(
                "obstacle_distance must be at least 10 m".into(),
            ));
        }
        if self.history_ticks == 0 || self.duration_ticks <= self.history_ticks {
            return Err(Error::Config(
                "need 0 < history_ticks < duration_ticks".into(),
            ));
        }
        Ok(())
    }
}

const EGO_LENGTH: f64 = 4.5;
const EGO_WIDTH: f64 = 1.9;
const ROAD_START: f64 = -60.0;

struct Builder {
    params: SyntheticParams,
    rng: rand_chacha::ChaCha8Rng,
    lanes: Vec<Lane>,
    drivable: Vec<DrivableArea>,
    agents: Vec<(AgentId, Vec<AgentState>)>,
}

impl Builder {
    fn new(params: &SyntheticParams, kind: SyntheticKind, seed: u64) -> Self {
        let stream = SyntheticKind::ALL
            .iter()
            .position(|k| *k == kind)
            .unwrap_or(0) as u64;
        Self {
            params: params.clone(),
            rng: rng_for(seed, stream),
            lanes: Vec::new(),
            drivable: Vec::new(),
            agents: Vec::new(),
        }
    }

    fn ticks(&self) -> usize {
        self.params.duration_ticks + 1
    }

    fn road_end(&self) -> f64 {
        self.params.ego_speed.max(self.params.speed_limit)
            * self.params.duration_ticks as f64
            * TICK_PERIOD
            + 150.0
    }

    fn jitter(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    /// Straight lane from `a` to `b` with a drivable strip around it.
    fn lane(&mut self, id: &str, a: Point2<f64>, b: Point2<f64>) -> Result<()> {
        let dir = (b - a) * (1.0 / (b - a).norm());
        let n = dir.perp();
        let half = self.params.lane_width / 2.0 + self.params.margin;
        let (a0, b0) = (a - dir * self.params.margin, b + dir * self.params.margin);
        let outer = vec![a0 - n * half, b0 - n * half, b0 + n * half, a0 + n * half];
        self.drivable.push(DrivableArea::new(outer, Vec::new())?);
        self.lanes.push(Lane {
            id: id.into(),
            centerline: Polyline::new(vec![a, b])?,
            speed_limit: Some(self.params.speed_limit),
        });
        Ok(())
    }

    fn parallel_lanes(&mut self, count: usize) -> Result<()> {
        let end = self.road_end();
        for i in 0..count {
            let y = i as f64 * self.params.lane_width;
            self.lane(
                &format!("lane_{i}"),
                Point2::new(ROAD_START, y),
                Point2::new(end, y),
            )?;
        }
        Ok(())
    }

    fn other_length(&mut self) -> f64 {
        self.jitter(4.2, 5.0)
    }

    /// Constant velocity from `(x0, y0)` along `heading`.
    fn cv(
        &self,
        x0: f64,
        y0: f64,
        heading: f64,
        speed: f64,
        length: f64,
    ) -> Result<Vec<AgentState>> {
        let (s, c) = heading.sin_cos();
        (0..self.ticks())
            .map(|j| {
                let t = j as f64 * TICK_PERIOD;
                AgentState::new(
                    x0 + speed * t * c,
                    y0 + speed * t * s,
                    heading,
                    speed * c,
                    speed * s,
                    length,
                    EGO_WIDTH,
                )
            })
            .collect()
    }

    /// Along +x with speed `v(t)` and position `x(t)` given analytically.
    fn along_x(
        &self,
        y: f64,
        length: f64,
        x: impl Fn(f64) -> f64,
        v: impl Fn(f64) -> f64,
    ) -> Result<Vec<AgentState>> {
        (0..self.ticks())
            .map(|j| {
                let t = j as f64 * TICK_PERIOD;
                AgentState::new(x(t), y, 0.0, v(t), 0.0, length, EGO_WIDTH)
            })
            .collect()
    }

    /// Ego track driven by IDM on lane 0 behind the recorded agents, with
    /// its cruise speed as the desired speed.
    fn idm_ego(&self, x0: f64) -> Result<Vec<AgentState>> {
        let lane = &self.lanes[0];
        let params = IdmParams {
            desired_speed: self.params.ego_speed,
            ..IdmParams::default()
        };
        let v = self.params.ego_speed;
        let mut me = AgentState::new(
            x0,
            lane.centerline.points()[0].y,
            0.0,
            v,
            0.0,
            EGO_LENGTH,
            EGO_WIDTH,
        )?;
        let mut out = vec![me.clone()];
        for j in 0..self.params.duration_ticks {
            let others: Vec<(&AgentId, &AgentState)> =
                self.agents.iter().map(|(id, tr)| (id, &tr[j])).collect();
            let leader =
                find_leader_on_path(&lane.centerline, &me, others, 100.0, self.params.lane_width);
            let s = lane.centerline.project(me.position()).arc_length;
            let accel = leader_acceleration(&me, &leader, &params);
            me = advance_on_path(&lane.centerline, &me, s, accel, TICK_PERIOD);
            out.push(me.clone());
        }
        Ok(out)
    }

    fn add(&mut self, id: &str, track: Vec<AgentState>) {
        self.agents.push((id.into(), track));
    }

    fn finish(self, kind: SyntheticKind, seed: u64, route: Vec<String>) -> Result<Scenario> {
        let agents = self
            .agents
            .into_iter()
            .map(|(id, states)| {
                Ok(RecordedAgent {
                    id,
                    trajectory: Trajectory::new(states, TICK_PERIOD, 0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scenario = Scenario {
            id: format!("{kind}_{seed}"),
            map: MapModel {
                lanes: self.lanes,
                drivable: self.drivable,
                route,
            },
            agents,
            ego_id: "ego".into(),
            duration_ticks: self.params.duration_ticks,
            history_ticks: self.params.history_ticks,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Builds one scenario of the given family. The ego starts at the origin
/// heading +x on `lane_0` (on `ew` for the junction).
pub fn gen_synthetic(kind: SyntheticKind, params: &SyntheticParams, seed: u64) -> Result<Scenario> {
    params.validate()?;
    let mut b = Builder::new(params, kind, seed);
    let v = params.ego_speed;
    let w = params.lane_width;
    let route = vec!["lane_0".to_string()];
    match kind {
        SyntheticKind::StraightCruise => {
            b.parallel_lanes(2)?;
            let ego = b.cv(0.0, 0.0, 0.0, v, EGO_LENGTH)?;
            let (l1, l2) = (b.other_length(), b.other_length());
            let (g1, f1) = (b.jitter(18.0, 24.0), b.jitter(0.9, 1.1));
            let (g2, f2) = (b.jitter(12.0, 18.0), b.jitter(0.9, 1.1));
            let ahead = b.cv(g1, w, 0.0, v * f1, l1)?;
            let behind = b.cv(-g2, w, 0.0, v * f2, l2)?;
            b.add("ego", ego);
            b.add("agent_1", ahead);
            b.add("agent_2", behind);
            b.finish(kind, seed, route)
        }
        SyntheticKind::CarFollowing => {
            b.parallel_lanes(2)?;
            let len = b.other_length();
            let gap = b.jitter(24.0, 30.0);
            let amp = b.jitter(0.1, 0.2);
            let period = b.jitter(5.0, 8.0);
            let om = 2.0 * PI / period;
            let lead = b.along_x(
                0.0,
                len,
                |t| gap + v * t + v * amp / om * (1.0 - (om * t).cos()),
                |t| v * (1.0 + amp * (om * t).sin()),
            )?;
            b.add("leader", lead);
            let side_len = b.other_length();
            let (g, f) = (b.jitter(-10.0, 10.0), b.jitter(0.9, 1.1));
            let side = b.cv(g, w, 0.0, v * f, side_len)?;
            b.add("agent_2", side);
            let ego = b.idm_ego(0.0)?;
            b.agents.insert(0, ("ego".into(), ego));
            b.finish(kind, seed, route)
        }
        SyntheticKind::LeadBrake => {
            b.parallel_lanes(2)?;
            let len = b.other_length();
            let gap = b.jitter(26.0, 32.0);
            let decel = b.jitter(2.5, 3.5);
            let t_brake = params.history_ticks as f64 * TICK_PERIOD + b.jitter(1.0, 2.0);
            let t_stop = t_brake + v / decel;
            let lead = b.along_x(
                0.0,
                len,
                |t| {
                    let tb = t.min(t_brake);
                    let tr = (t.min(t_stop) - t_brake).max(0.0);
                    gap + v * tb + v * tr - 0.5 * decel * tr * tr
                },
                |t| {
                    if t <= t_brake {
                        v
                    } else {
                        (v - decel * (t - t_brake)).max(0.0)
                    }
                },
            )?;
            b.add("leader", lead);
            let side_len = b.other_length();
            let f = b.jitter(0.8, 1.0);
            let side = b.cv(-8.0, w, 0.0, v * f, side_len)?;
            b.add("agent_2", side);
            let ego = b.idm_ego(0.0)?;
            b.agents.insert(0, ("ego".into(), ego));
            b.finish(kind, seed, route)
        }
        SyntheticKind::LaneMerge => {
            b.parallel_lanes(2)?;
            let len = b.other_length();
            let x0 = b.jitter(26.0, 32.0);
            let t0 = params.history_ticks as f64 * TICK_PERIOD + b.jitter(0.5, 1.5);
            let dur = b.jitter(2.5, 3.5);
            let merger: Vec<AgentState> = (0..b.ticks())
                .map(|j| {
                    let t = j as f64 * TICK_PERIOD;
                    let tau = ((t - t0) / dur).clamp(0.0, 1.0);
                    let y = w * (1.0 + (PI * tau).cos()) / 2.0;
                    let vy = if tau > 0.0 && tau < 1.0 {
                        -w * PI / (2.0 * dur) * (PI * tau).sin()
                    } else {
                        0.0
                    };
                    AgentState::new(x0 + v * t, y, vy.atan2(v), v, vy, len, EGO_WIDTH)
                })
                .collect::<Result<_>>()?;
            b.add("merger", merger);
            let tail_len = b.other_length();
            let f = b.jitter(0.9, 1.0);
            let tail = b.cv(-15.0, w, 0.0, v * f, tail_len)?;
            b.add("agent_2", tail);
            let ego = b.idm_ego(0.0)?;
            b.agents.insert(0, ("ego".into(), ego));
            b.finish(kind, seed, route)
        }
        SyntheticKind::CrossingJunction => {
            let end = b.road_end();
            let xc = 40.0;
            b.lane("ew", Point2::new(ROAD_START, 0.0), Point2::new(end, 0.0))?;
            let reach = 8.0 * params.duration_ticks as f64 * TICK_PERIOD + 100.0;
            b.lane("ns", Point2::new(xc, -reach), Point2::new(xc, reach))?;
            let ego = b.cv(0.0, 0.0, 0.0, v, EGO_LENGTH)?;
            b.add("ego", ego);
            let t_ego = xc / v;
            let offset = b.jitter(2.5, 3.5);
            for (id, t_cross) in [
                ("crossing_1", t_ego + offset),
                ("crossing_2", t_ego - offset),
            ] {
                let vc = b.jitter(7.0, 9.0);
                let len = b.other_length();
                let track = b.cv(xc, -vc * t_cross, FRAC_PI_2, vc, len)?;
                b.add(id, track);
            }
            b.finish(kind, seed, vec!["ew".to_string()])
        }
        SyntheticKind::StoppedObstacle => {
            b.parallel_lanes(2)?;
            let len = b.other_length();
            let obstacle = b.cv(params.obstacle_distance, 0.0, 0.0, 0.0, len)?;
            b.add("obstacle", obstacle);
            let pass_len = b.other_length();
            let f = b.jitter(1.0, 1.2);
            let passer = b.cv(-20.0, w, 0.0, v * f, pass_len)?;
            b.add("agent_2", passer);
            let ego = b.idm_ego(0.0)?;
            b.agents.insert(0, ("ego".into(), ego));
            b.finish(kind, seed, route)
        }
    }
}

/// `n` scenarios cycling through every family, seeds `seed..seed + n`.
pub fn synthetic_corpus(n: usize, params: &SyntheticParams, seed: u64) -> Result<Vec<Scenario>> {
    (0..n)
        .map(|i| {
            let kind = SyntheticKind::ALL[i % SyntheticKind::ALL.len()];
            gen_synthetic(kind, params, seed.wrapping_add(i as u64))
        })
        .collect()
}
