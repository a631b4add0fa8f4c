//! Intelligent Driver Model car-following agents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AgentPolicy, ObservationWindow};
use crate::error::{Error, Result};
use crate::geometry::Polyline;
use crate::scalar::Scalar;
use crate::scene::{AgentId, AgentState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams<T> {
    /// v0, m/s
    pub desired_speed: T,
    /// s0, m
    pub min_gap: T,
    /// T, s
    pub time_headway: T,
    /// a, m/s²
    pub max_accel: T,
    /// b, m/s²
    pub comfortable_decel: T,
    /// δ
    pub exponent: T,
    /// Output is clamped below at −decel_limit.
    pub decel_limit: T,
}

impl<T: Scalar> Default for IdmParams<T> {
    fn default() -> Self {
        let l = T::lit;
        Self {
            desired_speed: l(13.9),
            min_gap: l(2.0),
            time_headway: l(1.5),
            max_accel: l(1.5),
            comfortable_decel: l(2.0),
            exponent: l(4.0),
            decel_limit: l(8.0),
        }
    }
}

impl<T: Scalar> IdmParams<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.desired_speed,
            self.min_gap,
            self.time_headway,
            self.max_accel,
            self.comfortable_decel,
            self.decel_limit,
        ];
        if positive.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Config("idm parameters must be positive".into()));
        }
        if !(self.exponent >= T::one()) {
            return Err(Error::Config("idm exponent must be at least 1".into()));
        }
        Ok(())
    }

    /// Desired gap s* at speed `v` behind a leader at `v_lead`.
    pub fn desired_gap(&self, v: T, v_lead: T) -> T {
        let two = T::lit(2.0);
        let dynamic = v * self.time_headway
            + v * (v - v_lead) / (two * (self.max_accel * self.comfortable_decel).sqrt());
        self.min_gap + dynamic.max(T::zero())
    }
}

/// IDM acceleration. A missing leader is encoded as `gap = ∞`.
pub fn idm_acceleration<T: Scalar>(v: T, v_lead: T, gap: T, p: &IdmParams<T>) -> Result<T> {
    if !(gap > T::zero()) {
        return Err(Error::NonpositiveGap(gap.to_f64().unwrap_or(f64::NAN)));
    }
    let free = (v / p.desired_speed).powf(p.exponent);
    let interaction = if gap.is_infinite() {
        T::zero()
    } else {
        let r = p.desired_gap(v, v_lead) / gap;
        r * r
    };
    Ok((p.max_accel * (T::one() - free - interaction)).max(-p.decel_limit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmConfig {
    pub params: IdmParams<f64>,
    /// Use the lane speed limit as v0 when the lane has one.
    pub use_lane_speed_limit: bool,
    pub lane_width: f64,
    /// How far ahead along the lane to look for a leader, m.
    pub lane_lookahead: f64,
    /// Agents farther than this from every lane centerline fall back to a
    /// constant-velocity update, m.
    pub lane_match_distance: f64,
}

impl Default for IdmConfig {
    fn default() -> Self {
        Self {
            params: IdmParams::default(),
            use_lane_speed_limit: true,
            lane_width: 3.7,
            lane_lookahead: 100.0,
            lane_match_distance: 3.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leader {
    pub id: Option<AgentId>,
    /// Bumper-to-bumper distance along the path; ∞ without a leader.
    pub gap: f64,
    pub v_lead: f64,
}

/// Nearest agent ahead of `me` along `path`, within a lateral gate of
/// `lane_width / 2`.
pub fn find_leader_on_path<'a>(
    path: &Polyline<f64>,
    me: &AgentState,
    others: impl IntoIterator<Item = (&'a AgentId, &'a AgentState)>,
    lane_lookahead: f64,
    lane_width: f64,
) -> Leader {
    let s_me = path.project(me.position()).arc_length;
    let mut best: Option<(f64, &AgentId, &AgentState)> = None;
    for (id, other) in others {
        let pr = path.project(other.position());
        if pr.lateral.abs() >= lane_width / 2.0 {
            continue;
        }
        let ds = pr.arc_length - s_me;
        if ds <= 0.0 || ds > lane_lookahead {
            continue;
        }
        if best.as_ref().is_none_or(|(d, _, _)| ds < *d) {
            best = Some((ds, id, other));
        }
    }
    match best {
        Some((ds, id, other)) => Leader {
            id: Some(id.clone()),
            gap: ds - me.length / 2.0 - other.length / 2.0,
            v_lead: other.speed(),
        },
        None => Leader {
            id: None,
            gap: f64::INFINITY,
            v_lead: me.speed(),
        },
    }
}

/// Largest heading difference (rad) between an agent and a lane it follows.
pub const LANE_MATCH_ANGLE: f64 = std::f64::consts::FRAC_PI_3;

/// Leader of `agent_id` on its nearest lane.
pub fn find_leader(
    agent_id: &str,
    obs: &ObservationWindow<'_>,
    lane_lookahead: f64,
    lane_width: f64,
) -> Result<Leader> {
    let me = obs
        .current(agent_id)
        .ok_or_else(|| Error::UnknownAgent(agent_id.to_string()))?;
    let none = Leader {
        id: None,
        gap: f64::INFINITY,
        v_lead: me.speed(),
    };
    let Some((lane, _)) =
        obs.map
            .nearest_aligned_lane(me.position(), me.heading(), LANE_MATCH_ANGLE)
    else {
        return Ok(none);
    };
    let others = obs
        .current_states()
        .filter(|(id, _)| id.as_str() != agent_id);
    Ok(find_leader_on_path(
        &lane.centerline,
        me,
        others,
        lane_lookahead,
        lane_width,
    ))
}

/// Advances a lane-following agent by one tick given its acceleration.
/// Speed is clamped at zero and the agent is snapped onto the centerline.
pub fn advance_on_path(
    path: &Polyline<f64>,
    me: &AgentState,
    arc_length: f64,
    accel: f64,
    dt: f64,
) -> AgentState {
    let v = me.speed();
    let v_next = (v + accel * dt).max(0.0);
    let s_next = arc_length + 0.5 * (v + v_next) * dt;
    let (p, tangent) = path.point_at(s_next);
    AgentState {
        x: p.x,
        y: p.y,
        sin_heading: tangent.y,
        cos_heading: tangent.x,
        vx: v_next * tangent.x,
        vy: v_next * tangent.y,
        length: me.length,
        width: me.width,
    }
}

/// IDM acceleration of `me` behind `leader`, with collisions mapped to the
/// hardest allowed braking.
pub fn leader_acceleration(me: &AgentState, leader: &Leader, params: &IdmParams<f64>) -> f64 {
    if leader.gap <= 0.0 {
        return -params.decel_limit;
    }
    idm_acceleration(me.speed(), leader.v_lead, leader.gap, params).expect("gap checked positive")
}

pub fn idm_policy_step(
    obs: &ObservationWindow<'_>,
    controlled: &[AgentId],
    cfg: &IdmConfig,
) -> Result<BTreeMap<AgentId, AgentState>> {
    let dt = obs.tick_period();
    let mut out = BTreeMap::new();
    for id in controlled {
        let me = obs
            .current(id)
            .ok_or_else(|| Error::UnknownAgent(id.clone()))?;
        let matched = obs
            .map
            .nearest_aligned_lane(me.position(), me.heading(), LANE_MATCH_ANGLE)
            .filter(|(_, pr)| pr.lateral.abs() <= cfg.lane_match_distance);
        let next = match matched {
            None => me.propagate(dt),
            Some((lane, pr)) => {
                let others = obs.current_states().filter(|(oid, _)| *oid != id);
                let leader = find_leader_on_path(
                    &lane.centerline,
                    me,
                    others,
                    cfg.lane_lookahead,
                    cfg.lane_width,
                );
                let mut params = cfg.params.clone();
                if cfg.use_lane_speed_limit {
                    if let Some(limit) = lane.speed_limit {
                        params.desired_speed = limit;
                    }
                }
                let accel = leader_acceleration(me, &leader, &params);
                advance_on_path(&lane.centerline, me, pr.arc_length, accel, dt)
            }
        };
        out.insert(id.clone(), next);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct IdmPolicy {
    pub cfg: IdmConfig,
}

impl IdmPolicy {
    pub fn new(cfg: IdmConfig) -> Self {
        Self { cfg }
    }
}

impl AgentPolicy for IdmPolicy {
    fn name(&self) -> &str {
        "idm"
    }

    fn step(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, AgentState>> {
        idm_policy_step(obs, controlled, &self.cfg)
    }
}
