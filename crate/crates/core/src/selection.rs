//! Interaction-aware selection of reactive agents, hybrid reactive/replay
//! stepping, and trajectory smoothing.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentPolicy, ObservationWindow};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scalar::Scalar;
use crate::scene::{AgentId, AgentState, Scenario, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionWeights {
    pub w_d: f64,
    pub w_v: f64,
    pub w_h: f64,
    /// m
    pub d_thresh: f64,
    pub top_k: usize,
}

impl Default for InteractionWeights {
    fn default() -> Self {
        Self {
            w_d: 0.5,
            w_v: 0.3,
            w_h: 0.2,
            d_thresh: 30.0,
            top_k: 8,
        }
    }
}

impl InteractionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_d, self.w_v, self.w_h];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "interaction weights must be nonnegative with a positive sum".into(),
            ));
        }
        if !(self.d_thresh > 0.0 && self.d_thresh.is_finite()) {
            return Err(Error::Config("d_thresh must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionScore {
    pub agent_id: AgentId,
    pub score: f64,
    pub distance_term: f64,
    pub velocity_term: f64,
    pub heading_term: f64,
    /// Center distance to the ego, m.
    pub distance: f64,
}

/// Score terms for one agent: exp(−d/d_thresh), |v_rel|/max_rel_speed and
/// 1 − |cos Δθ|.
#[allow(clippy::too_many_arguments)]
pub fn interaction_terms<T: Scalar>(
    ego_pos: Point2<T>,
    ego_vel: Point2<T>,
    ego_heading: T,
    pos: Point2<T>,
    vel: Point2<T>,
    heading: T,
    d_thresh: T,
    max_rel_speed: T,
) -> (T, T, T) {
    let d = ego_pos.distance(pos);
    let distance_term = (-d / d_thresh).exp();
    let velocity_term = if max_rel_speed > T::zero() {
        (vel - ego_vel).norm() / max_rel_speed
    } else {
        T::zero()
    };
    let heading_term = T::one() - (heading - ego_heading).cos().abs();
    (distance_term, velocity_term, heading_term)
}

pub fn interaction_score(
    agent_id: &str,
    ego: &AgentState,
    agent: &AgentState,
    weights: &InteractionWeights,
    max_rel_speed: f64,
) -> InteractionScore {
    let (dt, vt, ht) = interaction_terms(
        ego.position(),
        ego.velocity(),
        ego.heading(),
        agent.position(),
        agent.velocity(),
        agent.heading(),
        weights.d_thresh,
        max_rel_speed,
    );
    InteractionScore {
        agent_id: agent_id.to_string(),
        score: weights.w_d * dt + weights.w_v * vt + weights.w_h * ht,
        distance_term: dt,
        velocity_term: vt,
        heading_term: ht,
        distance: ego.position().distance(agent.position()),
    }
}

/// All agents scored against the ego, best first. `max_rel_speed` is the
/// largest relative speed in this scene.
pub fn rank_agents(
    ego: &AgentState,
    agents: &[(AgentId, AgentState)],
    weights: &InteractionWeights,
) -> Vec<InteractionScore> {
    let max_rel_speed = agents
        .iter()
        .map(|(_, a)| (a.velocity() - ego.velocity()).norm())
        .fold(0.0, f64::max);
    let mut scores: Vec<_> = agents
        .iter()
        .map(|(id, a)| interaction_score(id, ego, a, weights, max_rel_speed))
        .collect();
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.distance.total_cmp(&b.distance))
            .then_with(|| a.agent_id.cmp(&b.agent_id))
    });
    scores
}

/// The `top_k` highest-scoring agents; ties go to the nearer agent, then
/// the smaller id.
pub fn select_reactive_agents(
    ego: &AgentState,
    agents: &[(AgentId, AgentState)],
    weights: &InteractionWeights,
) -> Vec<AgentId> {
    rank_agents(ego, agents, weights)
        .into_iter()
        .take(weights.top_k)
        .map(|s| s.agent_id)
        .collect()
}

/// Smoothing objective Σ‖p_i − q_i‖² + strength·Σ‖p_{i−1} − 2p_i + p_{i+1}‖².
pub fn smoothing_objective(p: &[Point2<f64>], q: &[Point2<f64>], strength: f64) -> f64 {
    let fit: f64 = p.iter().zip(q).map(|(a, b)| (*a - *b).norm_sq()).sum();
    let rough: f64 = p
        .windows(3)
        .map(|w| (w[0] - w[1] * 2.0 + w[2]).norm_sq())
        .sum();
    fit + strength * rough
}

/// Speed (m/s) below which smoothing keeps an input heading.
pub const HEADING_MIN_SPEED: f64 = 0.5;

/// Minimizes [`smoothing_objective`] with both endpoints pinned. Interior
/// headings follow the central-difference tangent, except below
/// [`HEADING_MIN_SPEED`] where the input heading is kept; velocities are
/// central differences. Endpoint states and all extents are unchanged.
pub fn post_smooth(traj: &Trajectory, strength: f64) -> Result<Trajectory> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::invalid("smoothing strength must be nonnegative"));
    }
    if strength == 0.0 {
        return Ok(traj.clone());
    }
    let q: Vec<Point2<f64>> = traj.states.iter().map(|s| s.position()).collect();
    // second-difference operator, (n−2) × n
    let mut d = DMatrix::<f64>::zeros(n - 2, n);
    for i in 0..n - 2 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    let dtd = d.transpose() * &d;
    let m = n - 2;
    let mut a = DMatrix::<f64>::identity(m, m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] += strength * dtd[(i + 1, j + 1)];
        }
    }
    let chol = a
        .cholesky()
        .ok_or(Error::Singular("smoothing normal equations"))?;
    let solve_axis = |coord: &dyn Fn(&Point2<f64>) -> f64| -> DVector<f64> {
        let mut rhs = DVector::<f64>::from_iterator(m, q[1..n - 1].iter().map(coord));
        let (first, last) = (coord(&q[0]), coord(&q[n - 1]));
        for i in 0..m {
            rhs[i] -= strength * (dtd[(i + 1, 0)] * first + dtd[(i + 1, n - 1)] * last);
        }
        chol.solve(&rhs)
    };
    let xs = solve_axis(&|p| p.x);
    let ys = solve_axis(&|p| p.y);
    let mut p = q.clone();
    for i in 0..m {
        p[i + 1] = Point2::new(xs[i], ys[i]);
    }
    let dt = traj.tick_period;
    let mut states = traj.states.clone();
    for i in 1..n - 1 {
        let tangent = p[i + 1] - p[i - 1];
        let orig = &traj.states[i];
        let s = &mut states[i];
        s.x = p[i].x;
        s.y = p[i].y;
        if tangent.norm() / (2.0 * dt) >= HEADING_MIN_SPEED {
            let h = tangent.angle();
            s.sin_heading = h.sin();
            s.cos_heading = h.cos();
        } else {
            s.sin_heading = orig.sin_heading;
            s.cos_heading = orig.cos_heading;
        }
        s.vx = tangent.x / (2.0 * dt);
        s.vy = tangent.y / (2.0 * dt);
    }
    Trajectory::new(states, dt, traj.start_tick)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub weights: InteractionWeights,
    /// Ticks between re-selections.
    pub selection_period: usize,
    /// Zero disables smoothing.
    pub smoothing_strength: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            weights: InteractionWeights::default(),
            selection_period: 10,
            smoothing_strength: 1.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.selection_period == 0 {
            return Err(Error::Config("selection_period must be at least 1".into()));
        }
        if !(self.smoothing_strength >= 0.0 && self.smoothing_strength.is_finite()) {
            return Err(Error::Config(
                "smoothing_strength must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Steps the selected agents with a reactive policy and everything else by
/// replaying the recording.
///
/// Each replayed agent follows the recording through a tick offset. The
/// offset is zero until the agent has been reactive; when it drops back to
/// replay it resumes at the recorded tick nearest its current position.
pub struct HybridPolicy {
    reactive: Box<dyn AgentPolicy>,
    scenario: Arc<Scenario>,
    config: SelectionConfig,
    selected: Vec<AgentId>,
    last_selection: Option<usize>,
    offsets: BTreeMap<AgentId, i64>,
}

impl HybridPolicy {
    pub fn new(
        reactive: Box<dyn AgentPolicy>,
        scenario: Arc<Scenario>,
        config: SelectionConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            reactive,
            scenario,
            config,
            selected: Vec::new(),
            last_selection: None,
            offsets: BTreeMap::new(),
        })
    }

    pub fn selected(&self) -> &[AgentId] {
        &self.selected
    }

    fn replay_state(&self, id: &str, tick: i64) -> Result<AgentState> {
        let rec = self
            .scenario
            .agent(id)
            .ok_or_else(|| Error::UnknownAgent(id.to_string()))?;
        let t = &rec.trajectory;
        let clamped = tick.clamp(t.start_tick as i64, t.end_tick() as i64) as usize;
        Ok(*t.at_tick(clamped).expect("clamped into range"))
    }

    /// Recorded tick whose position is nearest `state`; ties go to the tick
    /// closest to `now`.
    fn nearest_recorded_tick(&self, id: &str, state: &AgentState, now: usize) -> Result<usize> {
        let rec = self
            .scenario
            .agent(id)
            .ok_or_else(|| Error::UnknownAgent(id.to_string()))?;
        let t = &rec.trajectory;
        let mut best = (f64::INFINITY, usize::MAX, t.start_tick);
        for (i, s) in t.states.iter().enumerate() {
            let tick = t.start_tick + i;
            let key = (s.position().distance(state.position()), tick.abs_diff(now));
            if key.0 < best.0 || (key.0 == best.0 && key.1 < best.1) {
                best = (key.0, key.1, tick);
            }
        }
        Ok(best.2)
    }

    fn reselect(&mut self, obs: &ObservationWindow<'_>, controlled: &[AgentId]) -> Result<()> {
        let ego = *obs
            .ego()
            .ok_or_else(|| Error::UnknownAgent(obs.ego_id.clone()))?;
        let agents: Vec<(AgentId, AgentState)> = controlled
            .iter()
            .map(|id| {
                obs.current(id)
                    .map(|s| (id.clone(), *s))
                    .ok_or_else(|| Error::UnknownAgent(id.clone()))
            })
            .collect::<Result<_>>()?;
        let next = select_reactive_agents(&ego, &agents, &self.config.weights);
        for id in &self.selected {
            if !next.contains(id) {
                let now = obs.current_tick;
                let state = obs
                    .current(id)
                    .ok_or_else(|| Error::UnknownAgent(id.clone()))?;
                let tick = self.nearest_recorded_tick(id, state, now)?;
                self.offsets.insert(id.clone(), tick as i64 - now as i64);
            }
        }
        self.selected = next;
        self.last_selection = Some(obs.current_tick);
        Ok(())
    }
}

impl AgentPolicy for HybridPolicy {
    fn name(&self) -> &str {
        "diffusion_hybrid"
    }

    fn step(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, AgentState>> {
        let due = self
            .last_selection
            .is_none_or(|t| obs.current_tick >= t + self.config.selection_period);
        if due {
            self.reselect(obs, controlled)?;
        }
        let reactive_ids: Vec<AgentId> = controlled
            .iter()
            .filter(|id| self.selected.contains(id))
            .cloned()
            .collect();
        let mut out = BTreeMap::new();
        if !reactive_ids.is_empty() {
            let chunks = self.reactive.step_with_futures(obs, &reactive_ids)?;
            for id in &reactive_ids {
                let chunk = chunks
                    .get(id)
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| Error::AgentModel(format!("no state returned for {id}")))?;
                let current = *obs
                    .current(id)
                    .ok_or_else(|| Error::UnknownAgent(id.clone()))?;
                let next = if chunk.len() >= 2 && self.config.smoothing_strength > 0.0 {
                    let mut states = vec![current];
                    states.extend_from_slice(chunk);
                    let traj = Trajectory::new(states, obs.tick_period(), obs.current_tick)?;
                    post_smooth(&traj, self.config.smoothing_strength)?.states[1]
                } else {
                    chunk[0]
                };
                out.insert(id.clone(), next);
            }
        }
        for id in controlled {
            if out.contains_key(id) {
                continue;
            }
            let offset = self.offsets.get(id).copied().unwrap_or(0);
            let state = self.replay_state(id, obs.current_tick as i64 + 1 + offset)?;
            out.insert(id.clone(), state);
        }
        Ok(out)
    }

    fn reactive_ids(&self) -> Vec<AgentId> {
        self.selected.clone()
    }
}
