//! The closed-loop simulation loop, planners, and batch execution.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::idm::{
    advance_on_path, find_leader_on_path, leader_acceleration, LANE_MATCH_ANGLE,
};
use crate::agents::{AgentPolicy, IdmConfig, IdmPolicy, LogReplayPolicy, ObservationWindow};
use crate::diffusion::{DenoiserModel, DiffusionConfig, DiffusionPolicy};
use crate::dynamics::{execute_plan, LqrConfig};
use crate::error::{Error, Result};
use crate::scene::{AgentId, AgentState, Scenario, Trajectory, TICK_PERIOD};
use crate::selection::{HybridPolicy, SelectionConfig};

/// Produces the ego's intended future from the current observation.
pub trait Planner: Send {
    fn name(&self) -> &str;

    /// Ego states for ticks `current_tick + 1, …` (at least one).
    fn plan(&mut self, obs: &ObservationWindow<'_>) -> Result<Trajectory>;
}

pub const DEFAULT_PLAN_HORIZON: usize = 40;

/// Plays back the ego's recording; past its end the plan holds the last
/// recorded state.
pub struct LogReplayPlanner {
    scenario: Arc<Scenario>,
    pub horizon: usize,
}

impl LogReplayPlanner {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self {
            scenario,
            horizon: DEFAULT_PLAN_HORIZON,
        }
    }
}

impl Planner for LogReplayPlanner {
    fn name(&self) -> &str {
        "log_replay"
    }

    fn plan(&mut self, obs: &ObservationWindow<'_>) -> Result<Trajectory> {
        let rec = &self.scenario.ego().trajectory;
        let t = obs.current_tick;
        let states = (t + 1..=t + self.horizon.max(1))
            .map(|k| *rec.at_tick(k).unwrap_or_else(|| rec.last()))
            .collect();
        Trajectory::new(states, rec.tick_period, t + 1)
    }
}

/// Extrapolates the ego's current velocity.
pub struct ConstantVelocityPlanner {
    pub horizon: usize,
}

impl Default for ConstantVelocityPlanner {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_PLAN_HORIZON,
        }
    }
}

impl Planner for ConstantVelocityPlanner {
    fn name(&self) -> &str {
        "constant_velocity"
    }

    fn plan(&mut self, obs: &ObservationWindow<'_>) -> Result<Trajectory> {
        let ego = *obs
            .ego()
            .ok_or_else(|| Error::Planner("ego missing from observation".into()))?;
        let dt = obs.tick_period();
        let mut s = ego;
        let states = (0..self.horizon.max(1))
            .map(|_| {
                s = s.propagate(dt);
                s
            })
            .collect();
        Trajectory::new(states, dt, obs.current_tick + 1)
    }
}

/// Car-following along the ego's route lane; other agents are assumed to
/// keep their current velocity over the horizon.
pub struct IdmPlanner {
    pub cfg: IdmConfig,
    pub horizon: usize,
}

impl IdmPlanner {
    pub fn new(cfg: IdmConfig) -> Self {
        Self {
            cfg,
            horizon: DEFAULT_PLAN_HORIZON,
        }
    }
}

impl Planner for IdmPlanner {
    fn name(&self) -> &str {
        "idm"
    }

    fn plan(&mut self, obs: &ObservationWindow<'_>) -> Result<Trajectory> {
        let mut ego = *obs
            .ego()
            .ok_or_else(|| Error::Planner("ego missing from observation".into()))?;
        let dt = obs.tick_period();
        let route_lane = obs
            .map
            .route_lanes()
            .filter(|l| {
                let pr = l.centerline.project(ego.position());
                pr.tangent
                    .dot(crate::geometry::Point2::from_angle(ego.heading()))
                    >= LANE_MATCH_ANGLE.cos()
            })
            .min_by(|a, b| {
                let da = a
                    .centerline
                    .project(ego.position())
                    .foot
                    .distance(ego.position());
                let db = b
                    .centerline
                    .project(ego.position())
                    .foot
                    .distance(ego.position());
                da.total_cmp(&db)
            })
            .or_else(|| {
                obs.map
                    .nearest_aligned_lane(ego.position(), ego.heading(), LANE_MATCH_ANGLE)
                    .map(|(l, _)| l)
            });
        let mut others: Vec<(AgentId, AgentState)> = obs
            .current_states()
            .filter(|(id, _)| **id != obs.ego_id)
            .map(|(id, s)| (id.clone(), *s))
            .collect();
        let mut states = Vec::with_capacity(self.horizon.max(1));
        for _ in 0..self.horizon.max(1) {
            ego = match route_lane {
                None => ego.propagate(dt),
                Some(lane) => {
                    let pr = lane.centerline.project(ego.position());
                    let leader = find_leader_on_path(
                        &lane.centerline,
                        &ego,
                        others.iter().map(|(id, s)| (id, s)),
                        self.cfg.lane_lookahead,
                        self.cfg.lane_width,
                    );
                    let mut params = self.cfg.params.clone();
                    if self.cfg.use_lane_speed_limit {
                        if let Some(limit) = lane.speed_limit {
                            params.desired_speed = limit;
                        }
                    }
                    let accel = leader_acceleration(&ego, &leader, &params);
                    advance_on_path(&lane.centerline, &ego, pr.arc_length, accel, dt)
                }
            };
            for (_, s) in others.iter_mut() {
                *s = s.propagate(dt);
            }
            states.push(ego);
        }
        Trajectory::new(states, dt, obs.current_tick + 1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    #[default]
    LogReplay,
    ConstantVelocity,
    Idm,
}

impl PlannerKind {
    pub fn build(self, scenario: &Arc<Scenario>, idm: &IdmConfig) -> Box<dyn Planner> {
        match self {
            PlannerKind::LogReplay => Box::new(LogReplayPlanner::new(scenario.clone())),
            PlannerKind::ConstantVelocity => Box::new(ConstantVelocityPlanner::default()),
            PlannerKind::Idm => Box::new(IdmPlanner::new(idm.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    Idm,
    #[default]
    LogReplay,
    DiffusionHybrid,
}

/// How the ego's plan becomes motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoController {
    /// LQR on the kinematic bicycle model.
    #[default]
    Lqr,
    /// The ego lands exactly on the plan's next state.
    PerfectTracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub tick_hz: f64,
    /// Falls back to the scenario's value.
    pub duration_ticks: Option<usize>,
    /// Warm-start length and observation window; falls back to the
    /// scenario's value.
    pub history_ticks: Option<usize>,
    pub agent_mode: AgentMode,
    pub ego_controller: EgoController,
    pub seed: u64,
    /// Ticks between planner calls; the last plan is reused in between.
    pub replan_interval: usize,
    pub record_plans: bool,
    pub lqr: LqrConfig<f64>,
    pub idm: IdmConfig,
    pub diffusion: DiffusionConfig,
    pub selection: SelectionConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            tick_hz: 1.0 / TICK_PERIOD,
            duration_ticks: None,
            history_ticks: None,
            agent_mode: AgentMode::default(),
            ego_controller: EgoController::default(),
            seed: 0,
            replan_interval: 1,
            record_plans: false,
            lqr: LqrConfig::default(),
            idm: IdmConfig::default(),
            diffusion: DiffusionConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tick_hz != 10.0 {
            return Err(Error::Config("tick_hz must be 10".into()));
        }
        if self.replan_interval == 0 {
            return Err(Error::Config("replan_interval must be at least 1".into()));
        }
        if let (Some(d), Some(h)) = (self.duration_ticks, self.history_ticks) {
            if d <= h {
                return Err(Error::Config(
                    "duration_ticks must exceed history_ticks".into(),
                ));
            }
        }
        self.lqr.validate()?;
        self.idm.params.validate()?;
        self.diffusion.validate()?;
        self.selection.validate()?;
        Ok(())
    }

    pub fn resolved_ticks(&self, scenario: &Scenario) -> Result<(usize, usize)> {
        let h = self.history_ticks.unwrap_or(scenario.history_ticks);
        let d = self.duration_ticks.unwrap_or(scenario.duration_ticks);
        if d <= h {
            return Err(Error::Config(format!(
                "duration {d} must exceed history {h} for scenario {}",
                scenario.id
            )));
        }
        Ok((h, d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    PlannerFailure,
    AgentFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub states: BTreeMap<AgentId, AgentState>,
    /// Agents driven reactively during the step into this tick.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reactive: Vec<AgentId>,
    /// Ego plan issued at this tick.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<AgentState>>,
}

/// Every agent's state at every tick from 0, recorded history first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub scenario_id: String,
    pub ego_id: AgentId,
    pub planner: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub history_ticks: usize,
    pub tick_period: f64,
    pub ticks: Vec<TickRecord>,
    pub config: SimulationConfig,
}

impl SimulationLog {
    /// The recording itself as a log over ticks `0..=duration_ticks`;
    /// agents whose recording ends early hold their last state.
    pub fn from_recording(scenario: &Scenario) -> Self {
        let ticks = (0..=scenario.duration_ticks)
            .map(|t| TickRecord {
                tick: t,
                states: recorded_states(scenario, t),
                reactive: Vec::new(),
                plan: None,
            })
            .collect();
        Self {
            scenario_id: scenario.id.clone(),
            ego_id: scenario.ego_id.clone(),
            planner: "recording".into(),
            seed: 0,
            status: RunStatus::Completed,
            failure: None,
            history_ticks: scenario.history_ticks,
            tick_period: scenario.ego().trajectory.tick_period,
            ticks,
            config: SimulationConfig::default(),
        }
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.ticks
            .first()
            .map(|t| t.states.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn non_ego_ids(&self) -> Vec<AgentId> {
        self.agent_ids()
            .into_iter()
            .filter(|id| *id != self.ego_id)
            .collect()
    }

    pub fn last_tick(&self) -> usize {
        self.ticks.last().map_or(0, |t| t.tick)
    }

    pub fn trajectory(&self, id: &str) -> Result<Trajectory> {
        let states = self
            .ticks
            .iter()
            .map(|t| {
                t.states
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::UnknownAgent(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(
            states,
            self.tick_period,
            self.ticks.first().map_or(0, |t| t.tick),
        )
    }

    /// Trajectory restricted to ticks from `from` on.
    pub fn trajectory_from(&self, id: &str, from: usize) -> Result<Trajectory> {
        let t = self.trajectory(id)?;
        let end = t.end_tick();
        t.slice(from.min(end), end)
            .ok_or_else(|| Error::invalid("empty trajectory slice"))
    }

    /// True when every tick holds the same states (ignoring metadata).
    pub fn same_states(&self, other: &SimulationLog) -> bool {
        self.ticks.len() == other.ticks.len()
            && self
                .ticks
                .iter()
                .zip(&other.ticks)
                .all(|(a, b)| a.tick == b.tick && a.states == b.states)
    }
}

fn recorded_states(scenario: &Scenario, tick: usize) -> BTreeMap<AgentId, AgentState> {
    scenario
        .agents
        .iter()
        .map(|a| {
            let t = &a.trajectory;
            (a.id.clone(), *t.at_tick(tick).unwrap_or_else(|| t.last()))
        })
        .collect()
}

/// Per-agent slices of the last `history_ticks + 1` states ending at `tick`.
pub fn build_observation<'a>(
    ticks: &[TickRecord],
    scenario: &'a Scenario,
    tick: usize,
    history_ticks: usize,
) -> Result<ObservationWindow<'a>> {
    let first = ticks.first().map_or(0, |t| t.tick);
    if tick < first || tick - first >= ticks.len() {
        return Err(Error::invalid(format!("tick {tick} not in the log")));
    }
    let end = tick - first;
    let start = end.saturating_sub(history_ticks);
    let ids: Vec<&AgentId> = ticks[end].states.keys().collect();
    let slices = ids
        .into_iter()
        .map(|id| {
            let states = ticks[start..=end].iter().map(|t| t.states[id]).collect();
            Ok((
                id.clone(),
                Trajectory::new(states, TICK_PERIOD, first + start)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(ObservationWindow {
        slices,
        map: &scenario.map,
        current_tick: tick,
        ego_id: scenario.ego_id.clone(),
    })
}

fn build_agent_policy(
    scenario: &Arc<Scenario>,
    config: &SimulationConfig,
    model: Option<Arc<dyn DenoiserModel>>,
) -> Result<Box<dyn AgentPolicy>> {
    Ok(match config.agent_mode {
        AgentMode::Idm => Box::new(IdmPolicy::new(config.idm.clone())),
        AgentMode::LogReplay => Box::new(LogReplayPolicy::new(scenario.clone())),
        AgentMode::DiffusionHybrid => {
            let model = model.ok_or_else(|| {
                Error::Config("agent_mode diffusion_hybrid needs a denoiser model".into())
            })?;
            let reactive = DiffusionPolicy::new(
                model,
                config.diffusion.clone(),
                scenario.ego().trajectory.first().position(),
                config.seed,
            )?;
            Box::new(HybridPolicy::new(
                Box::new(reactive),
                scenario.clone(),
                config.selection.clone(),
            )?)
        }
    })
}

/// Runs one scenario closed-loop. Planner and agent-model errors end the
/// run early with a failure status instead of failing the call.
pub fn run_scenario(
    scenario: &Arc<Scenario>,
    planner: &mut dyn Planner,
    config: &SimulationConfig,
    model: Option<Arc<dyn DenoiserModel>>,
) -> Result<SimulationLog> {
    config.validate()?;
    scenario.validate()?;
    let (h, duration) = config.resolved_ticks(scenario)?;
    let mut policy = build_agent_policy(scenario, config, model)?;
    let dt = 1.0 / config.tick_hz;
    let controlled: Vec<AgentId> = scenario.non_ego().map(|a| a.id.clone()).collect();
    let mut ticks: Vec<TickRecord> = (0..=h)
        .map(|t| TickRecord {
            tick: t,
            states: recorded_states(scenario, t),
            reactive: Vec::new(),
            plan: None,
        })
        .collect();
    let mut status = RunStatus::Completed;
    let mut failure = None;
    let mut plan: Option<Trajectory> = None;
    for t in h..duration {
        let obs = build_observation(&ticks, scenario, t, h)?;
        if plan.is_none() || (t - h) % config.replan_interval == 0 {
            match planner.plan(&obs) {
                Ok(p) if p.start_tick > t => plan = Some(p),
                Ok(p) => {
                    status = RunStatus::PlannerFailure;
                    failure = Some(format!("plan starts at tick {} at tick {t}", p.start_tick));
                    break;
                }
                Err(e) => {
                    status = RunStatus::PlannerFailure;
                    failure = Some(e.to_string());
                    break;
                }
            }
            if config.record_plans {
                ticks.last_mut().expect("history present").plan =
                    plan.as_ref().map(|p| p.states.clone());
            }
        }
        let current_plan = plan.as_ref().expect("plan set above");
        let ego_now = *obs.ego().expect("ego in every tick");
        let ego_next = match config.ego_controller {
            EgoController::Lqr => execute_plan(&ego_now, current_plan, &config.lqr, dt),
            EgoController::PerfectTracking => Ok(*current_plan
                .at_tick(t + 1)
                .unwrap_or_else(|| current_plan.last())),
        };
        let ego_next = match ego_next {
            Ok(s) => s,
            Err(e) => {
                status = RunStatus::PlannerFailure;
                failure = Some(format!("controller: {e}"));
                break;
            }
        };
        let agents_next = match policy.step(&obs, &controlled) {
            Ok(m)
                if controlled.iter().all(|id| m.contains_key(id))
                    && m.len() == controlled.len() =>
            {
                m
            }
            Ok(_) => {
                status = RunStatus::AgentFailure;
                failure = Some("agent policy did not return every controlled agent".into());
                break;
            }
            Err(e) => {
                status = RunStatus::AgentFailure;
                failure = Some(e.to_string());
                break;
            }
        };
        let mut states = agents_next;
        states.insert(scenario.ego_id.clone(), ego_next);
        ticks.push(TickRecord {
            tick: t + 1,
            states,
            reactive: policy.reactive_ids(),
            plan: None,
        });
    }
    Ok(SimulationLog {
        scenario_id: scenario.id.clone(),
        ego_id: scenario.ego_id.clone(),
        planner: planner.name().to_string(),
        seed: config.seed,
        status,
        failure,
        history_ticks: h,
        tick_period: dt,
        ticks,
        config: config.clone(),
    })
}

/// Per-scenario seed derived from the batch seed and scenario id, so a
/// scenario's result does not depend on batch order or thread count.
pub fn scenario_seed(batch_seed: u64, scenario_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(batch_seed.to_le_bytes());
    h.update(scenario_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Runs every scenario on a pool of `parallel` threads. Results are sorted
/// by scenario id.
pub fn run_batch(
    scenarios: &[Arc<Scenario>],
    planner: PlannerKind,
    config: &SimulationConfig,
    model: Option<Arc<dyn DenoiserModel>>,
    parallel: usize,
) -> Result<Vec<SimulationLog>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut logs = pool.install(|| {
        scenarios
            .par_iter()
            .map(|sc| {
                let cfg = SimulationConfig {
                    seed: scenario_seed(config.seed, &sc.id),
                    ..config.clone()
                };
                let mut p = planner.build(sc, &config.idm);
                run_scenario(sc, p.as_mut(), &cfg, model.clone())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    logs.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
    Ok(logs)
}
