//! Surrounding-agent policies and the observation they consume.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::scene::{AgentId, AgentState, MapModel, Trajectory};

pub mod idm;
pub mod replay;

pub use idm::{
    find_leader, idm_acceleration, idm_policy_step, IdmConfig, IdmParams, IdmPolicy, Leader,
};
pub use replay::{log_replay_step, LogReplayPolicy};

/// Recent history of every agent up to and including `current_tick`.
#[derive(Clone, Debug)]
pub struct ObservationWindow<'a> {
    pub slices: BTreeMap<AgentId, Trajectory>,
    pub map: &'a MapModel,
    pub current_tick: usize,
    pub ego_id: AgentId,
}

impl ObservationWindow<'_> {
    pub fn current(&self, id: &str) -> Option<&AgentState> {
        self.slices.get(id).map(|t| t.last())
    }

    pub fn current_states(&self) -> impl Iterator<Item = (&AgentId, &AgentState)> {
        self.slices.iter().map(|(id, t)| (id, t.last()))
    }

    pub fn ego(&self) -> Option<&AgentState> {
        self.current(&self.ego_id)
    }

    pub fn tick_period(&self) -> f64 {
        self.slices
            .values()
            .next()
            .map_or(crate::scene::TICK_PERIOD, |t| t.tick_period)
    }
}

/// Behaviour model for surrounding agents: maps the current observation to
/// each controlled agent's state at the next tick.
pub trait AgentPolicy: Send {
    fn name(&self) -> &str;

    fn step(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, AgentState>>;

    /// Next state followed by any further predicted states. Policies that
    /// only predict one tick return single-element chunks.
    fn step_with_futures(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, Vec<AgentState>>> {
        Ok(self
            .step(obs, controlled)?
            .into_iter()
            .map(|(id, s)| (id, vec![s]))
            .collect())
    }

    /// Agents currently driven by a learned or rule-based model rather than
    /// replay, for policies that mix the two.
    fn reactive_ids(&self) -> Vec<AgentId> {
        Vec::new()
    }
}
