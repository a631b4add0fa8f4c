//! Log-replay agents.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{AgentPolicy, ObservationWindow};
use crate::error::{Error, Result};
use crate::scene::{AgentId, AgentState, Scenario};

/// Recorded state at `current_tick + 1` for every controlled agent.
pub fn log_replay_step(
    obs: &ObservationWindow<'_>,
    controlled: &[AgentId],
    scenario: &Scenario,
) -> Result<BTreeMap<AgentId, AgentState>> {
    let next_tick = obs.current_tick + 1;
    controlled
        .iter()
        .map(|id| {
            let rec = scenario
                .agent(id)
                .ok_or_else(|| Error::UnknownAgent(id.clone()))?;
            let state =
                rec.trajectory
                    .at_tick(next_tick)
                    .ok_or_else(|| Error::RecordingExhausted {
                        agent: id.clone(),
                        tick: next_tick,
                    })?;
            Ok((id.clone(), *state))
        })
        .collect()
}

/// Replays recordings; agents whose recording has ended stay frozen at
/// their last recorded state.
#[derive(Clone, Debug)]
pub struct LogReplayPolicy {
    scenario: Arc<Scenario>,
}

impl LogReplayPolicy {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self { scenario }
    }

    /// Recorded state at `tick`, or the last recorded state when the
    /// recording ends earlier.
    pub fn state_at(&self, id: &str, tick: usize) -> Result<AgentState> {
        let rec = self
            .scenario
            .agent(id)
            .ok_or_else(|| Error::UnknownAgent(id.to_string()))?;
        Ok(*rec
            .trajectory
            .at_tick(tick)
            .unwrap_or_else(|| rec.trajectory.last()))
    }
}

impl AgentPolicy for LogReplayPolicy {
    fn name(&self) -> &str {
        "log_replay"
    }

    fn step(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, AgentState>> {
        match log_replay_step(obs, controlled, &self.scenario) {
            Ok(next) => Ok(next),
            Err(Error::RecordingExhausted { .. }) => controlled
                .iter()
                .map(|id| Ok((id.clone(), self.state_at(id, obs.current_tick + 1)?)))
                .collect(),
            Err(e) => Err(e),
        }
    }
}
