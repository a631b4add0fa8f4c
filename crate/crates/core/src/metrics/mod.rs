//! Safety primitives, the closed-loop score, and realism statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::SimulationLog;
use crate::error::{Error, Result};
use crate::geometry::{obb_intersects, OrientedBox};
use crate::scene::{point_in_drivable, AgentId, AgentState, MapModel};

pub mod cls;
pub mod realism;
pub mod report;

pub use cls::{
    cls_composite, pass_rate, success_rate, ClsBreakdown, ClsConfig, FailureFlag, SubScore,
    SubScoreKind, DEFAULT_CORE_NAMES,
};
pub use realism::{
    cluster_features, cluster_traj_fid, diversity_entropy, jsd, normalized_entropy,
    trajectory_features, ttc_histogram, Clustering, Histogram, TrajectoryFeature,
};
pub use report::{realism_suite, MetricReport, RealismComparison, RealismConfig, RealismStats};

pub const TTC_HORIZON: f64 = 10.0;
pub const TTC_DT_FINE: f64 = 0.05;

fn boxes_touch(a: &OrientedBox<f64>, b: &OrientedBox<f64>) -> bool {
    let reach = a.bounding_radius() + b.bounding_radius();
    (a.center - b.center).norm_sq() <= reach * reach && obb_intersects(a, b)
}

/// First time (s) at which the two footprints intersect when both keep
/// their velocity, sampled every `dt_fine` up to `horizon`.
pub fn ttc_pair(a: &AgentState, b: &AgentState, horizon: f64, dt_fine: f64) -> Option<f64> {
    if !(horizon > 0.0 && dt_fine > 0.0) {
        return None;
    }
    let fa = a.footprint();
    let fb = b.footprint();
    let (va, vb) = (a.velocity(), b.velocity());
    let steps = (horizon / dt_fine + 1e-9).floor() as usize;
    (0..=steps).find_map(|i| {
        let t = i as f64 * dt_fine;
        boxes_touch(&fa.translated(va * t), &fb.translated(vb * t)).then_some(t)
    })
}

/// Smallest TTC between the ego and any other agent at one tick.
pub fn min_ego_ttc(
    states: &BTreeMap<AgentId, AgentState>,
    ego_id: &str,
    horizon: f64,
    dt_fine: f64,
) -> Option<f64> {
    let ego = states.get(ego_id)?;
    states
        .iter()
        .filter(|(id, _)| id.as_str() != ego_id)
        .filter_map(|(_, s)| ttc_pair(ego, s, horizon, dt_fine))
        .min_by(f64::total_cmp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub a: AgentId,
    pub b: AgentId,
    /// First tick of contact.
    pub tick: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionSummary {
    /// 100 when the ego touches any agent, else 0.
    pub ego_other_pct: f64,
    /// Share of non-ego agents involved in a collision with another
    /// non-ego agent.
    pub other_other_pct: f64,
    /// One entry per colliding pair, ids ordered, sorted by pair.
    pub events: Vec<CollisionEvent>,
}

/// Footprint contacts over the evaluated ticks (from `history_ticks` on).
pub fn collision_rates(log: &SimulationLog) -> CollisionSummary {
    let ids = log.agent_ids();
    let mut first: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for rec in log.ticks.iter().filter(|t| t.tick >= log.history_ticks) {
        let boxes: Vec<OrientedBox<f64>> =
            ids.iter().map(|id| rec.states[id].footprint()).collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                if !first.contains_key(&(i, j)) && boxes_touch(&boxes[i], &boxes[j]) {
                    first.insert((i, j), rec.tick);
                }
            }
        }
    }
    let events: Vec<CollisionEvent> = first
        .iter()
        .map(|(&(i, j), &tick)| CollisionEvent {
            a: ids[i].clone(),
            b: ids[j].clone(),
            tick,
        })
        .collect();
    let ego_hit = events
        .iter()
        .any(|e| e.a == log.ego_id || e.b == log.ego_id);
    let mut involved = BTreeSet::new();
    for e in events
        .iter()
        .filter(|e| e.a != log.ego_id && e.b != log.ego_id)
    {
        involved.insert(e.a.clone());
        involved.insert(e.b.clone());
    }
    let non_ego = ids
        .len()
        .saturating_sub(usize::from(ids.contains(&log.ego_id)));
    CollisionSummary {
        ego_other_pct: if ego_hit { 100.0 } else { 0.0 },
        other_other_pct: if non_ego == 0 {
            0.0
        } else {
            100.0 * involved.len() as f64 / non_ego as f64
        },
        events,
    }
}

/// True when all four footprint corners lie outside the drivable area.
pub fn fully_off_road(state: &AgentState, map: &MapModel) -> bool {
    state
        .footprint()
        .corners()
        .iter()
        .all(|&c| !point_in_drivable(c, map))
}

/// Percentage of vehicles (ego included) that are fully off the drivable
/// area at some evaluated tick.
pub fn off_road_rate(log: &SimulationLog, map: &MapModel) -> Result<f64> {
    if map.drivable.is_empty() {
        return Err(Error::invalid("map has no drivable area"));
    }
    let ids = log.agent_ids();
    if ids.is_empty() {
        return Ok(0.0);
    }
    let off = ids
        .iter()
        .filter(|id| {
            log.ticks
                .iter()
                .filter(|t| t.tick >= log.history_ticks)
                .any(|t| fully_off_road(&t.states[*id], map))
        })
        .count();
    Ok(100.0 * off as f64 / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(x: f64, y: f64, h: f64, vx: f64, vy: f64) -> AgentState {
        AgentState::new(x, y, h, vx, vy, 4.0, 2.0).unwrap()
    }

    #[test]
    fn head_on_ttc() {
        // bumpers 20 m apart, closing at 10 m/s
        let a = st(0.0, 0.0, 0.0, 5.0, 0.0);
        let b = st(24.0, 0.0, std::f64::consts::PI, -5.0, 0.0);
        let t = ttc_pair(&a, &b, TTC_HORIZON, TTC_DT_FINE).unwrap();
        assert!((t - 2.0).abs() <= TTC_DT_FINE);
    }

    #[test]
    fn diverging_has_no_ttc() {
        let a = st(0.0, 0.0, 0.0, -5.0, 0.0);
        let b = st(10.0, 0.0, 0.0, 5.0, 0.0);
        assert_eq!(ttc_pair(&a, &b, TTC_HORIZON, TTC_DT_FINE), None);
        let overlapping = st(1.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            ttc_pair(&a, &overlapping, TTC_HORIZON, TTC_DT_FINE),
            Some(0.0)
        );
    }
}
