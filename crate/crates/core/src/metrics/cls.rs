//! Closed-loop score, success rate and pass rate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{collision_rates, min_ego_ttc};
use crate::engine::{RunStatus, SimulationLog};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::scene::{point_in_drivable, AgentState, MapModel, Scenario};

pub const DEFAULT_CORE_NAMES: [&str; 4] =
    ["ttc_score", "progress_score", "speed_compliance", "comfort"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubScoreKind {
    Multiplier,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubScore {
    pub name: String,
    pub value: f64,
    pub kind: SubScoreKind,
    #[serde(default)]
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureFlag {
    AtFaultCollision,
    OffRoad,
    WrongWay,
    InsufficientProgress,
    PlannerFailure,
    AgentFailure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsBreakdown {
    pub sub_scores: Vec<SubScore>,
    pub cls: f64,
    pub failure_flags: BTreeSet<FailureFlag>,
}

impl ClsBreakdown {
    /// Zero when a multiplier is zero or a flag is set, otherwise the
    /// weighted mean of the weighted scores scaled to [0, 100].
    pub fn from_scores(
        multipliers: &[(&str, f64)],
        weighted: &[(&str, f64, f64)],
        failure_flags: BTreeSet<FailureFlag>,
    ) -> Result<Self> {
        let mut sub_scores = Vec::new();
        for &(name, value) in multipliers {
            check_unit(name, value)?;
            sub_scores.push(SubScore {
                name: name.into(),
                value,
                kind: SubScoreKind::Multiplier,
                weight: 0.0,
            });
        }
        for &(name, value, weight) in weighted {
            check_unit(name, value)?;
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::invalid(format!(
                    "weight of {name} must be nonnegative"
                )));
            }
            sub_scores.push(SubScore {
                name: name.into(),
                value,
                kind: SubScoreKind::Weighted,
                weight,
            });
        }
        let gated = !failure_flags.is_empty() || multipliers.iter().any(|&(_, v)| v == 0.0);
        let total_w: f64 = weighted.iter().map(|w| w.2).sum();
        let cls = if gated || total_w <= 0.0 {
            0.0
        } else {
            let mult: f64 = multipliers.iter().map(|m| m.1).product();
            100.0 * mult * weighted.iter().map(|&(_, v, w)| v * w).sum::<f64>() / total_w
        };
        Ok(Self {
            sub_scores,
            cls,
            failure_flags,
        })
    }

    pub fn sub_score(&self, name: &str) -> Option<&SubScore> {
        self.sub_scores.iter().find(|s| s.name == name)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!(
            "sub-score {name} = {v} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsConfig {
    pub ttc_weight: f64,
    pub progress_weight: f64,
    pub speed_weight: f64,
    pub comfort_weight: f64,
    /// s
    pub ttc_threshold: f64,
    /// s
    pub ttc_horizon: f64,
    /// s
    pub ttc_dt_fine: f64,
    /// deg
    pub wrong_way_angle_deg: f64,
    pub direction_fraction: f64,
    pub min_progress_ratio: f64,
    /// Expert progress below this (m) counts as no progress required.
    pub min_expert_progress: f64,
    /// Ego speeds below this (m/s) count as stationary for fault rules.
    pub stationary_speed: f64,
    pub max_accel: f64,
    pub max_jerk: f64,
    pub max_yaw_rate: f64,
    pub comfort_fraction: f64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            ttc_weight: 5.0,
            progress_weight: 5.0,
            speed_weight: 4.0,
            comfort_weight: 2.0,
            ttc_threshold: 3.0,
            ttc_horizon: super::TTC_HORIZON,
            ttc_dt_fine: super::TTC_DT_FINE,
            wrong_way_angle_deg: 100.0,
            direction_fraction: 0.95,
            min_progress_ratio: 0.2,
            min_expert_progress: 1.0,
            stationary_speed: 0.05,
            max_accel: 4.0,
            max_jerk: 8.0,
            max_yaw_rate: 0.6,
            comfort_fraction: 0.95,
        }
    }
}

impl ClsConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.ttc_weight,
            self.progress_weight,
            self.speed_weight,
            self.comfort_weight,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config(
                "cls weights must be nonnegative with a positive sum".into(),
            ));
        }
        let positive = [
            self.ttc_threshold,
            self.ttc_horizon,
            self.ttc_dt_fine,
            self.max_accel,
            self.max_jerk,
            self.max_yaw_rate,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("cls thresholds must be positive".into()));
        }
        for f in [
            self.direction_fraction,
            self.comfort_fraction,
            self.min_progress_ratio,
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("cls fractions must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Lane direction used for the ego: nearest route lane, else nearest lane.
fn route_tangent(map: &MapModel, p: Point2<f64>) -> Option<Point2<f64>> {
    map.nearest_route_lane(p).map(|(_, pr)| pr.tangent)
}

/// Distance travelled along the route direction, summed tick by tick.
pub fn route_progress(states: &[AgentState], map: &MapModel) -> f64 {
    states
        .windows(2)
        .map(|w| {
            let d = w[1].position() - w[0].position();
            match route_tangent(map, w[0].position()) {
                Some(t) => d.dot(t),
                None => d.norm(),
            }
        })
        .sum()
}

/// Whether an ego contact with `other` is the ego's fault: it is not when
/// the ego is stationary, or when the other agent's center is in the ego's
/// rear half while the ego moves forward.
pub fn ego_at_fault(ego: &AgentState, other: &AgentState, stationary_speed: f64) -> bool {
    if ego.speed() < stationary_speed {
        return false;
    }
    let rel = other.position() - ego.position();
    let along = rel.dot(Point2::new(ego.cos_heading, ego.sin_heading));
    let moving_forward = ego.signed_speed() > 0.0;
    !(moving_forward && along < 0.0)
}

struct Comfort {
    fraction_ok: f64,
}

fn comfort(states: &[AgentState], dt: f64, cfg: &ClsConfig) -> Comfort {
    let n = states.len();
    if n < 2 {
        return Comfort { fraction_ok: 1.0 };
    }
    let accel: Vec<f64> = states
        .windows(2)
        .map(|w| (w[1].signed_speed() - w[0].signed_speed()) / dt)
        .collect();
    let yaw: Vec<f64> = states
        .windows(2)
        .map(|w| wrap_angle(w[1].heading() - w[0].heading()) / dt)
        .collect();
    let jerk: Vec<f64> = accel.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let ok = (0..n - 1)
        .filter(|&j| {
            accel[j].abs() <= cfg.max_accel
                && yaw[j].abs() <= cfg.max_yaw_rate
                && jerk.get(j).is_none_or(|v| v.abs() <= cfg.max_jerk)
        })
        .count();
    Comfort {
        fraction_ok: ok as f64 / (n - 1) as f64,
    }
}

/// Scores the ego over the evaluated ticks of `log` against the scenario's
/// expert recording.
pub fn cls_composite(
    log: &SimulationLog,
    scenario: &Scenario,
    cfg: &ClsConfig,
) -> Result<ClsBreakdown> {
    let map = &scenario.map;
    let mut flags = BTreeSet::new();
    match log.status {
        RunStatus::Completed => {}
        RunStatus::PlannerFailure => {
            flags.insert(FailureFlag::PlannerFailure);
        }
        RunStatus::AgentFailure => {
            flags.insert(FailureFlag::AgentFailure);
        }
    }
    let h = log.history_ticks;
    let ego = log.trajectory_from(&log.ego_id, h)?;
    let states = &ego.states;
    let dt = log.tick_period;

    // collisions
    let summary = collision_rates(log);
    let mut at_fault = false;
    for e in summary
        .events
        .iter()
        .filter(|e| e.a == log.ego_id || e.b == log.ego_id)
    {
        let other = if e.a == log.ego_id { &e.b } else { &e.a };
        let rec = &log.ticks[e.tick - log.ticks[0].tick];
        if ego_at_fault(
            &rec.states[&log.ego_id],
            &rec.states[other],
            cfg.stationary_speed,
        ) {
            at_fault = true;
        }
    }
    if at_fault {
        flags.insert(FailureFlag::AtFaultCollision);
    }

    // drivable area: ego center must stay inside
    let drivable_ok =
        map.drivable.is_empty() || states.iter().all(|s| point_in_drivable(s.position(), map));
    if !drivable_ok {
        flags.insert(FailureFlag::OffRoad);
    }

    // direction
    let limit = cfg.wrong_way_angle_deg.to_radians().cos();
    let aligned = states
        .iter()
        .filter(|s| {
            route_tangent(map, s.position())
                .is_none_or(|t| t.dot(Point2::new(s.cos_heading, s.sin_heading)) >= limit)
        })
        .count();
    let direction_ok = aligned as f64 >= cfg.direction_fraction * states.len() as f64 - 1e-9;
    if !direction_ok {
        flags.insert(FailureFlag::WrongWay);
    }

    // progress against the expert over the same ticks
    let expert: Vec<AgentState> = (h..=log.last_tick())
        .map(|t| {
            let tr = &scenario.ego().trajectory;
            *tr.at_tick(t).unwrap_or_else(|| tr.last())
        })
        .collect();
    let expert_progress = route_progress(&expert, map);
    let ego_progress = route_progress(states, map);
    let ratio = if expert_progress < cfg.min_expert_progress {
        1.0
    } else {
        ego_progress / expert_progress
    };
    let progress_ok = ratio >= cfg.min_progress_ratio;
    if !progress_ok {
        flags.insert(FailureFlag::InsufficientProgress);
    }

    let min_ttc = log
        .ticks
        .iter()
        .filter(|t| t.tick >= h)
        .filter_map(|t| min_ego_ttc(&t.states, &log.ego_id, cfg.ttc_horizon, cfg.ttc_dt_fine))
        .min_by(f64::total_cmp);
    let ttc_score = match min_ttc {
        Some(t) if t < cfg.ttc_threshold => t / cfg.ttc_threshold,
        _ => 1.0,
    };

    let over = states
        .iter()
        .filter(|s| {
            map.nearest_aligned_lane(
                s.position(),
                s.heading(),
                crate::agents::idm::LANE_MATCH_ANGLE,
            )
            .and_then(|(l, _)| l.speed_limit)
            .is_some_and(|lim| s.speed() > lim * (1.0 + 1e-9))
        })
        .count();
    let speed_compliance = 1.0 - over as f64 / states.len() as f64;

    let c = comfort(states, dt, cfg);
    let comfort_score = if c.fraction_ok >= cfg.comfort_fraction {
        1.0
    } else {
        c.fraction_ok / cfg.comfort_fraction
    };

    let b = |ok: bool| if ok { 1.0 } else { 0.0 };
    ClsBreakdown::from_scores(
        &[
            ("no_at_fault_collision", b(!at_fault)),
            ("drivable_compliance", b(drivable_ok)),
            ("correct_direction", b(direction_ok)),
            ("min_progress", b(progress_ok)),
        ],
        &[
            ("ttc_score", ttc_score.clamp(0.0, 1.0), cfg.ttc_weight),
            ("progress_score", ratio.clamp(0.0, 1.0), cfg.progress_weight),
            ("speed_compliance", speed_compliance, cfg.speed_weight),
            ("comfort", comfort_score, cfg.comfort_weight),
        ],
        flags,
    )
}

/// Percentage of scenarios with a nonzero score.
pub fn success_rate(batch: &[ClsBreakdown]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ok = batch.iter().filter(|b| b.cls > 0.0).count();
    Ok(100.0 * ok as f64 / batch.len() as f64)
}

/// Percentage of scenarios with a nonzero score whose named core
/// sub-scores all exceed 0.5.
pub fn pass_rate(batch: &[ClsBreakdown], core_names: &[&str]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut passed = 0;
    for b in batch {
        let mut all = b.cls > 0.0;
        for name in core_names {
            let s = b
                .sub_score(name)
                .ok_or_else(|| Error::MissingSubScore(name.to_string()))?;
            all &= s.value > 0.5;
        }
        passed += usize::from(all);
    }
    Ok(100.0 * passed as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weighted(ttc: f64, progress: f64, speed: f64, comfort: f64) -> ClsBreakdown {
        ClsBreakdown::from_scores(
            &[("no_at_fault_collision", 1.0)],
            &[
                ("ttc_score", ttc, 5.0),
                ("progress_score", progress, 5.0),
                ("speed_compliance", speed, 4.0),
                ("comfort", comfort, 2.0),
            ],
            BTreeSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn weighted_mean_hand_case() {
        assert_eq!(weighted(0.5, 1.0, 1.0, 1.0).cls, 84.375);
    }

    #[test]
    fn gating() {
        let b = ClsBreakdown::from_scores(
            &[("drivable_compliance", 0.0)],
            &[("ttc_score", 1.0, 5.0)],
            BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(b.cls, 0.0);
        let flagged = ClsBreakdown::from_scores(
            &[("drivable_compliance", 1.0)],
            &[("ttc_score", 1.0, 5.0)],
            [FailureFlag::PlannerFailure].into(),
        )
        .unwrap();
        assert_eq!(flagged.cls, 0.0);
    }

    #[test]
    fn rates_by_hand() {
        let batch: Vec<_> = [80.0, 0.0, 50.0, 0.0]
            .iter()
            .map(|&c| ClsBreakdown {
                sub_scores: vec![],
                cls: c,
                failure_flags: BTreeSet::new(),
            })
            .collect();
        assert_eq!(success_rate(&batch).unwrap(), 50.0);
        assert!(matches!(success_rate(&[]), Err(Error::EmptyBatch)));

        let pr = [
            weighted(0.9, 0.9, 0.9, 0.9),
            weighted(0.4, 0.9, 0.9, 0.9),
            weighted(0.6, 0.6, 0.6, 0.6),
        ];
        let r = pass_rate(&pr, &DEFAULT_CORE_NAMES).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            pass_rate(&[weighted(1.0, 1.0, 1.0, 0.5)], &DEFAULT_CORE_NAMES).unwrap(),
            0.0
        );
        assert!(matches!(
            pass_rate(&pr, &["missing"]),
            Err(Error::MissingSubScore(_))
        ));
    }

    #[test]
    fn fault_rule() {
        let ego = AgentState::new(0.0, 0.0, 0.0, 5.0, 0.0, 4.5, 1.9).unwrap();
        let behind = AgentState::new(-4.0, 0.0, 0.0, 9.0, 0.0, 4.5, 1.9).unwrap();
        let ahead = AgentState::new(4.0, 0.0, 0.0, 1.0, 0.0, 4.5, 1.9).unwrap();
        assert!(!ego_at_fault(&ego, &behind, 0.05));
        assert!(ego_at_fault(&ego, &ahead, 0.05));
        let stopped = AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0, 4.5, 1.9).unwrap();
        assert!(!ego_at_fault(&stopped, &ahead, 0.05));
    }
}
