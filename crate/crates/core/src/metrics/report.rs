//! Per-scenario reports and the sim-vs-reference realism comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    cls_composite, cluster_traj_fid, collision_rates, diversity_entropy, jsd, off_road_rate,
    trajectory_features, ttc_histogram, ClsBreakdown, ClsConfig, Histogram, TrajectoryFeature,
};
use crate::engine::{RunStatus, SimulationLog};
use crate::error::Result;
use crate::scene::{AgentId, MapModel, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealismConfig {
    pub ttc_bins: usize,
    /// s
    pub ttc_horizon: f64,
    /// s
    pub ttc_dt_fine: f64,
    /// Cluster count for the diversity entropy.
    pub clusters: usize,
    pub seed: u64,
}

impl Default for RealismConfig {
    fn default() -> Self {
        Self {
            ttc_bins: 20,
            ttc_horizon: super::TTC_HORIZON,
            ttc_dt_fine: super::TTC_DT_FINE,
            clusters: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealismStats {
    pub ttc_histogram: Histogram,
    pub features: BTreeMap<AgentId, TrajectoryFeature>,
    /// Absent when the map has no drivable area.
    pub off_road_pct: Option<f64>,
    pub ego_other_pct: f64,
    pub other_other_pct: f64,
}

impl RealismStats {
    pub fn compute(
        log: &SimulationLog,
        map: Option<&MapModel>,
        cfg: &RealismConfig,
    ) -> Result<Self> {
        let mut features = BTreeMap::new();
        for id in log.agent_ids() {
            let traj = log.trajectory_from(&id, log.history_ticks)?;
            if traj.len() >= 3 {
                features.insert(id, trajectory_features(&traj)?);
            }
        }
        let collisions = collision_rates(log);
        let off_road_pct = match map {
            Some(m) if !m.drivable.is_empty() => Some(off_road_rate(log, m)?),
            _ => None,
        };
        Ok(Self {
            ttc_histogram: ttc_histogram(log, cfg.ttc_bins, cfg.ttc_horizon, cfg.ttc_dt_fine)?,
            features,
            off_road_pct,
            ego_other_pct: collisions.ego_other_pct,
            other_other_pct: collisions.other_other_pct,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario_id: String,
    pub planner: String,
    pub status: RunStatus,
    pub seed: u64,
    pub cls: ClsBreakdown,
    pub realism: RealismStats,
    /// Effective configuration the run used.
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn compute(
        log: &SimulationLog,
        scenario: &Scenario,
        cls: &ClsConfig,
        realism: &RealismConfig,
        config: serde_json::Value,
    ) -> Result<Self> {
        Ok(Self {
            scenario_id: log.scenario_id.clone(),
            planner: log.planner.clone(),
            status: log.status,
            seed: log.seed,
            cls: cls_composite(log, scenario, cls)?,
            realism: RealismStats::compute(log, Some(&scenario.map), realism)?,
            config,
        })
    }
}

/// Side-by-side realism statistics of simulated and reference logs.
/// Entries are `None` when they are undefined for the inputs (too few
/// trajectories, or no map with a drivable area).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealismComparison {
    pub ttc_jsd: f64,
    pub fid: Option<f64>,
    pub clusters: usize,
    pub entropy_sim: Option<f64>,
    pub entropy_ref: Option<f64>,
    pub off_road_pct_sim: Option<f64>,
    pub off_road_pct_ref: Option<f64>,
    pub ego_other_pct_sim: f64,
    pub ego_other_pct_ref: f64,
    pub other_other_pct_sim: f64,
    pub other_other_pct_ref: f64,
    pub trajectories_sim: usize,
    pub trajectories_ref: usize,
}

struct Pooled {
    hist: Histogram,
    features: Vec<Vec<f64>>,
    off_road: Option<f64>,
    ego_other: f64,
    other_other: f64,
}

fn pool<'m>(
    logs: &[SimulationLog],
    map_for: &dyn Fn(&str) -> Option<&'m MapModel>,
    cfg: &RealismConfig,
) -> Result<Pooled> {
    let mut hist = Histogram::new(0.0, cfg.ttc_horizon, cfg.ttc_bins)?;
    let mut features = Vec::new();
    let (mut off, mut off_n) = (0.0, 0usize);
    let (mut eo, mut oo) = (0.0, 0.0);
    for log in logs {
        let stats = RealismStats::compute(log, map_for(&log.scenario_id), cfg)?;
        hist.merge(&stats.ttc_histogram)?;
        features.extend(stats.features.values().map(TrajectoryFeature::to_vec));
        if let Some(v) = stats.off_road_pct {
            off += v;
            off_n += 1;
        }
        eo += stats.ego_other_pct;
        oo += stats.other_other_pct;
    }
    let n = logs.len().max(1) as f64;
    Ok(Pooled {
        hist,
        features,
        off_road: (off_n > 0).then(|| off / off_n as f64),
        ego_other: eo / n,
        other_other: oo / n,
    })
}

/// Pools TTC histograms and trajectory features over each side and
/// compares them. Collision and off-road rates are scenario means.
pub fn realism_suite<'m>(
    sim: &[SimulationLog],
    reference: &[SimulationLog],
    map_for: &dyn Fn(&str) -> Option<&'m MapModel>,
    cfg: &RealismConfig,
) -> Result<RealismComparison> {
    let s = pool(sim, map_for, cfg)?;
    let r = pool(reference, map_for, cfg)?;
    let ttc_jsd = match (s.hist.total() > 0, r.hist.total() > 0) {
        (true, true) => jsd(&s.hist.weights(), &r.hist.weights())?,
        // neither side ever closes in on another agent
        (false, false) => 0.0,
        // only one side does: maximally different
        _ => 1.0,
    };
    let fid = if s.features.len() >= 2 && r.features.len() >= 2 {
        Some(cluster_traj_fid(&s.features, &r.features)?)
    } else {
        None
    };
    let k = cfg
        .clusters
        .min(s.features.len())
        .min(r.features.len())
        .max(1);
    let entropy = |f: &[Vec<f64>]| -> Result<Option<f64>> {
        if f.is_empty() {
            Ok(None)
        } else {
            diversity_entropy(f, k, cfg.seed).map(Some)
        }
    };
    Ok(RealismComparison {
        ttc_jsd,
        fid,
        clusters: k,
        entropy_sim: entropy(&s.features)?,
        entropy_ref: entropy(&r.features)?,
        off_road_pct_sim: s.off_road,
        off_road_pct_ref: r.off_road,
        ego_other_pct_sim: s.ego_other,
        ego_other_pct_ref: r.ego_other,
        other_other_pct_sim: s.other_other,
        other_other_pct_ref: r.other_other,
        trajectories_sim: s.features.len(),
        trajectories_ref: r.features.len(),
    })
}
