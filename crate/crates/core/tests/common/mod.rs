//! Independent reference implementations and fixtures for the integration
//! tests. Nothing here calls the library's own geometry.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rbench_core::diffusion::{train_toy_denoiser, ToyDenoiser, TrainingConfig, TrainingReport};
use rbench_core::engine::TickRecord;
use rbench_core::geometry::Point2;
use rbench_core::io::{gen_synthetic, SyntheticKind, SyntheticParams};
use rbench_core::scene::{DrivableArea, Lane};
use rbench_core::{AgentState, MapModel, Obb, Point, Scenario, SimulationConfig, SimulationLog};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub type P = (f64, f64);

/// Corners of a rectangle from center, half extents and heading.
pub fn rect_corners(cx: f64, cy: f64, hl: f64, hw: f64, heading: f64) -> [P; 4] {
    let (s, c) = heading.sin_cos();
    corners_sc(cx, cy, hl, hw, s, c)
}

fn corners_sc(cx: f64, cy: f64, hl: f64, hw: f64, s: f64, c: f64) -> [P; 4] {
    let l = (hl * c, hl * s);
    let w = (-hw * s, hw * c);
    [
        (cx + l.0 + w.0, cy + l.1 + w.1),
        (cx - l.0 + w.0, cy - l.1 + w.1),
        (cx - l.0 - w.0, cy - l.1 - w.1),
        (cx + l.0 - w.0, cy + l.1 - w.1),
    ]
}

pub fn state_corners(s: &AgentState) -> [P; 4] {
    corners_sc(
        s.x,
        s.y,
        s.length / 2.0,
        s.width / 2.0,
        s.sin_heading,
        s.cos_heading,
    )
}

pub fn in_rect(p: P, cx: f64, cy: f64, hl: f64, hw: f64, heading: f64) -> bool {
    let (s, c) = heading.sin_cos();
    let (dx, dy) = (p.0 - cx, p.1 - cy);
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    lx.abs() <= hl && ly.abs() <= hw
}

/// Separating-axis test written directly on corner lists.
pub fn sat_overlap(a: &[P; 4], b: &[P; 4]) -> bool {
    let mut axes = Vec::new();
    for poly in [a, b] {
        for i in 0..2 {
            let (p, q) = (poly[i], poly[i + 1]);
            axes.push((-(q.1 - p.1), q.0 - p.0));
        }
    }
    axes.into_iter().all(|ax| {
        let proj = |poly: &[P; 4]| {
            poly.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p.0 * ax.0 + p.1 * ax.1;
                    (lo.min(d), hi.max(d))
                })
        };
        let (a0, a1) = proj(a);
        let (b0, b1) = proj(b);
        !(a1 < b0 || b1 < a0)
    })
}

fn boundary_samples(c: &[P; 4], spacing: f64) -> Vec<P> {
    let mut out = Vec::new();
    for i in 0..4 {
        let (p, q) = (c[i], c[(i + 1) % 4]);
        let len = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
        let n = (len / spacing).ceil().max(1.0) as usize;
        for j in 0..n {
            let t = j as f64 / n as f64;
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

/// Two convex regions meet iff a boundary point of one lies in the other.
/// Checked on boundaries sampled every `spacing` meters.
pub fn dense_overlap(a: &Obb, b: &Obb, spacing: f64) -> bool {
    let reach = a.half_length.hypot(a.half_width) + b.half_length.hypot(b.half_width);
    let d = (a.center.x - b.center.x).hypot(a.center.y - b.center.y);
    if d > reach + 4.0 * spacing {
        return false;
    }
    let ca = rect_corners(
        a.center.x,
        a.center.y,
        a.half_length,
        a.half_width,
        a.heading,
    );
    let cb = rect_corners(
        b.center.x,
        b.center.y,
        b.half_length,
        b.half_width,
        b.heading,
    );
    boundary_samples(&ca, spacing).into_iter().any(|p| {
        in_rect(
            p,
            b.center.x,
            b.center.y,
            b.half_length,
            b.half_width,
            b.heading,
        )
    }) || boundary_samples(&cb, spacing).into_iter().any(|p| {
        in_rect(
            p,
            a.center.x,
            a.center.y,
            a.half_length,
            a.half_width,
            a.heading,
        )
    })
}

/// Dense verdict for a pair, or `None` inside the contact band where
/// growing and shrinking `b` by `band` changes the answer.
pub fn dense_verdict(a: &Obb, b: &Obb, band: f64, spacing: f64) -> Option<bool> {
    let grown = Obb {
        half_length: b.half_length + band,
        half_width: b.half_width + band,
        ..*b
    };
    let shrunk = Obb {
        half_length: b.half_length - band,
        half_width: b.half_width - band,
        ..*b
    };
    let hi = dense_overlap(a, &grown, spacing);
    let lo = dense_overlap(a, &shrunk, spacing);
    (hi == lo).then_some(lo)
}

pub fn random_box(r: &mut ChaCha8Rng, spread: f64) -> Obb {
    Obb {
        center: Point::new(
            r.random_range(-spread..spread),
            r.random_range(-spread..spread),
        ),
        half_length: r.random_range(0.5..3.0),
        half_width: r.random_range(0.3..1.5),
        heading: r.random_range(-PI..PI),
    }
}

/// Winding number of a closed ring around `p`.
pub fn winding_number(p: P, ring: &[P]) -> i32 {
    let n = ring.len();
    let mut w = 0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let side = (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
        if a.1 <= p.1 {
            if b.1 > p.1 && side > 0.0 {
                w += 1;
            }
        } else if b.1 <= p.1 && side < 0.0 {
            w -= 1;
        }
    }
    w
}

pub fn inside_ring(p: P, ring: &[P]) -> bool {
    winding_number(p, ring) != 0
}

/// Point in any outer ring and in none of that ring's holes.
pub fn inside_area(p: P, areas: &[(Vec<P>, Vec<Vec<P>>)]) -> bool {
    areas
        .iter()
        .any(|(outer, holes)| inside_ring(p, outer) && !holes.iter().any(|h| inside_ring(p, h)))
}

/// Star-shaped ring around `(cx, cy)` with radii in `[r_lo, r_hi)`.
pub fn star_ring(r: &mut ChaCha8Rng, cx: f64, cy: f64, r_lo: f64, r_hi: f64, n: usize) -> Vec<P> {
    let mut angles: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    angles
        .into_iter()
        .map(|a| {
            let rad = r.random_range(r_lo..r_hi);
            (cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect()
}

/// A map with one star-shaped drivable region holding one star hole, and
/// the same rings as plain tuples.
pub fn random_star_map(r: &mut ChaCha8Rng) -> (MapModel, Vec<(Vec<P>, Vec<Vec<P>>)>) {
    let n_outer = r.random_range(5..14);
    let n_hole = r.random_range(3..8);
    let outer = star_ring(r, 0.0, 0.0, 20.0, 40.0, n_outer);
    let (hx, hy) = (r.random_range(-4.0..4.0), r.random_range(-4.0..4.0));
    let hole = star_ring(r, hx, hy, 3.0, 9.0, n_hole);
    let to_pts = |ring: &[P]| {
        ring.iter()
            .map(|&(x, y)| Point2::new(x, y))
            .collect::<Vec<_>>()
    };
    let area = DrivableArea::new(to_pts(&outer), vec![to_pts(&hole)]).expect("valid rings");
    let map = MapModel {
        lanes: Vec::new(),
        drivable: vec![area],
        route: Vec::new(),
    };
    (map, vec![(outer, vec![hole])])
}

/// Log of `n_agents` vehicles at random poses, clustered enough that some
/// of them touch and some leave the map.
pub fn random_log(
    r: &mut ChaCha8Rng,
    n_agents: usize,
    n_ticks: usize,
    spread: f64,
) -> SimulationLog {
    let ids: Vec<String> = (0..n_agents)
        .map(|i| {
            if i == 0 {
                "ego".to_string()
            } else {
                format!("a{i}")
            }
        })
        .collect();
    let history = r.random_range(0..n_ticks / 2);
    let sizes: Vec<(f64, f64)> = (0..n_agents)
        .map(|_| (r.random_range(3.5..5.5), r.random_range(1.6..2.2)))
        .collect();
    let ticks = (0..n_ticks)
        .map(|t| {
            let states: BTreeMap<String, AgentState> = ids
                .iter()
                .zip(&sizes)
                .map(|(id, &(l, w))| {
                    let s = AgentState::new(
                        r.random_range(-spread..spread),
                        r.random_range(-spread..spread),
                        r.random_range(-PI..PI),
                        r.random_range(-10.0..10.0),
                        r.random_range(-10.0..10.0),
                        l,
                        w,
                    )
                    .expect("valid state");
                    (id.clone(), s)
                })
                .collect();
            TickRecord {
                tick: t,
                states,
                reactive: Vec::new(),
                plan: None,
            }
        })
        .collect();
    SimulationLog {
        scenario_id: "random".into(),
        ego_id: "ego".into(),
        planner: "none".into(),
        seed: 0,
        status: rbench_core::RunStatus::Completed,
        failure: None,
        history_ticks: history,
        tick_period: 0.1,
        ticks,
        config: SimulationConfig::default(),
    }
}

/// Colliding pairs with their first contact tick, over ticks from
/// `history_ticks` on.
pub fn brute_force_collisions(log: &SimulationLog) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for rec in &log.ticks {
        if rec.tick < log.history_ticks {
            continue;
        }
        let all: Vec<(&String, &AgentState)> = rec.states.iter().collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let key = (all[i].0.clone(), all[j].0.clone());
                if out.contains_key(&key) {
                    continue;
                }
                if sat_overlap(&state_corners(all[i].1), &state_corners(all[j].1)) {
                    out.insert(key, rec.tick);
                }
            }
        }
    }
    out
}

/// (ego-other %, other-other %) by counting.
pub fn brute_force_collision_rates(log: &SimulationLog) -> (f64, f64) {
    let pairs = brute_force_collisions(log);
    let ego = &log.ego_id;
    let ego_hit = pairs.keys().any(|(a, b)| a == ego || b == ego);
    let mut involved = BTreeSet::new();
    for (a, b) in pairs.keys() {
        if a != ego && b != ego {
            involved.insert(a.clone());
            involved.insert(b.clone());
        }
    }
    let non_ego = log.ticks[0].states.len() - 1;
    (
        if ego_hit { 100.0 } else { 0.0 },
        100.0 * involved.len() as f64 / non_ego as f64,
    )
}

pub fn brute_force_off_road(log: &SimulationLog, areas: &[(Vec<P>, Vec<Vec<P>>)]) -> f64 {
    let ids: Vec<&String> = log.ticks[0].states.keys().collect();
    let off = ids
        .iter()
        .filter(|id| {
            log.ticks
                .iter()
                .filter(|t| t.tick >= log.history_ticks)
                .any(|t| {
                    state_corners(&t.states[**id])
                        .iter()
                        .all(|&c| !inside_area(c, areas))
                })
        })
        .count();
    100.0 * off as f64 / ids.len() as f64
}

/// Distance from `p` to the nearest point of any lane centerline.
pub fn distance_to_lanes(p: P, lanes: &[Lane]) -> f64 {
    let mut best = f64::INFINITY;
    for lane in lanes {
        for w in lane.centerline.points().windows(2) {
            let (a, b) = ((w[0].x, w[0].y), (w[1].x, w[1].y));
            let ab = (b.0 - a.0, b.1 - a.1);
            let t = (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / (ab.0 * ab.0 + ab.1 * ab.1))
                .clamp(0.0, 1.0);
            let q = (a.0 + t * ab.0, a.1 + t * ab.1);
            best = best.min((p.0 - q.0).hypot(p.1 - q.1));
        }
    }
    best
}

pub fn max_position_gap(a: &SimulationLog, b: &SimulationLog, id: &str) -> f64 {
    a.ticks
        .iter()
        .zip(&b.ticks)
        .map(|(x, y)| {
            let (p, q) = (&x.states[id], &y.states[id]);
            (p.x - q.x).hypot(p.y - q.y)
        })
        .fold(0.0, f64::max)
}

/// Straight-cruise scenarios, where every agent drives at constant
/// velocity.
pub fn cv_corpus(n: usize, seed: u64, ego_speed: f64) -> Vec<Scenario> {
    let params = SyntheticParams {
        ego_speed,
        ..SyntheticParams::default()
    };
    (0..n as u64)
        .map(|i| {
            gen_synthetic(SyntheticKind::StraightCruise, &params, seed + i).expect("generates")
        })
        .collect()
}

pub fn train(scenarios: &[Scenario], epochs: usize, seed: u64) -> (ToyDenoiser, TrainingReport) {
    let cfg = TrainingConfig {
        epochs,
        seed,
        ..TrainingConfig::default()
    };
    train_toy_denoiser(scenarios, &cfg).expect("training runs")
}
