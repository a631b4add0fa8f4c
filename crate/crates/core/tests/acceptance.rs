//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error as StdError;
use std::f64::consts::{FRAC_PI_4, PI};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use rbench_core::agents::{
    idm_acceleration, idm_policy_step, IdmConfig, IdmParams, LogReplayPolicy, ObservationWindow,
};
use rbench_core::diffusion::{
    denoise_rollout_step, forward_perturb, DenoiserModel, DiffusionSchedule, Grid, MapCondition,
    NoiseMatrix, OracleDenoiser, TokenGrid, ToyDenoiser, ToyDenoiserConfig, FEATURE_DIM, K_MIN,
};
use rbench_core::dynamics::{
    bicycle_step, lqr_track_states, solve_discrete_riccati, Mat2, Mat4, Mat4x2,
};
use rbench_core::engine::{build_observation, TickRecord};
use rbench_core::geometry::{obb_intersects, Polyline};
use rbench_core::io::{
    evaluate, log_to_string, report_to_string, synthetic_corpus, write_evaluation, RunConfig,
    SyntheticKind, SyntheticParams,
};
use rbench_core::metrics::{
    cluster_traj_fid, collision_rates, jsd, normalized_entropy, off_road_rate, pass_rate,
    realism_suite, success_rate, ClsBreakdown, FailureFlag, RealismConfig, DEFAULT_CORE_NAMES,
};
use rbench_core::scene::{point_in_drivable, Lane};
use rbench_core::selection::{
    interaction_score, select_reactive_agents, HybridPolicy, InteractionWeights, SelectionConfig,
};
use rbench_core::{
    run_batch, run_scenario, AgentMode, AgentState, Bicycle, Control, EgoController, Idm, Lqr,
    MapModel, PlannerKind, Point, RunStatus, Scenario, SimulationConfig, SimulationLog, Trajectory,
};

use common::*;

type Res = Result<String, Box<dyn StdError>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn arcs(v: Vec<Scenario>) -> Vec<Arc<Scenario>> {
    v.into_iter().map(Arc::new).collect()
}

fn replay_config() -> SimulationConfig {
    SimulationConfig {
        agent_mode: AgentMode::LogReplay,
        ego_controller: EgoController::PerfectTracking,
        ..SimulationConfig::default()
    }
}

/// Model shared by the determinism and behavioral criteria.
fn general_model() -> &'static ToyDenoiser {
    static MODEL: std::sync::OnceLock<ToyDenoiser> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = synthetic_corpus(24, &SyntheticParams::default(), 0).expect("corpus");
        train(&corpus, 20, 0).0
    })
}

fn c1_replay_identity() -> Res {
    let scenarios = arcs(synthetic_corpus(20, &SyntheticParams::default(), 0)?);
    let start = Instant::now();
    let logs = run_batch(
        &scenarios,
        PlannerKind::LogReplay,
        &replay_config(),
        None,
        1,
    )?;
    let refs: Vec<SimulationLog> = scenarios
        .iter()
        .map(|s| SimulationLog::from_recording(s))
        .collect();
    let map_for = |id: &str| scenarios.iter().find(|s| s.id == id).map(|s| &s.map);
    let cmp = realism_suite(&logs, &refs, &map_for, &RealismConfig::default())?;
    let elapsed = start.elapsed();
    for log in &logs {
        let rec = refs
            .iter()
            .find(|r| r.scenario_id == log.scenario_id)
            .expect("same ids");
        ensure!(
            log.status == RunStatus::Completed,
            "{} did not complete",
            log.scenario_id
        );
        ensure!(
            log.same_states(rec),
            "{} differs from its recording",
            log.scenario_id
        );
    }
    let fid = cmp.fid.ok_or("FID undefined")?;
    ensure!(cmp.ttc_jsd == 0.0, "TTC JSD {}", cmp.ttc_jsd);
    ensure!(fid < 1e-8, "FID {fid}");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "20 scenarios bit-exact, JSD {}, FID {fid:.1e}, {:.2} s",
        cmp.ttc_jsd,
        elapsed.as_secs_f64()
    ))
}

fn c2_geometry_oracles() -> Res {
    let mut r = rng(2);
    let (mut checked, mut excluded, mut hits) = (0, 0, 0);
    for _ in 0..1000 {
        let a = random_box(&mut r, 3.0);
        let b = random_box(&mut r, 3.0);
        match dense_verdict(&a, &b, 0.002, 0.001) {
            None => excluded += 1,
            Some(truth) => {
                checked += 1;
                hits += usize::from(truth);
                ensure!(
                    obb_intersects(&a, &b) == truth,
                    "OBB disagreement on {a:?} {b:?}"
                );
            }
        }
    }
    for _ in 0..10 {
        let (map, areas) = random_star_map(&mut r);
        for _ in 0..1000 {
            let p = (r.random_range(-45.0..45.0), r.random_range(-45.0..45.0));
            ensure!(
                point_in_drivable(Point::new(p.0, p.1), &map) == inside_area(p, &areas),
                "point_in_drivable disagrees at {p:?}"
            );
        }
    }
    let (mut collided, mut off) = (0, 0);
    for _ in 0..100 {
        let log = random_log(&mut r, 8, 12, 25.0);
        let (map, areas) = random_star_map(&mut r);
        let summary = collision_rates(&log);
        let events: BTreeMap<(String, String), usize> = summary
            .events
            .iter()
            .map(|e| ((e.a.clone(), e.b.clone()), e.tick))
            .collect();
        ensure!(
            events == brute_force_collisions(&log),
            "collision events differ"
        );
        let (eo, oo) = brute_force_collision_rates(&log);
        ensure!(
            summary.ego_other_pct == eo && summary.other_other_pct == oo,
            "collision rates differ"
        );
        let rate = off_road_rate(&log, &map)?;
        ensure!(
            rate == brute_force_off_road(&log, &areas),
            "off-road rate differs"
        );
        collided += usize::from(!events.is_empty());
        off += usize::from(rate > 0.0);
    }
    Ok(format!(
        "OBB {checked} pairs ({hits} overlapping, {excluded} in contact band), 10000 points, \
         100 logs ({collided} with collisions, {off} with off-road)"
    ))
}

fn c3_kinematics() -> Res {
    let (l, delta, v, dt) = (3.0, 0.1, 5.0, 0.01);
    let radius = l / f64::tan(delta);
    let steps = (2.0 * PI * radius / (v * dt)).ceil() as usize;
    let u = Control {
        accel: 0.0,
        steering: delta,
    };
    let mut s = Bicycle::new(0.0, 0.0, 0.0, v);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        s = bicycle_step(&s, &u, dt, l);
        worst = worst.max((s.x.hypot(s.y - radius) - radius).abs());
    }
    ensure!(worst < 0.1, "circle deviation {worst}");

    let mut a = Mat4::<f64>::zeros();
    a[(0, 0)] = 1.0;
    let mut b = Mat4x2::<f64>::zeros();
    b[(0, 0)] = 1.0;
    b[(1, 1)] = 1.0;
    let sol = solve_discrete_riccati(&a, &b, &Mat4::identity(), &Mat2::identity(), 1e-14, 10_000)?;
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let dare_err = (sol.p[(0, 0)] - phi).abs();
    ensure!(dare_err < 1e-9, "DARE p = {}", sol.p[(0, 0)]);
    ensure!(
        (sol.gain[(0, 0)] - phi / (1.0 + phi)).abs() < 1e-9,
        "DARE gain {}",
        sol.gain[(0, 0)]
    );

    let (rad, speed, tick) = (30.0, 5.0, 0.1);
    let cfg = Lqr::default();
    let reference: Vec<Bicycle> = (0..200)
        .map(|i| {
            let th = speed * tick * i as f64 / rad;
            Bicycle::new(rad * th.sin(), rad - rad * th.cos(), th, speed)
        })
        .collect();
    let mut s = Bicycle::new(0.0, -0.3, 0.0, speed);
    let mut sq = 0.0;
    let n = 80;
    for i in 0..n {
        let u = lqr_track_states(&s, &reference[i..], &cfg, tick)?;
        s = bicycle_step(&s, &u, tick, cfg.wheelbase);
        let e = s.x.hypot(s.y - rad) - rad;
        sq += e * e;
    }
    let rms = (sq / n as f64).sqrt();
    ensure!(rms < 0.2, "LQR RMS lateral error {rms}");
    Ok(format!(
        "circle {worst:.4} m over {steps} steps, DARE |p - phi| {dare_err:.1e}, LQR RMS {rms:.4} m"
    ))
}

fn idm_lane_map() -> MapModel {
    MapModel {
        lanes: vec![Lane {
            id: "lane".into(),
            centerline: Polyline::new(vec![Point::new(-50.0, 0.0), Point::new(500.0, 0.0)])
                .expect("lane"),
            speed_limit: None,
        }],
        drivable: Vec::new(),
        route: Vec::new(),
    }
}

fn c4_idm() -> Res {
    let p = Idm {
        desired_speed: 15.0,
        min_gap: 2.0,
        time_headway: 1.5,
        max_accel: 1.5,
        comfortable_decel: 2.0,
        exponent: 4.0,
        ..IdmParams::default()
    };
    ensure!(
        idm_acceleration(0.0, 0.0, f64::INFINITY, &p)? == 1.5,
        "free-flow accel at rest"
    );
    ensure!(
        idm_acceleration(15.0, 0.0, f64::INFINITY, &p)? == 0.0,
        "free-flow accel at v0"
    );

    let closed_form = 17.0 / (1.0 - (2.0f64 / 3.0).powi(4)).sqrt();
    let f = |g: f64| idm_acceleration(10.0, 10.0, g, &p).expect("positive gap");
    let (mut lo, mut hi) = (1.0, 1000.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    ensure!(
        f(closed_form).abs() < 1e-9,
        "accel at closed-form gap {}",
        f(closed_form)
    );
    ensure!(
        (root - closed_form).abs() < 1e-9,
        "bisection {root} vs {closed_form}"
    );

    let map = idm_lane_map();
    let cfg = IdmConfig {
        params: p.clone(),
        use_lane_speed_limit: false,
        ..IdmConfig::default()
    };
    let mut follower = AgentState::new(0.0, 0.0, 0.0, 15.0, 0.0, 4.5, 1.9)?;
    let leader = AgentState::new(100.0, 0.0, 0.0, 0.0, 0.0, 4.5, 1.9)?;
    let mut min_gap = f64::INFINITY;
    for t in 0..600 {
        let slices = BTreeMap::from([
            (
                "follower".to_string(),
                Trajectory::new(vec![follower], 0.1, t)?,
            ),
            ("leader".to_string(), Trajectory::new(vec![leader], 0.1, t)?),
        ]);
        let obs = ObservationWindow {
            slices,
            map: &map,
            current_tick: t,
            ego_id: "leader".into(),
        };
        follower = idm_policy_step(&obs, &["follower".to_string()], &cfg)?["follower"];
        let gap = leader.x - follower.x - 4.5;
        min_gap = min_gap.min(gap);
        ensure!(gap > 0.0, "collision at tick {t}");
    }
    ensure!(
        follower.speed() < 0.1,
        "follower still moving at {}",
        follower.speed()
    );
    Ok(format!(
        "free flow exact, g* = {closed_form:.6} (bisection diff {:.1e}), stopped-leader min gap {min_gap:.2} m",
        (root - closed_form).abs()
    ))
}

fn token_grid(
    rows: usize,
    cols: usize,
    f: impl FnMut(usize, usize) -> [f64; FEATURE_DIM],
) -> TokenGrid {
    let ids = (0..rows).map(|r| format!("agent_{r}")).collect();
    TokenGrid::new(
        Grid::from_fn(rows, cols, f),
        ids,
        (0..cols as i64).collect(),
    )
    .expect("grid")
}

fn c5_diffusion() -> Res {
    // forward_perturb: E[x_t] = sqrt(ab)·E[x0], Var[x_t] = ab·Var[x0] + 1 − ab
    let mut r = rng(5);
    let normal = Normal::new(1.0, 2.0)?;
    let x0 = token_grid(100, 100, |_, _| {
        std::array::from_fn(|_| normal.sample(&mut r))
    });
    let (xt, _) = forward_perturb(
        &x0,
        &NoiseMatrix::filled(100, 100, 0.5),
        &DiffusionSchedule::default(),
        3,
    )?;
    let ab = 0.5f64;
    let mut worst: f64 = 0.0;
    for f in 0..FEATURE_DIM {
        let vals: Vec<f64> = xt.values.iter().map(|v| v[f]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let src: Vec<f64> = x0.values.iter().map(|v| v[f]).collect();
        let m0 = src.iter().sum::<f64>() / n;
        let v0 = src.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / (n - 1.0);
        let want_mean = ab.sqrt() * m0;
        let want_var = ab * v0 + 1.0 - ab;
        worst = worst.max(((var - want_var) / want_var).abs());
        worst = worst.max(((mean - want_mean) / want_mean).abs());
    }
    ensure!(
        worst < 0.05,
        "variance identity off by {:.1}%",
        worst * 100.0
    );

    // oracle denoiser over the full schedule, with clean context columns
    let (rows, cols, ctx) = (3, 12, 4);
    let mut r = rng(6);
    let clean = token_grid(rows, cols, |_, _| {
        std::array::from_fn(|_| r.random_range(-2.0..2.0))
    });
    let mut k = NoiseMatrix::filled(rows, cols, 1.0);
    let schedule = DiffusionSchedule::default();
    let (mut x, _) = forward_perturb(&clean, &k, &schedule, 9)?;
    for row in 0..rows {
        for c in 0..ctx {
            x.values.set(row, c, *clean.values.get(row, c));
            k.k.set(row, c, K_MIN);
        }
    }
    let lookup: BTreeMap<(String, i64), [f64; FEATURE_DIM]> = (0..rows)
        .flat_map(|row| (0..cols).map(move |c| (row, c)))
        .map(|(row, c)| {
            (
                (clean.agent_ids[row].clone(), c as i64),
                *clean.values.get(row, c),
            )
        })
        .collect();
    let oracle = OracleDenoiser {
        clean: move |id: &str, tick: i64| lookup.get(&(id.to_string(), tick)).copied(),
    };
    let cond = MapCondition::empty(rows);
    let mut steps = 0;
    while k.k.iter().any(|&v| v > K_MIN) {
        (x, k) = denoise_rollout_step(&x, &k, &oracle, &cond, &schedule, steps)?;
        steps += 1;
        for row in 0..rows {
            for c in 0..ctx {
                ensure!(
                    (*x.values.get(row, c)).map(f64::to_bits)
                        == (*clean.values.get(row, c)).map(f64::to_bits),
                    "context token ({row}, {c}) changed at step {steps}"
                );
            }
        }
        ensure!(
            steps as usize <= schedule.num_inference_steps,
            "schedule did not terminate"
        );
    }
    let recon = x
        .values
        .iter()
        .zip(clean.values.iter())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    ensure!(recon < 1e-3, "oracle reconstruction error {recon}");

    // training on constant-velocity data
    let start = Instant::now();
    let (model, report) = train(&cv_corpus(10, 0, 10.0), 20, 1);
    let train_time = start.elapsed();
    let baseline = report.zero_baseline_holdout_loss.min(1.0);
    let gain = 1.0 - report.final_holdout_loss / baseline;
    ensure!(
        gain >= 0.3,
        "holdout {} vs baseline {baseline}",
        report.final_holdout_loss
    );
    ensure!(
        train_time < Duration::from_secs(300),
        "training took {train_time:?}"
    );

    // closed loop at 10 m/s
    let mut sc = cv_corpus(1, 1000, 10.0).remove(0);
    for a in sc.agents.iter_mut().filter(|a| a.id != "ego") {
        let s0 = *a.trajectory.first();
        let states = (0..a.trajectory.len())
            .map(|j| AgentState::new(s0.x + j as f64, s0.y, 0.0, 10.0, 0.0, s0.length, s0.width))
            .collect::<rbench_core::Result<Vec<_>>>()?;
        a.trajectory = Trajectory::new(states, 0.1, 0)?;
    }
    let sc = Arc::new(sc);
    let n_others = sc.agents.len() - 1;
    let h = sc.history_ticks;
    let mut cfg = replay_config();
    cfg.agent_mode = AgentMode::DiffusionHybrid;
    cfg.duration_ticks = Some(h + 30);
    cfg.selection.weights.top_k = n_others;
    let model: Arc<dyn DenoiserModel> = Arc::new(model);
    let mut planner = PlannerKind::LogReplay.build(&sc, &cfg.idm);
    let log = run_scenario(&sc, planner.as_mut(), &cfg, Some(model))?;
    ensure!(
        log.status == RunStatus::Completed,
        "closed loop ended with {:?}",
        log.status
    );
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for w in log.ticks[h..].windows(2) {
        ensure!(
            w[1].reactive.len() == n_others,
            "not every agent was reactive"
        );
        for id in log.non_ego_ids() {
            let (a, b) = (&w[0].states[&id], &w[1].states[&id]);
            let d = (b.x - a.x).hypot(b.y - a.y);
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    ensure!(
        lo >= 0.8 && hi <= 1.2,
        "per-tick displacement in [{lo}, {hi}]"
    );
    Ok(format!(
        "variance within {:.2}%, oracle error {recon:.1e} in {steps} steps, holdout {:.3} vs {baseline:.3} \
         ({:.0}% better) in {:.1} s, closed-loop step [{lo:.3}, {hi:.3}] m",
        worst * 100.0,
        report.final_holdout_loss,
        gain * 100.0,
        train_time.as_secs_f64()
    ))
}

fn oracle_top_k(
    ego: &AgentState,
    agents: &[(String, AgentState)],
    w: &InteractionWeights,
) -> Vec<String> {
    let max_rel = agents
        .iter()
        .map(|(_, a)| (a.vx - ego.vx).hypot(a.vy - ego.vy))
        .fold(0.0, f64::max);
    let mut scored: Vec<(f64, f64, String)> = agents
        .iter()
        .map(|(id, a)| {
            let d = (a.x - ego.x).hypot(a.y - ego.y);
            let rel = (a.vx - ego.vx).hypot(a.vy - ego.vy);
            let cos = a.cos_heading * ego.cos_heading + a.sin_heading * ego.sin_heading;
            let vel = if max_rel > 0.0 { rel / max_rel } else { 0.0 };
            let s = w.w_d * (-d / w.d_thresh).exp() + w.w_v * vel + w.w_h * (1.0 - cos.abs());
            (s, d, id.clone())
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    scored.into_iter().take(w.top_k).map(|s| s.2).collect()
}

fn random_scene(r: &mut impl Rng, n: usize) -> (AgentState, Vec<(String, AgentState)>) {
    let st = |r: &mut dyn rand::RngCore| {
        AgentState::new(
            r.random_range(-60.0..60.0),
            r.random_range(-60.0..60.0),
            r.random_range(-PI..PI),
            r.random_range(-15.0..15.0),
            r.random_range(-15.0..15.0),
            4.5,
            1.9,
        )
        .expect("state")
    };
    let ego = st(r);
    let agents = (0..n).map(|i| (format!("a{i:02}"), st(r))).collect();
    (ego, agents)
}

/// Steps a hybrid policy closed-loop with the ego on its recording.
fn hybrid_closed_loop(sc: &Arc<Scenario>, mut policy: HybridPolicy) -> Res {
    let h = sc.history_ticks;
    let recording = SimulationLog::from_recording(sc);
    let mut ticks: Vec<TickRecord> = recording.ticks[..=h].to_vec();
    let controlled: Vec<String> = sc.non_ego().map(|a| a.id.clone()).collect();
    for t in h..sc.duration_ticks {
        let obs = build_observation(&ticks, sc, t, h)?;
        let mut states = rbench_core::agents::AgentPolicy::step(&mut policy, &obs, &controlled)?;
        states.insert(sc.ego_id.clone(), recording.ticks[t + 1].states[&sc.ego_id]);
        ticks.push(TickRecord {
            tick: t + 1,
            states,
            reactive: Vec::new(),
            plan: None,
        });
    }
    let mut log = recording.clone();
    log.ticks = ticks;
    ensure!(
        log.same_states(&recording),
        "{} diverged from replay",
        sc.id
    );
    Ok(String::new())
}

fn c6_selection() -> Res {
    let ego = AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0, 4.5, 1.9)?;
    let agent = AgentState::new(30.0, 0.0, FRAC_PI_4, 5.0, 0.0, 4.5, 1.9)?;
    let w = InteractionWeights::default();
    let s = interaction_score("a", &ego, &agent, &w, 10.0).score;
    let exact = 0.5 * (-1f64).exp() + 0.3 * 0.5 + 0.2 * (1.0 - 2f64.sqrt() / 2.0);
    ensure!((s - exact).abs() < 1e-9, "score {s} vs {exact}");
    ensure!((s - 0.39252).abs() < 5e-6, "score {s} vs 0.39252");

    let mut r = rng(6);
    for _ in 0..300 {
        let n = r.random_range(1..16);
        let (ego, agents) = random_scene(&mut r, n);
        let w = InteractionWeights {
            w_d: r.random_range(0.0..1.0),
            w_v: r.random_range(0.0..1.0),
            w_h: r.random_range(0.01..1.0),
            d_thresh: r.random_range(5.0..50.0),
            top_k: r.random_range(0..=n),
        };
        ensure!(
            select_reactive_agents(&ego, &agents, &w) == oracle_top_k(&ego, &agents, &w),
            "top-k differs from full sort"
        );
    }
    let (ego, agents) = random_scene(&mut r, 12);
    let base = InteractionWeights {
        top_k: 1,
        ..InteractionWeights::default()
    };
    let best = select_reactive_agents(&ego, &agents, &base);
    for _ in 0..100 {
        let lambda = 10f64.powf(r.random_range(-3.0..3.0));
        let scaled = InteractionWeights {
            w_d: base.w_d * lambda,
            w_v: base.w_v * lambda,
            w_h: base.w_h * lambda,
            ..base.clone()
        };
        ensure!(
            select_reactive_agents(&ego, &agents, &scaled) == best,
            "argmax moved at scale {lambda}"
        );
    }

    let scenarios = arcs(synthetic_corpus(6, &SyntheticParams::default(), 30)?);
    let untrained: Arc<dyn DenoiserModel> =
        Arc::new(ToyDenoiser::new(&ToyDenoiserConfig::default())?);
    let mut cfg = replay_config();
    cfg.agent_mode = AgentMode::DiffusionHybrid;
    cfg.selection.weights.top_k = 0;
    for sc in &scenarios {
        let mut planner = PlannerKind::LogReplay.build(sc, &cfg.idm);
        let log = run_scenario(sc, planner.as_mut(), &cfg, Some(untrained.clone()))?;
        ensure!(
            log.same_states(&SimulationLog::from_recording(sc)),
            "top_k = 0 diverged on {}",
            sc.id
        );
        ensure!(
            log.ticks.iter().all(|t| t.reactive.is_empty()),
            "agents marked reactive"
        );
    }
    for sc in &scenarios {
        for (top_k, period) in [(8, 10), (1, 1)] {
            let sel = SelectionConfig {
                weights: InteractionWeights {
                    top_k,
                    ..InteractionWeights::default()
                },
                selection_period: period,
                ..SelectionConfig::default()
            };
            let policy =
                HybridPolicy::new(Box::new(LogReplayPolicy::new(sc.clone())), sc.clone(), sel)?;
            hybrid_closed_loop(sc, policy)?;
        }
    }
    Ok(format!(
        "score {s:.9} (closed form {exact:.9}), 300 top-k scenes, 100 rescalings, hybrid replay bit-exact on {} scenarios",
        scenarios.len()
    ))
}

fn breakdown(cls: f64, cores: [f64; 4]) -> ClsBreakdown {
    let weighted: Vec<(&str, f64, f64)> = DEFAULT_CORE_NAMES
        .iter()
        .zip(cores)
        .map(|(n, v)| (*n, v, 1.0))
        .collect();
    let mut b = ClsBreakdown::from_scores(&[], &weighted, BTreeSet::new()).expect("unit scores");
    b.cls = cls;
    b
}

fn c7_metrics() -> Res {
    let p = [0.1, 0.2, 0.3, 0.4];
    ensure!(jsd(&p, &p)? == 0.0, "JSD identity");
    ensure!(jsd(&[1.0, 0.0], &[0.0, 1.0])? == 1.0, "JSD disjoint");

    let mut r = rng(7);
    let (n0, n1) = (Normal::new(0.0, 1.0)?, Normal::new(1.0, 2.0)?);
    let reference: Vec<Vec<f64>> = (0..10_000).map(|_| vec![n0.sample(&mut r)]).collect();
    let sim: Vec<Vec<f64>> = (0..10_000).map(|_| vec![n1.sample(&mut r)]).collect();
    let fid = cluster_traj_fid(&sim, &reference)?;
    ensure!((fid - 2.0).abs() < 0.15, "1-D FID {fid}");

    let mut counts = vec![0usize; 16];
    counts[..3].copy_from_slice(&[2, 1, 1]);
    let h = normalized_entropy(&counts, 16)?;
    ensure!((h - 0.375).abs() < 1e-9, "entropy {h}");

    let cls = ClsBreakdown::from_scores(
        &[],
        &[
            ("ttc_score", 0.5, 5.0),
            ("progress_score", 1.0, 5.0),
            ("speed_compliance", 1.0, 4.0),
            ("comfort", 1.0, 2.0),
        ],
        BTreeSet::new(),
    )?;
    ensure!(cls.cls == 84.375, "CLS {}", cls.cls);

    let sr_batch: Vec<ClsBreakdown> = [80.0, 0.0, 50.0, 0.0]
        .iter()
        .map(|&c| breakdown(c, [1.0; 4]))
        .collect();
    let sr = success_rate(&sr_batch)?;
    ensure!(sr == 50.0, "SR {sr}");
    let pr_batch = vec![
        breakdown(90.0, [0.9; 4]),
        breakdown(80.0, [0.4, 0.9, 0.9, 0.9]),
        breakdown(60.0, [0.6; 4]),
    ];
    let pr = pass_rate(&pr_batch, &DEFAULT_CORE_NAMES)?;
    ensure!(
        pr == 200.0 / 3.0 && format!("{pr:.2}") == "66.67",
        "PR {pr}"
    );

    let flags = [
        FailureFlag::AtFaultCollision,
        FailureFlag::OffRoad,
        FailureFlag::WrongWay,
    ];
    for _ in 0..1000 {
        let n = r.random_range(1..20);
        let batch: Vec<ClsBreakdown> = (0..n)
            .map(|_| {
                let cores: Vec<(&str, f64, f64)> = DEFAULT_CORE_NAMES
                    .iter()
                    .map(|name| (*name, r.random_range(0.0..=1.0), r.random_range(0.0..5.0)))
                    .collect();
                let mult = [("no_collision", if r.random_bool(0.2) { 0.0 } else { 1.0 })];
                let f: BTreeSet<FailureFlag> = flags
                    .iter()
                    .copied()
                    .filter(|_| r.random_bool(0.1))
                    .collect();
                ClsBreakdown::from_scores(&mult, &cores, f).expect("unit scores")
            })
            .collect();
        let (s, p) = (
            success_rate(&batch)?,
            pass_rate(&batch, &DEFAULT_CORE_NAMES)?,
        );
        ensure!(p <= s, "PR {p} above SR {s}");
    }
    Ok(format!(
        "JSD 0/1 exact, FID {fid:.4}, entropy {h}, CLS {}, SR {sr}, PR {pr:.2}, 1000 batches",
        cls.cls
    ))
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).expect("file"),
            )
        })
        .collect()
}

fn c8_determinism() -> Res {
    let tmp = tempfile::tempdir()?;
    let model_path = tmp.path().join("model.bin");
    general_model().save(&model_path)?;
    let model: Arc<dyn DenoiserModel> = Arc::new(ToyDenoiser::load(&model_path)?);
    let scenarios = arcs(synthetic_corpus(6, &SyntheticParams::default(), 50)?);
    let mut run = RunConfig {
        seed: 7,
        planner: PlannerKind::Idm,
        model_path: Some(model_path),
        ..RunConfig::default()
    };
    run.simulation.agent_mode = AgentMode::DiffusionHybrid;
    run.simulation.selection.weights.top_k = 1;
    run.simulation.selection.selection_period = 5;

    let a = evaluate(&scenarios, &run, Some(model.clone()), 1)?;
    let b = evaluate(&scenarios, &run, Some(model.clone()), 1)?;
    for (x, y) in a.logs.iter().zip(&b.logs) {
        ensure!(
            log_to_string(x)? == log_to_string(y)?,
            "log {} not reproducible",
            x.scenario_id
        );
    }
    for (x, y) in a.reports.iter().zip(&b.reports) {
        ensure!(
            report_to_string(x)? == report_to_string(y)?,
            "report not reproducible"
        );
    }
    let mut outputs = Vec::new();
    for n in [1, 4, 8] {
        let eval = evaluate(&scenarios, &run, Some(model.clone()), n)?;
        let dir = tmp.path().join(format!("par{n}"));
        write_evaluation(&dir, &eval, true)?;
        outputs.push((n, read_dir_bytes(&dir)));
    }
    let files = outputs[0].1.len();
    for (n, out) in &outputs[1..] {
        ensure!(
            *out == outputs[0].1,
            "output with {n} threads differs from 1 thread"
        );
    }
    Ok(format!(
        "repeat runs byte-identical, {files} output files identical for 1, 4 and 8 threads"
    ))
}

fn c9_behavior() -> Res {
    let model: Arc<dyn DenoiserModel> = Arc::new(general_model().clone());
    let mut notes = Vec::new();
    for kind in [
        SyntheticKind::StoppedObstacle,
        SyntheticKind::CrossingJunction,
    ] {
        let sc = Arc::new(rbench_core::io::gen_synthetic(
            kind,
            &SyntheticParams::default(),
            3,
        )?);
        let run = |planner: PlannerKind, mode: AgentMode| -> rbench_core::Result<SimulationLog> {
            let cfg = SimulationConfig {
                agent_mode: mode,
                seed: 11,
                ..SimulationConfig::default()
            };
            let mut p = planner.build(&sc, &cfg.idm);
            run_scenario(&sc, p.as_mut(), &cfg, Some(model.clone()))
        };
        let idm = run(PlannerKind::Idm, AgentMode::Idm)?;
        let hybrid = run(PlannerKind::Idm, AgentMode::DiffusionHybrid)?;
        let hybrid_replay_ego = run(PlannerKind::LogReplay, AgentMode::DiffusionHybrid)?;
        let recording = SimulationLog::from_recording(&sc);
        let ego_dev = max_position_gap(&hybrid, &recording, &sc.ego_id);
        ensure!(ego_dev > 2.0, "{kind}: ego deviates only {ego_dev} m");

        let mut lateral: f64 = 0.0;
        for t in &idm.ticks[idm.history_ticks..] {
            for id in idm.non_ego_ids() {
                let s = &t.states[&id];
                lateral = lateral.max(distance_to_lanes((s.x, s.y), &sc.map.lanes));
            }
        }
        ensure!(lateral < 0.1, "{kind}: IDM agent {lateral} m off its lane");

        let ids = hybrid.non_ego_ids();
        let vs_replay = ids
            .iter()
            .map(|id| max_position_gap(&hybrid, &hybrid_replay_ego, id))
            .fold(0.0, f64::max);
        let vs_idm = ids
            .iter()
            .map(|id| max_position_gap(&hybrid, &idm, id))
            .fold(0.0, f64::max);
        ensure!(
            vs_replay > 0.1,
            "{kind}: reactive agents ignore the ego ({vs_replay} m)"
        );
        ensure!(
            vs_idm > 0.1,
            "{kind}: reactive agents match IDM ({vs_idm} m)"
        );
        notes.push(format!(
            "{kind}: ego dev {ego_dev:.1} m, IDM lateral {lateral:.1e} m, hybrid shift {vs_replay:.2} m vs replay ego, {vs_idm:.2} m vs IDM"
        ));
    }
    Ok(notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Res); 9] = [
        ("1 full-replay identity", c1_replay_identity),
        ("2 geometry oracles", c2_geometry_oracles),
        ("3 kinematics", c3_kinematics),
        ("4 IDM", c4_idm),
        ("5 diffusion machinery", c5_diffusion),
        ("6 selection", c6_selection),
        ("7 metrics algebra", c7_metrics),
        ("8 determinism and parallelism", c8_determinism),
        ("9 behavioral smoke", c9_behavior),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}").into())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1} s): {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1} s): {e}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
