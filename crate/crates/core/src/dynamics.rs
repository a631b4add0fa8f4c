//! Kinematic bicycle model and LQR trajectory tracking for the ego vehicle.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2};
use crate::scalar::Scalar;
use crate::scene::{AgentState, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleState<T> {
    pub x: T,
    pub y: T,
    /// Radians in (−π, π].
    pub heading: T,
    /// Signed longitudinal speed.
    pub speed: T,
}

impl<T: Scalar> BicycleState<T> {
    pub fn new(x: T, y: T, heading: T, speed: T) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed,
        }
    }

    pub fn position(&self) -> Point2<T> {
        Point2::new(self.x, self.y)
    }
}

impl BicycleState<f64> {
    pub fn from_agent(s: &AgentState) -> Self {
        Self::new(s.x, s.y, s.heading(), s.signed_speed())
    }

    /// Converts back, keeping the footprint of `template`.
    pub fn to_agent(&self, template: &AgentState) -> AgentState {
        let (s, c) = self.heading.sin_cos();
        AgentState {
            x: self.x,
            y: self.y,
            sin_heading: s,
            cos_heading: c,
            vx: self.speed * c,
            vy: self.speed * s,
            length: template.length,
            width: template.width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput<T> {
    /// m/s²
    pub accel: T,
    /// Front-wheel angle, radians.
    pub steering: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrConfig<T> {
    pub wheelbase: T,
    /// Weights on (x, y, heading, speed) error.
    pub state_weights: [T; 4],
    /// Weights on (accel, steering).
    pub control_weights: [T; 2],
    /// Number of reference states searched for the tracking point.
    pub horizon_ticks: usize,
    pub riccati_tol: T,
    pub riccati_max_iter: usize,
    pub steering_limit: T,
    pub accel_min: T,
    pub accel_max: T,
    /// Floor on |speed| used when linearizing; below it the lateral error
    /// is not controllable and the Riccati iteration would not settle.
    pub min_linearization_speed: T,
}

impl<T: Scalar> Default for LqrConfig<T> {
    fn default() -> Self {
        let l = T::lit;
        Self {
            wheelbase: l(3.089),
            state_weights: [l(1.0), l(1.0), l(10.0), l(1.0)],
            control_weights: [l(1.0), l(1.0)],
            horizon_ticks: 40,
            riccati_tol: l(1e-9),
            riccati_max_iter: 10_000,
            steering_limit: l(0.6),
            accel_min: l(-4.0),
            accel_max: l(3.0),
            min_linearization_speed: l(1.0),
        }
    }
}

impl<T: Scalar> LqrConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.wheelbase > T::zero()) {
            return Err(Error::Config("lqr.wheelbase must be positive".into()));
        }
        if self.state_weights.iter().any(|w| *w < T::zero()) {
            return Err(Error::Config(
                "lqr.state_weights must be nonnegative".into(),
            ));
        }
        if self.control_weights.iter().any(|w| !(*w > T::zero())) {
            return Err(Error::Config("lqr.control_weights must be positive".into()));
        }
        if self.horizon_ticks < 1 {
            return Err(Error::Config("lqr.horizon_ticks must be at least 1".into()));
        }
        if !(self.accel_min <= self.accel_max) || !(self.steering_limit >= T::zero()) {
            return Err(Error::Config("lqr control limits are inconsistent".into()));
        }
        Ok(())
    }

    fn clamp(&self, u: ControlInput<T>) -> ControlInput<T> {
        ControlInput {
            accel: u.accel.max(self.accel_min).min(self.accel_max),
            steering: u
                .steering
                .max(-self.steering_limit)
                .min(self.steering_limit),
        }
    }
}

/// Forward-Euler step of the kinematic bicycle model.
pub fn bicycle_step<T: Scalar>(
    s: &BicycleState<T>,
    u: &ControlInput<T>,
    dt: T,
    wheelbase: T,
) -> BicycleState<T> {
    let (sin_h, cos_h) = s.heading.sin_cos();
    BicycleState {
        x: s.x + s.speed * cos_h * dt,
        y: s.y + s.speed * sin_h * dt,
        heading: wrap_angle(s.heading + s.speed / wheelbase * u.steering.tan() * dt),
        speed: s.speed + u.accel * dt,
    }
}

pub type Mat4<T> = SMatrix<T, 4, 4>;
pub type Mat4x2<T> = SMatrix<T, 4, 2>;
pub type Mat2x4<T> = SMatrix<T, 2, 4>;
pub type Mat2<T> = SMatrix<T, 2, 2>;

fn inverse2<T: Scalar>(m: &Mat2<T>) -> Result<Mat2<T>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det == T::zero() || !det.is_finite() {
        return Err(Error::Singular("R + BᵀPB"));
    }
    let inv = T::one() / det;
    Ok(Mat2::new(
        m[(1, 1)] * inv,
        -m[(0, 1)] * inv,
        -m[(1, 0)] * inv,
        m[(0, 0)] * inv,
    ))
}

/// Solution of the discrete algebraic Riccati equation.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution<T: Scalar> {
    pub p: Mat4<T>,
    /// Feedback gain, u = −K·x.
    pub gain: Mat2x4<T>,
    pub iterations: usize,
}

/// Iterates P ← Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA from P = Q until the
/// max-abs change drops below `tol`.
pub fn solve_discrete_riccati<T: Scalar>(
    a: &Mat4<T>,
    b: &Mat4x2<T>,
    q: &Mat4<T>,
    r: &Mat2<T>,
    tol: T,
    max_iter: usize,
) -> Result<RiccatiSolution<T>> {
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = *q;
    let mut last_delta = T::infinity();
    for it in 1..=max_iter {
        let pa = p * a;
        let btpa = bt * pa;
        let s = r + bt * p * b;
        let s_inv = inverse2(&s)?;
        let next = q + at * pa - btpa.transpose() * s_inv * btpa;
        // symmetrize to stop round-off from accumulating asymmetry
        let next = (next + next.transpose()) * T::lit(0.5);
        let delta = (next - p).iter().fold(T::zero(), |m, v| m.max(v.abs()));
        p = next;
        if !delta.is_finite() {
            break;
        }
        last_delta = delta;
        if delta < tol {
            let gain = inverse2(&(r + bt * p * b))? * bt * p * a;
            return Ok(RiccatiSolution {
                p,
                gain,
                iterations: it,
            });
        }
    }
    Err(Error::RiccatiDiverged {
        iterations: max_iter,
        last_delta: last_delta.to_f64().unwrap_or(f64::NAN),
    })
}

/// Tracking point on the reference path with feed-forward controls.
#[derive(Clone, Copy, Debug)]
struct TrackingPoint<T> {
    state: BicycleState<T>,
    feedforward: ControlInput<T>,
}

fn tracking_point<T: Scalar>(
    current: &BicycleState<T>,
    reference: &[BicycleState<T>],
    wheelbase: T,
    dt: T,
) -> TrackingPoint<T> {
    let p = current.position();
    let mut best: Option<(T, TrackingPoint<T>)> = None;
    let eps = T::lit(1e-9);
    for i in 0..reference.len().saturating_sub(1) {
        let (r0, r1) = (&reference[i], &reference[i + 1]);
        let seg = r1.position() - r0.position();
        let len = seg.norm();
        if len <= eps {
            continue;
        }
        let dir = seg * (T::one() / len);
        let mut t = (p - r0.position()).dot(dir) / len;
        // the first segment extends backwards so a vehicle trailing the
        // first reference sample projects behind it
        if i > 0 || t > T::zero() {
            t = t.max(T::zero());
        }
        t = t.min(T::one());
        let foot = r0.position() + seg * t;
        let dist = foot.distance(p);
        let dh = wrap_angle(r1.heading - r0.heading);
        let v_mid = (r0.speed + r1.speed) * T::lit(0.5);
        let yaw_rate = dh / dt;
        let steer_ff = if v_mid.abs() > T::lit(0.1) {
            (wheelbase * yaw_rate / v_mid).atan()
        } else {
            T::zero()
        };
        let cand = TrackingPoint {
            state: BicycleState::new(
                foot.x,
                foot.y,
                r0.heading + dh * t,
                r0.speed + (r1.speed - r0.speed) * t,
            ),
            feedforward: ControlInput {
                accel: (r1.speed - r0.speed) / dt,
                steering: steer_ff,
            },
        };
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, cand));
        }
    }
    match best {
        Some((_, tp)) => tp,
        None => {
            // stationary or single-sample reference
            let r0 = reference[0];
            let accel = reference
                .get(1)
                .map_or(T::zero(), |r1| (r1.speed - r0.speed) / dt);
            TrackingPoint {
                state: r0,
                feedforward: ControlInput {
                    accel,
                    steering: T::zero(),
                },
            }
        }
    }
}

/// Linearized bicycle dynamics about (heading, speed, steering).
pub fn linearize<T: Scalar>(
    heading: T,
    speed: T,
    steering: T,
    wheelbase: T,
    dt: T,
) -> (Mat4<T>, Mat4x2<T>) {
    let (s, c) = heading.sin_cos();
    let mut a = Mat4::<T>::identity();
    a[(0, 2)] = -speed * s * dt;
    a[(0, 3)] = c * dt;
    a[(1, 2)] = speed * c * dt;
    a[(1, 3)] = s * dt;
    a[(2, 3)] = steering.tan() / wheelbase * dt;
    let mut b = Mat4x2::<T>::zeros();
    b[(3, 0)] = dt;
    let cos_d = steering.cos();
    b[(2, 1)] = speed / (wheelbase * cos_d * cos_d) * dt;
    (a, b)
}

/// One LQR control decision against a reference given as bicycle states
/// sampled at `dt`.
pub fn lqr_track_states<T: Scalar>(
    current: &BicycleState<T>,
    reference: &[BicycleState<T>],
    cfg: &LqrConfig<T>,
    dt: T,
) -> Result<ControlInput<T>> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let window = &reference[..reference.len().min(cfg.horizon_ticks + 1)];
    let tp = tracking_point(current, window, cfg.wheelbase, dt);
    let r = tp.state;
    let error = SVector::<T, 4>::new(
        current.x - r.x,
        current.y - r.y,
        wrap_angle(current.heading - r.heading),
        current.speed - r.speed,
    );
    let v_min = cfg.min_linearization_speed;
    let v_lin = if r.speed.abs() >= v_min {
        r.speed
    } else if r.speed < T::zero() {
        -v_min
    } else {
        v_min
    };
    let (a, b) = linearize(r.heading, v_lin, tp.feedforward.steering, cfg.wheelbase, dt);
    let q = Mat4::from_diagonal(&SVector::<T, 4>::from(cfg.state_weights));
    let rm = Mat2::from_diagonal(&SVector::<T, 2>::from(cfg.control_weights));
    let sol = solve_discrete_riccati(&a, &b, &q, &rm, cfg.riccati_tol, cfg.riccati_max_iter)?;
    let correction = sol.gain * error;
    Ok(cfg.clamp(ControlInput {
        accel: tp.feedforward.accel - correction[0],
        steering: tp.feedforward.steering - correction[1],
    }))
}

/// LQR control against a planned trajectory.
pub fn lqr_track(
    current: &BicycleState<f64>,
    reference: &Trajectory,
    cfg: &LqrConfig<f64>,
    dt: f64,
) -> Result<ControlInput<f64>> {
    let states: Vec<_> = reference
        .states
        .iter()
        .map(BicycleState::from_agent)
        .collect();
    lqr_track_states(current, &states, cfg, dt)
}

/// Applies one controller decision and one bicycle step to the ego.
pub fn execute_plan(
    ego_state: &AgentState,
    plan: &Trajectory,
    cfg: &LqrConfig<f64>,
    dt: f64,
) -> Result<AgentState> {
    let current = BicycleState::from_agent(ego_state);
    let u = lqr_track(&current, plan, cfg, dt)?;
    let next = bicycle_step(&current, &u, dt, cfg.wheelbase);
    Ok(next.to_agent(ego_state))
}
