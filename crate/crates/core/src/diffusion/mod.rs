//! Noise-decoupled diffusion rollout.
//!
//! Every agent-time token carries its own noise level `k ∈ [K_MIN, 1]`.
//! Tokens at `K_MIN` are clean context and are never modified by a
//! denoising step; everything else moves one level down the schedule per
//! step. New frames enter the window as pure noise at `k = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scene::{AgentId, AgentState};

pub mod model;
pub mod policy;
pub mod train;

pub use model::{DenoiserModel, MapCondition, ToyDenoiser, ToyDenoiserConfig};
pub use policy::{DiffusionConfig, DiffusionPolicy, OracleDenoiser};
pub use train::{train_toy_denoiser, TrainingConfig, TrainingReport};

/// Noise level that marks a token as clean.
pub const K_MIN: f64 = 1e-4;

/// Features per token: x, y, sin, cos, vx, vy, length, width.
pub const FEATURE_DIM: usize = 8;

pub type Feature = [f64; FEATURE_DIM];

/// Combines two seeds into one (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a (seed, stream) pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn standard_normal_feature(rng: &mut impl Rng) -> Feature {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// ᾱ(k) = cos²((0.99·k + 0.005)·π/2).
pub fn alpha_bar(k: f64) -> f64 {
    let c = ((k * 0.99 + 0.005) * std::f64::consts::FRAC_PI_2).cos();
    c * c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub num_inference_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            num_inference_steps: 8,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(num_inference_steps: usize) -> Result<Self> {
        if num_inference_steps == 0 {
            return Err(Error::Config(
                "num_inference_steps must be at least 1".into(),
            ));
        }
        Ok(Self {
            num_inference_steps,
        })
    }

    pub fn alpha_bar(&self, k: f64) -> f64 {
        alpha_bar(k)
    }

    /// Levels k₁ = 1 > k₂ > … > k_S, evenly spaced.
    pub fn levels(&self) -> Vec<f64> {
        let s = self.num_inference_steps as f64;
        (0..self.num_inference_steps)
            .map(|i| 1.0 - i as f64 / s)
            .collect()
    }

    /// The level a token at `k` moves to after one step; `K_MIN` after the
    /// last level.
    pub fn next_level(&self, k: f64) -> f64 {
        self.levels().into_iter().find(|&l| l < k).unwrap_or(K_MIN)
    }
}

#[inline]
pub fn is_clean(k: f64) -> bool {
    k <= K_MIN
}

/// Dense row-major agents × time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }

    pub fn check_index(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    fn check_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: self.shape(),
            });
        }
        Ok(())
    }
}

/// Agent-time grid of normalized feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub values: Grid<Feature>,
    pub agent_ids: Vec<AgentId>,
    /// Absolute tick of every column, strictly increasing.
    pub tick_of_column: Vec<i64>,
}

impl TokenGrid {
    pub fn new(
        values: Grid<Feature>,
        agent_ids: Vec<AgentId>,
        tick_of_column: Vec<i64>,
    ) -> Result<Self> {
        let (rows, cols) = values.shape();
        if agent_ids.len() != rows || tick_of_column.len() != cols {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                got: (agent_ids.len(), tick_of_column.len()),
            });
        }
        if tick_of_column.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("column ticks must be strictly increasing"));
        }
        Ok(Self {
            values,
            agent_ids,
            tick_of_column,
        })
    }

    pub fn zeros(agent_ids: Vec<AgentId>, tick_of_column: Vec<i64>) -> Result<Self> {
        let values = Grid::filled(agent_ids.len(), tick_of_column.len(), [0.0; FEATURE_DIM]);
        Self::new(values, agent_ids, tick_of_column)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.agent_ids.iter().position(|a| a == id)
    }
}

/// Per-token noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMatrix {
    pub k: Grid<f64>,
}

impl NoiseMatrix {
    pub fn filled(rows: usize, cols: usize, k: f64) -> Self {
        Self {
            k: Grid::filled(rows, cols, k),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.k.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        *self.k.get(row, col)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|&k| !(K_MIN..=1.0).contains(&k)) {
            return Err(Error::invalid("noise levels must lie in [k_min, 1]"));
        }
        Ok(())
    }
}

/// Normalization between agent states and token features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureScaling {
    /// Positions are centered here (the scenario's ego start).
    pub origin: Point2<f64>,
    /// m per unit
    pub position_scale: f64,
    /// m/s per unit
    pub velocity_scale: f64,
    /// m per unit
    pub size_scale: f64,
}

impl Default for FeatureScaling {
    fn default() -> Self {
        Self {
            origin: Point2::zero(),
            position_scale: 50.0,
            velocity_scale: 15.0,
            size_scale: 5.0,
        }
    }
}

impl FeatureScaling {
    pub fn with_origin(&self, origin: Point2<f64>) -> Self {
        Self {
            origin,
            ..self.clone()
        }
    }

    pub fn encode(&self, s: &AgentState) -> Feature {
        [
            (s.x - self.origin.x) / self.position_scale,
            (s.y - self.origin.y) / self.position_scale,
            s.sin_heading,
            s.cos_heading,
            s.vx / self.velocity_scale,
            s.vy / self.velocity_scale,
            s.length / self.size_scale,
            s.width / self.size_scale,
        ]
    }

    /// Inverse of [`FeatureScaling::encode`] with (sin, cos) renormalized.
    /// A vanishing heading vector falls back to the velocity direction, and
    /// extents are floored at 0.1 m.
    pub fn decode(&self, f: &Feature) -> AgentState {
        let vx = f[4] * self.velocity_scale;
        let vy = f[5] * self.velocity_scale;
        let (mut s, mut c) = (f[2], f[3]);
        let norm = s.hypot(c);
        if norm > 1e-12 && norm.is_finite() {
            s /= norm;
            c /= norm;
        } else {
            let h = vy.atan2(vx);
            (s, c) = h.sin_cos();
        }
        AgentState {
            x: f[0] * self.position_scale + self.origin.x,
            y: f[1] * self.position_scale + self.origin.y,
            sin_heading: s,
            cos_heading: c,
            vx,
            vy,
            length: (f[6] * self.size_scale).max(0.1),
            width: (f[7] * self.size_scale).max(0.1),
        }
    }

    /// Per-tick position increment, in normalized units, per unit of
    /// normalized velocity.
    pub fn velocity_to_position(&self, dt: f64) -> f64 {
        dt * self.velocity_scale / self.position_scale
    }
}

/// x_t = √ᾱ(k)·x0 + √(1−ᾱ(k))·ε per token, ε ~ N(0, I). Returns (x_t, ε).
pub fn forward_perturb(
    x0: &TokenGrid,
    k: &NoiseMatrix,
    schedule: &DiffusionSchedule,
    rng_seed: u64,
) -> Result<(TokenGrid, Grid<Feature>)> {
    k.k.check_shape(x0.shape())?;
    if k.k.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::invalid("noise levels must lie in (0, 1]"));
    }
    let mut rng = rng_for(rng_seed, 0);
    let (rows, cols) = x0.shape();
    let eps = Grid::from_fn(rows, cols, |_, _| standard_normal_feature(&mut rng));
    let mut xt = x0.clone();
    for r in 0..rows {
        for c in 0..cols {
            let ab = schedule.alpha_bar(k.get(r, c));
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let e = eps.get(r, c);
            let v = xt.values.get_mut(r, c);
            for f in 0..FEATURE_DIM {
                v[f] = sa * v[f] + sn * e[f];
            }
        }
    }
    Ok((xt, eps))
}

/// Mean squared error between true and predicted noise over all tokens and
/// features.
pub fn noise_mse(eps: &Grid<Feature>, predicted: &Grid<Feature>) -> Result<f64> {
    predicted.check_shape(eps.shape())?;
    let n = eps.data.len() * FEATURE_DIM;
    if n == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let sum: f64 = eps
        .iter()
        .zip(predicted.iter())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(sum / n as f64)
}

/// Denoising objective E‖ε − ε_θ(x_t, c, k)‖² for one draw of ε.
pub fn training_loss(
    model: &dyn DenoiserModel,
    x0: &TokenGrid,
    condition: &MapCondition,
    k: &NoiseMatrix,
    schedule: &DiffusionSchedule,
    rng_seed: u64,
) -> Result<f64> {
    let (xt, eps) = forward_perturb(x0, k, schedule, rng_seed)?;
    let pred = model.predict_noise(&xt, condition, k)?;
    noise_mse(&eps, &pred)
}

/// I.i.d. uniform noise levels in (k_min, 1].
pub fn sample_training_noise_matrix(rows: usize, cols: usize, rng_seed: u64) -> NoiseMatrix {
    let mut rng = rng_for(rng_seed, 1);
    NoiseMatrix {
        k: Grid::from_fn(rows, cols, |_, _| {
            let u: f64 = rng.random();
            1.0 - u * (1.0 - K_MIN)
        }),
    }
}

/// History and goal columns are clean, future columns pure noise.
pub fn build_inference_noise(
    rows: usize,
    history_cols: &[usize],
    future_cols: &[usize],
    goal_cols: &[usize],
) -> Result<NoiseMatrix> {
    let cols = history_cols.len() + future_cols.len() + goal_cols.len();
    let mut level: Vec<Option<f64>> = vec![None; cols];
    for (set, k) in [
        (history_cols, K_MIN),
        (goal_cols, K_MIN),
        (future_cols, 1.0),
    ] {
        for &c in set {
            let slot = level.get_mut(c).ok_or_else(|| {
                Error::invalid(format!("column {c} outside a {cols}-column grid"))
            })?;
            if slot.is_some() {
                return Err(Error::OverlappingColumns(c));
            }
            *slot = Some(k);
        }
    }
    Ok(NoiseMatrix {
        k: Grid::from_fn(rows, cols, |_, c| {
            level[c].expect("partition covers all columns")
        }),
    })
}

/// One reverse-diffusion (DDIM) step over every noisy token. Clean tokens
/// are copied through untouched. `eta > 0` adds the stochastic DDIM term.
pub fn denoise_rollout_step_with_eta(
    x: &TokenGrid,
    k: &NoiseMatrix,
    model: &dyn DenoiserModel,
    condition: &MapCondition,
    schedule: &DiffusionSchedule,
    eta: f64,
    rng_seed: u64,
) -> Result<(TokenGrid, NoiseMatrix)> {
    k.k.check_shape(x.shape())?;
    if k.k.iter().all(|&v| is_clean(v)) {
        return Ok((x.clone(), k.clone()));
    }
    let eps_hat = model.predict_noise(x, condition, k)?;
    eps_hat.check_shape(x.shape())?;
    let mut rng = rng_for(rng_seed, 2);
    let (rows, cols) = x.shape();
    let mut x_next = x.clone();
    let mut k_next = k.clone();
    for r in 0..rows {
        for c in 0..cols {
            let level = k.get(r, c);
            if is_clean(level) {
                continue;
            }
            let next = schedule.next_level(level);
            let ab = schedule.alpha_bar(level);
            // the final step lands on the clean estimate itself
            let ab_next = if is_clean(next) {
                1.0
            } else {
                schedule.alpha_bar(next)
            };
            let sigma = if eta > 0.0 && ab_next < 1.0 {
                eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt()
            } else {
                0.0
            };
            let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
            let e = eps_hat.get(r, c);
            let cur = *x.values.get(r, c);
            let z = if sigma > 0.0 {
                standard_normal_feature(&mut rng)
            } else {
                [0.0; FEATURE_DIM]
            };
            let out = x_next.values.get_mut(r, c);
            for f in 0..FEATURE_DIM {
                let x0_hat = (cur[f] - (1.0 - ab).sqrt() * e[f]) / ab.sqrt();
                out[f] = ab_next.sqrt() * x0_hat + dir * e[f] + sigma * z[f];
            }
            k_next.k.set(r, c, next);
        }
    }
    Ok((x_next, k_next))
}

/// Deterministic DDIM step.
pub fn denoise_rollout_step(
    x: &TokenGrid,
    k: &NoiseMatrix,
    model: &dyn DenoiserModel,
    condition: &MapCondition,
    schedule: &DiffusionSchedule,
    rng_seed: u64,
) -> Result<(TokenGrid, NoiseMatrix)> {
    denoise_rollout_step_with_eta(x, k, model, condition, schedule, 0.0, rng_seed)
}

/// Drops the `new_frame_count` oldest columns (which must be clean) and
/// appends as many pure-noise columns at `k = 1`.
pub fn advance_window(
    x: &TokenGrid,
    k: &NoiseMatrix,
    new_frame_count: usize,
    rng_seed: u64,
) -> Result<(TokenGrid, NoiseMatrix)> {
    k.k.check_shape(x.shape())?;
    let (rows, cols) = x.shape();
    if new_frame_count == 0 {
        return Ok((x.clone(), k.clone()));
    }
    if new_frame_count > cols {
        return Err(Error::invalid(format!(
            "cannot advance a {cols}-column window by {new_frame_count}"
        )));
    }
    for r in 0..rows {
        for c in 0..new_frame_count {
            let level = k.get(r, c);
            if !is_clean(level) {
                return Err(Error::WindowNotReady {
                    row: r,
                    col: c,
                    k: level,
                });
            }
        }
    }
    let mut rng = rng_for(rng_seed, 3);
    let fresh: Vec<Feature> = (0..rows * new_frame_count)
        .map(|_| standard_normal_feature(&mut rng))
        .collect();
    let keep = cols - new_frame_count;
    let values = Grid::from_fn(rows, cols, |r, c| {
        if c < keep {
            *x.values.get(r, c + new_frame_count)
        } else {
            fresh[r * new_frame_count + (c - keep)]
        }
    });
    let noise = Grid::from_fn(rows, cols, |r, c| {
        if c < keep {
            k.get(r, c + new_frame_count)
        } else {
            1.0
        }
    });
    let last = *x.tick_of_column.last().expect("non-empty window");
    let ticks = x.tick_of_column[new_frame_count..]
        .iter()
        .copied()
        .chain((1..=new_frame_count as i64).map(|i| last + i))
        .collect();
    Ok((
        TokenGrid {
            values,
            agent_ids: x.agent_ids.clone(),
            tick_of_column: ticks,
        },
        NoiseMatrix { k: noise },
    ))
}

/// Overwrites one token with an observed state and marks it clean.
pub fn inject_environment_update(
    x: &mut TokenGrid,
    k: &mut NoiseMatrix,
    agent_row: usize,
    col: usize,
    observed: &AgentState,
    scaling: &FeatureScaling,
) -> Result<()> {
    x.values.check_index(agent_row, col)?;
    k.k.check_index(agent_row, col)?;
    x.values.set(agent_row, col, scaling.encode(observed));
    k.k.set(agent_row, col, K_MIN);
    Ok(())
}
