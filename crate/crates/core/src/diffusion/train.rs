//! Training the reference denoiser on recorded windows.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    forward_perturb, mix_seed, noise_mse, rng_for, sample_training_noise_matrix, DenoiserModel,
    DiffusionSchedule, FeatureScaling, Grid, MapCondition, NoiseMatrix, TokenGrid, ToyDenoiser,
    ToyDenoiserConfig, FEATURE_DIM, K_MIN,
};
use crate::error::{Error, Result};
use crate::scene::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub model: ToyDenoiserConfig,
    pub window_cols: usize,
    pub window_stride: usize,
    /// Column whose states define the map condition of each window.
    pub condition_col: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    /// Share of training draws noised the way a rollout sees them: clean
    /// leading columns and one shared level on the rest. The others use
    /// i.i.d. per-token levels.
    pub rollout_fraction: f64,
    /// Weight of the mean squared MLP output added to the training
    /// objective. The noise loss barely sees corrections to confident
    /// tokens; this keeps them near zero.
    pub output_penalty: f64,
    pub lane_width: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model: ToyDenoiserConfig::default(),
            window_cols: 12,
            window_stride: 5,
            condition_col: 3,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            holdout_fraction: 0.2,
            rollout_fraction: 0.5,
            output_penalty: 0.1,
            lane_width: 3.7,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_cols < 2 || self.window_stride == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "window_cols must be at least 2; window_stride and batch_size positive".into(),
            ));
        }
        if self.condition_col >= self.window_cols {
            return Err(Error::Config(
                "condition_col must lie inside the window".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.rollout_fraction) {
            return Err(Error::Config("rollout_fraction must lie in [0, 1]".into()));
        }
        if !(self.output_penalty >= 0.0 && self.output_penalty.is_finite()) {
            return Err(Error::Config("output_penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: usize,
    pub train_windows: usize,
    pub holdout_windows: usize,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Loss of a model that always predicts zero noise.
    pub zero_baseline_holdout_loss: f64,
    pub final_train_loss: f64,
    pub holdout_loss_per_epoch: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub x0: TokenGrid,
    pub condition: MapCondition,
}

/// Sliding windows over every scenario; each window holds the agents whose
/// recording spans all of its ticks.
pub fn build_training_windows(
    scenarios: &[Scenario],
    scaling: &FeatureScaling,
    window_cols: usize,
    stride: usize,
    condition_col: usize,
    lane_width: f64,
) -> Result<Vec<TrainingWindow>> {
    let mut out = Vec::new();
    for sc in scenarios {
        let scaling = scaling.with_origin(sc.ego().trajectory.first().position());
        let end = sc
            .agents
            .iter()
            .map(|a| a.trajectory.end_tick())
            .max()
            .unwrap_or(0);
        let mut start = 0;
        while start + window_cols <= end + 1 {
            let ticks: Vec<usize> = (start..start + window_cols).collect();
            let agents: Vec<_> = sc
                .agents
                .iter()
                .filter(|a| ticks.iter().all(|&t| a.trajectory.covers(t)))
                .collect();
            if !agents.is_empty() {
                let values = Grid::from_fn(agents.len(), window_cols, |r, c| {
                    scaling.encode(agents[r].trajectory.at_tick(ticks[c]).expect("covered"))
                });
                let states: Vec<_> = agents
                    .iter()
                    .map(|a| *a.trajectory.at_tick(ticks[condition_col]).expect("covered"))
                    .collect();
                out.push(TrainingWindow {
                    x0: TokenGrid::new(
                        values,
                        agents.iter().map(|a| a.id.clone()).collect(),
                        ticks.iter().map(|&t| t as i64).collect(),
                    )?,
                    condition: MapCondition::from_states(&sc.map, &states, lane_width, &scaling),
                });
            }
            start += stride;
        }
    }
    Ok(out)
}

/// Average noise MSE over `windows` with noise drawn from fixed seeds, so
/// the same windows and seed always give the same number.
pub fn evaluate_loss(
    model: &dyn DenoiserModel,
    windows: &[TrainingWindow],
    seed: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let schedule = DiffusionSchedule::default();
    let losses = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let (rows, cols) = w.x0.shape();
            let s = mix_seed(seed, i as u64);
            let k = sample_training_noise_matrix(rows, cols, s);
            let (xt, eps) = forward_perturb(&w.x0, &k, &schedule, mix_seed(s, 1))?;
            let pred = model.predict_noise(&xt, &w.condition, &k)?;
            noise_mse(&eps, &pred)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Either i.i.d. levels or a rollout pattern: a random number of clean
/// leading columns, then every later column at one schedule level.
fn training_noise(
    rows: usize,
    cols: usize,
    rollout_fraction: f64,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> NoiseMatrix {
    let mut rng = rng_for(seed, 13);
    if cols < 2 || !rng.random_bool(rollout_fraction) {
        return sample_training_noise_matrix(rows, cols, seed);
    }
    let clean_cols = rng.random_range(1..cols);
    let levels = schedule.levels();
    let level = levels[rng.random_range(0..levels.len())];
    NoiseMatrix {
        k: Grid::from_fn(
            rows,
            cols,
            |_, c| if c < clean_cols { K_MIN } else { level },
        ),
    }
}

struct ZeroModel;

impl DenoiserModel for ZeroModel {
    fn predict_noise(
        &self,
        x_t: &TokenGrid,
        _condition: &MapCondition,
        _k: &NoiseMatrix,
    ) -> Result<Grid<[f64; FEATURE_DIM]>> {
        let (r, c) = x_t.shape();
        Ok(Grid::filled(r, c, [0.0; FEATURE_DIM]))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn update(&mut self, params: &[f32], grad: &[f64]) -> Vec<f32> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        params
            .iter()
            .zip(grad)
            .enumerate()
            .map(|(i, (&p, &g))| {
                self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                let step = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                (p as f64 - step) as f32
            })
            .collect()
    }
}

/// Adam on i.i.d. uniform per-token noise levels. Windows are split into
/// train and holdout sets after a seeded shuffle.
pub fn train_on_windows(
    mut windows: Vec<TrainingWindow>,
    config: &TrainingConfig,
) -> Result<(ToyDenoiser, TrainingReport)> {
    config.validate()?;
    let mut rng = rng_for(config.seed, 11);
    windows.shuffle(&mut rng);
    let n_holdout = if windows.len() < 2 {
        0
    } else {
        ((windows.len() as f64 * config.holdout_fraction).round() as usize)
            .clamp(1, windows.len() - 1)
    };
    let needed = if config.holdout_fraction > 0.0 { 2 } else { 1 };
    if windows.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: windows.len(),
        });
    }
    let holdout: Vec<_> = windows.split_off(windows.len() - n_holdout);
    let train = windows;
    let eval_set: &[TrainingWindow] = if holdout.is_empty() { &train } else { &holdout };
    let eval_seed = mix_seed(config.seed, 0xE1);

    let mut model = ToyDenoiser::new(&ToyDenoiserConfig {
        init_seed: config.seed,
        ..config.model.clone()
    })?;
    model.set_training_seed(config.seed);
    let initial = evaluate_loss(&model, eval_set, eval_seed)?;
    let zero = evaluate_loss(&ZeroModel, eval_set, eval_seed)?;
    let schedule = DiffusionSchedule::default();
    let mut adam = Adam::new(model.params().len(), config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut per_epoch = Vec::with_capacity(config.epochs);
    let mut last_train = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(mix_seed(config.seed, epoch as u64), 12));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let w = &train[i];
                    let (rows, cols) = w.x0.shape();
                    let s = mix_seed(mix_seed(config.seed, step as u64 + 1), i as u64);
                    let k = training_noise(rows, cols, config.rollout_fraction, &schedule, s);
                    let (xt, eps) = forward_perturb(&w.x0, &k, &schedule, mix_seed(s, 1))?;
                    model.loss_and_gradient(&xt, &w.condition, &k, &eps, config.output_penalty)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; model.params().len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let n = results.len() as f64;
            loss /= n;
            grad.iter_mut().for_each(|g| *g /= n);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { step, loss });
            }
            let next = adam.update(model.params(), &grad);
            if next.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { step, loss });
            }
            model.set_params(next)?;
            epoch_loss += loss * n;
            step += 1;
        }
        last_train = epoch_loss / train.len() as f64;
        let h = evaluate_loss(&model, eval_set, eval_seed)?;
        log::debug!("epoch {epoch}: train {last_train:.5}, holdout {h:.5}");
        per_epoch.push(h);
    }
    let final_holdout = per_epoch.last().copied().unwrap_or(initial);
    Ok((
        model,
        TrainingReport {
            steps: step,
            train_windows: train.len(),
            holdout_windows: holdout.len(),
            initial_holdout_loss: initial,
            final_holdout_loss: final_holdout,
            zero_baseline_holdout_loss: zero,
            final_train_loss: last_train,
            holdout_loss_per_epoch: per_epoch,
        },
    ))
}

pub fn train_toy_denoiser(
    scenarios: &[Scenario],
    config: &TrainingConfig,
) -> Result<(ToyDenoiser, TrainingReport)> {
    config.validate()?;
    let windows = build_training_windows(
        scenarios,
        &config.model.scaling,
        config.window_cols,
        config.window_stride,
        config.condition_col,
        config.lane_width,
    )?;
    train_on_windows(windows, config)
}
