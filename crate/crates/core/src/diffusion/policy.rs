//! Closed-loop agent policy driven by a denoiser.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    advance_window, build_inference_noise, denoise_rollout_step_with_eta,
    inject_environment_update, mix_seed, rng_for, standard_normal_feature, DenoiserModel,
    DiffusionSchedule, FeatureScaling, Grid, MapCondition, NoiseMatrix, TokenGrid, FEATURE_DIM,
};
use crate::agents::{AgentPolicy, ObservationWindow};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scene::{AgentId, AgentState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub history_cols: usize,
    pub future_cols: usize,
    pub num_inference_steps: usize,
    /// Denoising steps per tick; defaults to `num_inference_steps`, which
    /// fully cleans the future block.
    pub steps_per_tick: Option<usize>,
    pub eta: f64,
    pub lane_width: f64,
    /// Re-inject the ego's observed history every tick. When off, the ego
    /// row keeps whatever the model predicted for it.
    pub inject_ego: bool,
    /// Used when the model carries no normalization of its own.
    pub scaling: FeatureScaling,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            history_cols: 4,
            future_cols: 8,
            num_inference_steps: 8,
            steps_per_tick: None,
            eta: 0.0,
            lane_width: 3.7,
            inject_ego: true,
            scaling: FeatureScaling::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_cols == 0 || self.future_cols == 0 {
            return Err(Error::Config(
                "history_cols and future_cols must be positive".into(),
            ));
        }
        if self.num_inference_steps == 0 {
            return Err(Error::Config("num_inference_steps must be positive".into()));
        }
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return Err(Error::Config("eta must lie in [0, 1]".into()));
        }
        if !(self.lane_width > 0.0) {
            return Err(Error::Config("lane_width must be positive".into()));
        }
        Ok(())
    }
}

/// Receding-horizon rollout over a sliding window of
/// `history_cols + future_cols` columns. Each tick the observed history is
/// injected as clean context, the future block is re-drawn as pure noise
/// and denoised, and the first future column becomes the next state.
pub struct DiffusionPolicy {
    model: Arc<dyn DenoiserModel>,
    config: DiffusionConfig,
    schedule: DiffusionSchedule,
    scaling: FeatureScaling,
    seed: u64,
    window: Option<(TokenGrid, NoiseMatrix)>,
}

impl DiffusionPolicy {
    /// `origin` is the point positions are centered on, normally the ego's
    /// start position.
    pub fn new(
        model: Arc<dyn DenoiserModel>,
        config: DiffusionConfig,
        origin: Point2<f64>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let scaling = model
            .feature_scaling()
            .unwrap_or_else(|| config.scaling.clone())
            .with_origin(origin);
        Ok(Self {
            schedule: DiffusionSchedule::new(config.num_inference_steps)?,
            model,
            config,
            scaling,
            seed,
            window: None,
        })
    }

    pub fn scaling(&self) -> &FeatureScaling {
        &self.scaling
    }

    /// The current window, if a rollout has run.
    pub fn window(&self) -> Option<&(TokenGrid, NoiseMatrix)> {
        self.window.as_ref()
    }

    fn window_ticks(&self, t: usize) -> Vec<i64> {
        let h = self.config.history_cols as i64;
        let f = self.config.future_cols as i64;
        (t as i64 - h + 1..=t as i64 + f).collect()
    }

    fn rollout(&mut self, obs: &ObservationWindow<'_>) -> Result<()> {
        let t = obs.current_tick;
        let ids: Vec<AgentId> = obs.slices.keys().cloned().collect();
        let ticks = self.window_ticks(t);
        let (h, cols) = (self.config.history_cols, ticks.len());
        let reuse =
            matches!(&self.window, Some((x, _)) if x.agent_ids == ids && x.tick_of_column == ticks);
        let (mut x, _) = match self.window.take() {
            Some(w) if reuse => w,
            _ => (
                TokenGrid::zeros(ids.clone(), ticks.clone())?,
                NoiseMatrix::filled(ids.len(), cols, 1.0),
            ),
        };
        let fresh_window = !reuse;
        let future: Vec<usize> = (h..cols).collect();
        let history: Vec<usize> = (0..h).collect();
        let mut k = build_inference_noise(ids.len(), &history, &future, &[])?;

        let mut rng = rng_for(mix_seed(self.seed, t as u64), 0);
        for r in 0..ids.len() {
            for c in h..cols {
                x.values.set(r, c, standard_normal_feature(&mut rng));
            }
        }
        for (r, id) in ids.iter().enumerate() {
            if id == &obs.ego_id && !self.config.inject_ego && !fresh_window {
                continue;
            }
            let slice = &obs.slices[id];
            for c in 0..h {
                let tick = ticks[c];
                let state = if tick < slice.start_tick as i64 {
                    slice.first()
                } else {
                    slice.at_tick(tick as usize).unwrap_or_else(|| slice.last())
                };
                inject_environment_update(&mut x, &mut k, r, c, state, &self.scaling)?;
            }
        }

        let current: Vec<AgentState> = ids.iter().map(|id| *obs.slices[id].last()).collect();
        let condition =
            MapCondition::from_states(obs.map, &current, self.config.lane_width, &self.scaling);
        let steps = self
            .config
            .steps_per_tick
            .unwrap_or(self.config.num_inference_steps);
        for s in 0..steps {
            let step_seed = mix_seed(mix_seed(self.seed, t as u64), s as u64 + 1);
            (x, k) = denoise_rollout_step_with_eta(
                &x,
                &k,
                self.model.as_ref(),
                &condition,
                &self.schedule,
                self.config.eta,
                step_seed,
            )?;
        }
        self.window = Some((x, k));
        Ok(())
    }

    fn decode_rows(
        &self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, Vec<AgentState>>> {
        let (x, _) = self.window.as_ref().expect("rollout ran");
        let h = self.config.history_cols;
        let (_, cols) = x.shape();
        controlled
            .iter()
            .map(|id| {
                let r = x
                    .row_of(id)
                    .ok_or_else(|| Error::UnknownAgent(id.clone()))?;
                let observed = obs.slices[id].last();
                let chunk = (h..cols)
                    .map(|c| {
                        let mut s = self.scaling.decode(x.values.get(r, c));
                        s.length = observed.length;
                        s.width = observed.width;
                        s
                    })
                    .collect();
                Ok((id.clone(), chunk))
            })
            .collect()
    }
}

impl AgentPolicy for DiffusionPolicy {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn step(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, AgentState>> {
        Ok(self
            .step_with_futures(obs, controlled)?
            .into_iter()
            .map(|(id, chunk)| (id, chunk[0]))
            .collect())
    }

    fn step_with_futures(
        &mut self,
        obs: &ObservationWindow<'_>,
        controlled: &[AgentId],
    ) -> Result<BTreeMap<AgentId, Vec<AgentState>>> {
        if let Some(id) = controlled.iter().find(|id| !obs.slices.contains_key(*id)) {
            return Err(Error::UnknownAgent(id.clone()));
        }
        self.rollout(obs)?;
        let out = self.decode_rows(obs, controlled)?;
        if out
            .values()
            .flatten()
            .any(|s| !(s.x.is_finite() && s.y.is_finite() && s.vx.is_finite() && s.vy.is_finite()))
        {
            return Err(Error::AgentModel(
                "denoiser produced a non-finite state".into(),
            ));
        }
        let (x, k) = self.window.take().expect("rollout ran");
        let advanced = advance_window(&x, &k, 1, mix_seed(self.seed, obs.current_tick as u64 + 1))?;
        self.window = Some(advanced);
        Ok(out)
    }
}

/// Denoiser that knows the clean tokens and returns the exact noise that
/// explains `x_t`. Useful as a reference when checking the rollout loop.
pub struct OracleDenoiser<F>
where
    F: Fn(&str, i64) -> Option<[f64; FEATURE_DIM]> + Send + Sync,
{
    pub clean: F,
}

impl<F> DenoiserModel for OracleDenoiser<F>
where
    F: Fn(&str, i64) -> Option<[f64; FEATURE_DIM]> + Send + Sync,
{
    fn predict_noise(
        &self,
        x_t: &TokenGrid,
        _condition: &MapCondition,
        k: &NoiseMatrix,
    ) -> Result<Grid<[f64; FEATURE_DIM]>> {
        let (rows, cols) = x_t.shape();
        let mut out = Grid::filled(rows, cols, [0.0; FEATURE_DIM]);
        for r in 0..rows {
            for c in 0..cols {
                let x0 =
                    (self.clean)(&x_t.agent_ids[r], x_t.tick_of_column[c]).ok_or_else(|| {
                        Error::AgentModel(format!(
                            "no clean value for {} at tick {}",
                            x_t.agent_ids[r], x_t.tick_of_column[c]
                        ))
                    })?;
                let ab = super::alpha_bar(k.get(r, c));
                let xt = x_t.values.get(r, c);
                let o = out.get_mut(r, c);
                for f in 0..FEATURE_DIM {
                    o[f] = (xt[f] - ab.sqrt() * x0[f]) / (1.0 - ab).sqrt();
                }
            }
        }
        Ok(out)
    }
}
