//! Denoiser interface and a small trainable reference model.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    alpha_bar, rng_for, Feature, FeatureScaling, Grid, NoiseMatrix, TokenGrid, FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::scene::{AgentState, MapModel, TICK_PERIOD};

/// Per-agent map context: lane tangent (cos, sin), lateral offset over
/// lane width, and lane speed limit over the velocity scale.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapCondition {
    pub rows: Vec<[f64; 4]>,
}

impl MapCondition {
    pub fn from_states(
        map: &MapModel,
        states: &[AgentState],
        lane_width: f64,
        scaling: &FeatureScaling,
    ) -> Self {
        let rows = states
            .iter()
            .map(|s| match map.nearest_lane(s.position()) {
                Some((lane, pr)) => [
                    pr.tangent.x,
                    pr.tangent.y,
                    pr.lateral / lane_width,
                    lane.speed_limit.unwrap_or(0.0) / scaling.velocity_scale,
                ],
                None => [s.cos_heading, s.sin_heading, 0.0, 0.0],
            })
            .collect();
        Self { rows }
    }

    /// No map information for `rows` agents.
    pub fn empty(rows: usize) -> Self {
        Self {
            rows: vec![[0.0; 4]; rows],
        }
    }
}

/// A noise predictor ε_θ(x_t, c, k).
pub trait DenoiserModel: Send + Sync {
    fn predict_noise(
        &self,
        x_t: &TokenGrid,
        condition: &MapCondition,
        k: &NoiseMatrix,
    ) -> Result<Grid<Feature>>;

    /// Normalization the model was trained with, if it carries one.
    fn feature_scaling(&self) -> Option<FeatureScaling> {
        None
    }
}

const MAGIC: &[u8; 5] = b"NDRD1";
// positions enter only relative to the context prediction
const INPUT_DIM: usize = FEATURE_DIM + 3 + (FEATURE_DIM - 2) + 1 + 5 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDenoiserConfig {
    pub hidden: Vec<usize>,
    /// Std of the per-tick deviation from constant velocity assumed when
    /// carrying an estimate forward (m).
    pub process_noise_m: f64,
    pub scaling: FeatureScaling,
    pub tick_period: f64,
    pub init_seed: u64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            process_noise_m: 0.05,
            scaling: FeatureScaling::default(),
            tick_period: TICK_PERIOD,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: u32,
    layer_sizes: Vec<usize>,
    activation: String,
    position_scale: f64,
    velocity_scale: f64,
    size_scale: f64,
    tick_period: f64,
    process_noise_m: f64,
    training_seed: u64,
    param_count: usize,
}

/// Per-token MLP on top of a constant-velocity Gaussian filter.
///
/// For every row the model sweeps columns left to right, carrying a
/// posterior estimate of the clean token forward under constant velocity.
/// That estimate is fused with the token's own noisy value, and the MLP
/// (tanh hidden layers) adds a learned correction in noise space, scaled
/// so it shifts the clean estimate by multiples of the posterior std.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    layer_sizes: Vec<usize>,
    params: Vec<f32>,
    weights: Vec<f64>,
    scaling: FeatureScaling,
    tick_period: f64,
    process_noise_m: f64,
    training_seed: u64,
}

/// Activations of one token kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct TokenTrace {
    pub row: usize,
    pub col: usize,
    /// ∂ε̂/∂(MLP output), up to sign.
    pub gain: f64,
    pub activations: Vec<Vec<f64>>,
}

impl ToyDenoiser {
    pub fn new(config: &ToyDenoiserConfig) -> Result<Self> {
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(config.process_noise_m > 0.0) || !(config.tick_period > 0.0) {
            return Err(Error::Config(
                "process noise and tick period must be positive".into(),
            ));
        }
        let mut layer_sizes = vec![INPUT_DIM];
        layer_sizes.extend(&config.hidden);
        layer_sizes.push(FEATURE_DIM);
        let mut rng = rng_for(config.init_seed, 7);
        let mut params = Vec::with_capacity(param_count(&layer_sizes));
        let layers = layer_sizes.len() - 1;
        for (l, w) in layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mut a = (6.0 / (n_in + n_out) as f64).sqrt();
            if l + 1 == layers {
                a *= 0.01;
            }
            for _ in 0..n_in * n_out {
                params.push(rng.random_range(-a..a) as f32);
            }
            params.extend(std::iter::repeat_n(0.0f32, n_out));
        }
        let mut model = Self {
            layer_sizes,
            params: Vec::new(),
            weights: Vec::new(),
            scaling: FeatureScaling {
                origin: crate::geometry::Point2::zero(),
                ..config.scaling.clone()
            },
            tick_period: config.tick_period,
            process_noise_m: config.process_noise_m,
            training_seed: config.init_seed,
        };
        model.set_params(params)?;
        Ok(model)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn training_seed(&self) -> u64 {
        self.training_seed
    }

    pub(crate) fn set_training_seed(&mut self, seed: u64) {
        self.training_seed = seed;
    }

    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        let want = param_count(&self.layer_sizes);
        if params.len() != want {
            return Err(Error::ModelFormat(format!(
                "expected {want} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ModelFormat("non-finite parameter".into()));
        }
        self.weights = params.iter().map(|&p| p as f64).collect();
        self.params = params;
        Ok(())
    }

    /// Prediction plus, when `traces` is given, the per-token activations
    /// needed for the gradient.
    pub(crate) fn forward(
        &self,
        x: &TokenGrid,
        condition: &MapCondition,
        k: &NoiseMatrix,
        mut traces: Option<&mut Vec<TokenTrace>>,
    ) -> Result<Grid<Feature>> {
        let (rows, cols) = x.shape();
        if k.shape() != (rows, cols) {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                got: k.shape(),
            });
        }
        if condition.rows.len() != rows {
            return Err(Error::ShapeMismatch {
                expected: (rows, 4),
                got: (condition.rows.len(), 4),
            });
        }
        let q_unit = (self.process_noise_m / self.scaling.position_scale).powi(2);
        let mut post_mean = vec![[0.0; FEATURE_DIM]; rows];
        let mut post_prec = vec![0.0; rows];
        let mut out = Grid::filled(rows, cols, [0.0; FEATURE_DIM]);
        let mut ctx_mean = vec![[0.0; FEATURE_DIM]; rows];
        let mut ctx_prec = vec![0.0; rows];
        let mut input = vec![0.0; INPUT_DIM];
        for c in 0..cols {
            let gap = if c == 0 {
                0.0
            } else {
                (x.tick_of_column[c] - x.tick_of_column[c - 1]) as f64
            };
            let step = self.scaling.velocity_to_position(self.tick_period) * gap;
            for r in 0..rows {
                if c == 0 || post_prec[r] <= 0.0 {
                    ctx_mean[r] = [0.0; FEATURE_DIM];
                    ctx_prec[r] = 0.0;
                } else {
                    let mut m = post_mean[r];
                    m[0] += m[4] * step;
                    m[1] += m[5] * step;
                    ctx_mean[r] = m;
                    ctx_prec[r] = 1.0 / (1.0 / post_prec[r] + q_unit * gap);
                }
            }
            for r in 0..rows {
                let xt = *x.values.get(r, c);
                let level = k.get(r, c);
                let ab = alpha_bar(level);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let p_own = ab / (1.0 - ab);
                let p = p_own + ctx_prec[r] + 1.0;
                let mut mean = [0.0; FEATURE_DIM];
                let mut eps_base = [0.0; FEATURE_DIM];
                for f in 0..FEATURE_DIM {
                    mean[f] = (sa * xt[f] / (1.0 - ab) + ctx_prec[r] * ctx_mean[r][f]) / p;
                    eps_base[f] = (xt[f] - sa * mean[f]) / sn;
                }

                input[..8].copy_from_slice(&xt);
                input[0] -= sa * ctx_mean[r][0];
                input[1] -= sa * ctx_mean[r][1];
                input[8] = level;
                input[9] = sa;
                input[10] = sn;
                input[11..17].copy_from_slice(&ctx_mean[r][2..]);
                input[17] = ctx_prec[r] / (1.0 + ctx_prec[r]);
                input[18..23].copy_from_slice(&neighbor_features(r, &ctx_mean, &ctx_prec));
                input[23..27].copy_from_slice(&condition.rows[r]);

                let activations = self.mlp_forward(&input);
                let residual = activations.last().expect("output layer");
                // the correction moves the clean estimate by at most about
                // one posterior std, so a confident context is left alone
                let gain = sa / (p * (1.0 - ab)).sqrt();
                let o = out.get_mut(r, c);
                for f in 0..FEATURE_DIM {
                    o[f] = eps_base[f] - gain * residual[f];
                }
                if let Some(t) = traces.as_deref_mut() {
                    t.push(TokenTrace {
                        row: r,
                        col: c,
                        gain,
                        activations,
                    });
                }
                post_mean[r] = mean;
                post_prec[r] = p;
            }
        }
        Ok(out)
    }

    /// Layer outputs, input first; hidden layers are post-tanh.
    fn mlp_forward(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layer_sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[offset..offset + n_in * n_out];
            let b = &self.weights[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let prev = &acts[l];
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(next);
            offset += n_in * n_out + n_out;
        }
        acts
    }

    /// Accumulates ∂loss/∂θ into `grad` given ∂loss/∂(MLP output).
    fn mlp_backward(&self, acts: &[Vec<f64>], d_out: &[f64], grad: &mut [f64]) {
        let layers = self.layer_sizes.len() - 1;
        let offsets = layer_offsets(&self.layer_sizes);
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in gw.iter_mut().zip(prev) {
                    *g += d * a;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[off..off + n_in * n_out];
            let mut prev_delta = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                for (i, pd) in prev_delta.iter_mut().enumerate() {
                    *pd += d * w[o * n_in + i];
                }
            }
            // tanh' = 1 − y²
            for (pd, y) in prev_delta.iter_mut().zip(prev) {
                *pd *= 1.0 - y * y;
            }
            delta = prev_delta;
        }
    }

    /// Mean squared noise error and its gradient with respect to the
    /// parameters.
    pub fn loss_and_gradient(
        &self,
        x_t: &TokenGrid,
        condition: &MapCondition,
        k: &NoiseMatrix,
        eps: &Grid<Feature>,
        output_penalty: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut traces = Vec::new();
        let pred = self.forward(x_t, condition, k, Some(&mut traces))?;
        let n = (traces.len() * FEATURE_DIM) as f64;
        let mut loss = super::noise_mse(eps, &pred)?;
        let mut grad = vec![0.0; self.weights.len()];
        for t in &traces {
            let p = pred.get(t.row, t.col);
            let e = eps.get(t.row, t.col);
            let r = t.activations.last().expect("output layer");
            loss += output_penalty * r.iter().map(|v| v * v).sum::<f64>() / n;
            // ε̂ = ε_base − gain·r
            let d_out: Vec<f64> = (0..FEATURE_DIM)
                .map(|f| (2.0 * (p[f] - e[f]) * -t.gain + 2.0 * output_penalty * r[f]) / n)
                .collect();
            self.mlp_backward(&t.activations, &d_out, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format_version: 1,
            layer_sizes: self.layer_sizes.clone(),
            activation: "tanh".into(),
            position_scale: self.scaling.position_scale,
            velocity_scale: self.scaling.velocity_scale,
            size_scale: self.scaling.size_scale,
            tick_period: self.tick_period,
            process_noise_m: self.process_noise_m,
            training_seed: self.training_seed,
            param_count: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let len_at = MAGIC.len();
        let header_len =
            u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().expect("4 bytes")) as usize;
        let body = &bytes[len_at + 4..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: ModelHeader = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::ModelFormat(format!("header: {e}")))?;
        if header.format_version != 1 || header.activation != "tanh" {
            return Err(bad("unsupported format version or activation"));
        }
        let ls = &header.layer_sizes;
        if ls.len() < 3 || ls[0] != INPUT_DIM || ls[ls.len() - 1] != FEATURE_DIM || ls.contains(&0)
        {
            return Err(bad("layer sizes do not match this model"));
        }
        if header.param_count != param_count(ls) {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let raw = &body[header_len..];
        if raw.len() != 4 * header.param_count {
            return Err(bad("parameter block has the wrong length"));
        }
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut model = Self {
            layer_sizes: header.layer_sizes.clone(),
            params: Vec::new(),
            weights: Vec::new(),
            scaling: FeatureScaling {
                origin: crate::geometry::Point2::zero(),
                position_scale: header.position_scale,
                velocity_scale: header.velocity_scale,
                size_scale: header.size_scale,
            },
            tick_period: header.tick_period,
            process_noise_m: header.process_noise_m,
            training_seed: header.training_seed,
        };
        model.set_params(params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl DenoiserModel for ToyDenoiser {
    fn predict_noise(
        &self,
        x_t: &TokenGrid,
        condition: &MapCondition,
        k: &NoiseMatrix,
    ) -> Result<Grid<Feature>> {
        self.forward(x_t, condition, k, None)
    }

    fn feature_scaling(&self) -> Option<FeatureScaling> {
        Some(self.scaling.clone())
    }
}

/// Relative position and velocity of the nearest other agent plus its
/// context confidence; zeros when there is none.
fn neighbor_features(row: usize, mean: &[Feature], prec: &[f64]) -> [f64; 5] {
    if prec[row] <= 0.0 {
        return [0.0; 5];
    }
    let me = &mean[row];
    let mut best: Option<(f64, usize)> = None;
    for (j, m) in mean.iter().enumerate() {
        if j == row || prec[j] <= 0.0 {
            continue;
        }
        let d = (m[0] - me[0]).hypot(m[1] - me[1]);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    match best {
        Some((_, j)) => {
            let o = &mean[j];
            [
                o[0] - me[0],
                o[1] - me[1],
                o[4] - me[4],
                o[5] - me[5],
                prec[j] / (1.0 + prec[j]),
            ]
        }
        None => [0.0; 5],
    }
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_offsets(layer_sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layer_sizes.len());
    let mut acc = 0;
    for w in layer_sizes.windows(2) {
        offsets.push(acc);
        acc += w[0] * w[1] + w[1];
    }
    offsets
}
