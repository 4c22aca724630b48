//! Gaussian dynamics and reward models over latent states.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{checkpoint, Activation, AdamConfig, Graph, Mat, Mlp, MlpSpec, NormOrder, Normalization, OptimizerState, ParamSet, Var};
use crate::env::{Transition, ACTION_DIM};
use crate::error::{Error, Result};
use crate::latent::{apply_mask_rows, LatentMask};
use crate::qvae::QvaeModel;
use crate::tsallis::{LOG_STD_MAX, LOG_STD_MIN};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Anything that can be rolled forward by the planner.
pub trait LatentModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Mean and log standard deviation of the next state, one row per input row.
    fn transition(&self, s: &Mat, a: &Mat) -> Result<(Mat, Mat)>;
    /// Mean reward of taking `a` in `s`, one entry per row.
    fn reward_mean(&self, s: &Mat, a: &Mat) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub dynamics_hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub activation: Activation,
    pub normalization: Normalization,
    #[serde(default)]
    pub norm_order: NormOrder,
}

impl WorldSpec {
    /// Two hidden layers whose widths are multiples of the state size.
    pub fn scaled(state_dim: usize, action_dim: usize, dynamics_mult: usize, reward_mult: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            dynamics_hidden: vec![dynamics_mult * state_dim; 2],
            reward_hidden: vec![reward_mult * state_dim; 2],
            activation: Activation::Tanh,
            normalization: Normalization::LayerNorm,
            norm_order: NormOrder::PostActivation,
        }
    }

    fn mlp(&self, hidden: &[usize], out: usize) -> MlpSpec {
        let mut w = vec![self.state_dim + self.action_dim];
        w.extend(hidden);
        w.push(out);
        MlpSpec { layer_widths: w, activation: self.activation, normalization: self.normalization, norm_order: self.norm_order }
    }
}

/// `p(s'|s,a)` with mean `s + f(s,a)` and `p(r|s,a)`, both diagonal Gaussian.
#[derive(Debug, Clone)]
pub struct WorldModel {
    spec: WorldSpec,
    dyn_params: ParamSet,
    dynamics: Mlp,
    rew_params: ParamSet,
    reward: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllParts {
    pub dynamics: f64,
    pub reward: f64,
}

impl NllParts {
    pub fn total(&self) -> f64 {
        self.dynamics + self.reward
    }
}

impl WorldModel {
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self> {
        if spec.state_dim == 0 || spec.action_dim == 0 {
            return Err(Error::Config("state and action dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dyn_params = ParamSet::default();
        let dynamics = Mlp::new(spec.mlp(&spec.dynamics_hidden, 2 * spec.state_dim), &mut dyn_params, "dynamics", &mut rng)?;
        let mut rew_params = ParamSet::default();
        let reward = Mlp::new(spec.mlp(&spec.reward_hidden, 2), &mut rew_params, "reward", &mut rng)?;
        Ok(Self { spec, dyn_params, dynamics, rew_params, reward })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    /// Trainable scalars in both networks.
    pub fn parameter_count(&self) -> usize {
        self.dyn_params.scalar_count() + self.rew_params.scalar_count()
    }

    /// All parameters, dynamics first, in the order of `wm_loss_and_grad`'s gradients.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = self.dyn_params.flatten();
        flat.extend(self.rew_params.flatten());
        flat
    }

    pub fn assign_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", flat.len(), self.parameter_count())));
        }
        let split = self.dyn_params.scalar_count();
        self.dyn_params.assign_flat(&flat[..split]);
        self.rew_params.assign_flat(&flat[split..]);
        Ok(())
    }

    fn inputs(&self, s: &Mat, a: &Mat) -> Result<Mat> {
        if s.ncols() != self.spec.state_dim || a.ncols() != self.spec.action_dim || s.nrows() != a.nrows() {
            return Err(Error::Shape(format!(
                "state {:?} / action {:?} for a model with state_dim {} and action_dim {}",
                s.dim(),
                a.dim(),
                self.spec.state_dim,
                self.spec.action_dim
            )));
        }
        Ok(concatenate![Axis(1), *s, *a])
    }

    fn record_dynamics(&self, g: &Graph, s: Var, sa: Var) -> Result<(Var, Var)> {
        let d = self.spec.state_dim;
        let out = self.dynamics.forward(g, &self.dyn_params, sa)?;
        let mean = g.add(s, g.slice_cols(out, 0, d)?)?;
        let log_std = g.clamp(g.slice_cols(out, d, 2 * d)?, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    fn record_reward(&self, g: &Graph, sa: Var) -> Result<(Var, Var)> {
        let out = self.reward.forward(g, &self.rew_params, sa)?;
        Ok((g.slice_cols(out, 0, 1)?, g.clamp(g.slice_cols(out, 1, 2)?, LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Reward mean and clamped log standard deviation per row.
    pub fn reward_dist(&self, s: &Mat, a: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.reward.forward_plain(&self.rew_params, &self.inputs(s, a)?)?;
        Ok((out.column(0).to_vec(), out.column(1).iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()))
    }

    /// Per-row negative log likelihoods of the dynamics (summed over the
    /// listed state dimensions) and of the reward.
    pub fn nll_rows(&self, data: &WorldDataset, dims: Option<&[usize]>) -> Result<(Vec<f64>, Vec<f64>)> {
        data.check(self)?;
        let (mean, log_std) = self.transition(&data.s, &data.a)?;
        let all: Vec<usize> = (0..self.spec.state_dim).collect();
        let dims = dims.unwrap_or(&all);
        let dyn_nll = (0..data.len())
            .map(|i| {
                dims.iter()
                    .map(|&d| {
                        let z = (data.s_next[[i, d]] - mean[[i, d]]) * (-log_std[[i, d]]).exp();
                        0.5 * z * z + log_std[[i, d]] + 0.5 * LOG_2PI
                    })
                    .sum()
            })
            .collect();
        let (rm, rl) = self.reward_dist(&data.s, &data.a)?;
        let rew_nll = (0..data.len())
            .map(|i| {
                let z = (data.r[i] - rm[i]) * (-rl[i]).exp();
                0.5 * z * z + rl[i] + 0.5 * LOG_2PI
            })
            .collect();
        Ok((dyn_nll, rew_nll))
    }

    /// Mean NLL over `data`, optionally restricted to some state dimensions.
    pub fn nll(&self, data: &WorldDataset, dims: Option<&[usize]>) -> Result<NllParts> {
        let (d, r) = self.nll_rows(data, dims)?;
        let n = data.len().max(1) as f64;
        Ok(NllParts { dynamics: d.iter().sum::<f64>() / n, reward: r.iter().sum::<f64>() / n })
    }

    fn checkpoint_params(&self) -> ParamSet {
        let mut all = self.dyn_params.clone();
        for (id, t) in self.rew_params.iter() {
            all.add(self.rew_params.name(id), t.clone());
        }
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.spec, &self.checkpoint_params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.spec, &self.checkpoint_params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, values): (WorldSpec, Vec<f64>) = checkpoint::read(path)?;
        let mut model = Self::new(spec, 0)?;
        let split = model.dyn_params.scalar_count();
        if values.len() != split + model.rew_params.scalar_count() {
            return Err(Error::Format("world checkpoint size does not match its spec".into()));
        }
        checkpoint::restore(&mut model.dyn_params, &values[..split])?;
        checkpoint::restore(&mut model.rew_params, &values[split..])?;
        Ok(model)
    }
}

impl LatentModel for WorldModel {
    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    fn action_dim(&self) -> usize {
        self.spec.action_dim
    }

    fn transition(&self, s: &Mat, a: &Mat) -> Result<(Mat, Mat)> {
        let d = self.spec.state_dim;
        let out = self.dynamics.forward_plain(&self.dyn_params, &self.inputs(s, a)?)?;
        let mean = s + &out.slice(s![.., ..d]);
        let log_std = out.slice(s![.., d..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok((mean, log_std))
    }

    fn reward_mean(&self, s: &Mat, a: &Mat) -> Result<Vec<f64>> {
        Ok(self.reward_dist(s, a)?.0)
    }
}

/// `(s, a, s', r)` tuples in latent-state space.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldDataset {
    pub s: Mat,
    pub a: Mat,
    pub s_next: Mat,
    pub r: Vec<f64>,
}

impl WorldDataset {
    pub fn new(s: Mat, a: Mat, s_next: Mat, r: Vec<f64>) -> Result<Self> {
        let n = s.nrows();
        if a.nrows() != n || s_next.nrows() != n || r.len() != n || s_next.ncols() != s.ncols() {
            return Err(Error::Shape("world dataset columns disagree".into()));
        }
        Ok(Self { s, a, s_next, r })
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.s.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.a.ncols()
    }

    fn check(&self, model: &WorldModel) -> Result<()> {
        if self.state_dim() != model.spec.state_dim || self.action_dim() != model.spec.action_dim {
            return Err(Error::Shape(format!(
                "dataset has state/action dims {}/{}, model expects {}/{}",
                self.state_dim(),
                self.action_dim(),
                model.spec.state_dim,
                model.spec.action_dim
            )));
        }
        Ok(())
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            s: self.s.select(Axis(0), rows),
            a: self.a.select(Axis(0), rows),
            s_next: self.s_next.select(Axis(0), rows),
            r: rows.iter().map(|&i| self.r[i]).collect(),
        }
    }

    /// Layout: magic `WORLDDS1`, u64 LE state dim, action dim and count, then
    /// per record the f64 LE values of s, a, s' and r.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"WORLDDS1");
        for v in [self.state_dim(), self.action_dim(), self.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for i in 0..self.len() {
            let row = self.s.row(i).into_iter().chain(self.a.row(i)).chain(self.s_next.row(i)).chain(std::iter::once(&self.r[i]));
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("world dataset: {m}"));
        if bytes.len() < 32 || &bytes[..8] != b"WORLDDS1" {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
        let (sd, ad, n) = (word(0), word(1), word(2));
        let rec = 2 * sd + ad + 1;
        if bytes.len() - 32 != n * rec * 8 {
            return Err(bad("record block has the wrong length"));
        }
        let vals: Vec<f64> = bytes[32..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let m = Mat::from_shape_vec((n, rec), vals).expect("validated length");
        Self::new(
            m.slice(s![.., ..sd]).to_owned(),
            m.slice(s![.., sd..sd + ad]).to_owned(),
            m.slice(s![.., sd + ad..2 * sd + ad]).to_owned(),
            m.column(rec - 1).to_vec(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Rows of the observation matrix the VAE consumes.
pub fn observation_rows<'a>(obs: impl ExactSizeIterator<Item = &'a crate::env::Observation>) -> Mat {
    let n = obs.len();
    let mut m = Mat::zeros((n, crate::env::OBS_DIM));
    for (i, o) in obs.enumerate() {
        let mut row = m.row_mut(i);
        row.slice_mut(s![..4]).assign(&ndarray::aview1(&o.proprio));
        row.slice_mut(s![4..]).assign(&ndarray::aview1(&o.image));
    }
    m
}

/// Maps transitions to latent states with the encoder mean, then drops
/// masked dimensions.
pub fn encode_dataset(vae: &QvaeModel, mask: Option<&LatentMask>, raw: &[Transition]) -> Result<WorldDataset> {
    if raw.is_empty() {
        return Err(Error::Domain("no transitions to encode".into()));
    }
    let enc = |m: Mat| -> Result<Mat> {
        let z = vae.encode_means(&m)?;
        match mask {
            Some(mask) => apply_mask_rows(&z, mask),
            None => Ok(z),
        }
    };
    let s = enc(observation_rows(raw.iter().map(|t| &t.obs)))?;
    let s_next = enc(observation_rows(raw.iter().map(|t| &t.next_obs)))?;
    let a = Mat::from_shape_fn((raw.len(), ACTION_DIM), |(i, j)| raw[i].action[j]);
    WorldDataset::new(s, a, s_next, raw.iter().map(|t| t.reward).collect())
}

/// Mean NLL of a batch with its parameter gradients for both networks.
pub fn wm_loss_and_grad(model: &WorldModel, batch: &WorldDataset) -> Result<(NllParts, Vec<Mat>, Vec<Mat>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    batch.check(model)?;
    let g = Graph::new();
    let sa = g.constant(model.inputs(&batch.s, &batch.a)?);
    let s = g.constant(batch.s.clone());
    let (mean, log_std) = model.record_dynamics(&g, s, sa)?;
    let dyn_lp = g.gaussian_log_prob(g.constant(batch.s_next.clone()), mean, log_std)?;
    let (rm, rl) = model.record_reward(&g, sa)?;
    let r = g.constant(Mat::from_shape_vec((batch.len(), 1), batch.r.clone()).expect("column"));
    let rew_lp = g.gaussian_log_prob(r, rm, rl)?;
    let dyn_nll = g.scale(g.mean_all(dyn_lp), -1.0);
    let rew_nll = g.scale(g.mean_all(rew_lp), -1.0);
    let total = g.add(dyn_nll, rew_nll)?;
    let parts = NllParts { dynamics: g.scalar(dyn_nll), reward: g.scalar(rew_nll) };
    if !parts.total().is_finite() {
        return Err(Error::NumericalAbort(format!("non-finite world-model loss {}", parts.total())));
    }
    let grads = g.backward(total)?;
    Ok((parts, grads.for_params(&model.dyn_params), grads.for_params(&model.rew_params)))
}

/// Mean over the batch of `-log p(s'|s,a) - log p(r|s,a)`.
pub fn wm_loss(model: &WorldModel, batch: &WorldDataset) -> Result<f64> {
    let parts = model.nll(batch, None)?;
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if !parts.total().is_finite() {
        return Err(Error::NumericalAbort(format!("non-finite world-model loss {}", parts.total())));
    }
    Ok(parts.total())
}

/// Mean-propagated rollout: `states[h] = E[s_{h+1}]`, `rewards[h] = E[r(s_h, a_h)]`.
/// A non-finite state ends the rollout early; the caller sees fewer steps
/// than actions.
pub fn rollout<M: LatentModel + ?Sized>(model: &M, s0: &[f64], actions: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if s0.len() != model.state_dim() {
        return Err(Error::Shape(format!("initial state length {}, expected {}", s0.len(), model.state_dim())));
    }
    let mut s = Mat::from_shape_vec((1, s0.len()), s0.to_vec()).expect("row");
    let (mut states, mut rewards) = (Vec::with_capacity(actions.len()), Vec::with_capacity(actions.len()));
    for a in actions {
        if a.len() != model.action_dim() {
            return Err(Error::Shape(format!("action length {}, expected {}", a.len(), model.action_dim())));
        }
        let a = Mat::from_shape_vec((1, a.len()), a.clone()).expect("row");
        let r = model.reward_mean(&s, &a)?[0];
        let (next, _) = model.transition(&s, &a)?;
        if !r.is_finite() || next.iter().any(|v| !v.is_finite()) {
            break;
        }
        rewards.push(r);
        states.push(next.row(0).to_vec());
        s = next;
    }
    Ok((states, rewards))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dynamics_learning_rate: f64,
    pub reward_learning_rate: f64,
}

impl Default for WorldTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 512, seed: 0, dynamics_learning_rate: 1e-3, reward_learning_rate: 3e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldEpochRecord {
    pub epoch: usize,
    pub train: NllParts,
    pub heldout: Option<NllParts>,
}

impl WorldEpochRecord {
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} train_dynamics_nll={} train_reward_nll={}",
            self.epoch, self.train.dynamics, self.train.reward
        );
        if let Some(h) = self.heldout {
            s.push_str(&format!(" heldout_dynamics_nll={} heldout_reward_nll={}", h.dynamics, h.reward));
        }
        s
    }
}

/// Adam on the summed NLL with separate optimisers for the two networks.
/// The returned log starts with an epoch-0 record of the untrained model.
pub fn train_world(
    model: &mut WorldModel,
    data: &WorldDataset,
    heldout: Option<&WorldDataset>,
    config: &WorldTrainConfig,
    mut on_epoch: impl FnMut(&WorldEpochRecord),
) -> Result<Vec<WorldEpochRecord>> {
    if data.is_empty() {
        return Err(Error::Domain("world-model training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    data.check(model)?;
    let evaluate = |m: &WorldModel| -> Result<Option<NllParts>> { heldout.map(|h| m.nll(h, None)).transpose() };
    let first = WorldEpochRecord { epoch: 0, train: model.nll(data, None)?, heldout: evaluate(model)? };
    on_epoch(&first);
    let mut records = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dyn_opt = OptimizerState::new(AdamConfig::with_lr(config.dynamics_learning_rate), &model.dyn_params);
    let mut rew_opt = OptimizerState::new(AdamConfig::with_lr(config.reward_learning_rate), &model.rew_params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut acc = NllParts { dynamics: 0.0, reward: 0.0 };
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk);
            let (parts, dg, rg) =
                wm_loss_and_grad(model, &batch).map_err(|e| Error::NumericalAbort(format!("epoch {epoch}: {e}")))?;
            dyn_opt.step(&mut model.dyn_params, &dg)?;
            rew_opt.step(&mut model.rew_params, &rg)?;
            let w = chunk.len() as f64 / data.len() as f64;
            acc.dynamics += w * parts.dynamics;
            acc.reward += w * parts.reward;
        }
        let rec = WorldEpochRecord { epoch, train: acc, heldout: evaluate(model)? };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}
