use std::fmt::Write as _;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{qvae_loss_and_grad, LossOptions};
use super::model::QvaeModel;
use crate::diffnet::{AdamConfig, Mat, OptimizerState};
use crate::error::Error;
use crate::tsallis::{QParams, DEFAULT_MAX_EXPONENT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    #[serde(default)]
    pub unsafe_condition: bool,
    #[serde(default = "default_max_exponent")]
    pub max_exponent: f64,
}

fn default_max_exponent() -> f64 {
    DEFAULT_MAX_EXPONENT
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            seed: 0,
            learning_rate: 1e-3,
            unsafe_condition: false,
            max_exponent: DEFAULT_MAX_EXPONENT,
        }
    }
}

/// Per-epoch aggregates; loss terms are sample-weighted means over the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub recon: Vec<f64>,
    pub prior: f64,
    pub entropy: f64,
    pub bracket_min: f64,
    pub saturation_count: usize,
}

impl EpochRecord {
    /// `key=value` fields separated by spaces.
    pub fn log_line(&self) -> String {
        let mut s = format!("epoch={} total={}", self.epoch, self.total);
        for (c, r) in self.recon.iter().enumerate() {
            let _ = write!(s, " recon_c{}={}", c + 1, r);
        }
        let _ = write!(
            s,
            " prior={} entropy={} bracket_min={} saturation_count={}",
            self.prior, self.entropy, self.bracket_min, self.saturation_count
        );
        s
    }
}

/// Failure during training; the model keeps the parameters of the last
/// completed step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub records: Vec<EpochRecord>,
}

/// Minibatch Adam on the negated objective. Batches are drawn from a
/// seed-determined shuffle each epoch; one noise draw per row.
pub fn train(
    model: &mut QvaeModel,
    data: &Mat,
    params: &QParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<Vec<EpochRecord>, TrainAbort> {
    let fail = |error, records: &Vec<EpochRecord>| TrainAbort { error, records: records.clone() };
    let mut records = Vec::with_capacity(config.epochs);
    if data.nrows() == 0 {
        return Err(fail(Error::Domain("training set is empty".into()), &records));
    }
    if config.batch_size == 0 {
        return Err(fail(Error::Config("batch_size must be positive".into()), &records));
    }
    let opts = LossOptions { unsafe_condition: config.unsafe_condition, max_exponent: config.max_exponent };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.learning_rate), model.params());
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let zdim = model.latent_dim();
    let classes = params.num_classes();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            total: 0.0,
            recon: vec![0.0; classes],
            prior: 0.0,
            entropy: 0.0,
            bracket_min: f64::INFINITY,
            saturation_count: 0,
        };
        for chunk in order.chunks(config.batch_size) {
            let x = data.select(Axis(0), chunk);
            let noise = Mat::from_shape_simple_fn((chunk.len(), zdim), || StandardNormal.sample(&mut rng));
            let (b, grads) = qvae_loss_and_grad(model, &x, &noise, params, &opts)
                .map_err(|e| fail(annotate(e, epoch), &records))?;
            opt.step(model.params_mut(), &grads).map_err(|e| fail(e, &records))?;
            let w = chunk.len() as f64 / data.nrows() as f64;
            rec.total += w * b.total;
            for (acc, r) in rec.recon.iter_mut().zip(&b.recon_per_class) {
                *acc += w * r;
            }
            rec.prior += w * b.prior_term;
            rec.entropy += w * b.entropy_term;
            rec.bracket_min = rec.bracket_min.min(b.bracket_min);
            rec.saturation_count += b.saturation_count;
        }
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(records)
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericalAbort(m) => Error::NumericalAbort(format!("epoch {epoch}: {m}")),
        other => other,
    }
}
