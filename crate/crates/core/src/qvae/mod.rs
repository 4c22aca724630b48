//! Modified q-VAE: a Tsallis-deformed variational bound whose reconstruction
//! term is scaled by `p(z)^{1-q}`, which pushes unused latent dimensions
//! toward the prior.
//!
//! With `q = 1` and `gamma = beta` the objective is the ordinary beta-VAE
//! bound, so the baselines share this code path.

mod loss;
mod model;
mod train;

pub use loss::{
    bracket_from_log_likelihoods, bracket_term, class_log_likelihoods, enforce_condition, qvae_loss,
    qvae_loss_and_grad, reconstruction_from_log_likelihoods, LossBreakdown, LossOptions,
};
pub use model::{ClassKind, ClassParams, ObservationClass, ObservationClasses, QvaeModel, QvaeSpec};
pub use train::{train, EpochRecord, TrainAbort, TrainConfig};

#[cfg(test)]
mod tests;
