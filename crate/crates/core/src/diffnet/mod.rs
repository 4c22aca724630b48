//! Minimal differentiable-network toolkit: a reverse-mode tape, dense
//! networks, an Adam optimiser, likelihoods and checkpoint files.

pub mod checkpoint;
pub mod dist;
mod graph;
mod mlp;
mod optim;
mod params;

pub use graph::{cb_log_norm_logit, Gradients, Graph, Mat, Var, CB_SERIES_LOGIT};
pub use mlp::{Activation, Linear, Mlp, MlpSpec, NormOrder, Normalization};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{ParamId, ParamSet};
