//! Models, losses, the proximal local solver and norm clipping.

mod model;
mod objective;
mod train;

pub use model::{accuracy, gradient, init_params, loss, Architecture, LossSpec, ModelKind, ModelParams};
pub use objective::{Objective, Quadratic, ShardObjective};
pub use train::{clip, clip_in_place, l2_norm, local_train, local_train_objective, ProximalConfig, TrainReport};
