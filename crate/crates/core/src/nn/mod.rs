//! A small reverse-mode autodiff CNN engine: convolutions (grouped, with an
//! optional shared group kernel), batch norm, ReLU, pooling, linear layers,
//! residual sums, mixed operations and softmax cross-entropy.

pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod params;
pub mod tape;
pub mod train;

pub use gradcheck::{grad_check, GradCheckReport};
pub use network::{ConvUnit, DenseConv, Layer, Mode, Model, Network, Pass, TtConv};
pub use optim::{sgd_step, Schedule, TrainConfig};
pub use params::{ParamId, ParamRole, ParamStore};
pub use tape::{Tape, Var};
pub use train::{evaluate, fit, train_epoch, EpochStats, TrainLog};
