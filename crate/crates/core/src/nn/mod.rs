//! Trainable layer graph: conv, max-pool, fully-connected, ReLU,
//! batch-norm, residual add, global average pooling and a softmax
//! cross-entropy head, with forward/backward passes and an SGD trainer.

mod data;
mod network;
mod spec;
mod train;

pub use data::Dataset;
pub use network::{
    softmax_xent, Activations, BatchNormParams, Grads, Init, LayerParams, Mode, Network, ParamGrads,
    ParamSelect, BN_EPSILON, BN_MOMENTUM,
};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, ResidualGroup, Shape3};
pub use train::{argmax, evaluate, loss_and_grads, train, train_epoch, Evaluation, Sgd, SgdConfig};
