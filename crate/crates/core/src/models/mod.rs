//! Encoder stacks, their MLP building blocks and the SGD optimizer.

mod mlp;
mod optim;
mod stack;

pub use self::mlp::{BatchNorm, Layer, Linear, Mlp, MlpSpec, MlpVars, BN_EPS, BN_MOMENTUM};
pub use self::optim::{cosine_lr, sgd_step, OptimizerState, MOMENTUM, WEIGHT_DECAY};
pub use self::stack::{EncoderStack, Role, StackSpec, StackVars};
