//! Dense 2-d tensors, the neural primitives built on them, reverse-mode
//! gradients, and the optimizer.
//!
//! Everything is `f64`. Forward values are produced eagerly; the
//! [`GradTape`] records just enough to replay adjoints.

mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use ops::{
    check_dropout_rate, cross_entropy, dropout, dropout_mask, gelu, gelu_derivative, layer_norm,
    log_sum_exp, sigmoid, softmax_row, Mode, LAYER_NORM_EPS,
};
pub use optim::{Adam, AdamConfig, CosineSchedule};
pub use params::{init_linear, init_uniform, Grads, ParamId, ParamStore};
pub use tape::{GradTape, Var};
pub use tensor::Tensor2;
