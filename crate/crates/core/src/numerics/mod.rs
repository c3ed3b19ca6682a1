//! Dense numerics: flattened parameters, small MLPs with exact gradients,
//! action distributions and optimizer steps. Everything is `f64`.

pub mod dist;
pub mod mlp;
pub mod nets;
pub mod optim;
pub mod param;

pub use dist::{gaussian_log_prob, sample_action, Action, HeadGrad, HeadOutput};
pub use mlp::{Mlp, MlpTrace};
pub use nets::{HeadKind, PolicyNet, ValueNet};
pub use optim::{apply_gradient, clip_grad_norm, OptimizerKind, OptimizerState};
pub use param::ParamVector;
