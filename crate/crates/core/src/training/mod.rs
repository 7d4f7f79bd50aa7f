//! Gradients through GRU rollouts, RMSProp, the model and controller losses,
//! and the early-stopping training loop.

pub mod bptt;
pub mod grads;
pub mod loss;
pub mod rmsprop;
pub mod trainer;

pub use grads::{flatten_params, unflatten_params, GradientSet};
pub use loss::{
    controller_loss, model_loss, mse_washout, penalty_term, rollout_pair, sequence_mse_grad, tracking_mse_grad,
    IoSequence,
};
pub use rmsprop::{rmsprop_step, RmsProp, RmsPropConfig};
pub use trainer::{
    train, train_controller, train_model, ControllerObjective, EpochRecord, ModelObjective, Objective, StopReason,
    TrainConfig, TrainReport,
};
