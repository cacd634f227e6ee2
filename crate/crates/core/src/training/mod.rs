//! Loss functions and the training procedures of every method.

mod loss;
mod trainer;

pub use loss::{
    inverse_relevance_weights, loss_distill, loss_ipw, loss_irw, loss_listwise_softmax,
    softmax_entropy, weighted_softmax_loss,
};
pub use trainer::{
    format_loss_tsv, train, EvalRanker, LossReport, LrSchedule, Method, TrainConfig, TrainedModels, Trainer,
};
