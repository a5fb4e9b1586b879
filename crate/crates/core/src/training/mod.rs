//! Loss terms and the joint training loop for sets of predictors.

pub mod io;
pub mod losses;
pub mod objective;
pub mod trainer;

pub use losses::{baseline_penalty, indep_loss, manifold_loss, Baseline, LossWeights, ManifoldMode, COS_GUARD};
pub use objective::{batch_loss, evaluate_objective, param_gradient, LossBreakdown, ModelInputs};
pub use trainer::{init_model, train_from, train_models, ConvergenceLog, LogRecord, ModelSet, TrainConfig};
