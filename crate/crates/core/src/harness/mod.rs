//! Training, evaluation, complexity accounting and the command-line front end.

pub mod cli;
mod eval;
mod model;
mod plot;
mod train;

pub use eval::{
    complexity_report, encoder_flops, evaluate, ista_baseline, multirate_eval, nmse_db, ordering_violations,
    reconstruct, Complexity, EvalReport, IstaBaseline, RateResult, EVAL_CHUNK,
};
pub use plot::{line_chart, Series};
pub use model::{CsiModel, ModelBound, ModelConfig};
pub use train::{loss, loss_var, train, EpochLog, LossParts, LossVars, TrainConfig, TrainOutcome, warmup_transform};
