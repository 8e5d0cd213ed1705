//! Experiment runner: configuration, model assembly, training, evaluation,
//! checkpoints, gradient checks and ablation grids.

pub mod ablate;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use ablate::{ablate, ablation_grid, AblationCell, AblationSummary, Axis, Trend};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, save_checkpoint};
pub use compare::{compare_decoders, compare_decoders_cached, single_task_baselines, MtlComparison};
pub use config::{DecoderKind, ExperimentConfig, Mode};
pub use eval::{evaluate, evaluate_cached, EvalReport, RunReport};
pub use gradcheck::{grad_check_config, model_grad_check, GradCheckOptions, ModelGradCheck};
pub use model::{Decoder, Model, ParamCensus};
pub use train::{encode_samples, sgd_step, shared_pyramids, train, train_cached, train_model, train_model_cached, StepLog};
