//! Source pretraining, target training with contrastive ID alignment,
//! seeded evaluation, checkpoints and the source-to-target transfer sweep.

mod checkpoint;
mod config;
mod eval;
mod source;
mod target;
mod train_loop;
mod transfer;

pub use checkpoint::{checkpoint_file, load_checkpoint, meta_path, save_checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use eval::{evaluate, mse_of, EvalReport, PredictionRow};
pub use source::{fit_source, init_source_model, pretrain_source, source_batch, source_mse, PretrainOutcome, SourceModel, SOURCE_HEAD};
pub use target::{
    fit_target, target_batch, train_target, BatchLoss, TargetData, TargetModel, TargetOutcome, ITEM_TABLE, PRED_HEAD,
    USER_TABLE,
};
pub use train_loop::{epoch_means, LogRow, StepLoss};
pub use transfer::{
    merge_seed, run_transfer_experiment, source_config, test_seed, val_seed, SourceDomain, TransferReport, TransferRow,
    MAX_TRANSFER_SOURCES,
};
