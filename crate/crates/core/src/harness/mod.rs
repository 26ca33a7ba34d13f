//! Training, evaluation, ablation and gradient checking on top of the
//! models and losses.

pub mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod optim;
mod train;

pub use config::{
    known_keys, DataConfig, KeyValues, LrSchedule, TrainConfig, Variant, DATA_KEYS, TRAIN_KEYS,
};
pub use eval::{
    ablate, evaluate, pad_to_multiple, read_report, render_table, translate_folder,
    translate_native, write_report, AblationRow, ABLATION_FILE, REPORT_FILE, TABLE_HEADER,
};
pub use gradcheck::{gradcheck, gradcheck_losses, CheckResult, GradcheckOptions, GradcheckReport};
pub use optim::{learning_rate, Adam};
pub use train::{
    discriminator_step, generator_objective, generator_pass, named_gradients, random_crop,
    stream_rng, train, EpochRecord, GeneratorPass, ObjectiveTerms, Stream, TrainData, TrainOutcome,
    CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
};
