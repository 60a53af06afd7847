//! Training, prediction, evaluation, checkpoints, benchmarking and sweeps.

mod ablation;
mod bench;
mod checkpoint;
mod config;
mod gradcheck;
mod predict;
mod train;

pub use ablation::{ablation_grid, run_ablation, AblationCellSpec, AblationRow};
pub use bench::{
    bench_throughput, inference_flops, BenchOptions, BenchRow, ThroughputReport, MIN_REPS, MIN_WORKLOAD,
    QUOTED_PARAM_COUNT,
};
pub use checkpoint::{
    decode_state, encode_state, load_state, save_state, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{RunConfig, CONFIG_KEYS};
pub use gradcheck::{
    gradcheck_seed, run_gradcheck, small_config, GradcheckSummary, GroupError, DEFAULT_GRADCHECK_EPS,
    GRADCHECK_TOLERANCE, MAX_GRADCHECK_WIDTH,
};
pub use predict::{
    evaluate, evaluate_split, evaluate_with, harmonic_mean, novel_bank, predict, predict_all, tally, ClassSet,
    Metrics, PredictOptions, Prediction, SplitMetrics,
};
pub use train::{
    activate_and_update, fresh_bank, item_gradient, train, train_with, EpochRecord, ItemGrad, TrainedState,
};
