//! Synthetic data, AdamW, training/evaluation and the ablation runners.

mod ablation;
mod data;
mod experiment;
mod optim;
mod train;

pub use ablation::{
    ablate_bridge, ablate_depth, mean_std, run_many, worker_threads, AblationRow, BridgeAblation, DepthAblation, DepthPoint,
};
pub use data::{class_names, generate_dataset, DatasetSpec, Placement, Sample, Shape, SyntheticDataset, SHAPE_PALETTE};
pub use experiment::{build_pipeline, param_summary, run_experiment, DataConfig, ExperimentConfig, ParamSummary, RunReport};
pub use optim::{make_param_groups, AdamW, AdamWConfig, ParamGroup};
pub use train::{evaluate_miou, train, ConfusionMatrix, EvalPoint, MiouReport, TrainConfig, TrainLog};
