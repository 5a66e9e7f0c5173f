//! Toy set-prediction detector: backbone stages, one encoder layer, a
//! cross-attention decoder, Hungarian matching and training utilities.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod flops;
pub mod loss;
pub mod matcher;
pub mod model;
pub mod optim;
pub mod train;

pub use bench::{
    ablation_harness, gate_statistics, gate_sweep, latency_bench, reduction_sweep, window_sweep, AblationMode,
    GateStats, MetricRow, GATE_SWEEP, REDUCTION_SWEEP, WINDOW_SWEEP,
};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint};
pub use config::{BackboneMode, LossWeights, ModelConfig, OptimizerConfig, Schedule};
pub use flops::{attention_flops, conv_flops, count_flops, linear_flops, FlopReport};
pub use loss::{giou_rows, set_loss, LossBreakdown, SetLoss, Target};
pub use matcher::{brute_force_match, hungarian_match, MatchResult};
pub use model::{build_model, encode, forward, predict, query_anchors, DetectionSet, ForwardOut, Model, ModelParams, Stage};
pub use optim::{adamw_step, scheduled_lr, AdamState};
pub use train::{
    batch_plan, dataset_loss, evaluate_loss, evaluate_scenes, make_batch, predict_scenes, run_training, scene_targets,
    synth_split, toy_area_ranges, train_step, Augment, Batch, StepRecord, SynthSplit, TrainOptions,
};
