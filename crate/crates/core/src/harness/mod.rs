//! Checkpoints, configuration, CSV reports and the experiment drivers behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod sweep;

pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, parse_manifest, save_checkpoint, Expect, Manifest,
};
pub use config::{AttackGrid, ExperimentConfig};
pub use report::{write_csv, AnomalyRow, AurocRow, EpochRow, MetricRow, RobustnessRow, RowContext};
pub use sweep::{
    evaluate_reconstruction, mean_at, run_robustness_sweep, run_robustness_sweep_on, run_scale_sweep,
    train_decoder_cell, train_encoder_cell, trend_slope, ReconstructionMetrics, RobustnessSweep, SweepCell,
    FEATDIST_TAGS,
};
