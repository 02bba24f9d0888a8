//! Data loading, accounting, checkpoints, benchmarks and run reports.

pub mod accounting;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod mnist;
pub mod table;

pub use accounting::{count_flops, count_macs, count_params, count_weights, human_count, layer_costs, LayerCost};
pub use bench::{bench_inference, BenchConfig, LatencyStats, BENCH_THREADS};
pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, sha256_hex, CheckpointHeader, TrainingState};
pub use config::{DataPaths, LambdaPlan, NetworkChoice, RunConfig, LENET_LAMBDA_GROUPS};
pub use mnist::load_mnist;
pub use table::{filter_string, from_csv_str, to_csv_string, to_text, write_csv, PruneReport, RunManifest};
