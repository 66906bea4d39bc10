//! Diagnostics and cost models.

pub mod bench;
pub mod collapse;
pub mod flops;
pub mod inspect;

pub use bench::{throughput_bench, BenchGrid, BenchRouter, BenchRow};
pub use collapse::{collapse_experiment, write_collapse_csv, write_collapse_long_csv, CollapseConfig, CollapseRecord, CollapseReport, ThetaInit};
pub use flops::{flop_estimate, CostModel};
pub use inspect::{cumulative_weight_curves, slot_correlation, token_contribution, Orientation, TokenContribution};
