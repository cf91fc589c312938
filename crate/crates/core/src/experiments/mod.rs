//! Toy target and oracle, preference pairs, training loops, diagnostics and
//! the run configuration used by the command-line tool.

mod config;
mod diagnostics;
mod pairs;
mod target;
mod train;

pub use config::{
    AlignSection, DiagnoseSection, IterateSection, LossSection, NetSection, PairsSection, PretrainSection, RunConfig,
    ScheduleSection, SdeSection, SCHEMA_VERSION,
};
pub use diagnostics::{
    bin_edges, density_trace, log_bin_edges, weight_curve, weight_curve_on, window_weights, write_weight_curve_csv, DensityProbe, DensityRow,
    DensityTrace, Probe, WeightBin,
};
pub use pairs::{
    gen_pairs, gen_unlike_pairs, mean_reward_gap, read_pairs_csv, write_pairs_csv, PreferencePair, Provenance,
};
pub use target::{mean_reward, reward_oracle, Component, ToyTarget};
pub use train::{
    align, align_with, evaluate_reward, iterative_align, pretrain, write_rounds_csv, AlignConfig, AlignOutcome, IterateConfig,
    LogRow, PretrainConfig, RoundMetric, TrainingLog,
};
