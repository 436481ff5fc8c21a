//! Experiment orchestration: config files, run directories, sweeps, and
//! cross-method comparisons.
//!
//! The contract is bit-exact reproducibility. A run directory contains the
//! resolved config snapshot, and re-running that snapshot reproduces every
//! trace byte. Nothing non-finite is ever persisted; writers fail instead.

pub mod artifact;
pub mod compare;
pub mod config;
pub mod presets;
pub mod run;
pub mod sweep;

pub use artifact::{
    load_manifest, load_run, render_policy, Manifest, ParamBlock, RunHandle, TraceTable,
    MANIFEST_SCHEMA,
};
pub use compare::{compare_runs, AdjacentGap, CompareMetric, CompareReport, MethodSummary};
pub use config::{
    AlgorithmSpec, BcSpec, BehaviorSpec, BestOfNSpec, DatasetSpec, ExperimentConfig,
    MmOfflineSpec, MmOnlineSpec, TeacherSpec, ThetaSpec, CONFIG_SCHEMA,
};
pub use presets::{preset, preset_names};
pub use run::{
    default_out_root, execute, obtain_dataset, persist, resolve, run_to_dir, ResolvedExperiment,
    RunRecord, ENV_OUT,
};
pub use sweep::{
    apply_axis, read_summary_csv, run_sweep, write_summary_csv, SweepAxis, SweepCell, SweepPoint,
    SweepSpec, SweepSummary,
};
