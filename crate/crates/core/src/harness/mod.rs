//! Experiment orchestration: calibration sampling, synthetic data,
//! windowed transduction, multi-trial runs, the probe control and reports.

pub mod control;
pub mod experiment;
pub mod report;
pub mod sampling;
pub mod synthetic;
pub mod window;

pub use control::{double_dip_control, run_control, ControlReport};
pub use experiment::{
    build_provider, run_ablation, run_experiment, run_trial, AblationParam, AblationRow, DataSource,
    ExperimentReport, TrialReport,
};
pub use sampling::{allocate_counts, sample_kshot};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use window::{run_window, WindowOutput, WindowPlan, WindowSettings};
