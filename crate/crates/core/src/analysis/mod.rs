//! Diagnostics: hidden-state shift, trajectory projection and timing.

pub mod plot;
pub mod projection;
pub mod shift;
pub mod timing;

pub use projection::{checkpoint_features, jacobi_eigen, project, trajectory_projection, TrajectoryProjection, TrajectorySet};
pub use shift::{cosine_distance, hidden_shift, mean_cosine_distance, probe_batch, ShiftCurve};
pub use timing::{fit_loglog_slope, timing_bench, ModelRunner, TimingReport, TimingRow, Timeable};
