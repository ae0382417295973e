//! Distillation losses, optimizer and training loops.

pub mod losses;
pub mod optim;
pub mod train;

pub use losses::{loss_ce, loss_kd, loss_ld, loss_total, KdForm, LdNorm, LossWeights};
pub use optim::{clip_grad_norm, AdamW, Moments, OptimConfig, Schedule, ScheduleKind};
pub use train::{
    train_target_guided, train_trajectory_guided, train_unguided, train_waypoint_guided,
    waypoint_for_step, DistillConfig, GuidanceMode, JsonlWriter, LiveTeacher, NoObserver,
    StepObserver, StepRecord, TaskData, TeacherRef, TrainState, Trainer, WaypointSource,
};
