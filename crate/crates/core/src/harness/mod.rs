//! Synthetic retrieval task, training loop, ablations, the layer-group
//! redundancy probe and token-selection traces.
//!
//! Every CSV written here starts with a schema line `# pmod <name> v<N>`
//! followed by a header row.

mod experiments;
mod metrics;
mod task;
mod trace;
mod train;

use std::io::Write;

pub use experiments::{
    probe_layer_groups, reweight_arms, run_one, run_reweight_ablation, run_schedule_ablation, schedule_arms,
    task_flops_ratio, train_probe_model, with_group_ratio, write_ablation_csv, write_probe_csv, AblationResult,
    Experiment, LayerGroup, ProbePoint, RETENTION_MATCH,
};
pub use metrics::{auc, kl_logits};
pub use task::{gen_task, lookup_oracle, Codebook, Split, SynthTask, TaskSample};
pub use trace::{emit_trace, write_trace_csv, TraceRecord};
pub use train::{evaluate, layer_groups, train, Evaluation, Optimizer, TrainConfig, TrainReport};

use crate::costmodel::CostError;
use crate::model::ModelError;
use crate::schedule::ScheduleError;

pub use crate::CSV_SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid training config: {0}")]
    InvalidTrain(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{label} has mean retention {mean:.4}, target {target:.4}")]
    UnmatchedRetention { label: String, mean: f64, target: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) use crate::schema_line;

/// Per-step training loss as `step,loss`.
pub fn write_loss_csv(report: &TrainReport, mut w: impl Write) -> Result<(), HarnessError> {
    schema_line(&mut w, "loss")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss"])?;
    for (i, l) in report.loss_curve.iter().enumerate() {
        out.write_record([i.to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
