//! Judgment pools, crowd annotation tasks, and label aggregation.

pub mod agreement;
pub mod pool;
pub mod service;
pub mod store;
pub mod tasks;

pub use agreement::{
    fleiss_kappa, interpret_kappa, majority_vote, DEFAULT_REQUIRED_JUDGMENTS, GRADES,
};
pub use pool::{build_pool, Pool, PoolDoc, PoolEntry, DEFAULT_POOL_DEPTH};
pub use service::{grade_scale, router, serve_blocking, GradeDescription, Submission, TaskView};
pub use store::{
    Ack, Aggregation, AggregationReport, Judgment, JudgmentStore, Label, LogEntry, Progress,
};
pub use tasks::{partition_tasks, AnnotationTask, TaskDoc, DEFAULT_MAX_DOCS};
