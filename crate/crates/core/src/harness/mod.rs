//! Experiment engine: source task, corruptions, streams, pretraining,
//! adaptation runs and reports.

pub mod config;
pub mod corrupt;
pub mod data;
pub mod pretrain;
pub mod report;
pub mod run;
pub mod stream;

pub use config::{execute, ExperimentConfig, Precision, RunConfig, StreamConfig, PRECISION_ENV};
pub use corrupt::{CorruptionKind, CorruptionSpec};
pub use data::{make_source_task, to_tensor, Dataset};
pub use pretrain::{accuracy, cosine_lr, pretrain, PretrainConfig, PretrainReport};
pub use report::{read_records, records_from_csv, records_to_csv, summarize, summary_csv, summary_text, write_report, Summary};
pub use run::{run_scenario, source_descriptor, BankConfig, Method, MetricsRecord, RunOutput};
pub use stream::{make_dirichlet_stream, BatchPlan, Scenario, Segment, StreamSpec};
