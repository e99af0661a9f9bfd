//! Evaluation, synthetic domains, sample ingestion, pipelines and reports.

pub mod decimal;
pub mod domain;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod tensor_io;

pub use domain::{make_domain, DomainSpec};
pub use eval::{cer, decode_frames, edit_distance, evaluate, fidelity, wer, EvalResult};
pub use pipeline::{
    ab_experiment, allocate, configure_threads, run_pipeline, sense, AbResult, PipelineConfig, PipelineRun,
    PlanArtifact,
};
pub use report::Report;
pub use tensor_io::{load_tensor, read_samples, save_tensor, write_samples};
