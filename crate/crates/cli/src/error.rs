use thiserror::Error;
use vinestress::Treatment;

use crate::ingest::Issue;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("schema violation in {file}: {issues}", issues = format_issues(.issues))]
    Schema { file: String, issues: Vec<Issue> },
    #[error("stale artifacts, re-ingest or re-run: {}", .0.join("; "))]
    Stale(Vec<String>),
    #[error("awaiting selection for {}", format_pending(.0))]
    AwaitingSelection(Vec<(String, Treatment)>),
    #[error("selection already committed for {plot}/{treatment}; use force to replace it")]
    Conflict { plot: String, treatment: Treatment },
    #[error("stage {stage} failed (input {input_hash}): {message}")]
    Stage {
        stage: &'static str,
        input_hash: String,
        message: String,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

fn format_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .take(5)
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

fn format_pending(p: &[(String, Treatment)]) -> String {
    p.iter().map(|(a, b)| format!("{a}/{b}")).collect::<Vec<_>>().join(", ")
}

impl PipelineError {
    /// Process exit code: 1 validation (including stage failures caused by
    /// the data), 2 awaiting selection, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_)
            | PipelineError::Schema { .. }
            | PipelineError::Stale(_)
            | PipelineError::Conflict { .. }
            | PipelineError::NotFound(_)
            | PipelineError::Stage { .. } => 1,
            PipelineError::AwaitingSelection(_) => 2,
            PipelineError::Io { .. } | PipelineError::Internal(_) => 3,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
        let context = context.into();
        move |source| PipelineError::Io { context, source }
    }
}
