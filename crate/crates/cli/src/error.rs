use std::path::PathBuf;

use mmgraph::aligner::AlignerError;
use mmgraph::demo::DemoError;
use mmgraph::graph::GraphError;
use mmgraph::instruct::InstructError;
use mmgraph::tensor::TensorError;
use thiserror::Error;

/// A failed command, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}; run the stage that produces it first", .0.display())]
    MissingArtifact(PathBuf),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TensorError::Io(io) => io.into(),
            e => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::MissingFile(path) => CliError::MissingArtifact(path),
            GraphError::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<AlignerError> for CliError {
    fn from(e: AlignerError) -> Self {
        match e {
            AlignerError::Tensor(t) => t.into(),
            AlignerError::Graph(g) => g.into(),
            AlignerError::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<DemoError> for CliError {
    fn from(e: DemoError) -> Self {
        match e {
            DemoError::NotConverged { .. } => CliError::Numeric(e.to_string()),
            DemoError::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<InstructError> for CliError {
    fn from(e: InstructError) -> Self {
        match e {
            InstructError::Tensor(t) => t.into(),
            InstructError::Aligner(a) => a.into(),
            InstructError::Demo(d) => d.into(),
            InstructError::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Invariant(format!("malformed JSON artifact: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_category() {
        let errs = [
            CliError::Config(String::new()),
            CliError::MissingArtifact(PathBuf::new()),
            CliError::Invariant(String::new()),
            CliError::Numeric(String::new()),
        ];
        let codes: Vec<i32> = errs.iter().map(CliError::exit_code).collect();
        assert_eq!(codes, vec![2, 3, 4, 5]);
    }

    #[test]
    fn module_errors_are_classified() {
        let e: CliError = TensorError::NonFinite { op: "softmax" }.into();
        assert_eq!(e.exit_code(), 5);
        let e: CliError = InstructError::FreezeViolation("decoder").into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = GraphError::MissingFile("graph.meta".into()).into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = AlignerError::InvalidConfig("tau".into()).into();
        assert_eq!(e.exit_code(), 2);
    }
}
