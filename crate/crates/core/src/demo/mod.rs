//! Demonstration selection: personalized PageRank ranking for node
//! classification and shared-neighborhood edges for link prediction.

mod ppr;
mod select;

pub use ppr::{ppr_oracle_dense, ppr_scores, Normalization, PprConfig};
pub use select::{select_lp_demos, select_nc_demos, LpDemoConfig};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("invalid demonstration config: {0}")]
    InvalidConfig(String),
    #[error("node {node} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: NodeId, num_nodes: usize },
    #[error("PageRank did not converge in {iterations} iterations (L1 residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("no labeled train node is available as a demonstration for anchor {0}")]
    EmptyTrainPool(NodeId),
    #[error("link-prediction endpoints must differ, got ({0},{0})")]
    SamePair(NodeId),
}

pub type Result<T> = std::result::Result<T, DemoError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nc,
    Lp,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Nc => "nc",
            Task::Lp => "lp",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nc" => Ok(Task::Nc),
            "lp" => Ok(Task::Lp),
            other => Err(format!("unknown task `{other}` (expected nc or lp)")),
        }
    }
}

pub const YES: &str = "Yes";
pub const NO: &str = "No";

/// One demonstration: a node with its class name, or a pair with Yes/No.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub nodes: Vec<NodeId>,
    pub answer: String,
}

/// Demonstrations chosen for one anchor node (NC) or anchor pair (LP).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub task: Task,
    pub anchor: Vec<NodeId>,
    pub demos: Vec<Demo>,
}

impl DemonstrationSet {
    pub fn empty(task: Task, anchor: Vec<NodeId>) -> Self {
        Self {
            task,
            anchor,
            demos: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}
