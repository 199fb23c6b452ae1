//! Immutable multimodal graph store.
//!
//! A [`MultimodalGraph`] keeps an undirected simple graph in canonical CSR
//! form (both directions stored, neighbor slices strictly ascending) next to
//! per-node text-token and image-patch feature matrices, labels and splits.

mod io;
mod synth;
mod validate;

pub use io::{load_graph, save_graph};
pub use synth::{synth_graph, LabelRule, SynthConfig};
pub use validate::{validate, ValidationReport, Violation};

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}: expected {expected} bytes for the declared shape, found {actual}")]
    ShapeMismatch {
        file: String,
        expected: usize,
        actual: usize,
    },
    #[error("{file}:{line}: node id {id} does not exist (graph has {num_nodes} nodes)")]
    DanglingNode {
        file: String,
        line: usize,
        id: usize,
        num_nodes: usize,
    },
    #[error("splits do not partition the node set: {0}")]
    SplitsNotPartition(String),
    #[error("node {node} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: NodeId, num_nodes: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("graph violates its invariants:\n{0}")]
    Invalid(ValidationReport),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A link-prediction example: a node pair and whether it is an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabeledEdge {
    pub u: NodeId,
    pub v: NodeId,
    pub positive: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSplits {
    pub train: Vec<LabeledEdge>,
    pub val: Vec<LabeledEdge>,
    pub test: Vec<LabeledEdge>,
}

impl EdgeSplits {
    pub fn get(&self, split: Split) -> &[LabeledEdge] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<LabeledEdge> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &LabeledEdge)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.get(s).iter().map(move |e| (s, e)))
    }
}

/// Per-node feature layout: `len` rows of width `dim`, node-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub len: usize,
    pub dim: usize,
}

impl FeatureShape {
    pub fn per_node(&self) -> usize {
        self.len * self.dim
    }
}

/// Everything needed to build a graph; edges may be given in either
/// direction and are symmetrized and deduplicated.
#[derive(Clone, Debug)]
pub struct GraphParts {
    pub name: String,
    pub category: String,
    pub num_nodes: usize,
    pub edges: Vec<(NodeId, NodeId)>,
    pub txt_shape: FeatureShape,
    pub img_shape: FeatureShape,
    pub txt_features: Vec<f64>,
    pub img_features: Vec<f64>,
    pub labels: Vec<Option<usize>>,
    pub label_names: Vec<String>,
    pub node_text: Vec<Option<String>>,
    pub splits: Vec<Split>,
    pub edge_splits: EdgeSplits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalGraph {
    pub(crate) name: String,
    pub(crate) category: String,
    pub(crate) num_nodes: usize,
    pub(crate) offsets: Vec<usize>,
    pub(crate) neighbors: Vec<NodeId>,
    pub(crate) txt_shape: FeatureShape,
    pub(crate) img_shape: FeatureShape,
    pub(crate) txt_features: Vec<f64>,
    pub(crate) img_features: Vec<f64>,
    pub(crate) labels: Vec<Option<usize>>,
    pub(crate) label_names: Vec<String>,
    pub(crate) node_text: Vec<Option<String>>,
    pub(crate) splits: Vec<Split>,
    pub(crate) edge_splits: EdgeSplits,
}

/// Raw CSR plus everything else, with no checks at all. Used to hand
/// deliberately broken graphs to [`validate`].
#[derive(Clone, Debug)]
pub struct RawCsr {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<NodeId>,
}

fn f32_round(xs: Vec<f64>) -> Vec<f64> {
    xs.into_iter().map(|x| x as f32 as f64).collect()
}

impl MultimodalGraph {
    /// Builds a graph, symmetrizing edges, then validates every invariant.
    ///
    /// Feature values are rounded to 32-bit precision, the on-disk width.
    pub fn from_parts(parts: GraphParts) -> Result<Self> {
        let n = parts.num_nodes;
        if parts.splits.len() != n {
            return Err(GraphError::SplitsNotPartition(format!(
                "{} split tags for {n} nodes",
                parts.splits.len()
            )));
        }
        let mut adj: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); n];
        for (i, &(u, v)) in parts.edges.iter().enumerate() {
            for id in [u, v] {
                if id >= n {
                    return Err(GraphError::DanglingNode {
                        file: "edges".into(),
                        line: i + 1,
                        id,
                        num_nodes: n,
                    });
                }
            }
            if u == v {
                return Err(GraphError::Invalid(ValidationReport {
                    violations: vec![Violation::SelfLoop { node: u }],
                }));
            }
            adj[u].insert(v);
            adj[v].insert(u);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for set in &adj {
            neighbors.extend(set.iter().copied());
            offsets.push(neighbors.len());
        }
        let g = Self {
            name: parts.name,
            category: parts.category,
            num_nodes: n,
            offsets,
            neighbors,
            txt_shape: parts.txt_shape,
            img_shape: parts.img_shape,
            txt_features: f32_round(parts.txt_features),
            img_features: f32_round(parts.img_features),
            labels: parts.labels,
            label_names: parts.label_names,
            node_text: parts.node_text,
            splits: parts.splits,
            edge_splits: parts.edge_splits,
        };
        let report = validate(&g);
        if report.is_valid() {
            Ok(g)
        } else {
            Err(GraphError::Invalid(report))
        }
    }

    /// Replaces the adjacency with `csr` without any check.
    pub fn with_raw_csr_unchecked(mut self, csr: RawCsr) -> Self {
        self.offsets = csr.offsets;
        self.neighbors = csr.neighbors;
        self
    }

    /// Overwrites one label without any check.
    pub fn with_label_unchecked(mut self, v: NodeId, label: Option<usize>) -> Self {
        self.labels[v] = label;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn txt_shape(&self) -> FeatureShape {
        self.txt_shape
    }

    pub fn img_shape(&self) -> FeatureShape {
        self.img_shape
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, v: NodeId) -> Option<usize> {
        self.labels.get(v).copied().flatten()
    }

    pub fn label_name(&self, v: NodeId) -> Option<&str> {
        self.label(v).map(|l| self.label_names[l].as_str())
    }

    pub fn node_text(&self, v: NodeId) -> Option<&str> {
        self.node_text.get(v).and_then(|t| t.as_deref())
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split(&self, v: NodeId) -> Split {
        self.splits[v]
    }

    pub fn nodes_in(&self, split: Split) -> Vec<NodeId> {
        (0..self.num_nodes)
            .filter(|&v| self.splits[v] == split)
            .collect()
    }

    pub fn edge_splits(&self) -> &EdgeSplits {
        &self.edge_splits
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if v < self.num_nodes {
            Ok(())
        } else {
            Err(GraphError::NodeOutOfRange {
                node: v,
                num_nodes: self.num_nodes,
            })
        }
    }

    /// Ascending neighbor ids of `v`.
    pub fn neighbors(&self, v: NodeId) -> Result<&[NodeId]> {
        self.check(v)?;
        Ok(&self.neighbors[self.offsets[v]..self.offsets[v + 1]])
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        u < self.num_nodes
            && v < self.num_nodes
            && self.neighbors[self.offsets[u]..self.offsets[u + 1]]
                .binary_search(&v)
                .is_ok()
    }

    /// Every undirected edge once, as `(u, v)` with `u < v`, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors[self.offsets[u]..self.offsets[u + 1]]
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    /// `min(k, degree)` distinct neighbors drawn without replacement, in
    /// ascending order. Isolated or out-of-range nodes yield nothing.
    pub fn sample_neighbors(&self, v: NodeId, k: usize, rng: &mut Rng) -> Vec<NodeId> {
        let Ok(nbrs) = self.neighbors(v) else {
            return Vec::new();
        };
        let take = k.min(nbrs.len());
        let mut out: Vec<NodeId> = sample(rng, nbrs.len(), take)
            .into_iter()
            .map(|i| nbrs[i])
            .collect();
        out.sort_unstable();
        out
    }

    /// All nodes at graph distance `1..=h` from `v`.
    pub fn khop_neighborhood(&self, v: NodeId, h: usize) -> Result<BTreeSet<NodeId>> {
        self.check(v)?;
        let mut dist = vec![usize::MAX; self.num_nodes];
        dist[v] = 0;
        let mut queue = VecDeque::from([v]);
        let mut out = BTreeSet::new();
        while let Some(u) = queue.pop_front() {
            if dist[u] == h {
                continue;
            }
            for &w in &self.neighbors[self.offsets[u]..self.offsets[u + 1]] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    out.insert(w);
                    queue.push_back(w);
                }
            }
        }
        Ok(out)
    }

    /// Text token matrix of `v`, `n_t × d_t` row-major.
    pub fn txt_slice(&self, v: NodeId) -> &[f64] {
        let k = self.txt_shape.per_node();
        &self.txt_features[v * k..(v + 1) * k]
    }

    pub fn img_slice(&self, v: NodeId) -> &[f64] {
        let k = self.img_shape.per_node();
        &self.img_features[v * k..(v + 1) * k]
    }

    pub fn txt_features(&self, v: NodeId) -> Result<Tensor> {
        self.check(v)?;
        Ok(Tensor::matrix(
            self.txt_shape.len,
            self.txt_shape.dim,
            self.txt_slice(v).to_vec(),
        )
        .expect("layout checked at construction"))
    }

    pub fn img_features(&self, v: NodeId) -> Result<Tensor> {
        self.check(v)?;
        Ok(Tensor::matrix(
            self.img_shape.len,
            self.img_shape.dim,
            self.img_slice(v).to_vec(),
        )
        .expect("layout checked at construction"))
    }
}


#[cfg(test)]
mod tests {
    use super::test_graphs::from_edges;
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn neighbors_small_cases() {
        let tri = from_edges(3, &[(0, 1), (1, 2), (2, 0)]);
        assert_eq!(tri.neighbors(0).unwrap(), &[1, 2]);
        let path = from_edges(3, &[(0, 1), (1, 2)]);
        assert_eq!(path.neighbors(1).unwrap(), &[0, 2]);
        let iso = from_edges(2, &[]);
        assert!(iso.neighbors(1).unwrap().is_empty());
        assert!(matches!(
            iso.neighbors(2),
            Err(GraphError::NodeOutOfRange { node: 2, .. })
        ));
    }

    #[test]
    fn edges_are_symmetrized_and_deduplicated() {
        let g = from_edges(10, &[(3, 9), (9, 3), (3, 9)]);
        assert!(g.has_edge(3, 9) && g.has_edge(9, 3));
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(3, 9)]);
    }

    #[test]
    fn sample_neighbors_cases() {
        let mut rng = rng_from(1, &[]);
        let star: Vec<_> = (1..=10).map(|i| (0, i)).collect();
        let g = from_edges(11, &star);
        let s = g.sample_neighbors(0, 5, &mut rng);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|v| g.neighbors(0).unwrap().contains(v)));

        let g3 = from_edges(4, &[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(g3.sample_neighbors(0, 5, &mut rng), vec![1, 2, 3]);
        let iso = from_edges(2, &[]);
        assert!(iso.sample_neighbors(0, 5, &mut rng).is_empty());
    }

    #[test]
    fn sample_neighbors_is_seed_deterministic() {
        let star: Vec<_> = (1..=10).map(|i| (0, i)).collect();
        let g = from_edges(11, &star);
        let a = g.sample_neighbors(0, 4, &mut rng_from(9, &[]));
        let b = g.sample_neighbors(0, 4, &mut rng_from(9, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn khop_cases() {
        let path = from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(
            path.khop_neighborhood(0, 2).unwrap(),
            BTreeSet::from([1, 2])
        );
        let clique = from_edges(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(
            clique.khop_neighborhood(0, 1).unwrap(),
            BTreeSet::from([1, 2, 3])
        );
        let iso = from_edges(3, &[(1, 2)]);
        assert!(iso.khop_neighborhood(0, 2).unwrap().is_empty());
        assert!(iso.khop_neighborhood(3, 1).is_err());
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let shape = FeatureShape { len: 1, dim: 1 };
        let err = MultimodalGraph::from_parts(GraphParts {
            name: "x".into(),
            category: "x".into(),
            num_nodes: 2,
            edges: vec![(0, 5)],
            txt_shape: shape,
            img_shape: shape,
            txt_features: vec![0.0; 2],
            img_features: vec![0.0; 2],
            labels: vec![None; 2],
            label_names: vec![],
            node_text: vec![None; 2],
            splits: vec![Split::Train; 2],
            edge_splits: EdgeSplits::default(),
        })
        .unwrap_err();
        assert!(matches!(err, GraphError::DanglingNode { id: 5, .. }));
    }
}
