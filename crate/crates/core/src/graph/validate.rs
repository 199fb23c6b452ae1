use std::fmt;

use super::{MultimodalGraph, NodeId, Split};

/// One violated graph invariant, naming the offending ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    OffsetsLength {
        expected: usize,
        actual: usize,
    },
    OffsetsStart(usize),
    OffsetsDecreasing {
        node: NodeId,
    },
    OffsetsEnd {
        last: usize,
        neighbors: usize,
    },
    NeighborOutOfRange {
        node: NodeId,
        neighbor: NodeId,
    },
    NotAscending {
        node: NodeId,
    },
    DuplicateNeighbor {
        node: NodeId,
        neighbor: NodeId,
    },
    SelfLoop {
        node: NodeId,
    },
    Asymmetric {
        from: NodeId,
        to: NodeId,
    },
    SplitCount {
        expected: usize,
        actual: usize,
    },
    LabelCount {
        expected: usize,
        actual: usize,
    },
    NodeTextCount {
        expected: usize,
        actual: usize,
    },
    LabelOutOfRange {
        node: NodeId,
        label: usize,
        num_labels: usize,
    },
    FeatureLength {
        modality: &'static str,
        expected: usize,
        actual: usize,
    },
    EmptyFeatureShape {
        modality: &'static str,
    },
    NonFiniteFeature {
        modality: &'static str,
        node: NodeId,
    },
    EdgeSplitOutOfRange {
        split: Split,
        u: NodeId,
        v: NodeId,
    },
    EdgeSplitSelfPair {
        split: Split,
        node: NodeId,
    },
    NegativeInAdjacency {
        split: Split,
        u: NodeId,
        v: NodeId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            OffsetsLength { expected, actual } => {
                write!(f, "offsets: length {actual}, expected {expected}")
            }
            OffsetsStart(x) => write!(f, "offsets: first entry is {x}, expected 0"),
            OffsetsDecreasing { node } => write!(f, "offsets: decrease at node {node}"),
            OffsetsEnd { last, neighbors } => write!(
                f,
                "offsets: last entry {last} differs from neighbor count {neighbors}"
            ),
            NeighborOutOfRange { node, neighbor } => {
                write!(f, "range: node {node} lists neighbor {neighbor}")
            }
            NotAscending { node } => write!(f, "canonical: neighbors of {node} not ascending"),
            DuplicateNeighbor { node, neighbor } => {
                write!(f, "duplicate: node {node} lists {neighbor} twice")
            }
            SelfLoop { node } => write!(f, "self-loop: node {node}"),
            Asymmetric { from, to } => {
                write!(
                    f,
                    "symmetry: edge ({from},{to}) present but ({to},{from}) missing"
                )
            }
            SplitCount { expected, actual } => {
                write!(f, "splits: {actual} tags for {expected} nodes")
            }
            LabelCount { expected, actual } => {
                write!(f, "labels: {actual} entries for {expected} nodes")
            }
            NodeTextCount { expected, actual } => {
                write!(f, "node text: {actual} entries for {expected} nodes")
            }
            LabelOutOfRange {
                node,
                label,
                num_labels,
            } => write!(
                f,
                "label range: node {node} has label {label} but only {num_labels} classes exist"
            ),
            FeatureLength {
                modality,
                expected,
                actual,
            } => write!(
                f,
                "{modality} features: {actual} values, expected {expected}"
            ),
            EmptyFeatureShape { modality } => {
                write!(
                    f,
                    "{modality} features: sequence length and dim must be >= 1"
                )
            }
            NonFiniteFeature { modality, node } => {
                write!(f, "{modality} features: non-finite value at node {node}")
            }
            EdgeSplitOutOfRange { split, u, v } => {
                write!(
                    f,
                    "edge split {split}: pair ({u},{v}) references a missing node"
                )
            }
            EdgeSplitSelfPair { split, node } => {
                write!(f, "edge split {split}: self pair at node {node}")
            }
            NegativeInAdjacency { split, u, v } => {
                write!(f, "edge split {split}: negative pair ({u},{v}) is an edge")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Checks every graph invariant and lists all violations found.
pub fn validate(g: &MultimodalGraph) -> ValidationReport {
    let mut out = Vec::new();
    let n = g.num_nodes;
    let csr_ok = check_csr(g, &mut out);

    if g.splits.len() != n {
        out.push(Violation::SplitCount {
            expected: n,
            actual: g.splits.len(),
        });
    }
    if g.labels.len() != n {
        out.push(Violation::LabelCount {
            expected: n,
            actual: g.labels.len(),
        });
    }
    if g.node_text.len() != n {
        out.push(Violation::NodeTextCount {
            expected: n,
            actual: g.node_text.len(),
        });
    }
    for (node, l) in g.labels.iter().enumerate() {
        if let Some(l) = *l {
            if l >= g.label_names.len() {
                out.push(Violation::LabelOutOfRange {
                    node,
                    label: l,
                    num_labels: g.label_names.len(),
                });
            }
        }
    }
    for (modality, shape, data) in [
        ("text", g.txt_shape, &g.txt_features),
        ("image", g.img_shape, &g.img_features),
    ] {
        if shape.len == 0 || shape.dim == 0 {
            out.push(Violation::EmptyFeatureShape { modality });
        }
        let expected = n * shape.per_node();
        if data.len() != expected {
            out.push(Violation::FeatureLength {
                modality,
                expected,
                actual: data.len(),
            });
        } else if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            out.push(Violation::NonFiniteFeature {
                modality,
                node: i / shape.per_node().max(1),
            });
        }
    }

    for (split, e) in g.edge_splits.iter() {
        if e.u >= n || e.v >= n {
            out.push(Violation::EdgeSplitOutOfRange {
                split,
                u: e.u,
                v: e.v,
            });
            continue;
        }
        if e.u == e.v {
            out.push(Violation::EdgeSplitSelfPair { split, node: e.u });
            continue;
        }
        if csr_ok && !e.positive && g.has_edge(e.u, e.v) {
            out.push(Violation::NegativeInAdjacency {
                split,
                u: e.u,
                v: e.v,
            });
        }
    }
    ValidationReport { violations: out }
}

/// Structural CSR checks; returns whether slices can be indexed safely.
fn check_csr(g: &MultimodalGraph, out: &mut Vec<Violation>) -> bool {
    let n = g.num_nodes;
    if g.offsets.len() != n + 1 {
        out.push(Violation::OffsetsLength {
            expected: n + 1,
            actual: g.offsets.len(),
        });
        return false;
    }
    if g.offsets[0] != 0 {
        out.push(Violation::OffsetsStart(g.offsets[0]));
    }
    let mut monotone = true;
    for v in 0..n {
        if g.offsets[v + 1] < g.offsets[v] {
            out.push(Violation::OffsetsDecreasing { node: v });
            monotone = false;
        }
    }
    if g.offsets[n] != g.neighbors.len() {
        out.push(Violation::OffsetsEnd {
            last: g.offsets[n],
            neighbors: g.neighbors.len(),
        });
    }
    if !monotone || g.offsets[0] != 0 || g.offsets[n] != g.neighbors.len() {
        return false;
    }

    let mut in_range = true;
    for v in 0..n {
        let slice = &g.neighbors[g.offsets[v]..g.offsets[v + 1]];
        for (i, &w) in slice.iter().enumerate() {
            if w >= n {
                out.push(Violation::NeighborOutOfRange {
                    node: v,
                    neighbor: w,
                });
                in_range = false;
            }
            if w == v {
                out.push(Violation::SelfLoop { node: v });
            }
            if i > 0 {
                if slice[i - 1] == w {
                    out.push(Violation::DuplicateNeighbor {
                        node: v,
                        neighbor: w,
                    });
                } else if slice[i - 1] > w {
                    out.push(Violation::NotAscending { node: v });
                }
            }
        }
    }
    if !in_range {
        return false;
    }
    for v in 0..n {
        for &w in &g.neighbors[g.offsets[v]..g.offsets[v + 1]] {
            // Linear scan: the reverse slice may itself be unsorted here.
            if !g.neighbors[g.offsets[w]..g.offsets[w + 1]].contains(&v) {
                out.push(Violation::Asymmetric { from: v, to: w });
            }
        }
    }
    true
}
