//! The toy graph and link demonstrations behind the prompt golden files.

use mmgraph::demo::{Demo, DemonstrationSet, Task};
use mmgraph::graph::{EdgeSplits, FeatureShape, GraphParts, MultimodalGraph, Split};

/// Directory holding the golden prompt files.
pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

pub fn toy_graph() -> MultimodalGraph {
    let texts = [
        "A boxed set of silent slapstick shorts.",
        "A courtroom drama about a reluctant juror.",
        "A crew wakes early on a generation ship.",
        "A musical farce set in a seaside hotel.",
        "A family saga spanning three harvests.",
        "An android questions its maintenance logs.",
        "A road trip comedy with a stolen goat.",
        "A quiet study of a lighthouse keeper.",
    ];
    let n = texts.len();
    let shape = FeatureShape { len: 2, dim: 2 };
    MultimodalGraph::from_parts(GraphParts {
        name: "toy-movies".into(),
        category: "Movies".into(),
        num_nodes: n,
        edges: vec![
            (0, 3),
            (0, 6),
            (3, 6),
            (1, 4),
            (1, 7),
            (4, 7),
            (2, 5),
            (0, 1),
            (5, 6),
            (3, 4),
        ],
        txt_shape: shape,
        img_shape: shape,
        txt_features: vec![0.0; n * 4],
        img_features: vec![0.0; n * 4],
        labels: vec![
            Some(0),
            Some(1),
            Some(2),
            Some(0),
            Some(1),
            Some(2),
            Some(0),
            None,
        ],
        label_names: vec!["Comedy".into(), "Drama".into(), "Science Fiction".into()],
        node_text: texts.iter().map(|t| Some(t.to_string())).collect(),
        splits: vec![Split::Train; n],
        edge_splits: EdgeSplits::default(),
    })
    .unwrap()
}

pub fn lp_demos() -> DemonstrationSet {
    let demo = |a, b, answer: &str| Demo {
        nodes: vec![a, b],
        answer: answer.into(),
    };
    DemonstrationSet {
        task: Task::Lp,
        anchor: vec![0, 4],
        demos: vec![demo(0, 1, "Yes"), demo(1, 4, "Yes"), demo(0, 7, "No")],
    }
}
