//! On-disk layout of a graph directory:
//!
//! ```text
//! graph.meta        key=value header (counts, shapes, class list)
//! nodes.jsonl       {"id":0,"label":1,"split":"train","text":"..."} per node
//! edges.tsv         `u<TAB>v` per undirected edge
//! edge_splits.tsv   `split<TAB>u<TAB>v<TAB>1|0` (optional)
//! txt.f32, img.f32  little-endian f32, node-major then row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    EdgeSplits, FeatureShape, GraphError, GraphParts, LabeledEdge, MultimodalGraph, Result, Split,
};

const META: &str = "graph.meta";
const NODES: &str = "nodes.jsonl";
const EDGES: &str = "edges.tsv";
const EDGE_SPLITS: &str = "edge_splits.tsv";
const TXT: &str = "txt.f32";
const IMG: &str = "img.f32";
const FORMAT: &str = "mmgraph-1";

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    label: Option<usize>,
    split: Split,
    #[serde(default)]
    text: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    if source.kind() == std::io::ErrorKind::NotFound {
        GraphError::MissingFile(path.to_path_buf())
    } else {
        GraphError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

struct Meta {
    name: String,
    category: String,
    num_nodes: usize,
    txt: FeatureShape,
    img: FeatureShape,
    label_names: Vec<String>,
}

fn parse_meta(text: &str) -> Result<Meta> {
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(parse_err(META, i + 1, "expected key=value"));
        };
        if kv
            .insert(k.trim().to_string(), (i + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(parse_err(
                META,
                i + 1,
                format!("duplicate key `{}`", k.trim()),
            ));
        }
    }
    let mut take = |key: &str| -> Result<(usize, String)> {
        kv.remove(key)
            .ok_or_else(|| parse_err(META, 0, format!("missing key `{key}`")))
    };
    let (line, format) = take("format")?;
    if format != FORMAT {
        return Err(parse_err(
            META,
            line,
            format!("unsupported format `{format}`"),
        ));
    }
    let mut count = |key: &str| -> Result<usize> {
        let (line, v) = take(key)?;
        v.parse()
            .map_err(|_| parse_err(META, line, format!("`{key}` is not a count: `{v}`")))
    };
    let num_nodes = count("num_nodes")?;
    let txt = FeatureShape {
        len: count("n_t")?,
        dim: count("d_t")?,
    };
    let img = FeatureShape {
        len: count("n_v")?,
        dim: count("d_i")?,
    };
    let num_classes = count("num_classes")?;
    let mut label_names = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        label_names.push(take(&format!("class.{c}"))?.1);
    }
    let name = take("name").map(|x| x.1).unwrap_or_default();
    let category = take("category").map(|x| x.1).unwrap_or_default();
    if let Some((k, (line, _))) = kv.into_iter().next() {
        return Err(parse_err(META, line, format!("unknown key `{k}`")));
    }
    Ok(Meta {
        name,
        category,
        num_nodes,
        txt,
        img,
        label_names,
    })
}

fn parse_id(file: &str, line: usize, tok: Option<&str>, n: usize) -> Result<usize> {
    let tok = tok.ok_or_else(|| parse_err(file, line, "too few fields"))?;
    let id: usize = tok
        .parse()
        .map_err(|_| parse_err(file, line, format!("`{tok}` is not a node id")))?;
    if id >= n {
        return Err(GraphError::DanglingNode {
            file: file.to_string(),
            line,
            id,
            num_nodes: n,
        });
    }
    Ok(id)
}

fn read_blob(path: &Path, file: &str, expected_values: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != expected_values * 4 {
        return Err(GraphError::ShapeMismatch {
            file: file.to_string(),
            expected: expected_values * 4,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn graph_dir(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(META))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    }
}

/// Loads a graph from its directory or from the path of its `graph.meta`.
pub fn load_graph(path: impl AsRef<Path>) -> Result<MultimodalGraph> {
    let (dir, meta_path) = graph_dir(path.as_ref());
    let meta = parse_meta(&read_text(&meta_path)?)?;
    let n = meta.num_nodes;

    let mut labels = vec![None; n];
    let mut node_text = vec![None; n];
    let mut splits: Vec<Option<Split>> = vec![None; n];
    for (i, line) in read_text(&dir.join(NODES))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: NodeRecord =
            serde_json::from_str(line).map_err(|e| parse_err(NODES, i + 1, e.to_string()))?;
        if rec.id >= n {
            return Err(GraphError::DanglingNode {
                file: NODES.into(),
                line: i + 1,
                id: rec.id,
                num_nodes: n,
            });
        }
        if splits[rec.id].is_some() {
            return Err(GraphError::SplitsNotPartition(format!(
                "node {} is listed twice ({NODES}:{})",
                rec.id,
                i + 1
            )));
        }
        splits[rec.id] = Some(rec.split);
        labels[rec.id] = rec.label;
        node_text[rec.id] = rec.text;
    }
    let splits = splits
        .into_iter()
        .enumerate()
        .map(|(v, s)| {
            s.ok_or_else(|| GraphError::SplitsNotPartition(format!("node {v} has no split")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut edges = Vec::new();
    for (i, line) in read_text(&dir.join(EDGES))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t').map(str::trim);
        let u = parse_id(EDGES, i + 1, it.next(), n)?;
        let v = parse_id(EDGES, i + 1, it.next(), n)?;
        if it.next().is_some() {
            return Err(parse_err(EDGES, i + 1, "expected exactly two fields"));
        }
        if u == v {
            return Err(parse_err(EDGES, i + 1, format!("self-loop at node {u}")));
        }
        edges.push((u, v));
    }

    let mut edge_splits = EdgeSplits::default();
    let es_path = dir.join(EDGE_SPLITS);
    if es_path.exists() {
        for (i, line) in read_text(&es_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split('\t').map(str::trim);
            let split: Split = it
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|e: String| parse_err(EDGE_SPLITS, i + 1, e))?;
            let u = parse_id(EDGE_SPLITS, i + 1, it.next(), n)?;
            let v = parse_id(EDGE_SPLITS, i + 1, it.next(), n)?;
            let positive = match it.next() {
                Some("1") => true,
                Some("0") => false,
                other => {
                    return Err(parse_err(
                        EDGE_SPLITS,
                        i + 1,
                        format!("label must be 1 or 0, found {other:?}"),
                    ))
                }
            };
            edge_splits
                .get_mut(split)
                .push(LabeledEdge { u, v, positive });
        }
    }

    let txt_features = read_blob(&dir.join(TXT), TXT, n * meta.txt.per_node())?;
    let img_features = read_blob(&dir.join(IMG), IMG, n * meta.img.per_node())?;

    MultimodalGraph::from_parts(GraphParts {
        name: meta.name,
        category: meta.category,
        num_nodes: n,
        edges,
        txt_shape: meta.txt,
        img_shape: meta.img,
        txt_features,
        img_features,
        labels,
        label_names: meta.label_names,
        node_text,
        splits,
        edge_splits,
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn finish(path: &Path, mut w: BufWriter<fs::File>) -> Result<()> {
    w.flush().map_err(|e| io_err(path, e))
}

fn write_blob(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    for x in data {
        w.write_all(&(*x as f32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    finish(path, w)
}

/// Writes `g` into `dir` (created if needed). Output bytes depend only on `g`.
pub fn save_graph(g: &MultimodalGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let wr = |p: &Path, e: std::io::Error| io_err(p, e);

    let path = dir.join(META);
    let mut w = create(&path)?;
    let mut meta = format!(
        "format={FORMAT}\nname={}\ncategory={}\nnum_nodes={}\nn_t={}\nd_t={}\nn_v={}\nd_i={}\nnum_classes={}\n",
        g.name,
        g.category,
        g.num_nodes,
        g.txt_shape.len,
        g.txt_shape.dim,
        g.img_shape.len,
        g.img_shape.dim,
        g.label_names.len()
    );
    for (i, c) in g.label_names.iter().enumerate() {
        meta.push_str(&format!("class.{i}={c}\n"));
    }
    w.write_all(meta.as_bytes()).map_err(|e| wr(&path, e))?;
    finish(&path, w)?;

    let path = dir.join(NODES);
    let mut w = create(&path)?;
    for v in 0..g.num_nodes {
        let rec = NodeRecord {
            id: v,
            label: g.labels[v],
            split: g.splits[v],
            text: g.node_text[v].clone(),
        };
        let line = serde_json::to_string(&rec).expect("plain record serializes");
        writeln!(w, "{line}").map_err(|e| wr(&path, e))?;
    }
    finish(&path, w)?;

    let path = dir.join(EDGES);
    let mut w = create(&path)?;
    for (u, v) in g.edges() {
        writeln!(w, "{u}\t{v}").map_err(|e| wr(&path, e))?;
    }
    finish(&path, w)?;

    let path = dir.join(EDGE_SPLITS);
    let mut w = create(&path)?;
    for (split, e) in g.edge_splits.iter() {
        writeln!(w, "{split}\t{}\t{}\t{}", e.u, e.v, u8::from(e.positive))
            .map_err(|e| wr(&path, e))?;
    }
    finish(&path, w)?;

    write_blob(&dir.join(TXT), &g.txt_features)?;
    write_blob(&dir.join(IMG), &g.img_features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_graphs::from_edges;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn minimal(dir: &Path, n: usize, edges: &str) {
        write(
            dir,
            META,
            &format!(
                "format={FORMAT}\nnum_nodes={n}\nn_t=1\nd_t=2\nn_v=1\nd_i=1\nnum_classes=2\nclass.0=x\nclass.1=y\n"
            ),
        );
        let nodes: String = (0..n)
            .map(|v| format!("{{\"id\":{v},\"label\":{},\"split\":\"train\"}}\n", v % 2))
            .collect();
        write(dir, NODES, &nodes);
        write(dir, EDGES, edges);
        fs::write(dir.join(TXT), vec![0u8; n * 8]).unwrap();
        fs::write(dir.join(IMG), vec![0u8; n * 4]).unwrap();
    }

    #[test]
    fn empty_edge_list_is_valid() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path(), 3, "");
        let g = load_graph(d.path()).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert!((0..3).all(|v| g.neighbors(v).unwrap().is_empty()));
    }

    #[test]
    fn single_edge_is_symmetrized() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path(), 10, "3\t9\n");
        let g = load_graph(d.path().join(META)).unwrap();
        assert_eq!(g.neighbors(3).unwrap(), &[9]);
        assert_eq!(g.neighbors(9).unwrap(), &[3]);
    }

    #[test]
    fn load_errors_are_distinct() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path(), 4, "0\t1\n");

        fs::remove_file(d.path().join(IMG)).unwrap();
        assert!(matches!(
            load_graph(d.path()),
            Err(GraphError::MissingFile(_))
        ));

        fs::write(d.path().join(IMG), vec![0u8; 5]).unwrap();
        let err = load_graph(d.path()).unwrap_err();
        assert!(matches!(
            err,
            GraphError::ShapeMismatch {
                expected: 16,
                actual: 5,
                ..
            }
        ));

        fs::write(d.path().join(IMG), vec![0u8; 16]).unwrap();
        write(d.path(), EDGES, "0\t1\n2\t7\n");
        let err = load_graph(d.path()).unwrap_err();
        assert!(
            matches!(err, GraphError::DanglingNode { id: 7, line: 2, .. }),
            "{err}"
        );

        write(d.path(), EDGES, "0\t1\n");
        write(
            d.path(),
            NODES,
            "{\"id\":0,\"label\":0,\"split\":\"train\"}\n{\"id\":1,\"label\":0,\"split\":\"test\"}\n",
        );
        let err = load_graph(d.path()).unwrap_err();
        assert!(matches!(err, GraphError::SplitsNotPartition(_)), "{err}");
        assert!(err.to_string().contains("node 2"));
    }

    #[test]
    fn unknown_meta_key_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path(), 2, "");
        let meta = read_text(&d.path().join(META)).unwrap();
        write(d.path(), META, &format!("{meta}colour=red\n"));
        let err = load_graph(d.path()).unwrap_err();
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn save_then_load_is_identity() {
        let g = from_edges(5, &[(0, 1), (1, 2), (3, 4)]);
        let d = tempfile::tempdir().unwrap();
        save_graph(&g, d.path()).unwrap();
        assert_eq!(load_graph(d.path()).unwrap(), g);
    }
}
