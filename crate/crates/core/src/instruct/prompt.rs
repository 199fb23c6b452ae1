use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{InstructError, Result};
use crate::demo::{DemonstrationSet, Task, NO, YES};
use crate::graph::{MultimodalGraph, NodeId};

const TEMPLATE_FILE: &str = include_str!("../../templates/prompts.txt");

/// Which parts of the prompt are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Image slot, graph slot and demonstrations.
    WithDemos,
    /// Image slot and graph slot only.
    NoDemos,
    /// Image slot only: no graph slot, no demonstrations.
    MllmBaseline,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [
        PromptMode::WithDemos,
        PromptMode::NoDemos,
        PromptMode::MllmBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::WithDemos => "with_demos",
            PromptMode::NoDemos => "no_demos",
            PromptMode::MllmBaseline => "mllm_baseline",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown prompt mode `{s}` (expected with_demos, no_demos or mllm_baseline)"
                )
            })
    }
}

/// A run of literal text or an embedding slot. Slot payloads are node ids;
/// a pair slot lists both endpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum PromptSegment {
    Text(String),
    ImageSlot(Vec<NodeId>),
    GraphSlot(Vec<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub task: Task,
    pub segments: Vec<PromptSegment>,
    /// Gold answer; empty at inference.
    pub answer: String,
}

pub const IMAGE_TOKEN: &str = "<image>";
pub const GRAPH_TOKEN: &str = "<graph>";

impl PromptSequence {
    /// Prompt text with each slot shown as its placeholder token.
    pub fn render(&self) -> String {
        self.render_with(|s| match s {
            PromptSegment::ImageSlot(_) => IMAGE_TOKEN.to_string(),
            _ => GRAPH_TOKEN.to_string(),
        })
    }

    /// Like [`render`](Self::render) with slot payloads spelled out, e.g.
    /// `<graph:3,7>`, followed by the answer line.
    pub fn render_annotated(&self) -> String {
        let ids = |v: &[NodeId]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = self.render_with(|s| match s {
            PromptSegment::ImageSlot(v) => format!("<image:{}>", ids(v)),
            PromptSegment::GraphSlot(v) => format!("<graph:{}>", ids(v)),
            PromptSegment::Text(_) => unreachable!(),
        });
        out.push(' ');
        out.push_str(&self.answer);
        out.push('\n');
        out
    }

    fn render_with(&self, slot: impl Fn(&PromptSegment) -> String) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                PromptSegment::Text(t) => t.clone(),
                other => slot(other),
            })
            .collect()
    }

    pub fn image_slots(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, PromptSegment::ImageSlot(_)))
            .count()
    }

    pub fn graph_slots(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, PromptSegment::GraphSlot(_)))
            .count()
    }

    /// Node references summed over all graph slots.
    pub fn graph_node_refs(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                PromptSegment::GraphSlot(v) => v.len(),
                _ => 0,
            })
            .sum()
    }

    /// The same prompt without its answer, as used for prediction.
    pub fn without_answer(&self) -> Self {
        Self {
            answer: String::new(),
            ..self.clone()
        }
    }
}

struct Templates {
    sections: HashMap<String, String>,
}

impl Templates {
    fn parse(src: &str) -> Self {
        let mut sections = HashMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let mut flush = |cur: Option<(String, Vec<&str>)>| {
            if let Some((name, mut lines)) = cur {
                while lines.last().is_some_and(|l| l.trim().is_empty()) {
                    lines.pop();
                }
                sections.insert(name, lines.join("\n"));
            }
        };
        for line in src.lines() {
            if let Some(name) = line.strip_prefix("## ") {
                flush(current.take());
                current = Some((name.trim().to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            }
        }
        flush(current);
        Self { sections }
    }

    fn get(&self, name: &str) -> &str {
        self.sections
            .get(name)
            .unwrap_or_else(|| panic!("template section `{name}` missing"))
    }
}

fn templates() -> &'static Templates {
    static T: OnceLock<Templates> = OnceLock::new();
    T.get_or_init(|| Templates::parse(TEMPLATE_FILE))
}

/// Accumulates segments, merging adjacent text.
#[derive(Default)]
struct Builder {
    segments: Vec<PromptSegment>,
}

enum Hole<'a> {
    Text(&'a str),
    Image(Vec<NodeId>),
    Graph(Vec<NodeId>),
}

impl Builder {
    fn text(&mut self, s: &str) {
        if let Some(PromptSegment::Text(t)) = self.segments.last_mut() {
            t.push_str(s);
        } else if !s.is_empty() {
            self.segments.push(PromptSegment::Text(s.to_string()));
        }
    }

    /// Instantiates a template section in one left-to-right pass, so hole
    /// values are never re-scanned for holes.
    fn section(&mut self, name: &str, holes: &[(&str, Hole<'_>)]) {
        self.fill(name, templates().get(name), holes);
    }

    fn fill(&mut self, name: &str, template: &str, holes: &[(&str, Hole<'_>)]) {
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            self.text(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .map(|c| open + c)
                .unwrap_or_else(|| panic!("unclosed hole in `{name}`"));
            let key = &rest[open + 1..close];
            match holes.iter().find(|(k, _)| *k == key).map(|(_, h)| h) {
                Some(Hole::Text(t)) => self.text(t),
                Some(Hole::Image(v)) => self.segments.push(PromptSegment::ImageSlot(v.clone())),
                Some(Hole::Graph(v)) => self.segments.push(PromptSegment::GraphSlot(v.clone())),
                None => panic!("template `{name}` has unbound hole `{key}`"),
            }
            rest = &rest[close + 1..];
        }
        self.text(rest);
    }
}

fn text_of(g: &MultimodalGraph, v: NodeId) -> &str {
    g.node_text(v).unwrap_or("")
}

fn check_node(g: &MultimodalGraph, v: NodeId) -> Result<()> {
    if v >= g.num_nodes() {
        return Err(InstructError::NodeOutOfRange {
            node: v,
            num_nodes: g.num_nodes(),
        });
    }
    Ok(())
}

fn check_demos(g: &MultimodalGraph, demos: &DemonstrationSet, task: Task) -> Result<()> {
    if demos.task != task {
        return Err(InstructError::WrongDemoTask {
            expected: task,
            actual: demos.task,
        });
    }
    let width = if task == Task::Nc { 1 } else { 2 };
    for d in &demos.demos {
        if d.nodes.len() != width {
            return Err(InstructError::MalformedDemo(format!(
                "{task} demonstration needs {width} node(s), got {:?}",
                d.nodes
            )));
        }
        for &v in &d.nodes {
            check_node(g, v)?;
        }
        match task {
            Task::Nc => {
                if g.label_name(d.nodes[0]) != Some(d.answer.as_str()) {
                    return Err(InstructError::UnlabeledDemo(d.nodes[0]));
                }
            }
            Task::Lp => {
                if d.answer != YES && d.answer != NO {
                    return Err(InstructError::MalformedDemo(format!(
                        "link answer `{}`",
                        d.answer
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Node classification prompt for `anchor`. The answer is the anchor's
/// label name, or empty when the anchor is unlabeled.
pub fn build_nc_prompt(
    g: &MultimodalGraph,
    anchor: NodeId,
    demos: &DemonstrationSet,
    mode: PromptMode,
) -> Result<PromptSequence> {
    check_node(g, anchor)?;
    check_demos(g, demos, Task::Nc)?;
    let use_demos = mode == PromptMode::WithDemos && !demos.is_empty();
    let k = demos.len().to_string();
    let n = g.label_names().len().to_string();
    let class_list = g.label_names().join(", ");

    let mut b = Builder::default();
    b.section("user", &[]);
    b.text(" ");
    b.section(
        "nc.head",
        &[
            ("category", Hole::Text(g.category())),
            ("text", Hole::Text(text_of(g, anchor))),
            ("image", Hole::Image(vec![anchor])),
        ],
    );
    if mode != PromptMode::MllmBaseline {
        b.text(" ");
        b.section("nc.graph", &[("graph", Hole::Graph(vec![anchor]))]);
    }
    b.text(" ");
    b.section(
        "nc.task",
        &[
            ("num_classes", Hole::Text(&n)),
            ("class_list", Hole::Text(&class_list)),
        ],
    );
    if use_demos {
        b.text(" ");
        b.section("nc.demo_intro", &[("k", Hole::Text(&k))]);
        for (i, d) in demos.demos.iter().enumerate() {
            let v = d.nodes[0];
            b.text("\n");
            b.section(
                "nc.demo",
                &[
                    ("i", Hole::Text(&(i + 1).to_string())),
                    ("text", Hole::Text(text_of(g, v))),
                    ("image", Hole::Image(vec![v])),
                    ("graph", Hole::Graph(vec![v])),
                    ("label", Hole::Text(&d.answer)),
                ],
            );
        }
    }
    b.text("\n");
    b.section(
        if use_demos {
            "nc.question_demos"
        } else {
            "nc.question"
        },
        &[],
    );
    b.text("\n");
    b.section("assistant", &[]);
    Ok(PromptSequence {
        task: Task::Nc,
        segments: b.segments,
        answer: g.label_name(anchor).unwrap_or("").to_string(),
    })
}

/// Link prediction prompt for the pair `(u, v)` with gold answer
/// `Yes`/`No` from `linked`, or empty when `linked` is `None`.
pub fn build_lp_prompt(
    g: &MultimodalGraph,
    u: NodeId,
    v: NodeId,
    linked: Option<bool>,
    demos: &DemonstrationSet,
    mode: PromptMode,
) -> Result<PromptSequence> {
    check_node(g, u)?;
    check_node(g, v)?;
    if u == v {
        return Err(InstructError::SamePair(u));
    }
    check_demos(g, demos, Task::Lp)?;
    let use_demos = mode == PromptMode::WithDemos && !demos.is_empty();
    let k = demos.len().to_string();

    let mut b = Builder::default();
    b.section("user", &[]);
    b.text(" ");
    b.section(
        "lp.head",
        &[
            ("category", Hole::Text(g.category())),
            ("text_u", Hole::Text(text_of(g, u))),
            ("text_v", Hole::Text(text_of(g, v))),
            ("image", Hole::Image(vec![u, v])),
        ],
    );
    if mode != PromptMode::MllmBaseline {
        b.text(" ");
        b.section("lp.graph", &[("graph", Hole::Graph(vec![u, v]))]);
    }
    b.text(" ");
    b.section("lp.task", &[]);
    if use_demos {
        b.text(" ");
        b.section("lp.demo_intro", &[("k", Hole::Text(&k))]);
        for (i, d) in demos.demos.iter().enumerate() {
            let (a, c) = (d.nodes[0], d.nodes[1]);
            b.text("\n");
            b.section(
                "lp.demo",
                &[
                    ("i", Hole::Text(&(i + 1).to_string())),
                    ("text_u", Hole::Text(text_of(g, a))),
                    ("text_v", Hole::Text(text_of(g, c))),
                    ("image", Hole::Image(vec![a, c])),
                    ("graph", Hole::Graph(vec![a, c])),
                    ("label", Hole::Text(&d.answer)),
                ],
            );
        }
    }
    b.text("\n");
    b.section(
        if use_demos {
            "lp.question_demos"
        } else {
            "lp.question"
        },
        &[],
    );
    b.text("\n");
    b.section("assistant", &[]);
    let answer = match linked {
        Some(true) => YES,
        Some(false) => NO,
        None => "",
    };
    Ok(PromptSequence {
        task: Task::Lp,
        segments: b.segments,
        answer: answer.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::{select_lp_demos, select_nc_demos, LpDemoConfig, PprConfig};
    use crate::graph::test_graphs::from_edges;
    use crate::rng::rng_from;

    fn path() -> MultimodalGraph {
        from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 2)])
    }

    fn nc(mode: PromptMode) -> PromptSequence {
        let g = path();
        let d = select_nc_demos(&g, 2, 3, &PprConfig::default()).unwrap();
        build_nc_prompt(&g, 2, &d, mode).unwrap()
    }

    #[test]
    fn every_section_parses() {
        for s in [
            "user",
            "assistant",
            "nc.head",
            "nc.demo",
            "lp.demo",
            "lp.question",
        ] {
            assert!(!templates().get(s).is_empty());
        }
    }

    #[test]
    fn k_demos_give_k_label_lines() {
        let p = nc(PromptMode::WithDemos);
        assert_eq!(p.render().matches("it belongs to:").count(), 3);
        assert_eq!(p.image_slots(), 4);
        assert_eq!(p.graph_slots(), 4);
    }

    #[test]
    fn no_demos_keeps_one_slot_of_each() {
        let p = nc(PromptMode::NoDemos);
        assert_eq!((p.image_slots(), p.graph_slots()), (1, 1));
        assert!(!p.render().contains("belongs to"));
        let refs: Vec<_> = p
            .segments
            .iter()
            .filter_map(|s| match s {
                PromptSegment::ImageSlot(v) | PromptSegment::GraphSlot(v) => Some(v.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(refs, vec![vec![2], vec![2]]);
    }

    #[test]
    fn baseline_has_no_graph_slot() {
        let p = nc(PromptMode::MllmBaseline);
        assert_eq!((p.image_slots(), p.graph_slots()), (1, 0));
        assert!(!p.render().contains("graph-aware"));
    }

    #[test]
    fn lp_pair_slots_carry_both_endpoints() {
        let g = path();
        let d = select_lp_demos(&g, 1, 3, &LpDemoConfig::default(), &mut rng_from(0, &[])).unwrap();
        let p = build_lp_prompt(&g, 1, 3, Some(true), &d, PromptMode::WithDemos).unwrap();
        assert_eq!(p.answer, "Yes");
        assert_eq!(p.image_slots(), 1 + d.len());
        assert_eq!(p.graph_slots(), 1 + d.len());
        assert_eq!(p.graph_node_refs(), 2 * (1 + d.len()));
        assert!(p.render().contains("Purchased or reviewed together: Yes"));
        let none = build_lp_prompt(&g, 1, 3, None, &d, PromptMode::NoDemos).unwrap();
        assert!(none.answer.is_empty());
        assert!(!none.render().contains("Pair 1"));
    }

    #[test]
    fn wrong_task_and_bad_labels_are_rejected() {
        let g = path();
        let lp =
            select_lp_demos(&g, 1, 3, &LpDemoConfig::default(), &mut rng_from(0, &[])).unwrap();
        assert!(matches!(
            build_nc_prompt(&g, 0, &lp, PromptMode::WithDemos),
            Err(InstructError::WrongDemoTask { .. })
        ));
        let mut nc = select_nc_demos(&g, 2, 3, &PprConfig::default()).unwrap();
        nc.demos[0].answer = "not a label".into();
        assert!(matches!(
            build_nc_prompt(&g, 2, &nc, PromptMode::WithDemos),
            Err(InstructError::UnlabeledDemo(_))
        ));
        assert!(matches!(
            build_lp_prompt(&g, 2, 2, None, &lp, PromptMode::NoDemos),
            Err(InstructError::SamePair(2))
        ));
    }

    #[test]
    fn empty_demo_set_falls_back_to_no_demo_layout() {
        let g = path();
        let empty = DemonstrationSet::empty(Task::Nc, vec![2]);
        let a = build_nc_prompt(&g, 2, &empty, PromptMode::WithDemos).unwrap();
        let b = build_nc_prompt(&g, 2, &empty, PromptMode::NoDemos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sections_drop_trailing_blank_lines() {
        let t = Templates::parse("# note\n## x\na {v} b\n\n## y\nc\n");
        assert_eq!(t.get("x"), "a {v} b");
        assert_eq!(t.get("y"), "c");
    }

    #[test]
    fn hole_values_are_not_rescanned() {
        let mut b = Builder::default();
        b.fill(
            "t",
            "a {v} b {g}.",
            &[("v", Hole::Text("{g}")), ("g", Hole::Graph(vec![1]))],
        );
        assert_eq!(
            b.segments,
            vec![
                PromptSegment::Text("a {g} b ".into()),
                PromptSegment::GraphSlot(vec![1]),
                PromptSegment::Text(".".into()),
            ]
        );
    }
}
