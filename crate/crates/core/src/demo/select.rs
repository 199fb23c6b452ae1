use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng as _;

use super::ppr::{ppr_scores, PprConfig};
use super::{Demo, DemoError, DemonstrationSet, Result, Task, NO, YES};
use crate::graph::{MultimodalGraph, NodeId, Split};
use crate::rng::Rng;

/// Scores closer than this are ties, resolved by ascending node id.
const SCORE_QUANTUM: f64 = 1e-12;

/// Top-`k` labeled train nodes other than `anchor`, ranked by PPR score.
pub fn select_nc_demos(
    g: &MultimodalGraph,
    anchor: NodeId,
    k: usize,
    cfg: &PprConfig,
) -> Result<DemonstrationSet> {
    let scores = ppr_scores(g, anchor, cfg)?;
    let mut pool: Vec<(i64, NodeId)> = (0..g.num_nodes())
        .filter(|&v| v != anchor && g.split(v) == Split::Train && g.label(v).is_some())
        .map(|v| (-((scores[v] / SCORE_QUANTUM).round() as i64), v))
        .collect();
    if pool.is_empty() {
        return Err(DemoError::EmptyTrainPool(anchor));
    }
    pool.sort_unstable();
    let demos = pool
        .into_iter()
        .take(k)
        .map(|(_, v)| Demo {
            nodes: vec![v],
            answer: g.label_name(v).expect("pool is labeled").to_string(),
        })
        .collect();
    Ok(DemonstrationSet {
        task: Task::Nc,
        anchor: vec![anchor],
        demos,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LpDemoConfig {
    pub n_demos: usize,
    /// Also add as many "No" pairs drawn from the shared neighborhood.
    pub negatives: bool,
}

impl Default for LpDemoConfig {
    fn default() -> Self {
        Self {
            n_demos: 1,
            negatives: false,
        }
    }
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    (a.min(b), a.max(b))
}

fn pick(pool: &[(NodeId, NodeId)], n: usize, rng: &mut Rng) -> Vec<(NodeId, NodeId)> {
    let mut out: Vec<_> = sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    out
}

/// Demonstration edges from the shared 2-hop neighborhood of `u` and `v`.
///
/// Candidates exclude the query pair and every pair listed in the val or
/// test edge splits. With no shared candidates, edges incident to `u` or
/// `v` are used; failing that the set is empty.
pub fn select_lp_demos(
    g: &MultimodalGraph,
    u: NodeId,
    v: NodeId,
    cfg: &LpDemoConfig,
    rng: &mut Rng,
) -> Result<DemonstrationSet> {
    for x in [u, v] {
        if x >= g.num_nodes() {
            return Err(DemoError::NodeOutOfRange {
                node: x,
                num_nodes: g.num_nodes(),
            });
        }
    }
    if u == v {
        return Err(DemoError::SamePair(u));
    }
    let query = key(u, v);
    let held: BTreeSet<(NodeId, NodeId)> = [Split::Val, Split::Test]
        .into_iter()
        .flat_map(|s| g.edge_splits().get(s))
        .map(|e| key(e.u, e.v))
        .collect();
    let usable = |e: (NodeId, NodeId)| e != query && !held.contains(&e);

    let hu = g.khop_neighborhood(u, 2).expect("u checked");
    let hv = g.khop_neighborhood(v, 2).expect("v checked");
    let shared: Vec<NodeId> = hu.intersection(&hv).copied().collect();

    let edges_touching = |nodes: &[NodeId]| -> Vec<(NodeId, NodeId)> {
        let mut set = BTreeSet::new();
        for &a in nodes {
            for &b in g.neighbors(a).expect("valid node") {
                let e = key(a, b);
                if usable(e) {
                    set.insert(e);
                }
            }
        }
        set.into_iter().collect()
    };

    let mut candidates = edges_touching(&shared);
    if candidates.is_empty() {
        candidates = edges_touching(&[u, v]);
    }
    let positives = pick(&candidates, cfg.n_demos, rng);

    let mut demos: Vec<Demo> = positives
        .iter()
        .map(|&(a, b)| Demo {
            nodes: vec![a, b],
            answer: YES.to_string(),
        })
        .collect();

    if cfg.negatives && shared.len() >= 2 {
        let mut seen = BTreeSet::new();
        let budget = 100 * (positives.len() + 1);
        let mut tries = 0;
        while seen.len() < positives.len() && tries < budget {
            tries += 1;
            let a = shared[rng.random_range(0..shared.len())];
            let b = shared[rng.random_range(0..shared.len())];
            let e = key(a, b);
            if a != b && !g.has_edge(a, b) && usable(e) {
                seen.insert(e);
            }
        }
        demos.extend(seen.into_iter().map(|(a, b)| Demo {
            nodes: vec![a, b],
            answer: NO.to_string(),
        }));
    }

    Ok(DemonstrationSet {
        task: Task::Lp,
        anchor: vec![u, v],
        demos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo::ppr_oracle_dense;
    use crate::graph::test_graphs::from_edges;
    use crate::rng::rng_from;

    #[test]
    fn default_k_is_three() {
        let g = from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let d = select_nc_demos(&g, 0, 3, &PprConfig::default()).unwrap();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn star_ties_break_by_id() {
        let edges: Vec<_> = (1..6).map(|i| (0, i)).collect();
        let g = from_edges(6, &edges);
        let d = select_nc_demos(&g, 0, 2, &PprConfig::default()).unwrap();
        let ids: Vec<_> = d.demos.iter().map(|x| x.nodes[0]).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn path_picks_oracle_top_two() {
        let g = from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let cfg = PprConfig::with_alpha(0.5);
        let d = select_nc_demos(&g, 2, 2, &cfg).unwrap();
        let mut got: Vec<_> = d.demos.iter().map(|x| x.nodes[0]).collect();
        got.sort_unstable();

        let oracle = ppr_oracle_dense(&g, 2, 0.5);
        let mut ranked: Vec<NodeId> = (0..5).filter(|&v| v != 2).collect();
        ranked.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]).then(a.cmp(&b)));
        let mut want = ranked[..2].to_vec();
        want.sort_unstable();
        assert_eq!(got, want);
        assert_eq!(got, vec![1, 3]);
    }

    #[test]
    fn labels_travel_with_demos() {
        let g = from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let d = select_nc_demos(&g, 0, 3, &PprConfig::default()).unwrap();
        for demo in &d.demos {
            assert_eq!(Some(demo.answer.as_str()), g.label_name(demo.nodes[0]));
        }
    }

    #[test]
    fn triangle_demo_uses_shared_neighbor() {
        let g = from_edges(3, &[(0, 1), (1, 2), (0, 2)]);
        let d = select_lp_demos(&g, 0, 1, &LpDemoConfig::default(), &mut rng_from(3, &[])).unwrap();
        assert_eq!(d.len(), 1);
        let e = &d.demos[0];
        assert!(e.nodes == vec![0, 2] || e.nodes == vec![1, 2]);
        assert_eq!(e.answer, "Yes");
    }

    #[test]
    fn disjoint_components_fall_back() {
        let g = from_edges(5, &[(0, 1), (2, 3)]);
        let d = select_lp_demos(&g, 0, 2, &LpDemoConfig::default(), &mut rng_from(1, &[])).unwrap();
        assert_eq!(d.len(), 1);
        let e = &d.demos[0].nodes;
        assert!(e == &vec![0, 1] || e == &vec![2, 3]);

        let iso = from_edges(4, &[(2, 3)]);
        let d =
            select_lp_demos(&iso, 0, 1, &LpDemoConfig::default(), &mut rng_from(1, &[])).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn negatives_are_non_edges() {
        let g = from_edges(
            7,
            &[
                (0, 2),
                (1, 2),
                (0, 3),
                (1, 3),
                (0, 4),
                (1, 4),
                (2, 5),
                (4, 6),
            ],
        );
        let cfg = LpDemoConfig {
            n_demos: 2,
            negatives: true,
        };
        let d = select_lp_demos(&g, 0, 1, &cfg, &mut rng_from(2, &[])).unwrap();
        for demo in &d.demos {
            let (a, b) = (demo.nodes[0], demo.nodes[1]);
            assert_eq!(g.has_edge(a, b), demo.answer == "Yes");
        }
        assert!(d.demos.iter().any(|x| x.answer == "No"));
    }

    #[test]
    fn same_pair_is_rejected() {
        let g = from_edges(2, &[(0, 1)]);
        let r = select_lp_demos(&g, 1, 1, &LpDemoConfig::default(), &mut rng_from(0, &[]));
        assert!(matches!(r, Err(DemoError::SamePair(1))));
    }
}
