use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{
    EdgeSplits, FeatureShape, GraphError, GraphParts, LabeledEdge, MultimodalGraph, NodeId, Result,
    Split,
};
use crate::rng::{rng_from, tag, Rng};

/// How node labels relate to the planted communities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// The label is the node's own community.
    Planted,
    /// The label is the most common community among the node's neighbors;
    /// ties that include the node's own community, and isolated nodes,
    /// keep the own community, other ties take the smallest id.
    NeighborMajority,
}

/// Planted-partition generator settings.
///
/// `family_seed` fixes the class prototypes; `seed` fixes structure, noise
/// and splits. Graphs sharing a family but not a seed have the same
/// class-to-feature geometry on different nodes and edges.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub category: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d_t: usize,
    pub d_i: usize,
    pub n_t: usize,
    pub n_v: usize,
    pub txt_signal: f64,
    pub img_signal: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub family_seed: u64,
    pub label_rule: LabelRule,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Positive pairs per link-prediction split (matched by as many negatives).
    pub lp_train: usize,
    pub lp_val: usize,
    pub lp_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            category: "Synthetic Goods".into(),
            num_nodes: 200,
            num_classes: 4,
            p_in: 0.08,
            p_out: 0.005,
            d_t: 16,
            d_i: 16,
            n_t: 4,
            n_v: 4,
            txt_signal: 0.5,
            img_signal: 0.5,
            noise_sigma: 1.0,
            seed: 0,
            family_seed: 0,
            label_rule: LabelRule::Planted,
            train_frac: 0.6,
            val_frac: 0.2,
            lp_train: 0,
            lp_val: 0,
            lp_test: 0,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(GraphError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.p_out)
            || !(0.0..=1.0).contains(&self.p_in)
            || self.p_out > self.p_in
        {
            return bad(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            ));
        }
        for (name, s) in [
            ("txt_signal", self.txt_signal),
            ("img_signal", self.img_signal),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} must lie in [0,1], got {s}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        for (name, x) in [
            ("num_nodes", self.num_nodes),
            ("num_classes", self.num_classes),
            ("d_t", self.d_t),
            ("d_i", self.d_i),
            ("n_t", self.n_t),
            ("n_v", self.n_v),
        ] {
            if x == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.train_frac >= 0.0
            && self.val_frac >= 0.0
            && self.train_frac + self.val_frac <= 1.0)
        {
            return bad(format!(
                "split fractions must be non-negative with sum <= 1, got {} + {}",
                self.train_frac, self.val_frac
            ));
        }
        Ok(())
    }
}

fn prototypes(family_seed: u64, modality: &str, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from(family_seed, &[tag("prototype"), tag(modality)]);
    (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn features(
    rng: &mut Rng,
    community: &[usize],
    protos: &[Vec<f64>],
    len: usize,
    signal: f64,
    sigma: f64,
) -> Vec<f64> {
    let dim = protos[0].len();
    let mut out = Vec::with_capacity(community.len() * len * dim);
    for &c in community {
        for _ in 0..len {
            for p in &protos[c] {
                let noise: f64 = rng.sample(StandardNormal);
                out.push(signal * p + sigma * noise);
            }
        }
    }
    out
}

fn neighbor_majority(v: NodeId, community: &[usize], adj: &[Vec<NodeId>], k: usize) -> usize {
    let mut counts = vec![0usize; k];
    for &w in &adj[v] {
        counts[community[w]] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 || counts[community[v]] == best {
        community[v]
    } else {
        counts.iter().position(|&c| c == best).expect("max exists")
    }
}

fn sample_negatives(
    rng: &mut Rng,
    n: usize,
    adj: &[BTreeSet<NodeId>],
    taken: &mut BTreeSet<(NodeId, NodeId)>,
    count: usize,
) -> Vec<LabeledEdge> {
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count && tries < 100 * (count + 1) {
        tries += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        let key = (u.min(v), u.max(v));
        if u == v || adj[u].contains(&v) || !taken.insert(key) {
            continue;
        }
        out.push(LabeledEdge {
            u: key.0,
            v: key.1,
            positive: false,
        });
    }
    out
}

/// Generates a planted-partition multimodal graph; same config, same bits.
pub fn synth_graph(cfg: &SynthConfig) -> Result<MultimodalGraph> {
    cfg.check()?;
    let n = cfg.num_nodes;
    let k = cfg.num_classes;
    let community: Vec<usize> = (0..n).map(|v| v % k).collect();

    let mut rng = rng_from(cfg.seed, &[tag("edges")]);
    let mut edges = Vec::new();
    let mut adj: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); n];
    for u in 0..n {
        for v in u + 1..n {
            let p = if community[u] == community[v] {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
                adj[u].insert(v);
                adj[v].insert(u);
            }
        }
    }

    let mut rng = rng_from(cfg.seed, &[tag("edge-splits")]);
    let mut shuffled = edges.clone();
    shuffled.shuffle(&mut rng);
    let mut pos = shuffled.into_iter();
    let mut taken: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    let mut edge_splits = EdgeSplits::default();
    for (split, count) in [
        (Split::Train, cfg.lp_train),
        (Split::Val, cfg.lp_val),
        (Split::Test, cfg.lp_test),
    ] {
        let list = edge_splits.get_mut(split);
        for (u, v) in pos.by_ref().take(count) {
            list.push(LabeledEdge {
                u,
                v,
                positive: true,
            });
        }
        let negatives = sample_negatives(&mut rng, n, &adj, &mut taken, list.len());
        list.extend(negatives);
    }

    // Held-out positives leave the observed graph so nothing downstream
    // (pretraining positives, demo pools, label rule) can see them.
    let held: BTreeSet<(NodeId, NodeId)> = edge_splits
        .val
        .iter()
        .chain(&edge_splits.test)
        .filter(|e| e.positive)
        .map(|e| (e.u, e.v))
        .collect();
    edges.retain(|e| !held.contains(e));
    for &(u, v) in &held {
        adj[u].remove(&v);
        adj[v].remove(&u);
    }

    let labels: Vec<Option<usize>> = match cfg.label_rule {
        LabelRule::Planted => community.iter().map(|&c| Some(c)).collect(),
        LabelRule::NeighborMajority => {
            let lists: Vec<Vec<NodeId>> = adj.iter().map(|s| s.iter().copied().collect()).collect();
            (0..n)
                .map(|v| Some(neighbor_majority(v, &community, &lists, k)))
                .collect()
        }
    };

    let mut rng = rng_from(cfg.seed, &[tag("features")]);
    let txt_protos = prototypes(cfg.family_seed, "text", k, cfg.d_t);
    let img_protos = prototypes(cfg.family_seed, "image", k, cfg.d_i);
    let txt_features = features(
        &mut rng,
        &community,
        &txt_protos,
        cfg.n_t,
        cfg.txt_signal,
        cfg.noise_sigma,
    );
    let img_features = features(
        &mut rng,
        &community,
        &img_protos,
        cfg.n_v,
        cfg.img_signal,
        cfg.noise_sigma,
    );

    let mut rng = rng_from(cfg.seed, &[tag("splits")]);
    let mut order: Vec<NodeId> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.train_frac * n as f64).round() as usize;
    let n_val = ((cfg.val_frac * n as f64).round() as usize).min(n - n_train.min(n));
    let mut splits = vec![Split::Test; n];
    for (rank, &v) in order.iter().enumerate() {
        splits[v] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    MultimodalGraph::from_parts(GraphParts {
        name: cfg.name.clone(),
        category: cfg.category.clone(),
        num_nodes: n,
        edges,
        txt_shape: FeatureShape {
            len: cfg.n_t,
            dim: cfg.d_t,
        },
        img_shape: FeatureShape {
            len: cfg.n_v,
            dim: cfg.d_i,
        },
        txt_features,
        img_features,
        labels,
        label_names: (0..k).map(|c| format!("class_{c}")).collect(),
        node_text: vec![Some("a catalog product".to_string()); n],
        splits,
        edge_splits,
    })
}
