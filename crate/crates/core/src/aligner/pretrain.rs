use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::loss::{contrastive_loss, ContrastiveBatch};
use super::{AlignerConfig, AlignerError, AlignerParams, BoundAligner, Result};
use crate::graph::{MultimodalGraph, NodeId, Split};
use crate::rng::{rng_from, tag};
use crate::tensor::{AdamConfig, AdamState, Tape, Var};

/// Anchors from one graph with their sampled 1-hop positives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub graph: usize,
    pub anchors: Vec<NodeId>,
    pub positives: Vec<Vec<NodeId>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// One entry per optimizer step.
    pub losses: Vec<f64>,
}

/// The batches of one epoch: each graph's shuffled non-isolated train
/// anchors cut into batches, interleaved round-robin across graphs.
///
/// Every batch draws from its own derived stream, so a batch depends only
/// on (seed, epoch, graph index, batch index) and its graph.
pub fn plan_epoch(
    graphs: &[MultimodalGraph],
    cfg: &AlignerConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let mut per_graph = Vec::with_capacity(graphs.len());
    for (gi, g) in graphs.iter().enumerate() {
        let mut anchors: Vec<NodeId> = (0..g.num_nodes())
            .filter(|&v| g.split(v) == Split::Train && g.degree(v) > 0)
            .collect();
        if anchors.is_empty() {
            return Err(AlignerError::NoAnchors(gi));
        }
        let mut rng = rng_from(cfg.seed, &[tag("anchors"), epoch as u64, gi as u64]);
        anchors.shuffle(&mut rng);
        let batches: Vec<Batch> = anchors
            .chunks(cfg.batch_size)
            .enumerate()
            .map(|(bi, chunk)| {
                let mut rng = rng_from(
                    cfg.seed,
                    &[tag("positives"), epoch as u64, gi as u64, bi as u64],
                );
                Batch {
                    graph: gi,
                    anchors: chunk.to_vec(),
                    positives: chunk
                        .iter()
                        .map(|&a| g.sample_neighbors(a, cfg.neighbors_per_anchor, &mut rng))
                        .collect(),
                }
            })
            .collect();
        per_graph.push(batches.into_iter());
    }
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for it in per_graph.iter_mut() {
            out.extend(it.next());
        }
        if out.len() == before {
            return Ok(out);
        }
    }
}

/// Contrastive loss of one batch; members are the anchors followed by any
/// positives not already present.
pub fn batch_loss<'t>(
    bound: &BoundAligner<'t>,
    g: &MultimodalGraph,
    batch: &Batch,
    tau: f64,
) -> Result<Var<'t>> {
    let mut members: Vec<NodeId> = Vec::new();
    let mut row: HashMap<NodeId, usize> = HashMap::new();
    let mut slot = |v: NodeId, members: &mut Vec<NodeId>| {
        *row.entry(v).or_insert_with(|| {
            members.push(v);
            members.len() - 1
        })
    };
    let anchors: Vec<usize> = batch
        .anchors
        .iter()
        .map(|&a| slot(a, &mut members))
        .collect();
    let positives: Vec<Vec<usize>> = batch
        .positives
        .iter()
        .map(|ps| ps.iter().map(|&p| slot(p, &mut members)).collect())
        .collect();
    let enc = bound.encode_nodes(g, &members)?;
    contrastive_loss(enc.pooled, &ContrastiveBatch { anchors, positives }, tau)
}

/// Contrastive pretraining over all `graphs` jointly.
pub fn pretrain(
    graphs: &[MultimodalGraph],
    cfg: &AlignerConfig,
) -> Result<(AlignerParams, PretrainReport)> {
    cfg.check()?;
    let first = graphs.first().ok_or(AlignerError::NoGraphs)?;
    let mut params = AlignerParams::init(cfg, first.txt_shape().dim, first.img_shape().dim)?;
    for g in graphs {
        params.check_graph(g)?;
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &params.set);
    let mut report = PretrainReport::default();
    for epoch in 0..cfg.epochs {
        for batch in plan_epoch(graphs, cfg, epoch)? {
            let tape = Tape::new();
            let loss = batch_loss(&params.bind(&tape), &graphs[batch.graph], &batch, cfg.tau)?;
            let grads = tape.backward(loss)?;
            params.set.accumulate(&tape, &grads)?;
            adam.step(&mut params.set)?;
            report.losses.push(loss.value().item());
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_graph, SynthConfig};

    fn cliques() -> MultimodalGraph {
        synth_graph(&SynthConfig {
            num_nodes: 16,
            num_classes: 2,
            p_in: 1.0,
            p_out: 0.0,
            d_t: 4,
            d_i: 4,
            n_t: 2,
            n_v: 2,
            train_frac: 1.0,
            val_frac: 0.0,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn cfg() -> AlignerConfig {
        AlignerConfig {
            d: 8,
            n_heads: 2,
            n_q: 2,
            n_layers: 1,
            batch_size: 8,
            lr: 1e-2,
            epochs: 50,
            ..AlignerConfig::default()
        }
    }

    #[test]
    fn plan_covers_every_anchor_once() {
        let g = cliques();
        let batches = plan_epoch(std::slice::from_ref(&g), &cfg(), 0).unwrap();
        let mut seen: Vec<NodeId> = batches.iter().flat_map(|b| b.anchors.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        for b in &batches {
            for (a, ps) in b.anchors.iter().zip(&b.positives) {
                assert!(!ps.is_empty() && ps.iter().all(|p| g.has_edge(*a, *p)));
            }
        }
    }

    #[test]
    fn round_robin_interleaves_graphs() {
        let g = cliques();
        let two = vec![g.clone(), g];
        let batches = plan_epoch(&two, &cfg(), 0).unwrap();
        let order: Vec<usize> = batches.iter().map(|b| b.graph).collect();
        assert_eq!(order, vec![0, 1, 0, 1]);
    }

    #[test]
    fn first_batch_gradient_independent_of_extra_graphs() {
        let g = cliques();
        let one = vec![g.clone()];
        let two = vec![g.clone(), g];
        let b1 = &plan_epoch(&one, &cfg(), 0).unwrap()[0];
        let b2 = &plan_epoch(&two, &cfg(), 0).unwrap()[0];
        assert_eq!(b1, b2);
        let grad = |graphs: &[MultimodalGraph], b: &Batch| {
            let mut p = AlignerParams::init(&cfg(), 4, 4).unwrap();
            let tape = Tape::new();
            let loss = batch_loss(&p.bind(&tape), &graphs[b.graph], b, 0.1).unwrap();
            let grads = tape.backward(loss).unwrap();
            p.set.accumulate(&tape, &grads).unwrap();
            p.set
                .ids()
                .flat_map(|i| p.set.grad(i).to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(grad(&one, b1), grad(&two, b2));
    }

    #[test]
    fn pretraining_lowers_the_loss() {
        let (_, report) = pretrain(&[cliques()], &cfg()).unwrap();
        let n = report.losses.len();
        let head: f64 = report.losses[..2].iter().sum::<f64>() / 2.0;
        let tail: f64 = report.losses[n - 2..].iter().sum::<f64>() / 2.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn all_isolated_graph_is_rejected() {
        let g = synth_graph(&SynthConfig {
            num_nodes: 5,
            p_in: 0.0,
            p_out: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(matches!(
            pretrain(&[g], &cfg()),
            Err(AlignerError::NoAnchors(0))
        ));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let c = AlignerConfig { epochs: 2, ..cfg() };
        let (a, ra) = pretrain(&[cliques()], &c).unwrap();
        let (b, rb) = pretrain(&[cliques()], &c).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.set.checksum(), b.set.checksum());
    }
}
