//! Stage logic shared by the subcommands, free of file handling.

use std::collections::BTreeSet;

use mmgraph::aligner::{pretrain, AlignerConfig, AlignerParams, PretrainReport};
use mmgraph::demo::{
    select_lp_demos, select_nc_demos, DemonstrationSet, LpDemoConfig, PprConfig, Task, YES,
};
use mmgraph::graph::{synth_graph, MultimodalGraph, Split, SynthConfig};
use mmgraph::instruct::{
    assemble_decoder_input, assemble_text, build_lp_prompt, build_nc_prompt, predict_batch,
    pretrain_decoder, tune_projector, AssembledInput, DecoderConfig, DecoderParams, DecoderReport,
    ImageMode, Prediction, ProjectorParams, PromptMode, PromptSequence, SlotFeatures, TuneConfig,
    TuneExample, TuneReport, Vocab,
};
use mmgraph::rng::{derive_seed, rng_from, tag};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Seed of graph `index` in a synthetic family generated from `seed`.
pub fn graph_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[tag("graph"), index as u64])
}

/// `count` graphs sharing `base.family_seed`, each with its own seed.
pub fn synth_family(base: &SynthConfig, count: usize, seed: u64) -> Result<Vec<MultimodalGraph>> {
    (0..count)
        .map(|i| {
            let cfg = SynthConfig {
                name: format!("synthetic-{i}"),
                seed: graph_seed(seed, i),
                ..base.clone()
            };
            Ok(synth_graph(&cfg)?)
        })
        .collect()
}

/// Pretrains the aligner on `graphs` and freezes it.
pub fn pretrain_aligner(
    graphs: &[MultimodalGraph],
    cfg: &AlignerConfig,
) -> Result<(AlignerParams, PretrainReport)> {
    let (mut params, report) = pretrain(graphs, cfg)?;
    if let Some(bad) = report.losses.iter().position(|l| !l.is_finite()) {
        return Err(CliError::Numeric(format!(
            "aligner loss is not finite at step {bad}"
        )));
    }
    params.set.freeze();
    Ok((params, report))
}

/// One anchor with its demonstrations and gold answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub id: String,
    pub graph: usize,
    pub split: Split,
    pub truth: String,
    #[serde(flatten)]
    pub set: DemonstrationSet,
}

impl DemoRecord {
    pub fn task(&self) -> Task {
        self.set.task
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemoSettings {
    pub k: usize,
    pub ppr: PprConfig,
    pub lp: LpDemoConfig,
    pub seed: u64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self {
            k: 3,
            ppr: PprConfig::default(),
            lp: LpDemoConfig::default(),
            seed: 0,
        }
    }
}

/// Demonstrations for every labeled node (NC) and every listed link
/// example (LP) of graph `gi`, restricted to `tasks`.
pub fn demo_records(
    g: &MultimodalGraph,
    gi: usize,
    tasks: &[Task],
    s: &DemoSettings,
) -> Result<Vec<DemoRecord>> {
    let mut out = Vec::new();
    if tasks.contains(&Task::Nc) {
        for v in 0..g.num_nodes() {
            let Some(truth) = g.label_name(v) else {
                continue;
            };
            out.push(DemoRecord {
                id: format!("g{gi}/nc/{v}"),
                graph: gi,
                split: g.split(v),
                truth: truth.to_string(),
                set: select_nc_demos(g, v, s.k, &s.ppr)?,
            });
        }
    }
    if tasks.contains(&Task::Lp) {
        for split in Split::ALL {
            for (i, e) in g.edge_splits().get(split).iter().enumerate() {
                let mut rng = rng_from(
                    s.seed,
                    &[tag("lp-demos"), gi as u64, tag(split.as_str()), i as u64],
                );
                out.push(DemoRecord {
                    id: format!("g{gi}/lp/{split}/{i}"),
                    graph: gi,
                    split,
                    truth: if e.positive { YES } else { mmgraph::demo::NO }.to_string(),
                    set: select_lp_demos(g, e.u, e.v, &s.lp, &mut rng)?,
                });
            }
        }
    }
    Ok(out)
}

/// The prompt of `rec` in `mode`, answered with its gold answer.
pub fn prompt_for(
    g: &MultimodalGraph,
    rec: &DemoRecord,
    mode: PromptMode,
) -> Result<PromptSequence> {
    let a = &rec.set.anchor;
    let p = match rec.task() {
        Task::Nc => build_nc_prompt(g, a[0], &rec.set, mode)?,
        Task::Lp => build_lp_prompt(g, a[0], a[1], Some(rec.truth == YES), &rec.set, mode)?,
    };
    Ok(p)
}

/// Vocabulary over every prompt of `records` in every mode plus all label names.
pub fn build_vocab(
    graphs: &[MultimodalGraph],
    records: &[DemoRecord],
    modes: &[PromptMode],
) -> Result<Vocab> {
    let mut prompts = Vec::with_capacity(records.len() * modes.len());
    for rec in records {
        for &mode in modes {
            prompts.push(prompt_for(&graphs[rec.graph], rec, mode)?);
        }
    }
    let labels: BTreeSet<String> = graphs
        .iter()
        .flat_map(|g| g.label_names().iter().cloned())
        .collect();
    Ok(Vocab::build(
        prompts.iter(),
        &labels.into_iter().collect::<Vec<_>>(),
    ))
}

/// Pretrains the decoder on text-rendered prompts of `records` in `modes`.
pub fn train_decoder(
    graphs: &[MultimodalGraph],
    records: &[&DemoRecord],
    modes: &[PromptMode],
    vocab: &Vocab,
    cfg: &DecoderConfig,
) -> Result<(DecoderParams, DecoderReport)> {
    let mut corpus = Vec::with_capacity(records.len() * modes.len());
    for rec in records {
        for &mode in modes {
            corpus.push(assemble_text(
                &prompt_for(&graphs[rec.graph], rec, mode)?,
                vocab,
            ));
        }
    }
    let (dec, report) = pretrain_decoder(&corpus, vocab.len(), cfg)?;
    if let Some(bad) = report.losses.iter().position(|l| !l.is_finite()) {
        return Err(CliError::Numeric(format!(
            "decoder loss is not finite at step {bad}"
        )));
    }
    Ok((dec, report))
}

/// Decoder inputs for `records` in `mode`, with gold answers attached.
pub fn assemble_records(
    graphs: &[MultimodalGraph],
    feats: &[SlotFeatures],
    records: &[&DemoRecord],
    vocab: &Vocab,
    mode: PromptMode,
    image_mode: ImageMode,
) -> Result<Vec<AssembledInput>> {
    records
        .iter()
        .map(|rec| {
            let p = prompt_for(&graphs[rec.graph], rec, mode)?;
            Ok(assemble_decoder_input(
                &p,
                vocab,
                &feats[rec.graph],
                image_mode,
            )?)
        })
        .collect()
}

pub fn tune_examples(
    graphs: &[MultimodalGraph],
    feats: &[SlotFeatures],
    records: &[&DemoRecord],
    vocab: &Vocab,
    mode: PromptMode,
    image_mode: ImageMode,
) -> Result<Vec<TuneExample>> {
    let inputs = assemble_records(graphs, feats, records, vocab, mode, image_mode)?;
    Ok(records
        .iter()
        .zip(inputs)
        .map(|(rec, input)| TuneExample {
            task: rec.task(),
            graph: rec.graph,
            input,
        })
        .collect())
}

/// Records of `split` on `graphs` for `tasks`, in record order.
pub fn select<'a>(
    records: &'a [DemoRecord],
    split: Split,
    graphs: &[usize],
    tasks: &[Task],
) -> Vec<&'a DemoRecord> {
    records
        .iter()
        .filter(|r| r.split == split && graphs.contains(&r.graph) && tasks.contains(&r.task()))
        .collect()
}

/// Everything the frozen backbone contributes to tuning and evaluation.
pub struct Backbone<'a> {
    pub graphs: &'a [MultimodalGraph],
    pub feats: &'a [SlotFeatures],
    pub aligner: &'a AlignerParams,
    pub decoder: &'a DecoderParams,
    pub vocab: &'a Vocab,
    pub image_mode: ImageMode,
}

/// Tunes a fresh projector for `mode` on `train`, selecting the epoch by
/// loss on `val` when it is nonempty.
pub fn tune_mode(
    b: &Backbone<'_>,
    train: &[&DemoRecord],
    val: &[&DemoRecord],
    mode: PromptMode,
    cfg: &TuneConfig,
) -> Result<(ProjectorParams, TuneReport)> {
    let examples = tune_examples(b.graphs, b.feats, train, b.vocab, mode, b.image_mode)?;
    let held_out = tune_examples(b.graphs, b.feats, val, b.vocab, mode, b.image_mode)?;
    let mut proj = ProjectorParams::init(
        b.aligner.d,
        b.decoder.d_dec,
        derive_seed(cfg.seed, &[tag(mode.as_str())]),
    );
    let report = tune_projector(&mut proj, b.decoder, b.aligner, &examples, &held_out, cfg)?;
    if let Some(bad) = report.losses.iter().position(|l| !l.is_finite()) {
        return Err(CliError::Numeric(format!(
            "{mode} tuning loss is not finite at step {bad}"
        )));
    }
    Ok((proj, report))
}

/// Greedy predictions for `records` in `mode`, paired with their truths.
pub fn evaluate(
    b: &Backbone<'_>,
    proj: &ProjectorParams,
    records: &[&DemoRecord],
    mode: PromptMode,
    max_len: usize,
) -> Result<Vec<Prediction>> {
    let inputs = assemble_records(b.graphs, b.feats, records, b.vocab, mode, b.image_mode)?;
    let outputs = predict_batch(b.decoder, proj, &inputs, b.vocab, max_len)?;
    Ok(outputs
        .into_iter()
        .zip(records)
        .map(|(p, rec)| Prediction::new(p, &rec.truth))
        .collect())
}

pub fn accuracy(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().filter(|p| p.correct).count() as f64 / predictions.len() as f64
}
