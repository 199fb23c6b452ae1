use std::fmt;

use rand::seq::SliceRandom;

use super::assemble::AssembledInput;
use super::decoder::{instruction_loss_bound, DecoderParams};
use super::projector::ProjectorParams;
use super::{InstructError, Result};
use crate::aligner::AlignerParams;
use crate::demo::Task;
use crate::rng::{rng_from, tag};
use crate::tensor::{AdamConfig, AdamState, Tape};

/// Breadth of a tuning run, from the tasks and graphs it covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// One task on one graph.
    SingleFocus,
    /// One task across several graphs.
    DataGeneralization,
    /// Several tasks, any number of graphs.
    DataTaskGeneralization,
}

impl Regime {
    pub fn of(tasks: usize, graphs: usize) -> Self {
        match (tasks, graphs) {
            (t, _) if t > 1 => Regime::DataTaskGeneralization,
            (_, g) if g > 1 => Regime::DataGeneralization,
            _ => Regime::SingleFocus,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SingleFocus => "single_focus",
            Regime::DataGeneralization => "data_generalization",
            Regime::DataTaskGeneralization => "data_task_generalization",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training prompt, tagged with its task and source graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TuneExample {
    pub task: Task,
    pub graph: usize,
    pub input: AssembledInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            epochs: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneReport {
    pub regime: Regime,
    /// One entry per optimizer step.
    pub losses: Vec<f64>,
    /// Held-out loss after each epoch; empty without held-out examples.
    pub val_losses: Vec<f64>,
    /// Epoch (from 1) whose weights were kept; the last when unselected.
    pub kept_epoch: usize,
}

/// Instruction loss of a batch under the current weights.
pub fn instruction_loss(
    dec: &DecoderParams,
    proj: &ProjectorParams,
    batch: &[&AssembledInput],
) -> Result<f64> {
    let tape = Tape::new();
    let loss = instruction_loss_bound(&dec.bind(&tape), Some(&proj.bind(&tape)), batch)?;
    Ok(loss.value().item())
}

/// Token-weighted mean instruction loss over `examples`.
pub fn mean_loss(
    dec: &DecoderParams,
    proj: &ProjectorParams,
    examples: &[TuneExample],
    batch_size: usize,
) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let inputs: Vec<&AssembledInput> = chunk.iter().map(|e| &e.input).collect();
        let n: usize = inputs.iter().map(|a| a.answer_len()).sum();
        total += instruction_loss(dec, proj, &inputs)? * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(InstructError::EmptyTarget);
    }
    Ok(total / tokens as f64)
}

/// Batches of one epoch: each (task, graph) stream shuffled and chunked,
/// streams interleaved round-robin in (task, graph) order.
fn plan_epoch(examples: &[TuneExample], cfg: &TuneConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut keys: Vec<(Task, usize)> = examples.iter().map(|e| (e.task, e.graph)).collect();
    keys.sort_by_key(|&(t, g)| (t.as_str(), g));
    keys.dedup();
    let mut streams: Vec<std::vec::IntoIter<Vec<usize>>> = keys
        .iter()
        .enumerate()
        .map(|(si, &(t, g))| {
            let mut idx: Vec<usize> = (0..examples.len())
                .filter(|&i| examples[i].task == t && examples[i].graph == g)
                .collect();
            idx.shuffle(&mut rng_from(
                cfg.seed,
                &[tag("tune-order"), epoch as u64, si as u64],
            ));
            idx.chunks(cfg.batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
                .into_iter()
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for s in streams.iter_mut() {
            out.extend(s.next());
        }
        if out.len() == before {
            return out;
        }
    }
}

/// Adam on the projector only. The decoder and aligner must be frozen and
/// are checked byte-for-byte unchanged afterwards.
///
/// With held-out examples the weights after the epoch of lowest held-out
/// loss are kept (earliest on ties); otherwise the final weights.
pub fn tune_projector(
    proj: &mut ProjectorParams,
    dec: &DecoderParams,
    aligner: &AlignerParams,
    examples: &[TuneExample],
    held_out: &[TuneExample],
    cfg: &TuneConfig,
) -> Result<TuneReport> {
    if !dec.set.is_frozen() {
        return Err(InstructError::NotFrozen("decoder"));
    }
    if !aligner.set.is_frozen() {
        return Err(InstructError::NotFrozen("aligner"));
    }
    if examples.is_empty() {
        return Err(InstructError::EmptyCorpus);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(InstructError::InvalidConfig(
            "tune needs batch_size >= 1 and lr > 0".into(),
        ));
    }
    let dec_sum = dec.set.checksum();
    let aligner_sum = aligner.set.checksum();
    let tasks = {
        let mut t: Vec<&str> = examples.iter().map(|e| e.task.as_str()).collect();
        t.sort_unstable();
        t.dedup();
        t.len()
    };
    let graphs = {
        let mut g: Vec<usize> = examples.iter().map(|e| e.graph).collect();
        g.sort_unstable();
        g.dedup();
        g.len()
    };
    let mut report = TuneReport {
        regime: Regime::of(tasks, graphs),
        losses: Vec::new(),
        val_losses: Vec::new(),
        kept_epoch: cfg.epochs,
    };
    let mut best: Option<(f64, crate::tensor::Checkpoint)> = None;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &proj.set);
    for epoch in 0..cfg.epochs {
        for batch in plan_epoch(examples, cfg, epoch) {
            let inputs: Vec<&AssembledInput> = batch.iter().map(|&i| &examples[i].input).collect();
            let tape = Tape::new();
            let loss = instruction_loss_bound(&dec.bind(&tape), Some(&proj.bind(&tape)), &inputs)?;
            let grads = tape.backward(loss)?;
            proj.set.accumulate(&tape, &grads)?;
            adam.step(&mut proj.set)?;
            report.losses.push(loss.value().item());
        }
        if !held_out.is_empty() {
            let val = mean_loss(dec, proj, held_out, cfg.batch_size)?;
            report.val_losses.push(val);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, proj.set.to_checkpoint(Vec::new())));
                report.kept_epoch = epoch + 1;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        proj.set.load_values(&snapshot)?;
    }
    if dec.set.checksum() != dec_sum {
        return Err(InstructError::FreezeViolation("decoder"));
    }
    if aligner.set.checksum() != aligner_sum {
        return Err(InstructError::FreezeViolation("aligner"));
    }
    Ok(report)
}
