//! Prompted instruction tuning against a frozen decoder.
//!
//! Prompts interleave text with image and graph slots. Text becomes word
//! embeddings of a small causal decoder that is trained once and frozen;
//! slots become frozen aligner rows passed through a trainable projector.
//! Only the projector is tuned.

mod assemble;
mod decoder;
mod predict;
mod projector;
mod prompt;
mod tune;
mod vocab;

pub use assemble::{
    assemble_decoder_input, assemble_text, decoder_states, AssembledInput, ImageMode, SlotFeatures,
};
pub use decoder::{
    instruction_loss_bound, pretrain_decoder, BoundDecoder, DecoderConfig, DecoderParams,
    DecoderReport,
};
pub use predict::{evaluate_accuracy, normalize_answer, predict, predict_batch, Prediction};
pub use projector::{BoundProjector, ProjectorParams};
pub use prompt::{
    build_lp_prompt, build_nc_prompt, PromptMode, PromptSegment, PromptSequence, GRAPH_TOKEN,
    IMAGE_TOKEN,
};
pub use tune::{
    instruction_loss, mean_loss, tune_projector, Regime, TuneConfig, TuneExample, TuneReport,
};
pub use vocab::{words, Vocab, EOS, EOS_TOKEN, GRAPH, IMAGE, UNK, UNK_TOKEN};

use thiserror::Error;

use crate::aligner::AlignerError;
use crate::demo::{DemoError, Task};
use crate::graph::NodeId;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum InstructError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Aligner(#[from] AlignerError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("invalid instruct config: {0}")]
    InvalidConfig(String),
    #[error("node {node} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: NodeId, num_nodes: usize },
    #[error("expected {expected} demonstrations, got {actual}")]
    WrongDemoTask { expected: Task, actual: Task },
    #[error("malformed demonstration: {0}")]
    MalformedDemo(String),
    #[error("demonstration node {0} is unlabeled or its answer is not its label")]
    UnlabeledDemo(NodeId),
    #[error("link-prediction endpoints must differ, got ({0},{0})")]
    SamePair(NodeId),
    #[error("vocabulary file: {0}")]
    BadVocab(String),
    #[error("{what}: expected {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("input of length {len} exceeds the decoder's {max_len} positions")]
    TooLong { len: usize, max_len: usize },
    #[error("decoder corpus is empty")]
    EmptyCorpus,
    #[error("no answer positions to score")]
    EmptyTarget,
    #[error("{positions} slot positions but {rows} slot rows")]
    SlotCount { positions: usize, rows: usize },
    #[error("input has embedding slots but no projector was supplied")]
    MissingProjector,
    #[error("frozen {0} parameters changed during projector tuning")]
    FreezeViolation(&'static str),
    #[error("{0} must be frozen before projector tuning")]
    NotFrozen(&'static str),
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
}

pub type Result<T> = std::result::Result<T, InstructError>;

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::aligner::{AlignerConfig, AlignerParams};
    use crate::demo::{select_nc_demos, PprConfig};
    use crate::graph::test_graphs::from_edges;
    use crate::graph::MultimodalGraph;

    pub struct Fixture {
        pub g: MultimodalGraph,
        pub aligner: AlignerParams,
        pub feats: SlotFeatures,
        pub vocab: Vocab,
        /// One with-demos NC prompt per node.
        pub prompts: Vec<PromptSequence>,
    }

    pub fn fixture() -> Fixture {
        let g = from_edges(
            8,
            &[
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 4),
                (4, 5),
                (5, 6),
                (6, 7),
                (7, 0),
                (0, 4),
            ],
        );
        let cfg = AlignerConfig {
            d: 8,
            n_heads: 2,
            n_q: 2,
            n_layers: 1,
            ..AlignerConfig::default()
        };
        let mut aligner = AlignerParams::init(&cfg, 3, 3).unwrap();
        aligner.set.freeze();
        let feats = SlotFeatures::compute(&aligner, &g).unwrap();
        let prompts: Vec<PromptSequence> = (0..8)
            .map(|v| {
                let d = select_nc_demos(&g, v, 2, &PprConfig::default()).unwrap();
                build_nc_prompt(&g, v, &d, PromptMode::WithDemos).unwrap()
            })
            .collect();
        let vocab = Vocab::build(prompts.iter(), g.label_names());
        Fixture {
            g,
            aligner,
            feats,
            vocab,
            prompts,
        }
    }

    pub fn tiny_decoder() -> DecoderConfig {
        DecoderConfig {
            d_dec: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_len: 256,
            lr: 1e-2,
            epochs: 1,
            batch_size: 4,
            seed: 0,
        }
    }
}
