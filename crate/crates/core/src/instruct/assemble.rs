use std::fmt;
use std::str::FromStr;

use super::decoder::BoundDecoder;
use super::projector::BoundProjector;
use super::prompt::{PromptSegment, PromptSequence};
use super::vocab::{Vocab, GRAPH, IMAGE};
use super::{InstructError, Result};
use crate::aligner::{export_embeddings, AlignerParams};
use crate::graph::{MultimodalGraph, NodeId};
use crate::tensor::{Tensor, Var};

/// What an image slot expands to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageMode {
    /// One row: the mean of the slot nodes' projected patches.
    #[default]
    Mean,
    /// Every projected patch of every slot node.
    Full,
}

impl fmt::Display for ImageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageMode::Mean => "mean",
            ImageMode::Full => "full",
        })
    }
}

impl FromStr for ImageMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(ImageMode::Mean),
            "full" => Ok(ImageMode::Full),
            other => Err(format!(
                "unknown image mode `{other}` (expected mean or full)"
            )),
        }
    }
}

/// Frozen aligner outputs for one graph, in aligner width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotFeatures {
    /// `n·n_q × d`, node-major.
    pub fused: Tensor,
    /// `n·n_v × d`, node-major: `img_in` applied to each raw patch.
    pub patches: Tensor,
    pub n_q: usize,
    pub n_v: usize,
}

impl SlotFeatures {
    pub fn compute(aligner: &AlignerParams, g: &MultimodalGraph) -> Result<Self> {
        let (_, fused) = export_embeddings(aligner, g)?;
        Self::from_parts(
            fused,
            aligner.project_image_patches(g)?,
            aligner.n_q,
            g.img_shape().len,
        )
    }

    pub fn from_parts(fused: Tensor, patches: Tensor, n_q: usize, n_v: usize) -> Result<Self> {
        if n_q == 0
            || n_v == 0
            || !fused.rows().is_multiple_of(n_q)
            || patches.rows() != fused.rows() / n_q * n_v
        {
            return Err(InstructError::InvalidConfig(format!(
                "slot features: {} fused rows with n_q={n_q}, {} patch rows with n_v={n_v}",
                fused.rows(),
                patches.rows()
            )));
        }
        if fused.cols() != patches.cols() {
            return Err(InstructError::DimMismatch {
                what: "patch width",
                expected: fused.cols(),
                actual: patches.cols(),
            });
        }
        Ok(Self {
            fused,
            patches,
            n_q,
            n_v,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.fused.rows() / self.n_q
    }

    pub fn d(&self) -> usize {
        self.fused.cols()
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if v >= self.num_nodes() {
            return Err(InstructError::NodeOutOfRange {
                node: v,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(())
    }

    fn push_graph(&self, v: NodeId, out: &mut Vec<f64>) -> Result<usize> {
        self.check(v)?;
        let d = self.d();
        out.extend_from_slice(&self.fused.data()[v * self.n_q * d..(v + 1) * self.n_q * d]);
        Ok(self.n_q)
    }

    fn push_image(&self, nodes: &[NodeId], mode: ImageMode, out: &mut Vec<f64>) -> Result<usize> {
        let d = self.d();
        for &v in nodes {
            self.check(v)?;
        }
        match mode {
            ImageMode::Full => {
                for &v in nodes {
                    out.extend_from_slice(
                        &self.patches.data()[v * self.n_v * d..(v + 1) * self.n_v * d],
                    );
                }
                Ok(nodes.len() * self.n_v)
            }
            ImageMode::Mean => {
                let mut mean = vec![0.0; d];
                for &v in nodes {
                    for p in 0..self.n_v {
                        for (m, x) in mean.iter_mut().zip(self.patches.row(v * self.n_v + p)) {
                            *m += x;
                        }
                    }
                }
                let count = (nodes.len() * self.n_v) as f64;
                out.extend(mean.into_iter().map(|m| m / count));
                Ok(1)
            }
        }
    }
}

/// Decoder input for one prompt: vocabulary ids and embedding slot rows in
/// position order, with the answer tokens last.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput {
    /// Per position: a vocabulary id, or `None` for the next slot row.
    pub tokens: Vec<Option<usize>>,
    /// One aligner-space row per `None` position, `#slots × d`.
    pub slot_rows: Tensor,
    /// First answer position; equals `len()` when there is no answer.
    pub answer_start: usize,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_none()).count()
    }

    pub fn answer_len(&self) -> usize {
        self.len() - self.answer_start
    }

    /// True exactly at answer positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|p| p >= self.answer_start).collect()
    }

    /// `(position, token)`: the logits at `position` predict `token`.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        (self.answer_start..self.len())
            .map(|p| (p - 1, self.tokens[p].expect("answer positions hold tokens")))
            .collect()
    }

    /// The prompt part only, for decoding.
    pub fn prompt_only(&self) -> Self {
        let slots_before = self.tokens[..self.answer_start]
            .iter()
            .filter(|t| t.is_none())
            .count();
        let d = self.slot_rows.cols();
        Self {
            tokens: self.tokens[..self.answer_start].to_vec(),
            slot_rows: Tensor::matrix(
                slots_before,
                d,
                self.slot_rows.data()[..slots_before * d].to_vec(),
            )
            .expect("prefix of rows"),
            answer_start: self.answer_start,
        }
    }

    /// Appends a generated token after the current end.
    pub fn push_token(&mut self, id: usize) {
        self.tokens.push(Some(id));
    }
}

fn append_answer(tokens: &mut Vec<Option<usize>>, answer: &str, vocab: &Vocab) -> usize {
    let start = tokens.len();
    if !answer.trim().is_empty() {
        tokens.extend(vocab.encode_answer(answer).into_iter().map(Some));
    }
    start
}

/// Text segments become vocabulary ids, each graph slot the `n_q` fused
/// rows of each referenced node, each image slot per `image_mode`; the
/// answer and `<eos>` follow when the prompt has an answer.
pub fn assemble_decoder_input(
    prompt: &PromptSequence,
    vocab: &Vocab,
    feats: &SlotFeatures,
    image_mode: ImageMode,
) -> Result<AssembledInput> {
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    for s in &prompt.segments {
        match s {
            PromptSegment::Text(t) => tokens.extend(vocab.encode(t).into_iter().map(Some)),
            PromptSegment::GraphSlot(nodes) => {
                for &v in nodes {
                    let n = feats.push_graph(v, &mut rows)?;
                    tokens.extend(std::iter::repeat_n(None, n));
                }
            }
            PromptSegment::ImageSlot(nodes) => {
                let n = feats.push_image(nodes, image_mode, &mut rows)?;
                tokens.extend(std::iter::repeat_n(None, n));
            }
        }
    }
    let answer_start = append_answer(&mut tokens, &prompt.answer, vocab);
    let slots = rows.len() / feats.d();
    Ok(AssembledInput {
        tokens,
        slot_rows: Tensor::matrix(slots, feats.d(), rows)?,
        answer_start,
    })
}

/// All-token rendering: each slot is its single placeholder token.
pub fn assemble_text(prompt: &PromptSequence, vocab: &Vocab) -> AssembledInput {
    let mut tokens = Vec::new();
    for s in &prompt.segments {
        match s {
            PromptSegment::Text(t) => tokens.extend(vocab.encode(t).into_iter().map(Some)),
            PromptSegment::GraphSlot(_) => tokens.push(Some(GRAPH)),
            PromptSegment::ImageSlot(_) => tokens.push(Some(IMAGE)),
        }
    }
    let answer_start = append_answer(&mut tokens, &prompt.answer, vocab);
    AssembledInput {
        tokens,
        slot_rows: Tensor::zeros(vec![0, 1]),
        answer_start,
    }
}

/// Final-block states of the last `tails[i]` positions of each input,
/// row-stacked, with each input's first tail row. Slot rows pass through
/// `proj`.
pub fn decoder_states<'t>(
    dec: &BoundDecoder<'t>,
    proj: Option<&BoundProjector<'t>>,
    batch: &[&AssembledInput],
    tails: &[usize],
) -> Result<(Var<'t>, Vec<usize>)> {
    if tails.len() != batch.len() {
        return Err(InstructError::InvalidConfig(format!(
            "{} tails for {} inputs",
            tails.len(),
            batch.len()
        )));
    }
    let tape = dec.tape();
    let mut ids = Vec::new();
    let mut slot_data = Vec::new();
    let mut slot_cols = None;
    let mut positions = Vec::new();
    let mut lens = Vec::with_capacity(batch.len());
    // Index into concat([token rows; slot rows]) for every position.
    let mut source = Vec::new();
    let mut n_slots = 0;
    for a in batch {
        if a.is_empty() {
            return Err(InstructError::EmptyTarget);
        }
        lens.push(a.len());
        positions.extend(0..a.len());
        let mut next_slot = 0;
        for t in &a.tokens {
            match t {
                Some(id) => {
                    source.push((true, ids.len()));
                    ids.push(*id);
                }
                None => {
                    source.push((false, n_slots));
                    n_slots += 1;
                    next_slot += 1;
                }
            }
        }
        if next_slot != a.slot_rows.rows() {
            return Err(InstructError::SlotCount {
                positions: next_slot,
                rows: a.slot_rows.rows(),
            });
        }
        if next_slot > 0 {
            match slot_cols {
                None => slot_cols = Some(a.slot_rows.cols()),
                Some(c) if c != a.slot_rows.cols() => {
                    return Err(InstructError::DimMismatch {
                        what: "slot row width",
                        expected: c,
                        actual: a.slot_rows.cols(),
                    })
                }
                _ => {}
            }
            slot_data.extend_from_slice(a.slot_rows.data());
        }
    }
    let tok = dec.embed_tokens(&ids)?;
    let x = if n_slots == 0 {
        tok
    } else {
        let proj = proj.ok_or(InstructError::MissingProjector)?;
        let rows = tape.constant(Tensor::matrix(
            n_slots,
            slot_cols.expect("slots seen"),
            slot_data,
        )?);
        let projected = proj.apply(rows)?;
        let n_tok = ids.len();
        let stacked = Var::concat_rows(&[tok, projected])?;
        let idx: Vec<usize> = source
            .iter()
            .map(|&(is_tok, i)| if is_tok { i } else { n_tok + i })
            .collect();
        stacked.gather_rows(&idx)?
    };
    let mut tail_offsets = Vec::with_capacity(tails.len());
    let mut acc = 0;
    for &t in tails {
        tail_offsets.push(acc);
        acc += t;
    }
    Ok((dec.hidden(x, &positions, &lens, tails)?, tail_offsets))
}
