use rand::seq::SliceRandom;

use super::assemble::{decoder_states, AssembledInput};
use super::{InstructError, Result};
use crate::rng::{rng_from, tag};
use crate::tensor::{
    find_param, init_uniform, AdamConfig, AdamState, AttentionParams, AttnSegment, BoundAttention,
    BoundLinear, Checkpoint, Linear, ParamId, ParamSet, Tape, Tensor, TensorError, Var,
};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_dec: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest input the position table covers.
    pub max_len: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_dec: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 512,
            lr: 1e-3,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(InstructError::InvalidConfig(m));
        if self.n_heads == 0 || !self.d_dec.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_dec={} is not divisible by n_heads={}",
                self.d_dec, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.batch_size == 0 {
            return bad("n_layers, d_ff, max_len and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("decoder lr must be > 0, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    attn: AttentionParams,
    ln2: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
}

/// Causal pre-norm transformer over word embeddings and learned positions,
/// with the output head tied to the embedding table.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub set: ParamSet,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    pub d_dec: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

struct BoundBlock<'t> {
    ln1: (Var<'t>, Var<'t>),
    attn: BoundAttention<'t>,
    ln2: (Var<'t>, Var<'t>),
    ff1: BoundLinear<'t>,
    ff2: BoundLinear<'t>,
}

pub struct BoundDecoder<'t> {
    tok_emb: Var<'t>,
    pos_emb: Var<'t>,
    blocks: Vec<BoundBlock<'t>>,
    ln_f: (Var<'t>, Var<'t>),
    pub max_len: usize,
}

fn ln_params(set: &mut ParamSet, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        set.add(
            format!("{name}.g"),
            Tensor::matrix(1, d, vec![1.0; d]).expect("row"),
        ),
        set.add(format!("{name}.b"), Tensor::zeros(vec![1, d])),
    )
}

fn locate_ln(set: &ParamSet, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((
        find_param(set, &format!("{name}.g"))?,
        find_param(set, &format!("{name}.b"))?,
    ))
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.check()?;
        let d = cfg.d_dec;
        let mut rng = rng_from(cfg.seed, &[tag("decoder-init")]);
        let mut set = ParamSet::new();
        let tok_emb = set.add("tok_emb", init_uniform(&mut rng, vocab_size, d, d));
        let pos_emb = set.add("pos_emb", init_uniform(&mut rng, cfg.max_len, d, d));
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layer{l}");
            let ln1 = ln_params(&mut set, &format!("{p}.ln1"), d);
            let attn =
                AttentionParams::init(&mut set, &format!("{p}.attn"), d, cfg.n_heads, &mut rng)?;
            let ln2 = ln_params(&mut set, &format!("{p}.ln2"), d);
            let ff1 = Linear::init(&mut set, &format!("{p}.ff1"), d, cfg.d_ff, &mut rng);
            let ff2 = Linear::init(&mut set, &format!("{p}.ff2"), cfg.d_ff, d, &mut rng);
            blocks.push(Block {
                ln1,
                attn,
                ln2,
                ff1,
                ff2,
            });
        }
        let ln_f = ln_params(&mut set, "ln_f", d);
        Ok(Self {
            set,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            d_dec: d,
            n_heads: cfg.n_heads,
            max_len: cfg.max_len,
            vocab_size,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = [
            ("kind", "decoder".to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.blocks.len().to_string()),
        ];
        self.set
            .to_checkpoint(meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Rebuilds the decoder; the result is frozen.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing or bad meta `{k}`")).into())
        };
        if ckpt.meta("kind") != Some("decoder") {
            return Err(TensorError::Checkpoint("not a decoder checkpoint".into()).into());
        }
        let n_heads = meta("n_heads")?;
        let n_layers = meta("n_layers")?;
        let mut set = ParamSet::from_checkpoint(ckpt);
        let tok_emb = find_param(&set, "tok_emb")?;
        let pos_emb = find_param(&set, "pos_emb")?;
        let mut blocks = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("layer{l}");
            blocks.push(Block {
                ln1: locate_ln(&set, &format!("{p}.ln1"))?,
                attn: AttentionParams::locate(&set, &format!("{p}.attn"), n_heads)?,
                ln2: locate_ln(&set, &format!("{p}.ln2"))?,
                ff1: Linear::locate(&set, &format!("{p}.ff1"))?,
                ff2: Linear::locate(&set, &format!("{p}.ff2"))?,
            });
        }
        let ln_f = locate_ln(&set, "ln_f")?;
        let (vocab_size, d_dec) = (set.value(tok_emb).rows(), set.value(tok_emb).cols());
        let max_len = set.value(pos_emb).rows();
        set.freeze();
        Ok(Self {
            set,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            d_dec,
            n_heads,
            max_len,
            vocab_size,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundDecoder<'t> {
        let s = &self.set;
        let pair = |p: (ParamId, ParamId)| (s.bind(tape, p.0), s.bind(tape, p.1));
        BoundDecoder {
            tok_emb: s.bind(tape, self.tok_emb),
            pos_emb: s.bind(tape, self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1: pair(b.ln1),
                    attn: b.attn.bind(tape, s),
                    ln2: pair(b.ln2),
                    ff1: b.ff1.bind(tape, s),
                    ff2: b.ff2.bind(tape, s),
                })
                .collect(),
            ln_f: pair(self.ln_f),
            max_len: self.max_len,
        }
    }
}

impl<'t> BoundDecoder<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tok_emb.tape()
    }

    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Var<'t>> {
        Ok(self.tok_emb.gather_rows(ids)?)
    }

    /// Runs the blocks over row-stacked sequences of lengths `lens`, where
    /// row `r` of `x` is the input embedding at position `positions[r]`.
    /// Returns final-block states for the last `tails[s]` positions of each
    /// sequence `s`, stacked in order; only those rows are computed in the
    /// final block.
    pub fn hidden(
        &self,
        x: Var<'t>,
        positions: &[usize],
        lens: &[usize],
        tails: &[usize],
    ) -> Result<Var<'t>> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(InstructError::TooLong {
                len: p + 1,
                max_len: self.max_len,
            });
        }
        if tails.len() != lens.len() || tails.iter().zip(lens).any(|(&t, &l)| t == 0 || t > l) {
            return Err(InstructError::InvalidConfig(format!(
                "tails {tails:?} for lengths {lens:?}"
            )));
        }
        let mut full = Vec::with_capacity(lens.len());
        let mut last = Vec::with_capacity(lens.len());
        let mut tail_rows = Vec::new();
        let (mut start, mut q_start) = (0, 0);
        for (&l, &t) in lens.iter().zip(tails) {
            full.push(AttnSegment {
                q_start: start,
                q_len: l,
                kv_start: start,
                kv_len: l,
            });
            last.push(AttnSegment {
                q_start,
                q_len: t,
                kv_start: start,
                kv_len: l,
            });
            tail_rows.extend(start + l - t..start + l);
            start += l;
            q_start += t;
        }
        let mut h = x.add(self.pos_emb.gather_rows(positions)?)?;
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter().enumerate() {
            let a = h.layer_norm(b.ln1.0, b.ln1.1, LN_EPS)?;
            h = if i + 1 < n {
                h.add(b.attn.forward(a, a, a, &full, true)?)?
            } else {
                let q = a.gather_rows(&tail_rows)?;
                h.gather_rows(&tail_rows)?
                    .add(b.attn.forward(q, a, a, &last, true)?)?
            };
            let f = h.layer_norm(b.ln2.0, b.ln2.1, LN_EPS)?;
            h = h.add(b.ff2.apply(b.ff1.apply(f)?.gelu()?)?)?;
        }
        Ok(h)
    }

    /// Vocabulary logits for hidden rows, through the final norm and the
    /// tied embedding table.
    pub fn logits(&self, h: Var<'t>) -> Result<Var<'t>> {
        Ok(h.layer_norm(self.ln_f.0, self.ln_f.1, LN_EPS)?
            .matmul_t(self.tok_emb)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderReport {
    /// One entry per optimizer step.
    pub losses: Vec<f64>,
}

/// Trains a fresh decoder on text-rendered inputs (slots as their
/// placeholder tokens), then freezes it.
pub fn pretrain_decoder(
    corpus: &[AssembledInput],
    vocab_size: usize,
    cfg: &DecoderConfig,
) -> Result<(DecoderParams, DecoderReport)> {
    if corpus.is_empty() {
        return Err(InstructError::EmptyCorpus);
    }
    if let Some(i) = corpus.iter().position(|a| a.num_slots() > 0) {
        return Err(InstructError::InvalidConfig(format!(
            "corpus item {i} has embedding slots"
        )));
    }
    let mut dec = DecoderParams::init(cfg, vocab_size)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &dec.set);
    let mut report = DecoderReport::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(
            cfg.seed,
            &[tag("decoder-order"), epoch as u64],
        ));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AssembledInput> = chunk.iter().map(|&i| &corpus[i]).collect();
            let tape = Tape::new();
            let loss = instruction_loss_bound(&dec.bind(&tape), None, &batch)?;
            let grads = tape.backward(loss)?;
            dec.set.accumulate(&tape, &grads)?;
            adam.step(&mut dec.set)?;
            report.losses.push(loss.value().item());
        }
    }
    dec.set.freeze();
    Ok((dec, report))
}

/// Mean next-token cross-entropy over every answer position in the batch.
pub fn instruction_loss_bound<'t>(
    dec: &BoundDecoder<'t>,
    proj: Option<&super::projector::BoundProjector<'t>>,
    batch: &[&AssembledInput],
) -> Result<Var<'t>> {
    if let Some(a) = batch
        .iter()
        .find(|a| a.answer_len() == 0 || a.answer_start == 0)
    {
        return Err(if a.answer_len() == 0 {
            InstructError::EmptyTarget
        } else {
            InstructError::InvalidConfig("answer without a prompt".into())
        });
    }
    // Tail = last prompt position plus every answer position.
    let tails: Vec<usize> = batch.iter().map(|a| a.answer_len() + 1).collect();
    let (h, offsets) = decoder_states(dec, proj, batch, &tails)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ((a, off), t) in batch.iter().zip(offsets).zip(&tails) {
        let first = a.len() - t;
        for (pos, tok) in a.targets() {
            rows.push(off + pos - first);
            targets.push(tok);
        }
    }
    if rows.is_empty() {
        return Err(InstructError::EmptyTarget);
    }
    Ok(dec.logits(h.gather_rows(&rows)?)?.cross_entropy(&targets)?)
}
