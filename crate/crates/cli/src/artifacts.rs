//! Run directory layout and artifact I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mmgraph::aligner::AlignerParams;
use mmgraph::graph::{load_graph, save_graph, MultimodalGraph};
use mmgraph::instruct::{DecoderParams, ProjectorParams, PromptMode, Vocab};
use mmgraph::tensor::Checkpoint;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG: &str = "config.resolved";
pub const GRAPHS: &str = "graphs";
pub const ALIGNER: &str = "aligner.ckpt";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.tsv";
pub const PROBE: &str = "probe.tsv";
pub const DEMOS: &str = "demos.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const DECODER: &str = "decoder.ckpt";
pub const DECODER_LOSS: &str = "decoder_loss.tsv";
pub const TUNE_SUMMARY: &str = "tune_summary.tsv";
pub const FREEZE: &str = "freeze.tsv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const METRICS: &str = "metrics.tsv";
pub const VALIDATION: &str = "validation.tsv";
pub const GRADCHECK: &str = "gradcheck.tsv";
pub const ABLATION: &str = "ablation.tsv";

pub fn projector_file(mode: PromptMode) -> String {
    format!("projector_{mode}.ckpt")
}

pub fn tune_loss_file(mode: PromptMode) -> String {
    format!("tune_loss_{mode}.tsv")
}

pub fn embeddings_file(graph: usize) -> String {
    format!("embeddings/g{graph}.ckpt")
}

/// The directory holding every artifact of one resolved configuration.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes the resolved configuration into it.
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.run_dir();
        fs::create_dir_all(&root)?;
        fs::write(root.join(CONFIG), cfg.resolved())?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// The path of an artifact that an earlier stage must have written.
    pub fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact(p))
        }
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, contents)?;
        Ok(())
    }

    pub fn read(&self, rel: &str) -> Result<String> {
        Ok(fs::read_to_string(self.require(rel)?)?)
    }

    /// Replaces the stored graphs with `graphs`.
    pub fn save_graphs(&self, graphs: &[MultimodalGraph]) -> Result<()> {
        let dir = self.path(GRAPHS);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        for (i, g) in graphs.iter().enumerate() {
            save_graph(g, dir.join(format!("g{i}")))?;
        }
        Ok(())
    }

    /// Loads `graphs/g0`, `graphs/g1`, ... up to the first gap.
    pub fn load_graphs(&self) -> Result<Vec<MultimodalGraph>> {
        let dir = self.require(GRAPHS)?;
        let mut out = Vec::new();
        while dir.join(format!("g{}", out.len())).exists() {
            out.push(load_graph(dir.join(format!("g{}", out.len())))?);
        }
        if out.is_empty() {
            return Err(CliError::MissingArtifact(dir.join("g0")));
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, rel: &str, ckpt: &Checkpoint) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(ckpt.save(p)?)
    }

    pub fn load_checkpoint(&self, rel: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::load(self.require(rel)?)?)
    }

    /// The stored aligner, frozen.
    pub fn load_aligner(&self) -> Result<AlignerParams> {
        let mut a = AlignerParams::from_checkpoint(&self.load_checkpoint(ALIGNER)?)?;
        a.set.freeze();
        Ok(a)
    }

    /// The stored decoder, frozen.
    pub fn load_decoder(&self) -> Result<DecoderParams> {
        let mut d = DecoderParams::from_checkpoint(&self.load_checkpoint(DECODER)?)?;
        d.set.freeze();
        Ok(d)
    }

    pub fn load_projector(&self, mode: PromptMode) -> Result<ProjectorParams> {
        Ok(ProjectorParams::from_checkpoint(
            &self.load_checkpoint(&projector_file(mode))?,
        )?)
    }

    pub fn load_vocab(&self) -> Result<Vocab> {
        Ok(Vocab::from_text(&self.read(VOCAB)?)?)
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        self.write(rel, out)
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        self.read(rel)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Tab-separated text with a header row.
pub fn tsv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join("\t"));
    }
    out
}

/// `step  loss` rows, numbered from 0.
pub fn loss_tsv(losses: &[f64]) -> String {
    tsv(
        &["step", "loss"],
        losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), format!("{l:.12e}")]),
    )
}
