//! Flat `key = value` run configuration.
//!
//! Every key has a built-in default; files and `--key value` overrides
//! replace values in order, so the last writer wins. Values are type
//! checked when set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Count,
    Seed,
    Real,
    Flag,
    Text,
    /// Comma-separated items, possibly empty.
    List,
    /// One of the listed words.
    Choice(&'static [&'static str]),
}

#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        kind,
        default,
        help,
    }
}

/// Directory under which run directories are created; not part of the hash.
pub const OUT_DIR: &str = "out_dir";

pub const KEYS: &[KeySpec] = &[
    key("seed", Kind::Seed, "0", "base seed for every stage"),
    key(OUT_DIR, Kind::Text, ".", "parent of the runs/ directory"),
    key(
        "synth.graphs",
        Kind::Count,
        "2",
        "number of synthetic graphs",
    ),
    key("synth.num_nodes", Kind::Count, "150", "nodes per graph"),
    key("synth.num_classes", Kind::Count, "3", "classes per graph"),
    key(
        "synth.p_in",
        Kind::Real,
        "0.1",
        "edge probability within a community",
    ),
    key(
        "synth.p_out",
        Kind::Real,
        "0.02",
        "edge probability across communities",
    ),
    key("synth.d_t", Kind::Count, "16", "text feature width"),
    key("synth.d_i", Kind::Count, "16", "image feature width"),
    key("synth.n_t", Kind::Count, "4", "text tokens per node"),
    key("synth.n_v", Kind::Count, "4", "image patches per node"),
    key(
        "synth.txt_signal",
        Kind::Real,
        "0.5",
        "class signal in text features",
    ),
    key(
        "synth.img_signal",
        Kind::Real,
        "0.2",
        "class signal in image features",
    ),
    key(
        "synth.noise_sigma",
        Kind::Real,
        "1.5",
        "feature noise standard deviation",
    ),
    key(
        "synth.label_rule",
        Kind::Choice(&["planted", "neighbor_majority"]),
        "neighbor_majority",
        "label rule",
    ),
    key(
        "synth.family_seed",
        Kind::Seed,
        "0",
        "seed of the class prototypes shared by all graphs",
    ),
    key(
        "synth.train_frac",
        Kind::Real,
        "0.6",
        "fraction of train nodes",
    ),
    key(
        "synth.val_frac",
        Kind::Real,
        "0.2",
        "fraction of validation nodes",
    ),
    key(
        "synth.lp_train",
        Kind::Count,
        "60",
        "train link-prediction positives per graph",
    ),
    key(
        "synth.lp_val",
        Kind::Count,
        "20",
        "validation link-prediction positives per graph",
    ),
    key(
        "synth.lp_test",
        Kind::Count,
        "20",
        "test link-prediction positives per graph",
    ),
    key(
        "synth.category",
        Kind::Text,
        "Synthetic Goods",
        "product category named in prompts",
    ),
    key(
        "ingest.paths",
        Kind::List,
        "",
        "graph directories to import",
    ),
    key("aligner.d", Kind::Count, "32", "aligner width"),
    key("aligner.n_heads", Kind::Count, "4", "attention heads"),
    key(
        "aligner.n_layers",
        Kind::Count,
        "2",
        "shared and fusion layer pairs",
    ),
    key(
        "aligner.n_q",
        Kind::Count,
        "4",
        "learnable queries per node",
    ),
    key("aligner.tau", Kind::Real, "0.1", "contrastive temperature"),
    key(
        "aligner.neighbors",
        Kind::Count,
        "5",
        "sampled positives per anchor",
    ),
    key("aligner.batch_size", Kind::Count, "32", "anchors per batch"),
    key("aligner.lr", Kind::Real, "1e-3", "Adam learning rate"),
    key("aligner.epochs", Kind::Count, "20", "pretraining epochs"),
    key(
        "probe.iterations",
        Kind::Count,
        "1000",
        "linear probe gradient steps",
    ),
    key("probe.lr", Kind::Real, "0.5", "linear probe step size"),
    key("probe.l2", Kind::Real, "1e-3", "linear probe weight decay"),
    key(
        "demos.k",
        Kind::Count,
        "3",
        "node-classification demonstrations per anchor",
    ),
    key(
        "demos.alpha",
        Kind::Real,
        "0.15",
        "PageRank teleport probability",
    ),
    key("demos.tol", Kind::Real, "1e-10", "PageRank L1 tolerance"),
    key(
        "demos.max_iter",
        Kind::Count,
        "1000",
        "PageRank iteration cap",
    ),
    key(
        "demos.normalization",
        Kind::Choice(&["random_walk", "symmetric"]),
        "random_walk",
        "adjacency normalization",
    ),
    key(
        "demos.lp_n",
        Kind::Count,
        "1",
        "positive link demonstrations per pair",
    ),
    key(
        "demos.lp_negatives",
        Kind::Flag,
        "false",
        "also add negative link demonstrations",
    ),
    key("decoder.d_dec", Kind::Count, "64", "decoder width"),
    key(
        "decoder.n_heads",
        Kind::Count,
        "4",
        "decoder attention heads",
    ),
    key("decoder.n_layers", Kind::Count, "2", "decoder blocks"),
    key("decoder.d_ff", Kind::Count, "128", "feed-forward width"),
    key(
        "decoder.max_len",
        Kind::Count,
        "512",
        "longest input in positions",
    ),
    key(
        "decoder.lr",
        Kind::Real,
        "1e-3",
        "decoder Adam learning rate",
    ),
    key(
        "decoder.epochs",
        Kind::Count,
        "10",
        "decoder pretraining epochs",
    ),
    key("decoder.batch_size", Kind::Count, "8", "decoder batch size"),
    key(
        "tune.tasks",
        Kind::List,
        "nc,lp",
        "tasks to tune and evaluate (nc, lp)",
    ),
    key(
        "tune.graphs",
        Kind::List,
        "all",
        "graph indices used for tuning, or all",
    ),
    key(
        "tune.modes",
        Kind::List,
        "with_demos",
        "prompt modes (with_demos, no_demos, mllm_baseline)",
    ),
    key(
        "tune.lr",
        Kind::Real,
        "3e-3",
        "projector Adam learning rate",
    ),
    key("tune.epochs", Kind::Count, "10", "projector epochs"),
    key("tune.batch_size", Kind::Count, "8", "projector batch size"),
    key(
        "tune.image_mode",
        Kind::Choice(&["mean", "full"]),
        "mean",
        "image slot content",
    ),
    key(
        "tune.select_on_val",
        Kind::Flag,
        "true",
        "keep the epoch with the lowest validation loss",
    ),
    key(
        "eval.graphs",
        Kind::List,
        "all",
        "graph indices to evaluate, or all",
    ),
    key(
        "eval.max_len",
        Kind::Count,
        "4",
        "greedy decoding length cap",
    ),
    key(
        "gradcheck.seeds",
        Kind::Count,
        "20",
        "random seeds per gradient check",
    ),
];

pub fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == name)
}

fn check_value(spec: &KeySpec, value: &str) -> std::result::Result<(), String> {
    let ok = match spec.kind {
        Kind::Count => value.parse::<usize>().is_ok(),
        Kind::Seed => value.parse::<u64>().is_ok(),
        Kind::Real => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Flag => matches!(value, "true" | "false"),
        Kind::Text | Kind::List => true,
        Kind::Choice(words) => words.contains(&value),
    };
    if ok {
        Ok(())
    } else {
        let want = match spec.kind {
            Kind::Count => "a non-negative integer".to_string(),
            Kind::Seed => "an unsigned 64-bit integer".to_string(),
            Kind::Real => "a finite number".to_string(),
            Kind::Flag => "true or false".to_string(),
            Kind::Choice(words) => format!("one of {}", words.join(", ")),
            Kind::Text | Kind::List => unreachable!("always valid"),
        };
        Err(format!("`{}` expects {want}, got `{value}`", spec.key))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.key, k.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and ill-typed values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec(key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        check_value(spec, value).map_err(CliError::Config)?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `--key value` and `--key=value` pairs in order.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected `--key value`, got `{arg}`")))?;
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("`--{flag}` needs a value")))?;
                    self.set(flag, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a registered key"))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> T {
        self.get(key)
            .parse()
            .unwrap_or_else(|_| panic!("`{key}` was type checked when set"))
    }

    pub fn count(&self, key: &str) -> usize {
        self.parsed(key)
    }

    pub fn seed(&self, key: &str) -> u64 {
        self.parsed(key)
    }

    pub fn real(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    /// Nonempty trimmed items of a list key.
    pub fn list(&self, key: &str) -> Vec<&str> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Parses every item of a list key, naming the key on failure.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.list(key)
            .into_iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("`{key}`: {e}")))
            })
            .collect()
    }

    /// Graph indices selected by a list key, where `all` selects `0..n`.
    pub fn graph_indices(&self, key: &str, n: usize) -> Result<Vec<usize>> {
        let items = self.list(key);
        if items == ["all"] {
            return Ok((0..n).collect());
        }
        let idx: Vec<usize> = self.parse_list(key)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(CliError::Config(format!(
                "`{key}` names graph {bad}, but only {n} exist"
            )));
        }
        if idx.is_empty() {
            return Err(CliError::Config(format!("`{key}` selects no graphs")));
        }
        Ok(idx)
    }

    /// Every key as `key = value`, one per line, in key order.
    pub fn resolved(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 prefix over every key except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| **k != OUT_DIR) {
            h.update(format!("{k} = {v}\n"));
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(self.get(OUT_DIR)).join("runs").join(self.hash())
    }
}
