//! Structure-aware multimodal aligner.
//!
//! Each node's text tokens and image patches are projected to width `d`,
//! passed through per-layer self-attention whose weights are shared by both
//! modalities, and compressed by cross-attention from a learnable query
//! bank into `n_q` fused rows. The pooled embedding is a linear head over
//! the mean of those rows. There is no positional encoding anywhere.

mod loss;
mod pretrain;
mod probe;

pub use loss::{contrastive_loss, ContrastiveBatch};
pub use pretrain::{batch_loss, plan_epoch, pretrain, Batch, PretrainReport};
pub use probe::{linear_probe, probe_all, ProbeConfig, ProbeReport};

use thiserror::Error;

use crate::graph::{GraphError, MultimodalGraph, NodeId};
use crate::rng::{rng_from, tag};
use crate::tensor::{
    find_param, init_uniform, AttentionParams, AttnSegment, BoundAttention, BoundLinear,
    Checkpoint, Linear, ParamId, ParamSet, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum AlignerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid aligner config: {0}")]
    InvalidConfig(String),
    #[error("aligner expects {what} = {expected}, graph has {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("anchor at batch row {0} has no positives")]
    NoPositives(usize),
    #[error("contrastive batch needs at least 2 members, got {0}")]
    BatchTooSmall(usize),
    #[error("graph {0} has no non-isolated train node to use as an anchor")]
    NoAnchors(usize),
    #[error("no graphs to pretrain on")]
    NoGraphs,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("probe: {0}")]
    Probe(String),
}

pub type Result<T> = std::result::Result<T, AlignerError>;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_q: usize,
    pub tau: f64,
    pub neighbors_per_anchor: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_heads: 4,
            n_layers: 2,
            n_q: 8,
            tau: 0.1,
            neighbors_per_anchor: 5,
            batch_size: 32,
            lr: 1e-5,
            epochs: 10,
            seed: 0,
        }
    }
}

impl AlignerConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(AlignerError::InvalidConfig(m));
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d={} is not divisible by n_heads={}",
                self.d, self.n_heads
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.n_q == 0 || self.n_layers == 0 {
            return bad("n_q and n_layers must be >= 1".into());
        }
        if self.batch_size < 2 || self.neighbors_per_anchor == 0 {
            return bad("batch_size must be >= 2 and neighbors_per_anchor >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        Ok(())
    }
}

fn find(set: &ParamSet, name: &str) -> Result<ParamId> {
    Ok(find_param(set, name)?)
}

/// All trainable aligner weights, held in one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AlignerParams {
    pub set: ParamSet,
    txt_in: Linear,
    img_in: Linear,
    shared: Vec<AttentionParams>,
    cross: Vec<AttentionParams>,
    query_bank: ParamId,
    pool: Linear,
    pub d_t: usize,
    pub d_i: usize,
    pub d: usize,
    pub n_heads: usize,
    pub n_q: usize,
}

/// Aligner weights recorded on a tape. Each shared attention layer is bound
/// once and applied to both modalities.
pub struct BoundAligner<'t> {
    pub txt_in: BoundLinear<'t>,
    pub img_in: BoundLinear<'t>,
    pub shared: Vec<BoundAttention<'t>>,
    pub cross: Vec<BoundAttention<'t>>,
    pub query_bank: Var<'t>,
    pub pool: BoundLinear<'t>,
    n_q: usize,
}

/// Fused rows (`m·n_q × d`, node-major) and pooled rows (`m × d`).
pub struct Encoded<'t> {
    pub fused: Var<'t>,
    pub pooled: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbedding {
    /// `n_q × d`.
    pub fused: Tensor,
    /// `1 × d`.
    pub pooled: Tensor,
}

impl AlignerParams {
    pub fn init(cfg: &AlignerConfig, d_t: usize, d_i: usize) -> Result<Self> {
        cfg.check()?;
        let mut rng = rng_from(cfg.seed, &[tag("aligner-init")]);
        let mut set = ParamSet::new();
        let d = cfg.d;
        let txt_in = Linear::init(&mut set, "txt_in", d_t, d, &mut rng);
        let img_in = Linear::init(&mut set, "img_in", d_i, d, &mut rng);
        let mut shared = Vec::new();
        let mut cross = Vec::new();
        for l in 0..cfg.n_layers {
            shared.push(AttentionParams::init(
                &mut set,
                &format!("layer{l}.shared"),
                d,
                cfg.n_heads,
                &mut rng,
            )?);
            cross.push(AttentionParams::init(
                &mut set,
                &format!("layer{l}.cross"),
                d,
                cfg.n_heads,
                &mut rng,
            )?);
        }
        let query_bank = set.add("query_bank", init_uniform(&mut rng, cfg.n_q, d, 1));
        let pool = Linear::init(&mut set, "pool", d, d, &mut rng);
        Ok(Self {
            set,
            txt_in,
            img_in,
            shared,
            cross,
            query_bank,
            pool,
            d_t,
            d_i,
            d,
            n_heads: cfg.n_heads,
            n_q: cfg.n_q,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.shared.len()
    }

    pub fn shared_params(&self, layer: usize) -> &AttentionParams {
        &self.shared[layer]
    }

    pub fn query_bank_id(&self) -> ParamId {
        self.query_bank
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = [
            ("kind", "aligner".to_string()),
            ("d_t", self.d_t.to_string()),
            ("d_i", self.d_i.to_string()),
            ("d", self.d.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_q", self.n_q.to_string()),
            ("n_layers", self.n_layers().to_string()),
        ];
        self.set
            .to_checkpoint(meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TensorError::Checkpoint(format!("missing or bad meta `{k}`")).into())
        };
        if ckpt.meta("kind") != Some("aligner") {
            return Err(TensorError::Checkpoint("not an aligner checkpoint".into()).into());
        }
        let set = ParamSet::from_checkpoint(ckpt);
        let n_heads = get("n_heads")?;
        let n_layers = get("n_layers")?;
        let mut shared = Vec::new();
        let mut cross = Vec::new();
        for l in 0..n_layers {
            shared.push(AttentionParams::locate(
                &set,
                &format!("layer{l}.shared"),
                n_heads,
            )?);
            cross.push(AttentionParams::locate(
                &set,
                &format!("layer{l}.cross"),
                n_heads,
            )?);
        }
        Ok(Self {
            txt_in: Linear::locate(&set, "txt_in")?,
            img_in: Linear::locate(&set, "img_in")?,
            query_bank: find(&set, "query_bank")?,
            pool: Linear::locate(&set, "pool")?,
            shared,
            cross,
            d_t: get("d_t")?,
            d_i: get("d_i")?,
            d: get("d")?,
            n_heads,
            n_q: get("n_q")?,
            set,
        })
    }

    pub fn check_graph(&self, g: &MultimodalGraph) -> Result<()> {
        for (what, expected, actual) in [
            ("text dim", self.d_t, g.txt_shape().dim),
            ("image dim", self.d_i, g.img_shape().dim),
        ] {
            if expected != actual {
                return Err(AlignerError::DimMismatch {
                    what,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundAligner<'t> {
        self.bind_in(tape, &self.set)
    }

    /// Binds the values held in `set`, which must have this aligner's layout.
    pub fn bind_in<'t>(&self, tape: &'t Tape, set: &ParamSet) -> BoundAligner<'t> {
        BoundAligner {
            txt_in: self.txt_in.bind(tape, set),
            img_in: self.img_in.bind(tape, set),
            shared: self.shared.iter().map(|a| a.bind(tape, set)).collect(),
            cross: self.cross.iter().map(|a| a.bind(tape, set)).collect(),
            query_bank: set.bind(tape, self.query_bank),
            pool: self.pool.bind(tape, set),
            n_q: self.n_q,
        }
    }

    /// Encodes one node from raw feature matrices of any length, one of
    /// which may be empty.
    pub fn encode_features(&self, txt: &Tensor, img: &Tensor) -> Result<NodeEmbedding> {
        let tape = Tape::new();
        let enc = self.bind(&tape).encode(
            tape.constant(txt.clone()),
            tape.constant(img.clone()),
            1,
            txt.rows(),
            img.rows(),
        )?;
        Ok(NodeEmbedding {
            fused: (*enc.fused.value()).clone(),
            pooled: (*enc.pooled.value()).clone(),
        })
    }

    /// `img_in` applied to every image patch (`n·n_v × d`, node-major).
    pub fn project_image_patches(&self, g: &MultimodalGraph) -> Result<Tensor> {
        self.check_graph(g)?;
        let tape = Tape::new();
        let nodes: Vec<NodeId> = (0..g.num_nodes()).collect();
        let (_, img) = stack_features(&tape, g, &nodes)?;
        let out = self.img_in.bind(&tape, &self.set).apply(img)?;
        Ok(out.value().as_ref().clone())
    }

    pub fn encode_node(&self, g: &MultimodalGraph, v: NodeId) -> Result<NodeEmbedding> {
        self.check_graph(g)?;
        self.encode_features(&g.txt_features(v)?, &g.img_features(v)?)
    }
}

/// Row-stacks the text and image matrices of `nodes` as tape constants.
pub fn stack_features<'t>(
    tape: &'t Tape,
    g: &MultimodalGraph,
    nodes: &[NodeId],
) -> Result<(Var<'t>, Var<'t>)> {
    let (ts, is) = (g.txt_shape(), g.img_shape());
    let mut txt = Vec::with_capacity(nodes.len() * ts.per_node());
    let mut img = Vec::with_capacity(nodes.len() * is.per_node());
    for &v in nodes {
        if v >= g.num_nodes() {
            return Err(GraphError::NodeOutOfRange {
                node: v,
                num_nodes: g.num_nodes(),
            }
            .into());
        }
        txt.extend_from_slice(g.txt_slice(v));
        img.extend_from_slice(g.img_slice(v));
    }
    Ok((
        tape.constant(Tensor::matrix(nodes.len() * ts.len, ts.dim, txt)?),
        tape.constant(Tensor::matrix(nodes.len() * is.len, is.dim, img)?),
    ))
}

/// Self-attention over one or more stacked sequences of length `len`.
pub fn share_attn_layer<'t>(
    layer: &BoundAttention<'t>,
    seq: Var<'t>,
    len: usize,
) -> Result<Var<'t>> {
    if len == 0 || seq.rows() == 0 {
        return Err(AlignerError::EmptySequence);
    }
    let segs = AttnSegment::uniform(seq.rows() / len, len, len);
    Ok(layer.forward(seq, seq, seq, &segs, false)?)
}

/// Queries attend over each node's image rows followed by its text rows.
///
/// `queries` holds `m·n_q` rows, `img` `m·n_v`, `txt` `m·n_t`; either
/// modality may have length zero but not both.
#[allow(clippy::too_many_arguments)]
pub fn cross_fuse_layer<'t>(
    layer: &BoundAttention<'t>,
    queries: Var<'t>,
    img: Var<'t>,
    txt: Var<'t>,
    m: usize,
    n_q: usize,
    n_v: usize,
    n_t: usize,
) -> Result<Var<'t>> {
    if n_v + n_t == 0 {
        return Err(AlignerError::EmptySequence);
    }
    let both = Var::concat_rows(&[img, txt])?;
    let mut idx = Vec::with_capacity(m * (n_v + n_t));
    for i in 0..m {
        idx.extend(i * n_v..(i + 1) * n_v);
        idx.extend(m * n_v + i * n_t..m * n_v + (i + 1) * n_t);
    }
    let kv = both.gather_rows(&idx)?;
    let segs = AttnSegment::uniform(m, n_q, n_v + n_t);
    Ok(layer.forward(queries, kv, kv, &segs, false)?)
}

/// `pool(mean over each node's n_q fused rows)`.
pub fn pool_head<'t>(pool: &BoundLinear<'t>, fused: Var<'t>, n_q: usize) -> Result<Var<'t>> {
    Ok(pool.apply(fused.mean_row_groups(n_q)?)?)
}

impl<'t> BoundAligner<'t> {
    /// Encodes `m` nodes whose raw features are row-stacked in `txt`
    /// (`m·n_t × d_t`) and `img` (`m·n_v × d_i`).
    pub fn encode(
        &self,
        txt: Var<'t>,
        img: Var<'t>,
        m: usize,
        n_t: usize,
        n_v: usize,
    ) -> Result<Encoded<'t>> {
        if n_t + n_v == 0 {
            return Err(AlignerError::EmptySequence);
        }
        let mut t = self.txt_in.apply(txt)?;
        let mut i = self.img_in.apply(img)?;
        let bank: Vec<usize> = (0..m).flat_map(|_| 0..self.n_q).collect();
        let mut q = self.query_bank.gather_rows(&bank)?;
        for (shared, cross) in self.shared.iter().zip(&self.cross) {
            if n_t > 0 {
                t = share_attn_layer(shared, t, n_t)?;
            }
            if n_v > 0 {
                i = share_attn_layer(shared, i, n_v)?;
            }
            q = cross_fuse_layer(cross, q, i, t, m, self.n_q, n_v, n_t)?;
        }
        let pooled = pool_head(&self.pool, q, self.n_q)?;
        Ok(Encoded { fused: q, pooled })
    }

    pub fn encode_nodes(&self, g: &MultimodalGraph, nodes: &[NodeId]) -> Result<Encoded<'t>> {
        let tape = self.query_bank.tape();
        let (txt, img) = stack_features(tape, g, nodes)?;
        self.encode(txt, img, nodes.len(), g.txt_shape().len, g.img_shape().len)
    }
}

/// Pooled (`n × d`) and fused (`n·n_q × d`) embeddings of every node.
pub fn export_embeddings(params: &AlignerParams, g: &MultimodalGraph) -> Result<(Tensor, Tensor)> {
    params.check_graph(g)?;
    let n = g.num_nodes();
    let d = params.d;
    let mut pooled = Vec::with_capacity(n * d);
    let mut fused = Vec::with_capacity(n * params.n_q * d);
    let nodes: Vec<NodeId> = (0..n).collect();
    for chunk in nodes.chunks(256) {
        let tape = Tape::new();
        let enc = params.bind(&tape).encode_nodes(g, chunk)?;
        pooled.extend_from_slice(enc.pooled.value().data());
        fused.extend_from_slice(enc.fused.value().data());
    }
    Ok((
        Tensor::matrix(n, d, pooled)?,
        Tensor::matrix(n * params.n_q, d, fused)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synth_graph, SynthConfig};
    use crate::tensor::gradcheck::random_matrix;

    fn small_cfg() -> AlignerConfig {
        AlignerConfig {
            d: 8,
            n_heads: 2,
            n_q: 3,
            ..AlignerConfig::default()
        }
    }

    fn toy_graph() -> MultimodalGraph {
        synth_graph(&SynthConfig {
            num_nodes: 10,
            num_classes: 2,
            d_t: 5,
            d_i: 4,
            n_t: 3,
            n_v: 2,
            p_in: 0.6,
            p_out: 0.1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn token_compression_shape() {
        let p = AlignerParams::init(&small_cfg(), 6, 5).unwrap();
        let mut rng = rng_from(1, &[]);
        let e = p
            .encode_features(
                &random_matrix(&mut rng, 13, 6),
                &random_matrix(&mut rng, 7, 5),
            )
            .unwrap();
        assert_eq!(e.fused.shape(), &[3, 8]);
        assert_eq!(e.pooled.shape(), &[1, 8]);
    }

    #[test]
    fn empty_image_sequence_degrades_gracefully() {
        let p = AlignerParams::init(&small_cfg(), 6, 5).unwrap();
        let mut rng = rng_from(2, &[]);
        let txt = random_matrix(&mut rng, 4, 6);
        let e = p.encode_features(&txt, &Tensor::zeros(vec![0, 5])).unwrap();
        assert_eq!(e.fused.shape(), &[3, 8]);
        assert!(matches!(
            p.encode_features(&Tensor::zeros(vec![0, 6]), &Tensor::zeros(vec![0, 5])),
            Err(AlignerError::EmptySequence)
        ));
    }

    #[test]
    fn single_query_single_layer_pools_its_row() {
        let cfg = AlignerConfig {
            n_layers: 1,
            n_q: 1,
            ..small_cfg()
        };
        let p = AlignerParams::init(&cfg, 3, 3).unwrap();
        let mut rng = rng_from(3, &[]);
        let e = p
            .encode_features(
                &random_matrix(&mut rng, 2, 3),
                &random_matrix(&mut rng, 2, 3),
            )
            .unwrap();
        let w = p.set.value(p.pool.w);
        let b = p.set.value(p.pool.b);
        let want = e.fused.matmul(w).unwrap();
        for j in 0..8 {
            assert!((want.data()[j] + b.data()[j] - e.pooled.data()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_features_identical_embeddings() {
        let p = AlignerParams::init(&small_cfg(), 6, 5).unwrap();
        let mut rng = rng_from(4, &[]);
        let (t, i) = (random_matrix(&mut rng, 3, 6), random_matrix(&mut rng, 2, 5));
        assert_eq!(
            p.encode_features(&t, &i).unwrap(),
            p.encode_features(&t, &i).unwrap()
        );
    }

    #[test]
    fn kv_permutation_invariance_through_stack() {
        let p = AlignerParams::init(&small_cfg(), 6, 5).unwrap();
        let mut rng = rng_from(5, &[]);
        let t = random_matrix(&mut rng, 4, 6);
        let i = random_matrix(&mut rng, 3, 5);
        let perm_rows = |x: &Tensor, order: &[usize]| {
            Tensor::from_rows(&order.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>())
                .unwrap()
        };
        let a = p.encode_features(&t, &i).unwrap();
        let b = p
            .encode_features(&perm_rows(&t, &[2, 0, 3, 1]), &perm_rows(&i, &[1, 2, 0]))
            .unwrap();
        for (x, y) in a.pooled.data().iter().zip(b.pooled.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_shared_binding_serves_both_modalities() {
        let p = AlignerParams::init(&small_cfg(), 5, 4).unwrap();
        let g = toy_graph();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        bound.encode_nodes(&g, &[0, 1, 2]).unwrap();
        for l in 0..p.n_layers() {
            let sp = p.shared_params(l);
            let leaves = tape
                .param_leaves()
                .into_iter()
                .filter(|(r, _)| {
                    r.set == p.set.id() && [sp.w_q, sp.w_k, sp.w_v, sp.w_o].contains(&r.index)
                })
                .count();
            assert_eq!(leaves, 4);
            let [wq, ..] = bound.shared[l].weights();
            assert_eq!(*wq.value(), *p.set.value(sp.w_q));
        }
    }

    #[test]
    fn export_rows_equal_single_node_encoding() {
        let p = AlignerParams::init(&small_cfg(), 5, 4).unwrap();
        let g = toy_graph();
        let (pooled, fused) = export_embeddings(&p, &g).unwrap();
        assert_eq!(pooled.shape(), &[10, 8]);
        assert_eq!(fused.shape(), &[30, 8]);
        for v in 0..10 {
            let e = p.encode_node(&g, v).unwrap();
            assert_eq!(pooled.row(v), e.pooled.data(), "node {v}");
            assert_eq!(&fused.data()[v * 24..(v + 1) * 24], e.fused.data());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_encoding() {
        let p = AlignerParams::init(&small_cfg(), 5, 4).unwrap();
        let g = toy_graph();
        let mut buf = Vec::new();
        p.to_checkpoint().write_to(&mut buf).unwrap();
        let q = AlignerParams::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(q.set.checksum(), p.set.checksum());
        assert_eq!(q.encode_node(&g, 3).unwrap(), p.encode_node(&g, 3).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = AlignerParams::init(&small_cfg(), 7, 4).unwrap();
        assert!(matches!(
            p.encode_node(&toy_graph(), 0),
            Err(AlignerError::DimMismatch {
                what: "text dim",
                ..
            })
        ));
    }
}
