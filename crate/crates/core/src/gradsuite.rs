//! Registered finite-difference checks over every differentiable operation.
//!
//! Each case draws its inputs from a stream derived from the seed and the
//! case name, so a (case, seed) pair always checks the same function.

use crate::aligner::{
    contrastive_loss, cross_fuse_layer, pool_head, share_attn_layer, AlignerConfig, AlignerParams,
    ContrastiveBatch,
};
use crate::instruct::{
    instruction_loss_bound, AssembledInput, DecoderConfig, DecoderParams, ProjectorParams, EOS,
};
use crate::rng::{rng_from, tag, Rng};
use crate::tensor::gradcheck::random_matrix;
use crate::tensor::{
    check_param_grads, finite_diff_check, AttentionParams, AttnSegment, GradCheckOptions, Linear,
    ParamSet, Result, Tape, Tensor, TensorError, Var,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

const H: f64 = 1e-6;

type Check = fn(&mut Rng, u64) -> Result<f64>;

/// One registered operation check.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    check: Check,
}

impl GradCase {
    /// Worst relative error of this case at `seed`.
    pub fn run(&self, seed: u64) -> Result<f64> {
        let mut rng = rng_from(seed, &[tag("gradsuite"), tag(self.name)]);
        (self.check)(&mut rng, seed)
    }
}

/// Outcome of one case over a range of seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: u64,
    pub max_err: f64,
    /// First error raised by the checked function, if any.
    pub failure: Option<String>,
}

impl CaseReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_err <= tol
    }
}

/// Runs every case at seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Vec<CaseReport> {
    cases()
        .into_iter()
        .map(|case| {
            let mut report = CaseReport {
                name: case.name,
                seeds,
                max_err: 0.0,
                failure: None,
            };
            for seed in 0..seeds {
                match case.run(seed) {
                    Ok(e) if e.is_finite() => report.max_err = report.max_err.max(e),
                    Ok(e) => {
                        report.max_err = f64::INFINITY;
                        report.failure = Some(format!("seed {seed}: error {e}"));
                    }
                    Err(e) => {
                        report.failure = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            report
        })
        .collect()
}

pub fn cases() -> Vec<GradCase> {
    let case = |name, check| GradCase { name, check };
    vec![
        case("matmul", matmul),
        case("matmul_t", matmul_t),
        case("add_mul", add_mul),
        case("add_row", add_row),
        case("scale_gelu", scale_gelu),
        case("softmax", softmax),
        case("concat_gather", concat_gather),
        case("mean_row_groups", mean_row_groups),
        case("l2_normalize", l2_normalize),
        case("layer_norm", layer_norm),
        case("cross_entropy", cross_entropy),
        case("attention", attention),
        case("shared_self_attention", shared_self_attention),
        case("cross_fusion", cross_fusion),
        case("pooling_head", pooling_head),
        case("contrastive_loss", contrastive),
        case("aligner_encoder", aligner_encoder),
        case("projector", projector),
        case("instruction_loss", instruction_loss),
    ]
}

fn invalid(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output entry matters.
fn probe<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    y.mul(y.tape().constant(w.clone()))?.sum()
}

fn c<'t>(tape: &'t Tape, x: &Tensor) -> Var<'t> {
    tape.constant(x.clone())
}

fn weights_for(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    random_matrix(rng, rows, cols)
}

fn params_opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        h: H,
        max_components: None,
        seed,
    }
}

fn matmul(rng: &mut Rng, _: u64) -> Result<f64> {
    let (a, b) = (random_matrix(rng, 3, 4), random_matrix(rng, 4, 5));
    let w = weights_for(rng, 3, 5);
    let left = finite_diff_check(|t, x| probe(x.matmul(t.constant(b.clone()))?, &w), &a, H)?;
    let right = finite_diff_check(|t, x| probe(t.constant(a.clone()).matmul(x)?, &w), &b, H)?;
    Ok(left.max(right))
}

fn matmul_t(rng: &mut Rng, _: u64) -> Result<f64> {
    let (a, b) = (random_matrix(rng, 3, 4), random_matrix(rng, 5, 4));
    let w = weights_for(rng, 3, 5);
    let left = finite_diff_check(|t, x| probe(x.matmul_t(t.constant(b.clone()))?, &w), &a, H)?;
    let right = finite_diff_check(|t, x| probe(t.constant(a.clone()).matmul_t(x)?, &w), &b, H)?;
    let w_self = weights_for(rng, 3, 3);
    let both = finite_diff_check(|_, x| probe(x.matmul_t(x)?, &w_self), &a, H)?;
    Ok(left.max(right).max(both))
}

fn add_mul(rng: &mut Rng, _: u64) -> Result<f64> {
    let (a, b) = (random_matrix(rng, 3, 4), random_matrix(rng, 3, 4));
    let w = weights_for(rng, 3, 4);
    let add = finite_diff_check(|t, x| probe(x.add(t.constant(b.clone()))?, &w), &a, H)?;
    let mul = finite_diff_check(|t, x| probe(t.constant(b.clone()).mul(x)?, &w), &a, H)?;
    let square = finite_diff_check(|_, x| probe(x.mul(x)?, &w), &a, H)?;
    Ok(add.max(mul).max(square))
}

fn add_row(rng: &mut Rng, _: u64) -> Result<f64> {
    let (a, b) = (random_matrix(rng, 4, 3), random_matrix(rng, 1, 3));
    let w = weights_for(rng, 4, 3);
    let x = finite_diff_check(|t, x| probe(x.add_row(t.constant(b.clone()))?, &w), &a, H)?;
    let bias = finite_diff_check(|t, x| probe(t.constant(a.clone()).add_row(x)?, &w), &b, H)?;
    Ok(x.max(bias))
}

fn scale_gelu(rng: &mut Rng, _: u64) -> Result<f64> {
    let a = random_matrix(rng, 4, 5);
    let w = weights_for(rng, 4, 5);
    finite_diff_check(|_, x| probe(x.scale(1.7)?.gelu()?, &w), &a, H)
}

fn softmax(rng: &mut Rng, _: u64) -> Result<f64> {
    let a = random_matrix(rng, 4, 6);
    let w = weights_for(rng, 4, 6);
    finite_diff_check(|_, x| probe(x.scale(2.0)?.softmax_rows()?, &w), &a, H)
}

fn concat_gather(rng: &mut Rng, _: u64) -> Result<f64> {
    let (a, b) = (random_matrix(rng, 3, 4), random_matrix(rng, 2, 4));
    let idx = [4, 0, 0, 2, 3, 1, 4];
    let w = weights_for(rng, idx.len(), 4);
    finite_diff_check(
        |t, x| {
            probe(
                Var::concat_rows(&[x, t.constant(b.clone()), x])?.gather_rows(&idx)?,
                &w,
            )
        },
        &a,
        H,
    )
}

fn mean_row_groups(rng: &mut Rng, _: u64) -> Result<f64> {
    let a = random_matrix(rng, 6, 3);
    let w = weights_for(rng, 2, 3);
    let groups = finite_diff_check(|_, x| probe(x.mean_row_groups(3)?, &w), &a, H)?;
    let mean = finite_diff_check(|_, x| x.mul(x)?.mean(), &a, H)?;
    Ok(groups.max(mean))
}

fn l2_normalize(rng: &mut Rng, _: u64) -> Result<f64> {
    let a = random_matrix(rng, 4, 5);
    let w = weights_for(rng, 4, 5);
    finite_diff_check(|_, x| probe(x.l2_normalize_rows()?, &w), &a, H)
}

fn layer_norm(rng: &mut Rng, _: u64) -> Result<f64> {
    let a = random_matrix(rng, 4, 6);
    let (g, b) = (random_matrix(rng, 1, 6), random_matrix(rng, 1, 6));
    let w = weights_for(rng, 4, 6);
    let x = finite_diff_check(
        |t, x| probe(x.layer_norm(c(t, &g), c(t, &b), 1e-5)?, &w),
        &a,
        H,
    )?;
    let gamma = finite_diff_check(
        |t, x| probe(c(t, &a).layer_norm(x, c(t, &b), 1e-5)?, &w),
        &g,
        H,
    )?;
    let beta = finite_diff_check(
        |t, x| probe(c(t, &a).layer_norm(c(t, &g), x, 1e-5)?, &w),
        &b,
        H,
    )?;
    Ok(x.max(gamma).max(beta))
}

fn cross_entropy(rng: &mut Rng, _: u64) -> Result<f64> {
    let a = random_matrix(rng, 5, 4);
    let targets: Vec<usize> = (0..5).map(|i| (i * 3 + 1) % 4).collect();
    finite_diff_check(|_, x| x.scale(1.5)?.cross_entropy(&targets), &a, H)
}

fn attention(rng: &mut Rng, _: u64) -> Result<f64> {
    let (q, k, v) = (
        random_matrix(rng, 5, 4),
        random_matrix(rng, 7, 4),
        random_matrix(rng, 7, 4),
    );
    let segs = [
        AttnSegment {
            q_start: 0,
            q_len: 2,
            kv_start: 0,
            kv_len: 3,
        },
        AttnSegment {
            q_start: 2,
            q_len: 3,
            kv_start: 3,
            kv_len: 4,
        },
    ];
    let w = weights_for(rng, 5, 4);
    let mut worst = 0.0f64;
    for causal in [false, true] {
        let fq = finite_diff_check(
            |t, x| probe(x.attention_core(c(t, &k), c(t, &v), 2, &segs, causal)?, &w),
            &q,
            H,
        )?;
        let fk = finite_diff_check(
            |t, x| probe(c(t, &q).attention_core(x, c(t, &v), 2, &segs, causal)?, &w),
            &k,
            H,
        )?;
        let fv = finite_diff_check(
            |t, x| probe(c(t, &q).attention_core(c(t, &k), x, 2, &segs, causal)?, &w),
            &v,
            H,
        )?;
        worst = worst.max(fq).max(fk).max(fv);
    }
    Ok(worst)
}

fn shared_self_attention(rng: &mut Rng, seed: u64) -> Result<f64> {
    let mut set = ParamSet::new();
    let layer = AttentionParams::init(&mut set, "shared", 4, 2, rng)?;
    let x = random_matrix(rng, 6, 4);
    let w = weights_for(rng, 6, 4);
    let params = check_param_grads(
        &mut set,
        |t, s| {
            probe(
                share_attn_layer(&layer.bind(t, s), t.constant(x.clone()), 3).map_err(invalid)?,
                &w,
            )
        },
        &params_opts(seed),
    )?;
    let input = finite_diff_check(
        |t, v| {
            probe(
                share_attn_layer(&layer.bind(t, &set), v, 3).map_err(invalid)?,
                &w,
            )
        },
        &x,
        H,
    )?;
    Ok(params.max(input))
}

/// Fusion with `m = 2` nodes of two queries, two image rows, three text rows.
fn fuse<'t>(
    layer: &AttentionParams,
    s: &ParamSet,
    q: Var<'t>,
    img: Var<'t>,
    txt: Var<'t>,
) -> Result<Var<'t>> {
    cross_fuse_layer(&layer.bind(q.tape(), s), q, img, txt, 2, 2, 2, 3).map_err(invalid)
}

fn cross_fusion(rng: &mut Rng, seed: u64) -> Result<f64> {
    let d = 4;
    let mut set = ParamSet::new();
    let layer = AttentionParams::init(&mut set, "cross", d, 2, rng)?;
    let q = random_matrix(rng, 4, d);
    let img = random_matrix(rng, 4, d);
    let txt = random_matrix(rng, 6, d);
    let w = weights_for(rng, 4, d);
    let params = check_param_grads(
        &mut set,
        |t, s| probe(fuse(&layer, s, c(t, &q), c(t, &img), c(t, &txt))?, &w),
        &params_opts(seed),
    )?;
    let fq = finite_diff_check(
        |t, x| probe(fuse(&layer, &set, x, c(t, &img), c(t, &txt))?, &w),
        &q,
        H,
    )?;
    let fi = finite_diff_check(
        |t, x| probe(fuse(&layer, &set, c(t, &q), x, c(t, &txt))?, &w),
        &img,
        H,
    )?;
    let ft = finite_diff_check(
        |t, x| probe(fuse(&layer, &set, c(t, &q), c(t, &img), x)?, &w),
        &txt,
        H,
    )?;
    Ok(params.max(fq).max(fi).max(ft))
}

fn pooling_head(rng: &mut Rng, seed: u64) -> Result<f64> {
    let mut set = ParamSet::new();
    let pool = Linear::init(&mut set, "pool", 4, 3, rng);
    let fused = random_matrix(rng, 6, 4);
    let w = weights_for(rng, 2, 3);
    let params = check_param_grads(
        &mut set,
        |t, s| {
            probe(
                pool_head(&pool.bind(t, s), t.constant(fused.clone()), 3).map_err(invalid)?,
                &w,
            )
        },
        &params_opts(seed),
    )?;
    let input = finite_diff_check(
        |t, x| probe(pool_head(&pool.bind(t, &set), x, 3).map_err(invalid)?, &w),
        &fused,
        H,
    )?;
    Ok(params.max(input))
}

fn contrastive(rng: &mut Rng, _: u64) -> Result<f64> {
    let z = random_matrix(rng, 6, 4);
    let batch = ContrastiveBatch {
        anchors: vec![0, 1, 2],
        positives: vec![vec![3], vec![4, 5], vec![0]],
    };
    finite_diff_check(
        |_, x| contrastive_loss(x, &batch, 0.2).map_err(invalid),
        &z,
        H,
    )
}

fn aligner_encoder(rng: &mut Rng, seed: u64) -> Result<f64> {
    let cfg = AlignerConfig {
        d: 4,
        n_heads: 2,
        n_q: 2,
        n_layers: 2,
        seed,
        ..AlignerConfig::default()
    };
    let (n_t, n_v, m) = (2, 2, 3);
    let mut params = AlignerParams::init(&cfg, 3, 3).map_err(invalid)?;
    let txt = random_matrix(rng, m * n_t, 3);
    let img = random_matrix(rng, m * n_v, 3);
    let (w_fused, w_pooled) = (weights_for(rng, m * 2, 4), weights_for(rng, m, 4));
    let layout = params.clone();
    let opts = GradCheckOptions {
        max_components: Some(12),
        ..params_opts(seed)
    };
    check_param_grads(
        &mut params.set,
        |t, s| {
            let enc = layout
                .bind_in(t, s)
                .encode(c(t, &txt), c(t, &img), m, n_t, n_v)
                .map_err(invalid)?;
            probe(enc.fused, &w_fused)?.add(probe(enc.pooled, &w_pooled)?)
        },
        &opts,
    )
}

fn projector(rng: &mut Rng, seed: u64) -> Result<f64> {
    let mut proj = ProjectorParams::init(4, 6, seed);
    let x = random_matrix(rng, 3, 4);
    let w = weights_for(rng, 3, 6);
    let layout = proj.clone();
    let params = check_param_grads(
        &mut proj.set,
        |t, s| {
            probe(
                layout
                    .bind_in(t, s)
                    .apply(t.constant(x.clone()))
                    .map_err(invalid)?,
                &w,
            )
        },
        &params_opts(seed),
    )?;
    let input = finite_diff_check(
        |t, v| probe(layout.bind(t).apply(v).map_err(invalid)?, &w),
        &x,
        H,
    )?;
    Ok(params.max(input))
}

fn instruction_loss(rng: &mut Rng, seed: u64) -> Result<f64> {
    let vocab = 9;
    let cfg = DecoderConfig {
        d_dec: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len: 16,
        seed,
        ..DecoderConfig::default()
    };
    let mut dec = DecoderParams::init(&cfg, vocab).map_err(invalid)?;
    dec.set.freeze();
    let mut proj = ProjectorParams::init(4, cfg.d_dec, seed);
    let input = AssembledInput {
        tokens: vec![
            Some(4),
            None,
            Some(5),
            None,
            None,
            Some(6),
            Some(7),
            Some(EOS),
        ],
        slot_rows: random_matrix(rng, 3, 4),
        answer_start: 6,
    };
    let layout = proj.clone();
    check_param_grads(
        &mut proj.set,
        |t, s| {
            instruction_loss_bound(&dec.bind(t), Some(&layout.bind_in(t, s)), &[&input])
                .map_err(invalid)
        },
        &params_opts(seed),
    )
}
