//! Multi-head scaled dot-product attention.
//!
//! The kernel works on row-stacked batches: a list of [`AttnSegment`]s says
//! which query rows attend to which key/value rows, so many short
//! independent sequences (one per graph node) run as one tape operation.
//! Per head the kernel computes `softmax(Q_h K_hᵀ / sqrt(d/heads)) V_h` and
//! concatenates heads along columns. There is no positional encoding: the
//! result is invariant to permuting key/value rows jointly within a segment.

use super::gemm::{gemm_view, View, ViewMut};
use super::params::{init_uniform, ParamId, ParamSet};
use super::tape::{softmax_row, Tape, Var};
use super::{shape_err, Result, Tensor, TensorError};
use crate::rng::Rng;

/// Query rows `q_start..q_start+q_len` attend to key/value rows
/// `kv_start..kv_start+kv_len`. Under a causal mask the queries are the last
/// `q_len` positions of the block: query `i` sees keys `0..=i + kv_len - q_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

impl AttnSegment {
    pub fn single(q_len: usize, kv_len: usize) -> Self {
        Self {
            q_start: 0,
            q_len,
            kv_start: 0,
            kv_len,
        }
    }

    /// `count` consecutive blocks of equal shape.
    pub fn uniform(count: usize, q_len: usize, kv_len: usize) -> Vec<Self> {
        (0..count)
            .map(|i| Self {
                q_start: i * q_len,
                q_len,
                kv_start: i * kv_len,
                kv_len,
            })
            .collect()
    }
}

#[derive(Debug)]
pub(crate) struct AttnCache {
    heads: usize,
    scale: f64,
    segments: Vec<AttnSegment>,
    /// Softmax weights per (segment, head), each `q_len × kv_len`, concatenated.
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

fn validate(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    segs: &[AttnSegment],
    causal: bool,
) -> Result<usize> {
    for t in [q, k, v] {
        if !t.is_matrix() {
            return Err(shape_err(
                "attention",
                format!("expected matrices, got {:?}", t.shape()),
            ));
        }
    }
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::IndivisibleHeads { heads, dim: d });
    }
    let mut next_q = 0;
    for s in segs {
        if s.q_start != next_q {
            return Err(shape_err(
                "attention",
                "segments must tile the query rows in order",
            ));
        }
        next_q += s.q_len;
        if s.kv_len == 0 {
            return Err(shape_err("attention", "segment with no key/value rows"));
        }
        if s.kv_start + s.kv_len > k.rows() {
            return Err(shape_err("attention", "segment exceeds key/value rows"));
        }
        if causal && s.q_len > s.kv_len {
            return Err(shape_err(
                "attention",
                "causal segments need q_len <= kv_len",
            ));
        }
    }
    if next_q != q.rows() {
        return Err(shape_err(
            "attention",
            format!("segments cover {next_q} of {} query rows", q.rows()),
        ));
    }
    Ok(d)
}

pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    segs: &[AttnSegment],
    causal: bool,
) -> Result<(Tensor, AttnCache)> {
    let d = validate(q, k, v, heads, segs, causal)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows() * d];
    let total: usize = segs.iter().map(|s| s.q_len * s.kv_len * heads).sum();
    let mut probs = vec![0.0; total];
    let mut offsets = Vec::with_capacity(segs.len() * heads);
    let mut scores = Vec::new();
    let mut off = 0;
    for s in segs {
        let (ql, kl) = (s.q_len, s.kv_len);
        scores.resize(ql * kl, 0.0);
        for h in 0..heads {
            offsets.push(off);
            let qh = View {
                data: q.data(),
                offset: s.q_start * d + h * dh,
                rows: ql,
                cols: dh,
                rs: d,
                cs: 1,
            };
            let kh = View {
                data: k.data(),
                offset: s.kv_start * d + h * dh,
                rows: kl,
                cols: dh,
                rs: d,
                cs: 1,
            };
            gemm_view(qh, kh.t(), ViewMut::dense(&mut scores, ql, kl), 0.0);
            let p = &mut probs[off..off + ql * kl];
            for i in 0..ql {
                let row = &mut scores[i * kl..(i + 1) * kl];
                for (j, x) in row.iter_mut().enumerate() {
                    *x = if causal && j + ql > i + kl {
                        f64::NEG_INFINITY
                    } else {
                        *x * scale
                    };
                }
                softmax_row(row, &mut p[i * kl..(i + 1) * kl]);
            }
            let vh = View {
                data: v.data(),
                offset: s.kv_start * d + h * dh,
                rows: kl,
                cols: dh,
                rs: d,
                cs: 1,
            };
            let oh = ViewMut {
                data: &mut out,
                offset: s.q_start * d + h * dh,
                rows: ql,
                cols: dh,
                rs: d,
                cs: 1,
            };
            gemm_view(View::dense(p, ql, kl), vh, oh, 0.0);
            off += ql * kl;
        }
    }
    let cache = AttnCache {
        heads,
        scale,
        segments: segs.to_vec(),
        probs,
        offsets,
    };
    Ok((Tensor::matrix(q.rows(), d, out)?, cache))
}

type Grad = Option<Vec<f64>>;

pub(crate) fn backward(
    cache: &AttnCache,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &[f64],
    need: [bool; 3],
) -> (Grad, Grad, Grad) {
    let d = q.cols();
    let heads = cache.heads;
    let dh = d / heads;
    let mut dq = need[0].then(|| vec![0.0; q.len()]);
    let mut dk = need[1].then(|| vec![0.0; k.len()]);
    let mut dv = need[2].then(|| vec![0.0; v.len()]);
    let mut dp = Vec::new();
    for (si, s) in cache.segments.iter().enumerate() {
        let (ql, kl) = (s.q_len, s.kv_len);
        for h in 0..heads {
            let off = cache.offsets[si * heads + h];
            let p = &cache.probs[off..off + ql * kl];
            let goh = View {
                data: g,
                offset: s.q_start * d + h * dh,
                rows: ql,
                cols: dh,
                rs: d,
                cs: 1,
            };
            let kv_view = |data| ViewMut {
                data,
                offset: s.kv_start * d + h * dh,
                rows: kl,
                cols: dh,
                rs: d,
                cs: 1,
            };
            if let Some(dv) = dv.as_mut() {
                gemm_view(View::dense(p, ql, kl).t(), goh, kv_view(dv), 1.0);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            dp.resize(ql * kl, 0.0);
            let vh = View {
                data: v.data(),
                offset: s.kv_start * d + h * dh,
                rows: kl,
                cols: dh,
                rs: d,
                cs: 1,
            };
            gemm_view(goh, vh.t(), ViewMut::dense(&mut dp, ql, kl), 0.0);
            for i in 0..ql {
                let pr = &p[i * kl..(i + 1) * kl];
                let dr = &mut dp[i * kl..(i + 1) * kl];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, pi) in dr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * cache.scale;
                }
            }
            let ds = View::dense(&dp, ql, kl);
            if let Some(dq) = dq.as_mut() {
                let kh = View {
                    data: k.data(),
                    offset: s.kv_start * d + h * dh,
                    rows: kl,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let out = ViewMut {
                    data: dq,
                    offset: s.q_start * d + h * dh,
                    rows: ql,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                gemm_view(ds, kh, out, 1.0);
            }
            if let Some(dk) = dk.as_mut() {
                let qh = View {
                    data: q.data(),
                    offset: s.q_start * d + h * dh,
                    rows: ql,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                gemm_view(ds.t(), qh, kv_view(dk), 1.0);
            }
        }
    }
    (dq, dk, dv)
}

/// Input projections `W_q, W_k, W_v` and output projection `W_o`, all `d×d`
/// and bias-free.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dim: usize,
    pub heads: usize,
}

/// Attention weights recorded on one tape. Binding once and applying many
/// times makes every application share the same leaves.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention<'t> {
    w_q: Var<'t>,
    w_k: Var<'t>,
    w_v: Var<'t>,
    w_o: Var<'t>,
    heads: usize,
}

impl AttentionParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::IndivisibleHeads { heads, dim });
        }
        let mut mk =
            |name: &str| set.add(format!("{prefix}.{name}"), init_uniform(rng, dim, dim, dim));
        Ok(Self {
            w_q: mk("w_q"),
            w_k: mk("w_k"),
            w_v: mk("w_v"),
            w_o: mk("w_o"),
            dim,
            heads,
        })
    }

    /// Re-attaches to the same slots of a set rebuilt from a checkpoint.
    pub fn locate(set: &ParamSet, prefix: &str, heads: usize) -> Result<Self> {
        let find = |name: &str| {
            set.find(&format!("{prefix}.{name}"))
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {prefix}.{name}")))
        };
        let w_q = find("w_q")?;
        let dim = set.value(w_q).rows();
        Ok(Self {
            w_q,
            w_k: find("w_k")?,
            w_v: find("w_v")?,
            w_o: find("w_o")?,
            dim,
            heads,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, set: &ParamSet) -> BoundAttention<'t> {
        BoundAttention {
            w_q: set.bind(tape, self.w_q),
            w_k: set.bind(tape, self.w_k),
            w_v: set.bind(tape, self.w_v),
            w_o: set.bind(tape, self.w_o),
            heads: self.heads,
        }
    }
}

impl<'t> BoundAttention<'t> {
    /// Projects inputs, runs the segmented kernel, applies `W_o`.
    pub fn forward(
        &self,
        q_in: Var<'t>,
        k_in: Var<'t>,
        v_in: Var<'t>,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var<'t>> {
        let q = q_in.matmul(self.w_q)?;
        let k = k_in.matmul(self.w_k)?;
        let v = v_in.matmul(self.w_v)?;
        q.attention_core(k, v, self.heads, segments, causal)?
            .matmul(self.w_o)
    }

    pub fn weights(&self) -> [Var<'t>; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// Single-sequence multi-head attention: `a` queries over `b` keys/values.
pub fn attention<'t>(
    params: &AttentionParams,
    set: &ParamSet,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
) -> Result<Var<'t>> {
    let tape = q.tape();
    let seg = AttnSegment::single(q.rows(), k.rows());
    params.bind(tape, set).forward(q, k, v, &[seg], false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::gradcheck::random_matrix;

    /// Reference computed with plain loops, independent of the kernel.
    fn naive(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Vec<f64> {
        let d = q.cols();
        let dh = d / heads;
        let mut out = vec![0.0; q.rows() * d];
        for h in 0..heads {
            for i in 0..q.rows() {
                let mut s: Vec<f64> = (0..k.rows())
                    .map(|j| {
                        (0..dh)
                            .map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                if causal {
                    s.truncate(i + 1 + k.rows() - q.rows());
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for (j, sj) in s.iter().enumerate() {
                    let w = (sj - m).exp() / z;
                    for c in 0..dh {
                        out[i * d + h * dh + c] += w * v.get(j, h * dh + c);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn kernel_matches_naive_loops() {
        let mut rng = rng_from(3, &[]);
        for causal in [false, true] {
            let n = 5;
            let (q, k, v) = (
                random_matrix(&mut rng, n, 8),
                random_matrix(&mut rng, n, 8),
                random_matrix(&mut rng, n, 8),
            );
            let (out, _) = forward(&q, &k, &v, 2, &[AttnSegment::single(n, n)], causal).unwrap();
            for (a, b) in out.data().iter().zip(naive(&q, &k, &v, 2, causal)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_causal_queries_are_the_last_rows() {
        let mut rng = rng_from(6, &[]);
        let (n, tail) = (6, 2);
        let (q, k, v) = (
            random_matrix(&mut rng, n, 4),
            random_matrix(&mut rng, n, 4),
            random_matrix(&mut rng, n, 4),
        );
        let (full, _) = forward(&q, &k, &v, 2, &[AttnSegment::single(n, n)], true).unwrap();
        let q_tail =
            Tensor::from_rows(&(n - tail..n).map(|r| q.row(r).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let (part, _) = forward(&q_tail, &k, &v, 2, &[AttnSegment::single(tail, n)], true).unwrap();
        assert_eq!(part.data(), &full.data()[(n - tail) * 4..]);
        for (a, b) in part.data().iter().zip(naive(&q_tail, &k, &v, 2, true)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(forward(
            &q,
            &q_tail,
            &q_tail,
            2,
            &[AttnSegment::single(n, tail)],
            true
        )
        .is_err());
    }

    #[test]
    fn segments_are_independent() {
        let mut rng = rng_from(4, &[]);
        let q = random_matrix(&mut rng, 6, 4);
        let k = random_matrix(&mut rng, 5, 4);
        let v = random_matrix(&mut rng, 5, 4);
        let segs = [
            AttnSegment {
                q_start: 0,
                q_len: 2,
                kv_start: 0,
                kv_len: 3,
            },
            AttnSegment {
                q_start: 2,
                q_len: 4,
                kv_start: 3,
                kv_len: 2,
            },
        ];
        let (out, _) = forward(&q, &k, &v, 2, &segs, false).unwrap();
        let sub = |t: &Tensor, a: usize, b: usize| {
            Tensor::from_rows(&(a..b).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let first = naive(&sub(&q, 0, 2), &sub(&k, 0, 3), &sub(&v, 0, 3), 2, false);
        let second = naive(&sub(&q, 2, 6), &sub(&k, 3, 5), &sub(&v, 3, 5), 2, false);
        let expected: Vec<f64> = first.into_iter().chain(second).collect();
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_heads_and_empty_kv() {
        let q = Tensor::zeros(vec![2, 6]);
        assert!(matches!(
            forward(&q, &q, &q, 4, &[AttnSegment::single(2, 2)], false),
            Err(TensorError::IndivisibleHeads { heads: 4, dim: 6 })
        ));
        let empty = Tensor::zeros(vec![0, 6]);
        assert!(forward(&q, &empty, &empty, 2, &[AttnSegment::single(2, 0)], false).is_err());
    }

    #[test]
    fn single_key_passes_value_through_projections() {
        let mut rng = rng_from(5, &[]);
        let mut set = ParamSet::new();
        let p = AttentionParams::init(&mut set, "a", 8, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let q = tape.constant(random_matrix(&mut rng, 3, 8));
        let kv = tape.constant(random_matrix(&mut rng, 1, 8));
        let out = attention(&p, &set, q, kv, kv).unwrap().value();
        let expected = kv
            .value()
            .matmul(set.value(p.w_v))
            .unwrap()
            .matmul(set.value(p.w_o))
            .unwrap();
        for r in 0..3 {
            for (a, b) in out.row(r).iter().zip(expected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
