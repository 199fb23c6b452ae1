use crate::graph::{MultimodalGraph, Split};
use crate::tensor::Tensor;

use super::{AlignerError, Result};

/// Full-batch gradient descent settings for the multinomial probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Test accuracy of each feature source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub txt: f64,
    pub img: f64,
    pub concat: f64,
    pub fused: f64,
}

fn rows_in(labels: &[Option<usize>], splits: &[Split], split: Split) -> Vec<(usize, usize)> {
    (0..labels.len())
        .filter(|&v| splits[v] == split)
        .filter_map(|v| labels[v].map(|l| (v, l)))
        .collect()
}

/// Trains standardized multinomial logistic regression on labeled train
/// rows of `x` and returns accuracy on labeled test rows.
pub fn linear_probe(
    x: &Tensor,
    labels: &[Option<usize>],
    splits: &[Split],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (n, f) = (x.rows(), x.cols());
    if labels.len() != n || splits.len() != n {
        return Err(AlignerError::Probe(format!(
            "{n} feature rows, {} labels, {} split tags",
            labels.len(),
            splits.len()
        )));
    }
    let train = rows_in(labels, splits, Split::Train);
    let test = rows_in(labels, splits, Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(AlignerError::Probe(
            "train and test rows must be nonempty".into(),
        ));
    }
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    if train.iter().all(|&(_, l)| l == train[0].1) {
        return Err(AlignerError::Probe(
            "train rows contain a single class".into(),
        ));
    }

    let mut mean = vec![0.0; f];
    for &(v, _) in &train {
        for (m, xv) in mean.iter_mut().zip(x.row(v)) {
            *m += xv;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; f];
    for &(v, _) in &train {
        for j in 0..f {
            sd[j] += (x.row(v)[j] - mean[j]).powi(2);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / train.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let z = |v: usize| -> Vec<f64> { (0..f).map(|j| (x.row(v)[j] - mean[j]) / sd[j]).collect() };
    let ztrain: Vec<Vec<f64>> = train.iter().map(|&(v, _)| z(v)).collect();

    let mut w = vec![0.0; f * k];
    let mut b = vec![0.0; k];
    let logits = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| {
                b[c] + row
                    .iter()
                    .enumerate()
                    .map(|(j, r)| r * w[j * k + c])
                    .sum::<f64>()
            })
            .collect()
    };
    let inv = 1.0 / train.len() as f64;
    let mut p = vec![0.0; k];
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; f * k];
        let mut gb = vec![0.0; k];
        for (row, &(_, label)) in ztrain.iter().zip(&train) {
            let s = logits(&w, &b, row);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = s.iter().map(|v| (v - max).exp()).sum();
            for c in 0..k {
                p[c] = (s[c] - max).exp() / total - f64::from(u8::from(c == label));
                gb[c] += p[c] * inv;
            }
            for (j, r) in row.iter().enumerate() {
                for c in 0..k {
                    gw[j * k + c] += r * p[c] * inv;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * (gi + cfg.l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * gi;
        }
    }

    let correct = test
        .iter()
        .filter(|&&(v, label)| {
            let s = logits(&w, &b, &z(v));
            let pred = (0..k).fold(0, |best, c| if s[c] > s[best] { c } else { best });
            pred == label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn mean_tokens(g: &MultimodalGraph, txt: bool) -> Tensor {
    let shape = if txt { g.txt_shape() } else { g.img_shape() };
    let mut out = Vec::with_capacity(g.num_nodes() * shape.dim);
    for v in 0..g.num_nodes() {
        let s = if txt { g.txt_slice(v) } else { g.img_slice(v) };
        for j in 0..shape.dim {
            out.push((0..shape.len).map(|r| s[r * shape.dim + j]).sum::<f64>() / shape.len as f64);
        }
    }
    Tensor::matrix(g.num_nodes(), shape.dim, out).expect("shape by construction")
}

/// Probes mean-pooled raw text, raw image, their concatenation, and the
/// supplied pooled aligner embeddings (`num_nodes × d`).
pub fn probe_all(g: &MultimodalGraph, pooled: &Tensor, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let txt = mean_tokens(g, true);
    let img = mean_tokens(g, false);
    let n = g.num_nodes();
    let mut cat = Vec::with_capacity(n * (txt.cols() + img.cols()));
    for v in 0..n {
        cat.extend_from_slice(txt.row(v));
        cat.extend_from_slice(img.row(v));
    }
    let concat = Tensor::matrix(n, txt.cols() + img.cols(), cat)?;
    let run = |x: &Tensor| linear_probe(x, g.labels(), g.splits(), cfg);
    Ok(ProbeReport {
        txt: run(&txt)?,
        img: run(&img)?,
        concat: run(&concat)?,
        fused: run(pooled)?,
    })
}
