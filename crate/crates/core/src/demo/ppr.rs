use crate::graph::{MultimodalGraph, NodeId};

use super::{DemoError, Result};

/// How the adjacency is normalized before propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Row-stochastic `D^-1 A`, propagated through its transpose.
    RandomWalk,
    /// `D^-1/2 A D^-1/2`; the fixed point is L1-normalized afterwards.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PprConfig {
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub normalization: Normalization,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            tol: 1e-10,
            max_iter: 1000,
            normalization: Normalization::RandomWalk,
        }
    }
}

impl PprConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DemoError::InvalidConfig(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tol > 0.0) {
            return Err(DemoError::InvalidConfig(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

fn check_node(g: &MultimodalGraph, v: NodeId) -> Result<()> {
    if v < g.num_nodes() {
        Ok(())
    } else {
        Err(DemoError::NodeOutOfRange {
            node: v,
            num_nodes: g.num_nodes(),
        })
    }
}

/// Personalized PageRank from `anchor` by power iteration.
///
/// Mass sitting on isolated nodes returns to the anchor, so the random-walk
/// iterate keeps unit L1 mass at every step.
pub fn ppr_scores(g: &MultimodalGraph, anchor: NodeId, cfg: &PprConfig) -> Result<Vec<f64>> {
    cfg.check()?;
    check_node(g, anchor)?;
    let n = g.num_nodes();
    let a = cfg.alpha;
    let deg: Vec<f64> = (0..n).map(|v| g.degree(v) as f64).collect();
    let mut pi = vec![0.0; n];
    pi[anchor] = 1.0;
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut dangling = 0.0;
        for u in 0..n {
            if pi[u] == 0.0 {
                continue;
            }
            if deg[u] == 0.0 {
                dangling += pi[u];
                continue;
            }
            let nbrs = g.neighbors(u).expect("u < n");
            match cfg.normalization {
                Normalization::RandomWalk => {
                    let share = pi[u] / deg[u];
                    for &w in nbrs {
                        next[w] += share;
                    }
                }
                Normalization::Symmetric => {
                    let su = pi[u] / deg[u].sqrt();
                    for &w in nbrs {
                        next[w] += su / deg[w].sqrt();
                    }
                }
            }
        }
        for x in next.iter_mut() {
            *x *= 1.0 - a;
        }
        next[anchor] += a + (1.0 - a) * dangling;
        residual = pi.iter().zip(&next).map(|(p, q)| (p - q).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if residual < cfg.tol {
            if cfg.normalization == Normalization::Symmetric {
                let total: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|x| *x /= total);
            }
            return Ok(pi);
        }
    }
    Err(DemoError::NotConverged {
        iterations: cfg.max_iter,
        residual,
    })
}

/// Exact random-walk PPR by Gaussian elimination on the dense system
/// `(I - (1-alpha) M) pi = alpha e_anchor`, with `M = P^T + e_anchor d^T`
/// and `d` the indicator of isolated nodes.
///
/// # Panics
/// If the graph has more than 2000 nodes, `alpha` is outside `(0, 1]`, or
/// the anchor is out of range.
pub fn ppr_oracle_dense(g: &MultimodalGraph, anchor: NodeId, alpha: f64) -> Vec<f64> {
    let n = g.num_nodes();
    assert!(n <= 2000, "dense oracle is limited to 2000 nodes");
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    assert!(anchor < n, "anchor out of range");
    let w = n + 1;
    let mut m = vec![0.0; n * w];
    for i in 0..n {
        m[i * w + i] = 1.0;
    }
    for u in 0..n {
        let nbrs = g.neighbors(u).expect("u < n");
        if nbrs.is_empty() {
            m[anchor * w + u] -= 1.0 - alpha;
        } else {
            let share = (1.0 - alpha) / nbrs.len() as f64;
            for &v in nbrs {
                m[v * w + u] -= share;
            }
        }
    }
    m[anchor * w + n] = alpha;

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a * w + col].abs().total_cmp(&m[b * w + col].abs()))
            .expect("nonempty range");
        assert!(m[pivot * w + col].abs() > 1e-300, "singular PPR system");
        if pivot != col {
            for j in 0..w {
                m.swap(pivot * w + j, col * w + j);
            }
        }
        let p = m[col * w + col];
        for r in col + 1..n {
            let f = m[r * w + col] / p;
            if f != 0.0 {
                for j in col..w {
                    m[r * w + j] -= f * m[col * w + j];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = m[i * w + n];
        for j in i + 1..n {
            s -= m[i * w + j] * x[j];
        }
        x[i] = s / m[i * w + i];
    }
    x
}
