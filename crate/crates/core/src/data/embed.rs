//! Topology-aware node embeddings from random-walk co-occurrence.
//!
//! Instead of sampling walks, the window co-occurrence counts are computed in
//! closed form as their expectation under uniform random walks (a power
//! series of the transition matrix). The expected counts are exactly
//! equivariant under node relabeling, which sampled walks are not, and make
//! every downstream test reproducible. The PPMI matrix of the counts is then
//! factorized by a truncated symmetric eigendecomposition.

use nalgebra::DMatrix;

use super::GraphSample;
use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 12;

#[derive(Debug, Clone)]
pub struct EmbedConfig {
    pub dim: usize,
    /// Walks started per node. Cancels out of the PMI normalization; kept so
    /// callers can state the walk budget they are modeling.
    pub walks_per_node: usize,
    /// Skip-gram window within a walk.
    pub window: usize,
    /// PMI shift (number of modeled negative samples); 1 means plain PPMI.
    pub shift: f64,
    /// Retained for interface stability; the closed-form expectation is
    /// seed-free.
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: EMBED_DIM,
            walks_per_node: 10,
            window: 5,
            shift: 1.0,
            seed: 0,
        }
    }
}

/// Walk length as a function of graph size: `max(4, min(s/10, 10))`,
/// truncated to an integer after the max/min composition.
pub fn walk_length(graph_size: usize) -> usize {
    let s = graph_size as f64;
    (s / 10.0).min(10.0).max(4.0).floor() as usize
}

/// Expected window co-occurrence counts under `walks_per_node` uniform
/// random walks of length `walk_length(n)` started at every node,
/// symmetrized. Nodes in different connected components never co-occur.
pub fn co_occurrence(sample: &GraphSample, cfg: &EmbedConfig) -> Vec<f64> {
    let n = sample.num_nodes;
    let len = walk_length(n);
    let deg = sample.degrees();

    // row-stochastic transition matrix; isolated nodes get a zero row
    let mut p = vec![0.0; n * n];
    for &(a, b) in &sample.edges {
        let (a, b) = (a as usize, b as usize);
        p[a * n + b] = 1.0 / deg[a] as f64;
        p[b * n + a] = 1.0 / deg[b] as f64;
    }

    // q_i(a) = expected number of walks whose position i is node a
    // (summed over all start nodes); q_0 = 1.
    let mut q = vec![vec![1.0; n]];
    for _ in 1..len {
        let prev = q.last().unwrap();
        let mut next = vec![0.0; n];
        for a in 0..n {
            let w = prev[a];
            if w != 0.0 {
                for b in 0..n {
                    next[b] += w * p[a * n + b];
                }
            }
        }
        q.push(next);
    }

    let wpn = cfg.walks_per_node as f64;
    let mut c = vec![0.0; n * n];
    let mut pt = p.clone();
    let max_t = cfg.window.min(len.saturating_sub(1));
    for t in 1..=max_t {
        if t > 1 {
            pt = mat_mul(&pt, &p, n);
        }
        // weight of offset t: sum over walk positions i with i + t < len
        let mut u = vec![0.0; n];
        for qi in q.iter().take(len - t) {
            for (uv, qv) in u.iter_mut().zip(qi) {
                *uv += qv;
            }
        }
        for a in 0..n {
            let ua = wpn * u[a];
            if ua != 0.0 {
                for b in 0..n {
                    c[a * n + b] += ua * pt[a * n + b];
                }
            }
        }
    }
    // count both orders of each pair
    for a in 0..n {
        for b in (a + 1)..n {
            let s = (c[a * n + b] + c[b * n + a]) / 2.0;
            c[a * n + b] = s;
            c[b * n + a] = s;
        }
    }
    c
}

/// Deterministic DeepWalk surrogate: PPMI of expected walk co-occurrences,
/// factorized to `cfg.dim` columns scaled by square-root eigenvalues.
/// Columns beyond the usable rank are zero.
pub fn embed_nodes(sample: &GraphSample, cfg: &EmbedConfig) -> Result<Vec<f64>> {
    let n = sample.num_nodes;
    if cfg.dim == 0 {
        return Err(Error::invalid("embedding dim must be >= 1"));
    }
    if n == 1 {
        return Ok(vec![0.0; cfg.dim]);
    }

    let c = co_occurrence(sample, cfg);
    let total: f64 = c.iter().sum();
    let mut out = vec![0.0; n * cfg.dim];
    if total <= 0.0 {
        return Ok(out);
    }
    let row_sums: Vec<f64> = (0..n).map(|a| c[a * n..(a + 1) * n].iter().sum()).collect();

    let mut ppmi = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let cv = c[a * n + b];
            if cv > 0.0 && row_sums[a] > 0.0 && row_sums[b] > 0.0 {
                let pmi = (cv * total / (row_sums[a] * row_sums[b])).ln() - cfg.shift.ln();
                if pmi > 0.0 {
                    ppmi[(a, b)] = pmi;
                }
            }
        }
    }
    // exact symmetry for the eigensolver
    for a in 0..n {
        for b in (a + 1)..n {
            let s = (ppmi[(a, b)] + ppmi[(b, a)]) / 2.0;
            ppmi[(a, b)] = s;
            ppmi[(b, a)] = s;
        }
    }

    let eig = nalgebra::SymmetricEigen::new(ppmi);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

    for (col, &ei) in order.iter().take(cfg.dim).enumerate() {
        let lambda = eig.eigenvalues[ei];
        if lambda <= 0.0 {
            continue; // zero-padded column
        }
        let scale = lambda.sqrt();
        let v = eig.eigenvectors.column(ei);
        // canonical sign: the largest-magnitude entry is positive
        let mut pivot = 0usize;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[i * cfg.dim + col] = sign * scale * v[i];
        }
    }
    Ok(out)
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            if av != 0.0 {
                let brow = &b[k * n..(k + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}
