//! Item view and session view construction.

use std::collections::HashMap;

use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Directed item graph: entry `(a, b)` counts how often `b` directly follows
/// `a` across all sessions.
pub fn build_item_graph(sessions: &[Session], n_items: usize) -> Result<SparseMatrix> {
    let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
    for s in sessions {
        if let Some(&bad) = s.items.iter().find(|&&i| i >= n_items) {
            return Err(Error::IndexOutOfRange {
                what: "item graph",
                index: bad,
                size: n_items,
            });
        }
        for w in s.items.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1.0;
        }
    }
    SparseMatrix::from_triplets(
        n_items,
        n_items,
        counts.into_iter().map(|((a, b), w)| (a, b, w)),
    )
}

fn unique_sorted(items: &[usize]) -> Vec<usize> {
    let mut u = items.to_vec();
    u.sort_unstable();
    u.dedup();
    u
}

/// Undirected session graph weighted by the Jaccard overlap of the two
/// sessions' unique items. The diagonal is left empty.
pub fn build_session_graph(sessions: &[Session]) -> SparseMatrix {
    let uniques: Vec<Vec<usize>> = sessions.iter().map(|s| unique_sorted(&s.items)).collect();
    let mut postings: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, items) in uniques.iter().enumerate() {
        for &it in items {
            postings.entry(it).or_default().push(j);
        }
    }

    let mut triplets = Vec::new();
    let mut shared: HashMap<usize, usize> = HashMap::new();
    for (j, items) in uniques.iter().enumerate() {
        shared.clear();
        for it in items {
            for &k in &postings[it] {
                if k > j {
                    *shared.entry(k).or_default() += 1;
                }
            }
        }
        for (&k, &n) in &shared {
            let union = items.len() + uniques[k].len() - n;
            let w = n as f64 / union as f64;
            triplets.push((j, k, w));
            triplets.push((k, j, w));
        }
    }
    let m = sessions.len();
    SparseMatrix::from_triplets(m, m, triplets).expect("session indices are in range")
}

/// Keeps each row's `keep_top` heaviest neighbours (ties to the lower index),
/// then restores symmetry with `max(w_jk, w_kj)`.
pub fn sparsify_session_graph(g: &SparseMatrix, keep_top: usize) -> Result<SparseMatrix> {
    if keep_top == 0 {
        return Err(Error::InvalidArgument("keep_top must be at least 1".into()));
    }
    let mut kept: HashMap<(usize, usize), f64> = HashMap::new();
    for r in 0..g.n_rows() {
        let (cols, vals) = g.row(r);
        let mut order: Vec<usize> = (0..cols.len()).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(cols[a].cmp(&cols[b])));
        for &i in order.iter().take(keep_top) {
            let (c, w) = (cols[i], vals[i]);
            for key in [(r, c), (c, r)] {
                let slot = kept.entry(key).or_insert(w);
                *slot = slot.max(w);
            }
        }
    }
    SparseMatrix::from_triplets(
        g.n_rows(),
        g.n_cols(),
        kept.into_iter().map(|((r, c), w)| (r, c, w)),
    )
}

/// An adjacency matrix together with its self-looped row-normalized form
/// `D̂⁻¹(A + I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub base: SparseMatrix,
    pub normalized: SparseMatrix,
}

pub fn normalize(a: &SparseMatrix) -> Result<NormalizedAdjacency> {
    if a.n_rows() != a.n_cols() {
        return Err(Error::shape("normalize", a.shape(), (a.n_cols(), a.n_rows())));
    }
    let n = a.n_rows();
    let looped = SparseMatrix::from_triplets(
        n,
        n,
        a.triplets().chain((0..n).map(|i| (i, i, 1.0))),
    )?;
    let sums = looped.row_sums();
    let normalized = SparseMatrix::from_triplets(
        n,
        n,
        looped.triplets().map(|(r, c, w)| (r, c, w / sums[r])),
    )?;
    Ok(NormalizedAdjacency {
        base: a.clone(),
        normalized,
    })
}

/// Summary statistics printed by `inspect-graph`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub density: f64,
    pub max_degree: usize,
}

pub fn graph_stats(g: &SparseMatrix) -> GraphStats {
    let n = g.n_rows();
    GraphStats {
        nodes: n,
        edges: g.nnz(),
        density: if n == 0 {
            0.0
        } else {
            g.nnz() as f64 / (n as f64 * n as f64)
        },
        max_degree: (0..n).map(|r| g.row_degree(r)).max().unwrap_or(0),
    }
}
