//! Top-K recommendation and ranking metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Prefixes of at most this many items count as short sessions.
pub const SHORT_SESSION_MAX: usize = 5;

/// The `k` items with the largest `θ·x_i`, ties to the lower index.
pub fn recommend(theta: &[f64], items: &Tensor, k: usize) -> Result<Vec<usize>> {
    let scores: Vec<f64> = (0..items.rows())
        .map(|i| dot(items.row(i), theta))
        .collect();
    top_k(&scores, k)
}

pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot recommend {k} of {} items",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalResult {
    /// Hit rate: fraction of samples whose target is in the top K.
    pub p_at: BTreeMap<usize, f64>,
    /// Mean reciprocal rank truncated at K.
    pub mrr_at: BTreeMap<usize, f64>,
    pub n_samples: usize,
    /// Short/long breakdown; `None` marks an empty partition.
    pub breakdowns: Option<LengthBreakdown>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LengthBreakdown {
    pub short: Option<Box<EvalResult>>,
    pub long: Option<Box<EvalResult>>,
}

pub fn metrics(ranked: &[Vec<usize>], targets: &[usize], ks: &[usize]) -> Result<EvalResult> {
    if ranked.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ranked lists but {} targets",
            ranked.len(),
            targets.len()
        )));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if let Some(short) = ranked.iter().find(|r| r.len() < max_k) {
        return Err(Error::InvalidArgument(format!(
            "ranked list of length {} is shorter than K = {max_k}",
            short.len()
        )));
    }
    let n = targets.len();
    let mut result = EvalResult {
        n_samples: n,
        ..EvalResult::default()
    };
    for &k in ks {
        let mut hits = 0.0;
        let mut rr = 0.0;
        for (list, &t) in ranked.iter().zip(targets) {
            if let Some(pos) = list[..k].iter().position(|&i| i == t) {
                hits += 1.0;
                rr += 1.0 / (pos + 1) as f64;
            }
        }
        let denom = n.max(1) as f64;
        result.p_at.insert(k, hits / denom);
        result.mrr_at.insert(k, rr / denom);
    }
    Ok(result)
}

/// Metrics split by prefix length: `≤ threshold` is short, longer is long.
pub fn length_split_eval(
    prefix_lens: &[usize],
    ranked: &[Vec<usize>],
    targets: &[usize],
    threshold: usize,
    ks: &[usize],
) -> Result<LengthBreakdown> {
    if prefix_lens.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "prefix lengths and targets differ in count".into(),
        ));
    }
    let part = |short: bool| -> Result<Option<Box<EvalResult>>> {
        let (r, t): (Vec<Vec<usize>>, Vec<usize>) = prefix_lens
            .iter()
            .zip(ranked.iter().zip(targets))
            .filter(|(&len, _)| (len <= threshold) == short)
            .map(|(_, (r, &t))| (r.clone(), t))
            .unzip();
        if t.is_empty() {
            return Ok(None);
        }
        metrics(&r, &t, ks).map(|m| Some(Box::new(m)))
    };
    Ok(LengthBreakdown {
        short: part(true)?,
        long: part(false)?,
    })
}

/// Items ranked by training-set frequency, ties to the lower index.
pub fn popularity_ranking(sessions: &[Session], n_items: usize) -> Vec<usize> {
    let mut counts = vec![0.0; n_items];
    for s in sessions {
        for &i in &s.items {
            counts[i] += 1.0;
        }
    }
    top_k(&counts, n_items).expect("k equals n")
}

impl EvalResult {
    /// One `metric\tK\tsplit\tvalue\tn` line per metric.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        self.write_records("all", &mut out);
        if let Some(b) = &self.breakdowns {
            for (name, part) in [("short", &b.short), ("long", &b.long)] {
                match part {
                    Some(r) => r.write_records(name, &mut out),
                    None => {
                        for &k in self.p_at.keys() {
                            writeln!(out, "P\t{k}\t{name}\tabsent\t0").unwrap();
                            writeln!(out, "MRR\t{k}\t{name}\tabsent\t0").unwrap();
                        }
                    }
                }
            }
        }
        out
    }

    fn write_records(&self, split: &str, out: &mut String) {
        for (k, v) in &self.p_at {
            writeln!(out, "P\t{k}\t{split}\t{v:.6}\t{}", self.n_samples).unwrap();
        }
        for (k, v) in &self.mrr_at {
            writeln!(out, "MRR\t{k}\t{split}\t{v:.6}\t{}", self.n_samples).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recommend_orders_by_score() {
        let items = Tensor::from_rows(&[vec![0.2], vec![0.9], vec![0.1]]).unwrap();
        assert_eq!(recommend(&[1.0], &items, 2).unwrap(), vec![1, 0]);
        let flat = Tensor::full(5, 2, 1.0);
        assert_eq!(recommend(&[1.0, 1.0], &flat, 3).unwrap(), vec![0, 1, 2]);
        assert!(recommend(&[1.0], &items, 4).is_err());
    }

    #[test]
    fn rank_three_hit() {
        let ranked = vec![(0..20).map(|i| (i + 5) % 20).collect::<Vec<_>>()];
        let target = ranked[0][2];
        let m = metrics(&ranked, &[target], &[20]).unwrap();
        assert_eq!(m.p_at[&20], 1.0);
        assert!((m.mrr_at[&20] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn miss_contributes_zero() {
        let ranked = vec![(0..20).collect::<Vec<_>>()];
        let m = metrics(&ranked, &[99], &[10, 20]).unwrap();
        assert_eq!(m.p_at[&20], 0.0);
        assert_eq!(m.mrr_at[&10], 0.0);
        assert!(metrics(&ranked, &[1, 2], &[10]).is_err());
    }

    #[test]
    fn long_partition_absent_for_short_prefixes() {
        let ranked = vec![vec![0, 1, 2], vec![2, 1, 0]];
        let b = length_split_eval(&[2, 2], &ranked, &[0, 0], 5, &[2]).unwrap();
        assert!(b.long.is_none());
        assert_eq!(b.short.unwrap().n_samples, 2);
    }

    #[test]
    fn records_format() {
        let m = metrics(&[vec![3, 1]], &[1], &[2]).unwrap();
        assert_eq!(
            m.to_records(),
            "P\t2\tall\t1.000000\t1\nMRR\t2\tall\t0.500000\t1\n"
        );
    }
}
