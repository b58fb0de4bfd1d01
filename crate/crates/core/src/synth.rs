//! Synthetic click logs with planted sequential structure.
//!
//! Items are grouped into clusters. Each item has a few preferred successors
//! inside its cluster; a session walks those transitions with probability
//! `p_follow`, otherwise jumps to a random item of the same cluster, and
//! occasionally to a popular item anywhere in the catalogue.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Zipf};

use crate::corpus::{build_sessions, RawEvent, Session, SessionCorpus};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_sessions: usize,
    pub n_clusters: usize,
    /// Preferred successors per item.
    pub successors: usize,
    pub p_follow: f64,
    /// Probability of a jump to a popular item.
    pub p_popular: f64,
    /// Mean session length; lengths are `2 + Geometric`.
    pub mean_len: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 500,
            n_sessions: 3000,
            n_clusters: 25,
            successors: 3,
            p_follow: 0.7,
            p_popular: 0.1,
            mean_len: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The 20-item, 30-session corpus used by the small-scale checks.
    pub fn tiny(seed: u64) -> Self {
        SynthConfig {
            n_items: 20,
            n_sessions: 30,
            n_clusters: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n_items < 2 || self.n_sessions == 0 {
            return bad("synthetic corpus needs at least 2 items and 1 session");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return bad("n_clusters must be between 1 and n_items");
        }
        if !(0.0..=1.0).contains(&self.p_follow)
            || !(0.0..=1.0).contains(&self.p_popular)
            || self.p_follow + self.p_popular > 1.0
        {
            return bad("p_follow and p_popular must be probabilities summing to at most 1");
        }
        if self.mean_len.is_nan() || self.mean_len <= 2.0 {
            return bad("mean_len must exceed 2");
        }
        if self.successors == 0 {
            return bad("successors must be at least 1");
        }
        Ok(())
    }
}

/// Generates events with session ids `s<j>`, item ids `i<k>` and one time
/// unit per session, so a time-based split cuts cleanly between sessions.
pub fn generate(config: &SynthConfig) -> Result<Vec<RawEvent>> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_items;
    let cluster_of = |i: usize| i * config.n_clusters / n;
    let members: Vec<Vec<usize>> = (0..config.n_clusters)
        .map(|c| (0..n).filter(|&i| cluster_of(i) == c).collect())
        .collect();
    let successors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let m = &members[cluster_of(i)];
            (0..config.successors)
                .map(|_| m[rng.random_range(0..m.len())])
                .collect()
        })
        .collect();
    let popular = Zipf::new(n as f64, 1.1).expect("n ≥ 2");
    let extra_len = Geometric::new(1.0 / (config.mean_len - 1.0)).expect("mean_len > 2");

    let mut events = Vec::new();
    for j in 0..config.n_sessions {
        let len = 2 + (extra_len.sample(&mut rng) as usize).min(48);
        let mut item = rng.random_range(0..n);
        for step in 0..len {
            events.push(RawEvent {
                session_id: format!("s{j}"),
                item_id: format!("i{item}"),
                timestamp: (j * 100 + step) as i64,
            });
            let u: f64 = rng.random();
            item = if u < config.p_follow {
                let s = &successors[item];
                s[rng.random_range(0..s.len())]
            } else if u < config.p_follow + config.p_popular {
                popular.sample(&mut rng) as usize - 1
            } else {
                let m = &members[cluster_of(item)];
                m[rng.random_range(0..m.len())]
            };
        }
    }
    Ok(events)
}

/// A corpus over exactly `n_items` items (`i0`, `i1`, …) without frequency
/// filtering; the latest `test_fraction` of sessions form the test split.
pub fn corpus(config: &SynthConfig, test_fraction: f64) -> Result<SessionCorpus> {
    let raw = build_sessions(&generate(config)?);
    let n_test = (test_fraction * raw.len() as f64).round() as usize;
    if n_test == 0 || n_test >= raw.len() {
        return Err(Error::InvalidArgument(
            "test_fraction leaves an empty train or test split".into(),
        ));
    }
    let sessions: Vec<Session> = raw
        .into_iter()
        .map(|s| Session {
            items: s.items.iter().map(|i| i[1..].parse().expect("ids are i<k>")).collect(),
            original_id: s.id,
            last_timestamp: s.last_timestamp,
        })
        .collect();
    let (train, test) = sessions.split_at(sessions.len() - n_test);
    let vocab = (0..config.n_items).map(|i| format!("i{i}")).collect();
    SessionCorpus::from_sessions(vocab, train.to_vec(), test.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let c = SynthConfig {
            n_sessions: 50,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let other = SynthConfig { seed: 1, ..c.clone() };
        assert_ne!(generate(&c).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn sessions_have_at_least_two_clicks() {
        let c = SynthConfig {
            n_sessions: 200,
            ..SynthConfig::default()
        };
        let events = generate(&c).unwrap();
        let sessions = build_sessions(&events);
        assert_eq!(sessions.len(), 200);
        assert!(sessions.iter().all(|s| s.items.len() >= 2));
    }

    #[test]
    fn tiny_corpus_keeps_every_item() {
        let c = corpus(&SynthConfig::tiny(0), 0.2).unwrap();
        assert_eq!(c.n_items(), 20);
        assert_eq!(c.train_sessions.len() + c.test_sessions.len(), 30);
        assert_eq!(c.test_sessions.len(), 6);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let c = SynthConfig {
            p_follow: 0.8,
            p_popular: 0.3,
            ..SynthConfig::default()
        };
        assert!(generate(&c).is_err());
    }
}
