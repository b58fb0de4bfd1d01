//! Browser playground: paste sessions, inspect the two views, train a small
//! model and ask it for recommendations.
//!
//! [`Playground`] holds the logic and is usable natively; the `wasm_bindgen`
//! wrapper [`Demo`] exchanges JSON strings with the page.

use cotrec::corpus::{build_sessions, filter_corpus, temporal_split, RawSession, SplitBoundary};
use cotrec::graph::{build_item_graph, build_session_graph, graph_stats, sparsify_session_graph, GraphStats};
use cotrec::synth::{self, SynthConfig};
use cotrec::trainer::{evaluate_popularity, EpochRecord, Predictor, Trainer};
use cotrec::{Error, Result, SessionCorpus, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Edges listed per view in [`ViewSummary`].
const STRONGEST_EDGES: usize = 8;

#[derive(Debug, Serialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct ViewSummary {
    pub items: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub item_view: GraphStats,
    pub session_view: GraphStats,
    /// Heaviest item-view edges, by item name.
    pub item_edges: Vec<Edge>,
    /// Heaviest session-view edges, by session line number.
    pub session_edges: Vec<Edge>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOptions {
    pub d: usize,
    pub epochs: usize,
    pub beta: f64,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct Scores {
    pub k: usize,
    pub p: f64,
    pub mrr: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub test_samples: usize,
    pub model: Vec<Scores>,
    pub popularity: Vec<Scores>,
}

#[derive(Debug, Serialize)]
pub struct Recommendation {
    pub item: String,
    pub score: f64,
    /// Softmax probability over the whole catalogue.
    pub probability: f64,
}

/// Sessions typed by the user; the last lines are the test split.
pub struct Playground {
    corpus: SessionCorpus,
    predictor: Option<Predictor>,
}

/// One session per line, items separated by whitespace or commas. Line order
/// stands in for time.
pub fn parse_sessions(text: &str) -> Vec<RawSession> {
    text.lines()
        .enumerate()
        .map(|(n, line)| RawSession {
            id: format!("line {}", n + 1),
            items: line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
            last_timestamp: n as i64,
        })
        .filter(|s| !s.items.is_empty())
        .collect()
}

fn edges(g: &cotrec::sparse::SparseMatrix, name: impl Fn(usize) -> String, symmetric: bool) -> Vec<Edge> {
    let mut all: Vec<(usize, usize, f64)> = g.triplets().filter(|&(r, c, _)| !symmetric || r < c).collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    all.into_iter()
        .take(STRONGEST_EDGES)
        .map(|(r, c, weight)| Edge {
            from: name(r),
            to: name(c),
            weight,
        })
        .collect()
}

impl Playground {
    pub fn new(text: &str, test_fraction: f64) -> Result<Self> {
        let sessions = filter_corpus(parse_sessions(text), 2, 1)?;
        let (train, test) = temporal_split(sessions, SplitBoundary::Fraction(test_fraction))?;
        Ok(Playground {
            corpus: SessionCorpus::from_split(train, test)?,
            predictor: None,
        })
    }

    pub fn corpus(&self) -> &SessionCorpus {
        &self.corpus
    }

    pub fn views(&self, keep_top: usize) -> Result<ViewSummary> {
        let c = &self.corpus;
        let item = build_item_graph(&c.train_sessions, c.n_items())?;
        let session = sparsify_session_graph(&build_session_graph(&c.train_sessions), keep_top)?;
        Ok(ViewSummary {
            items: c.n_items(),
            train_sessions: c.train_sessions.len(),
            test_sessions: c.test_sessions.len(),
            item_view: graph_stats(&item),
            session_view: graph_stats(&session),
            item_edges: edges(&item, |i| c.item_vocab[i].clone(), false),
            session_edges: edges(&session, |s| c.train_sessions[s].original_id.clone(), true),
        })
    }

    fn cutoffs(&self) -> Vec<usize> {
        let n = self.corpus.n_items();
        let mut ks: Vec<usize> = [5, 20].iter().map(|&k| k.min(n)).collect();
        ks.dedup();
        ks
    }

    pub fn train(&mut self, opts: &TrainOptions) -> Result<TrainSummary> {
        let n = self.corpus.n_items();
        let config = TrainConfig {
            d: opts.d,
            epochs: opts.epochs,
            beta: opts.beta,
            alpha: opts.alpha,
            seed: opts.seed,
            no_ssl: opts.beta == 0.0,
            no_divergence: opts.alpha == 0.0,
            batch_size: 32,
            lr: 0.01,
            layers: 2,
            k: (n / 10).clamp(1, 5),
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let outcome = Trainer::new(&self.corpus, config)?.run()?;
        if let Some(e) = outcome.aborted {
            return Err(e);
        }
        let predictor = outcome.predictor()?;
        let ks = self.cutoffs();
        let c = &self.corpus;
        let scores = |r: cotrec::EvalResult| {
            ks.iter()
                .map(|k| Scores {
                    k: *k,
                    p: r.p_at[k],
                    mrr: r.mrr_at[k],
                })
                .collect()
        };
        let summary = TrainSummary {
            epochs: outcome.report.epochs,
            test_samples: c.test_samples.len(),
            model: scores(predictor.evaluate(&c.test_samples, &ks)?),
            popularity: scores(evaluate_popularity(&c.train_sessions, n, &c.test_samples, &ks)?),
        };
        self.predictor = Some(predictor);
        Ok(summary)
    }

    /// Top `k` next items after the session typed in `session`.
    pub fn recommend(&self, session: &str, k: usize) -> Result<Vec<Recommendation>> {
        let predictor = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("train a model first".into()))?;
        let c = &self.corpus;
        let names: Vec<&str> = session
            .split(|ch: char| ch.is_whitespace() || ch == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if names.is_empty() {
            return Err(Error::InvalidArgument("type at least one item".into()));
        }
        let unknown: Vec<&str> = names.iter().copied().filter(|n| c.item_index(n).is_none()).collect();
        if !unknown.is_empty() {
            return Err(Error::InvalidArgument(format!("unknown items: {}", unknown.join(", "))));
        }
        let prefix: Vec<usize> = names.iter().filter_map(|n| c.item_index(n)).collect();
        let scores = predictor.scores(&prefix)?;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let top = cotrec::eval::top_k(&scores, k.min(scores.len()))?;
        Ok(top
            .into_iter()
            .map(|i| Recommendation {
                item: c.item_vocab[i].clone(),
                score: scores[i],
                probability: (scores[i] - max).exp() / z,
            })
            .collect())
    }
}

/// Example input: synthetic sessions over 60 items, one per line.
pub fn sample_text(sessions: usize, seed: u64) -> Result<String> {
    let config = SynthConfig {
        n_items: 60,
        n_sessions: sessions,
        n_clusters: 6,
        seed,
        ..SynthConfig::default()
    };
    let raw = build_sessions(&synth::generate(&config)?);
    Ok(raw.iter().map(|s| s.items.join(" ") + "\n").collect())
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    Ok(serde_json::to_string(&v).expect("demo types serialize"))
}

#[wasm_bindgen]
pub struct Demo(Playground);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(text: &str) -> std::result::Result<Demo, JsError> {
        Playground::new(text, 0.2)
            .map(Demo)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    /// JSON [`ViewSummary`].
    pub fn views(&self, keep_top: usize) -> std::result::Result<String, JsError> {
        js(self.0.views(keep_top))
    }

    /// JSON [`TrainSummary`].
    pub fn train(&mut self, d: usize, epochs: usize, beta: f64, alpha: f64, seed: u32) -> std::result::Result<String, JsError> {
        let opts = TrainOptions {
            d,
            epochs,
            beta,
            alpha,
            seed: seed as u64,
        };
        js(self.0.train(&opts))
    }

    /// JSON list of [`Recommendation`].
    pub fn recommend(&self, session: &str, k: usize) -> std::result::Result<String, JsError> {
        js(self.0.recommend(session, k))
    }
}

#[wasm_bindgen(js_name = sampleSessions)]
pub fn sample_sessions(sessions: usize, seed: u32) -> std::result::Result<String, JsError> {
    sample_text(sessions, seed as u64).map_err(|e| JsError::new(&e.to_string()))
}
