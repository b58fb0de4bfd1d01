//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written with dense loops and no code from the crate's
//! own graph, sparse or metric modules, so agreement is meaningful.
#![allow(dead_code)]

use std::collections::HashSet;

use cotrec::corpus::{Sample, Session};
use cotrec::model::ModelShape;
use cotrec::param::ParamStore;
use cotrec::synth::{self, SynthConfig};
use cotrec::tensor::Tensor;
use cotrec::trainer::{batch_forward, BatchPlan, PlanSource, TrainingData};
use cotrec::{CotrecModel, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn session(items: &[usize]) -> Session {
    Session {
        original_id: String::new(),
        items: items.to_vec(),
        last_timestamp: 0,
    }
}

pub fn random_sessions(rng: &mut ChaCha8Rng, n_items: usize, n_sessions: usize, max_len: usize) -> Vec<Session> {
    (0..n_sessions)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            let items: Vec<usize> = (0..len).map(|_| rng.random_range(0..n_items)).collect();
            session(&items)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn to_dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn item_counts(sessions: &[Session], n: usize) -> Dense {
    let mut a = vec![vec![0.0; n]; n];
    for s in sessions {
        for t in 1..s.items.len() {
            a[s.items[t - 1]][s.items[t]] += 1.0;
        }
    }
    a
}

pub fn jaccard(sessions: &[Session]) -> Dense {
    let m = sessions.len();
    let sets: Vec<HashSet<usize>> = sessions.iter().map(|s| s.items.iter().copied().collect()).collect();
    let mut w = vec![vec![0.0; m]; m];
    for j in 0..m {
        for k in 0..m {
            if j == k {
                continue;
            }
            let inter = sets[j].intersection(&sets[k]).count();
            let union = sets[j].union(&sets[k]).count();
            if inter > 0 {
                w[j][k] = inter as f64 / union as f64;
            }
        }
    }
    w
}

/// `D̂⁻¹(A + I)`.
pub fn normalize(a: &Dense) -> Dense {
    let n = a.len();
    (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..n).map(|j| a[i][j] + if i == j { 1.0 } else { 0.0 }).collect();
            let deg: f64 = row.iter().sum();
            row.iter().map(|v| v / deg).collect()
        })
        .collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

/// `(1/(L+1)) Σ_l X⁽ˡ⁾` with `X⁽ˡ⁺¹⁾ = Â X⁽ˡ⁾ W_l`.
pub fn conv(adj: &Dense, x0: &Dense, weights: &[Dense]) -> Dense {
    let mut layer = x0.clone();
    let mut total = x0.clone();
    for w in weights {
        layer = matmul(&matmul(adj, &layer), w);
        for (tr, lr) in total.iter_mut().zip(&layer) {
            for (t, l) in tr.iter_mut().zip(lr) {
                *t += l;
            }
        }
    }
    let s = 1.0 / (weights.len() + 1) as f64;
    total.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// 1-based rank of `target` when items are sorted by descending score with
/// ties to the lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&i| scores[i] > scores[target] || (scores[i] == scores[target] && i < target))
        .count()
}

/// Hit rate and MRR at `k` by brute force over score vectors.
pub fn brute_metrics(scores: &[Vec<f64>], targets: &[usize], k: usize) -> (f64, f64) {
    let mut hits = 0.0;
    let mut rr = 0.0;
    for (s, &t) in scores.iter().zip(targets) {
        let r = rank_of(s, t);
        if r <= k {
            hits += 1.0;
            rr += 1.0 / r as f64;
        }
    }
    let n = targets.len() as f64;
    (hits / n, rr / n)
}

pub fn max_abs_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// The small model of the gradient suite: 20 items, d = 8, two layers,
/// K = 3 and 15 sessions, all samples in one batch.
pub struct TinyProblem {
    pub config: TrainConfig,
    pub data: TrainingData,
    pub model: CotrecModel,
    pub store: ParamStore,
}

pub fn tiny_problem(seed: u64) -> TinyProblem {
    let corpus = synth::corpus(
        &SynthConfig {
            n_sessions: 16,
            ..SynthConfig::tiny(seed)
        },
        1.0 / 16.0,
    )
    .unwrap();
    assert_eq!(corpus.train_sessions.len(), 15);
    let config = TrainConfig {
        d: 8,
        layers: 2,
        k: 3,
        seed,
        val_fraction: 0.0,
        // Larger than the default so every term contributes visibly.
        beta: 0.5,
        alpha: 0.5,
        ..TrainConfig::default()
    };
    let data = TrainingData::build(&corpus, &config).unwrap();
    let mut store = ParamStore::new();
    let shape = ModelShape {
        n_items: 20,
        ..data.model_shape(&config)
    };
    let model = CotrecModel::new(shape, &config, &mut store, &mut rng(seed)).unwrap();
    TinyProblem {
        config,
        data,
        model,
        store,
    }
}

impl TinyProblem {
    pub fn batch(&self) -> Vec<&Sample> {
        self.data.samples.iter().collect()
    }

    pub fn plan(&self) -> BatchPlan {
        let mut r = rng(99);
        batch_forward(
            &self.model,
            &self.store,
            &self.data,
            &self.config,
            &self.batch(),
            PlanSource::Mine(&mut r),
        )
        .unwrap()
        .plan
    }

    pub fn loss_at(&self, store: &ParamStore, plan: &BatchPlan) -> f64 {
        let fwd = batch_forward(
            &self.model,
            store,
            &self.data,
            &self.config,
            &self.batch(),
            PlanSource::Fixed(plan),
        )
        .unwrap();
        fwd.value(fwd.total)
    }

    /// Per-parameter relative error between backprop and central differences
    /// of the total loss, with pseudo-labels and perturbations held fixed.
    pub fn gradient_errors(&self, h: f64) -> Vec<(String, f64)> {
        let plan = self.plan();
        let mut analytic = self.store.clone();
        let fwd = batch_forward(
            &self.model,
            &analytic,
            &self.data,
            &self.config,
            &self.batch(),
            PlanSource::Fixed(&plan),
        )
        .unwrap();
        fwd.tape.backward(fwd.total, &mut analytic).unwrap();

        let active = self.model.active_params(self.config.uses_session_view());
        active
            .iter()
            .map(|&id| {
                let p = analytic.get(id);
                let grad = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()));
                let mut probe = self.store.clone();
                let numeric = numeric_gradient(&self.store.value(id).clone(), h, |x| {
                    probe.get_mut(id).value = x.clone();
                    self.loss_at(&probe, &plan)
                });
                (p.name.clone(), relative_error(&grad, &numeric))
            })
            .collect()
    }
}
