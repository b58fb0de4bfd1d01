//! The training loop, batch objective, checkpointing and inference.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{sequence_split, Sample, Session, SessionCorpus};
use crate::cotrain::{
    adversarial_gradient, divergence_loss, fgsm_perturbation, mine_pseudo_labels, ssl_loss_rows,
    Perturbation, PseudoLabelSet, ScoreVector, View,
};
use crate::error::{Error, Result};
use crate::eval::{length_split_eval, metrics, top_k, EvalResult, SHORT_SESSION_MAX};
use crate::graph::{build_item_graph, build_session_graph, normalize, sparsify_session_graph};
use crate::model::{graph_conv, init_session_embeddings, session_average_matrix, CotrecModel, ModelShape};
use crate::optim::Adam;
use crate::param::ParamStore;
use crate::sparse::SparseMatrix;
use crate::tape::{NodeId, Tape};
use crate::tensor::{softmax, Tensor};

/// A batch loss above this is treated as divergence.
pub const LOSS_CEILING: f64 = 1e6;

/// K used to pick the best epoch on the validation split: highest P@K, ties
/// broken by MRR@K.
pub const SELECTION_K: usize = 20;

const EVAL_CHUNK: usize = 256;

/// Splits the training sessions by time into the sessions the views are
/// built from and the latest `val_fraction` held out for model selection.
pub fn holdout(corpus: &SessionCorpus, val_fraction: f64) -> Result<(Vec<Session>, Vec<Session>)> {
    let n = corpus.train_sessions.len();
    let n_val = (val_fraction * n as f64).floor() as usize;
    if n_val >= n {
        return Err(Error::EmptyCorpus(
            "validation hold-out leaves no sessions to fit".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| corpus.train_sessions[i].last_timestamp);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.train_sessions[i].clone()).collect();
    let (fit, val) = order.split_at(n - n_val);
    Ok((pick(fit), pick(val)))
}

/// Graphs and samples built once from the fitting sessions.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub n_items: usize,
    pub fit_sessions: Vec<Session>,
    /// `D̂⁻¹(A+I)` of the item graph.
    pub item_adj: Arc<SparseMatrix>,
    /// `D̂⁻¹(A+I)` of the sparsified session graph.
    pub session_adj: Arc<SparseMatrix>,
    pub session_avg: Arc<SparseMatrix>,
    /// Training samples; `session` indexes `fit_sessions`.
    pub samples: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub max_len: usize,
}

impl TrainingData {
    /// Holds out the latest `val_fraction` of training sessions for model
    /// selection and builds both views from the rest.
    pub fn build(corpus: &SessionCorpus, config: &TrainConfig) -> Result<Self> {
        let (fit_sessions, held_out) = holdout(corpus, config.val_fraction)?;
        let mut samples = Vec::new();
        for (row, s) in fit_sessions.iter().enumerate() {
            for (prefix, label) in sequence_split(&s.items)? {
                samples.push(Sample {
                    prefix,
                    label,
                    session: row,
                });
            }
        }
        if samples.is_empty() {
            return Err(Error::EmptyCorpus("no training samples".into()));
        }
        let mut validation = Vec::new();
        for (i, s) in held_out.iter().enumerate() {
            for (prefix, label) in sequence_split(&s.items)? {
                validation.push(Sample {
                    prefix,
                    label,
                    session: i,
                });
            }
        }
        Self::from_parts(corpus.n_items(), fit_sessions, samples, validation, config)
    }

    /// Builds the views over `fit_sessions` without any hold-out.
    pub fn from_parts(
        n_items: usize,
        fit_sessions: Vec<Session>,
        samples: Vec<Sample>,
        validation: Vec<Sample>,
        config: &TrainConfig,
    ) -> Result<Self> {
        let item_graph = build_item_graph(&fit_sessions, n_items)?;
        let item_adj = Arc::new(normalize(&item_graph)?.normalized);
        let session_graph = sparsify_session_graph(&build_session_graph(&fit_sessions), config.keep_top)?;
        let session_adj = Arc::new(normalize(&session_graph)?.normalized);
        let session_avg = Arc::new(session_average_matrix(&fit_sessions, n_items)?);
        let max_len = samples.iter().map(|s| s.prefix.len()).max().unwrap_or(1);
        Ok(TrainingData {
            n_items,
            fit_sessions,
            item_adj,
            session_adj,
            session_avg,
            samples,
            validation,
            max_len,
        })
    }

    pub fn model_shape(&self, config: &TrainConfig) -> ModelShape {
        ModelShape {
            n_items: self.n_items,
            d: config.d,
            layers: config.layers,
            max_len: self.max_len,
        }
    }
}

/// Quantities held fixed while differentiating one batch: both views'
/// pseudo-labels and both adversarial perturbations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchPlan {
    /// Labels consumed by the item-view term (mined by the session view).
    pub item_view_labels: Vec<PseudoLabelSet>,
    /// Labels consumed by the session-view term (mined by the item view).
    pub session_view_labels: Vec<PseudoLabelSet>,
    pub delta_item: Option<Perturbation>,
    pub delta_session: Option<Perturbation>,
}

/// How a forward pass obtains its [`BatchPlan`].
pub enum PlanSource<'a> {
    Mine(&'a mut ChaCha8Rng),
    Fixed(&'a BatchPlan),
}

/// Loss nodes of one batch on its tape.
#[derive(Debug)]
pub struct BatchForward {
    pub tape: Tape,
    pub total: NodeId,
    pub l_r: NodeId,
    pub l_ssl: Option<NodeId>,
    pub l_diff: Option<NodeId>,
    pub plan: BatchPlan,
}

impl BatchForward {
    pub fn value(&self, node: NodeId) -> f64 {
        self.tape.value(node).item()
    }

    pub fn losses(&self) -> LossValues {
        LossValues {
            total: self.value(self.total),
            l_r: self.value(self.l_r),
            l_ssl: self.l_ssl.map_or(0.0, |n| self.value(n)),
            l_diff: self.l_diff.map_or(0.0, |n| self.value(n)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub l_r: f64,
    pub l_ssl: f64,
    pub l_diff: f64,
}

fn row_scores(t: &Tensor, r: usize) -> ScoreVector {
    ScoreVector(t.row(r).to_vec())
}

/// Builds `L_r + β·L_ssl + α·L_diff` for the samples in `batch`.
pub fn batch_forward(
    model: &CotrecModel,
    store: &ParamStore,
    data: &TrainingData,
    config: &TrainConfig,
    batch: &[&Sample],
    plan: PlanSource<'_>,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, store);
    let x0 = leaves.item_embedding;
    let x_item = graph_conv(&mut tape, x0, &data.item_adj, &leaves.item_conv)?;

    let prefixes: Vec<&[usize]> = batch.iter().map(|s| s.prefix.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let last: Vec<usize> = batch
        .iter()
        .map(|s| *s.prefix.last().expect("prefixes are non-empty"))
        .collect();
    let rows: Vec<usize> = batch.iter().map(|s| s.session).collect();

    let theta_i = model.encode_batch(&mut tape, &leaves, x_item, &prefixes)?;
    let x_item_t = tape.transpose(x_item);
    let scores = tape.matmul(theta_i, x_item_t)?;
    let probs = tape.softmax_rows(scores);
    let rec = tape.bce_one_hot(probs, &targets)?;
    let l_r = tape.mean(rec);

    let use_ssl = !config.no_ssl;
    let use_diff = !config.no_divergence;
    let theta_s = if use_ssl || use_diff {
        let init = init_session_embeddings(&mut tape, x0, &data.session_avg)?;
        let all = graph_conv(&mut tape, init, &data.session_adj, &leaves.session_conv)?;
        Some(tape.gather_rows(all, &rows)?)
    } else {
        None
    };

    let plan = match plan {
        PlanSource::Fixed(p) => p.clone(),
        PlanSource::Mine(rng) => {
            let mut plan = BatchPlan::default();
            if use_ssl {
                let th_s = tape.value(theta_s.expect("session view is built"));
                let session_probs = th_s.matmul_t(tape.value(x0))?;
                let item_probs = tape.value(probs);
                for p in 0..batch.len() {
                    plan.session_view_labels.push(mine_pseudo_labels(
                        &row_scores(item_probs, p),
                        config.k,
                        View::Item,
                        rng,
                    )?);
                    let sv = ScoreVector(softmax(session_probs.row(p)));
                    plan.item_view_labels
                        .push(mine_pseudo_labels(&sv, config.k, View::Session, rng)?);
                }
            }
            if use_diff {
                let eps = config.epsilon();
                let xi = tape.value(x_item);
                let gi = adversarial_gradient(xi, tape.value(theta_i), &targets)?;
                let gs = adversarial_gradient(
                    xi,
                    tape.value(theta_s.expect("session view is built")),
                    &targets,
                )?;
                plan.delta_item = Some(fgsm_perturbation(&gi, eps));
                plan.delta_session = Some(fgsm_perturbation(&gs, eps));
            }
            plan
        }
    };

    let mut total = l_r;
    let l_ssl = if use_ssl {
        let th_s = theta_s.expect("session view is built");
        let last_i = tape.gather_rows(x_item, &last)?;
        let term_i = ssl_loss_rows(&mut tape, last_i, theta_i, x_item, &plan.item_view_labels, config.tau)?;
        let last_s = tape.gather_rows(x0, &last)?;
        let term_s = ssl_loss_rows(&mut tape, last_s, th_s, x0, &plan.session_view_labels, config.tau)?;
        let term_i = tape.mean(term_i);
        let term_s = tape.mean(term_s);
        let l = tape.add(term_i, term_s)?;
        let weighted = tape.scale(l, config.beta);
        total = tape.add(total, weighted)?;
        Some(l)
    } else {
        None
    };
    let l_diff = if use_diff {
        let (di, ds) = match (&plan.delta_item, &plan.delta_session) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidArgument(
                    "batch plan lacks adversarial perturbations".into(),
                ))
            }
        };
        let th_s = theta_s.expect("session view is built");
        let l = divergence_loss(&mut tape, x_item, theta_i, th_s, di, ds)?;
        let weighted = tape.scale(l, config.alpha);
        total = tape.add(total, weighted)?;
        Some(l)
    } else {
        None
    };

    Ok(BatchForward {
        tape,
        total,
        l_r,
        l_ssl,
        l_diff,
        plan,
    })
}

/// One row of the per-epoch report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_r: f64,
    pub l_ssl: f64,
    pub l_diff: f64,
    pub seconds: f64,
    /// Training samples visited; constant across epochs.
    pub samples: usize,
    /// Validation P@20, when a validation split exists.
    pub val_p20: Option<f64>,
    pub val_mrr20: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Per-sample record of which view produced which labels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PseudoLabelRecord<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub session: &'a str,
    pub consumer: &'static str,
    pub source: &'static str,
    pub pos: &'a [usize],
    pub neg: &'a [usize],
}

#[cfg(not(target_arch = "wasm32"))]
struct Stopwatch(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }

    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[cfg(target_arch = "wasm32")]
struct Stopwatch;

#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    fn start() -> Self {
        Stopwatch
    }

    fn seconds(&self) -> f64 {
        0.0
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_stream(epoch: usize) -> u64 {
    (epoch as u64 + 1) << 32
}

/// Result of [`Trainer::run`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: CotrecModel,
    /// Parameters and optimizer state after the last completed batch.
    pub last: ParamStore,
    /// Parameters of the epoch with the best validation score, or of the last
    /// epoch when there is no validation split.
    pub best: ParamStore,
    pub best_epoch: Option<usize>,
    pub report: TrainReport,
    /// Set when training stopped on a non-finite or exploding loss.
    pub aborted: Option<Error>,
    pub item_adj: Arc<SparseMatrix>,
}

impl TrainOutcome {
    pub fn predictor(&self) -> Result<Predictor> {
        Predictor::new(self.model.clone(), &self.best, &self.item_adj)
    }
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: TrainingData,
    model: CotrecModel,
    store: ParamStore,
    adam: Adam,
    next_epoch: usize,
    best: Option<(usize, (f64, f64), ParamStore)>,
    report: TrainReport,
    label_sink: Option<Box<dyn Write + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &SessionCorpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = TrainingData::build(corpus, &config)?;
        Self::with_data(data, config)
    }

    pub fn with_data(data: TrainingData, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(config.seed, 0);
        let model = CotrecModel::new(data.model_shape(&config), &config, &mut store, &mut rng)?;
        let adam = Adam {
            lr: config.lr,
            weight_decay: config.l2,
            ..Adam::default()
        };
        Ok(Trainer {
            config,
            data,
            model,
            store,
            adam,
            next_epoch: 0,
            best: None,
            report: TrainReport::default(),
            label_sink: None,
        })
    }

    pub fn model(&self) -> &CotrecModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Index of the epoch the next [`Trainer::run_epoch`] call trains.
    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Streams every mined pseudo-label set as NDJSON.
    pub fn set_label_sink(&mut self, sink: Box<dyn Write + 'a>) {
        self.label_sink = Some(sink);
    }

    /// Parameters, optimizer state and progress, for [`Trainer::resume`].
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params_with_state(&self.store);
        self.write_meta(&mut ck);
        ck.insert("meta.next_epoch", Tensor::scalar(self.next_epoch as f64));
        if let Some((epoch, score, best)) = &self.best {
            ck.insert("meta.best_epoch", Tensor::scalar(*epoch as f64));
            ck.insert("meta.best_p20", Tensor::scalar(score.0));
            ck.insert("meta.best_mrr20", Tensor::scalar(score.1));
            for p in best.iter() {
                ck.insert(format!("best/{}", p.name), p.value.clone());
            }
        }
        ck
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        write_model_meta(ck, &self.model, self.config.val_fraction);
    }

    /// The best parameters so far in `model.ckpt` form.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let store = self.best.as_ref().map_or(&self.store, |b| &b.2);
        model_checkpoint(&self.model, store, self.config.val_fraction)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_into(&mut self.store)?;
        self.next_epoch = ck
            .scalar("meta.next_epoch")
            .ok_or_else(|| Error::Format("checkpoint has no training progress".into()))?
            as usize;
        self.best = match (
            ck.scalar("meta.best_epoch"),
            ck.scalar("meta.best_p20"),
            ck.scalar("meta.best_mrr20"),
        ) {
            (Some(epoch), Some(p), Some(mrr)) => {
                let mut best = self.store.clone();
                for id in best.ids().collect::<Vec<_>>() {
                    let name = format!("best/{}", best.get(id).name);
                    let t = ck
                        .get(&name)
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
                    best.get_mut(id).value = t.clone();
                }
                Some((epoch as usize, (p, mrr), best))
            }
            _ => None,
        };
        Ok(())
    }

    /// Loss of one batch and the update it implies.
    fn step(&mut self, epoch: usize, b: usize, idx: &[usize]) -> Result<LossValues> {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.data.samples[i]).collect();
        let mut rng = rng_for(self.config.seed, epoch_stream(epoch) | (b as u64 + 1));
        let fwd = batch_forward(
            &self.model,
            &self.store,
            &self.data,
            &self.config,
            &batch,
            PlanSource::Mine(&mut rng),
        )?;
        let losses = fwd.losses();
        if !losses.total.is_finite() || losses.total > LOSS_CEILING {
            return Err(Error::NonFinite {
                epoch,
                batch: b,
                loss: losses.total,
            });
        }
        if let Some(sink) = self.label_sink.as_mut() {
            write_labels(sink, &self.data, epoch, b, &batch, &fwd.plan)?;
        }
        fwd.tape.backward(fwd.total, &mut self.store)?;
        let active = self.model.active_params(self.config.uses_session_view());
        self.adam.step(&mut self.store, &active)?;
        Ok(losses)
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        let clock = Stopwatch::start();
        let mut order: Vec<usize> = (0..self.data.samples.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, epoch_stream(epoch)));
        let mut sums = LossValues::default();
        let mut n = 0usize;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let l = self.step(epoch, b, idx)?;
            seen += idx.len();
            sums.total += l.total;
            sums.l_r += l.l_r;
            sums.l_ssl += l.l_ssl;
            sums.l_diff += l.l_diff;
            n += 1;
        }
        let n = n as f64;
        let val = if self.data.validation.is_empty() {
            None
        } else {
            let predictor = Predictor::new(self.model.clone(), &self.store, &self.data.item_adj)?;
            let k = SELECTION_K.min(self.data.n_items);
            let m = predictor.evaluate(&self.data.validation, &[k])?;
            Some((m.p_at[&k], m.mrr_at[&k]))
        };
        let record = EpochRecord {
            epoch,
            l_total: sums.total / n,
            l_r: sums.l_r / n,
            l_ssl: sums.l_ssl / n,
            l_diff: sums.l_diff / n,
            seconds: clock.seconds(),
            samples: seen,
            val_p20: val.map(|v| v.0),
            val_mrr20: val.map(|v| v.1),
        };
        let improved = match (&self.best, val) {
            (Some((_, best, _)), Some(score)) => score > *best,
            _ => true,
        };
        if improved {
            self.best = Some((epoch, val.unwrap_or((f64::NAN, f64::NAN)), self.store.clone()));
        }
        self.report.epochs.push(record.clone());
        self.next_epoch += 1;
        log::info!(
            "epoch {epoch}: loss {:.5} (rec {:.5}, ssl {:.5}, diff {:.5}){}",
            record.l_total,
            record.l_r,
            record.l_ssl,
            record.l_diff,
            val.map_or(String::new(), |v| format!(", val P@20 {:.4} MRR@20 {:.4}", v.0, v.1))
        );
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete. A non-finite loss
    /// stops training and is reported in [`TrainOutcome::aborted`].
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut aborted = None;
        while self.next_epoch < self.config.epochs {
            match self.run_epoch() {
                Ok(_) => {}
                Err(e @ Error::NonFinite { .. }) => {
                    log::error!("{e}");
                    aborted = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        self.store.zero_grads();
        let (best_epoch, best) = match self.best.take() {
            Some((epoch, _, store)) => (Some(epoch), store),
            None => (None, self.store.clone()),
        };
        Ok(TrainOutcome {
            model: self.model,
            last: self.store,
            best,
            best_epoch,
            report: self.report,
            aborted,
            item_adj: self.data.item_adj,
        })
    }
}

fn write_labels(
    sink: &mut Box<dyn Write + '_>,
    data: &TrainingData,
    epoch: usize,
    batch: usize,
    samples: &[&Sample],
    plan: &BatchPlan,
) -> Result<()> {
    for (p, s) in samples.iter().enumerate() {
        let id = &data.fit_sessions[s.session].original_id;
        for (consumer, labels) in [
            (View::Item, &plan.item_view_labels),
            (View::Session, &plan.session_view_labels),
        ] {
            if let Some(l) = labels.get(p) {
                let rec = PseudoLabelRecord {
                    epoch,
                    batch,
                    session: id,
                    consumer: consumer.name(),
                    source: l.source.name(),
                    pos: &l.pos,
                    neg: &l.neg,
                };
                let line = serde_json::to_string(&rec).expect("records serialize");
                writeln!(sink, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Trains with the given configuration.
pub fn train(corpus: &SessionCorpus, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(corpus, config.clone())?.run()
}

/// Inference with frozen parameters.
#[derive(Clone, Debug)]
pub struct Predictor {
    model: CotrecModel,
    store: ParamStore,
    items: Tensor,
}

impl Predictor {
    /// Precomputes the convolved item embeddings `X_I`.
    pub fn new(model: CotrecModel, store: &ParamStore, item_adj: &Arc<SparseMatrix>) -> Result<Self> {
        let mut tape = Tape::new();
        let x0 = tape.constant(store.value(model.params.item_embedding).clone());
        let weights: Vec<NodeId> = model
            .params
            .item_conv
            .iter()
            .map(|&id| tape.constant(store.value(id).clone()))
            .collect();
        let xi = graph_conv(&mut tape, x0, item_adj, &weights)?;
        let items = tape.value(xi).clone();
        Ok(Predictor {
            model,
            store: store.clone(),
            items,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn item_embeddings(&self) -> &Tensor {
        &self.items
    }

    /// Session representations `θ`, one row per prefix.
    pub fn encode(&self, prefixes: &[&[usize]]) -> Result<Tensor> {
        if let Some(&bad) = prefixes.iter().flat_map(|p| p.iter()).find(|&&i| i >= self.n_items()) {
            return Err(Error::IndexOutOfRange {
                what: "prefix item",
                index: bad,
                size: self.n_items(),
            });
        }
        let mut tape = Tape::new();
        let leaves = self.model.leaves(&mut tape, &self.store);
        let items = tape.constant(self.items.clone());
        let thetas = self.model.encode_batch(&mut tape, &leaves, items, prefixes)?;
        Ok(tape.value(thetas).clone())
    }

    /// Scores `θ·x_i` for every item.
    pub fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let theta = self.encode(&[prefix])?;
        Ok(theta.matmul_t(&self.items)?.row(0).to_vec())
    }

    pub fn recommend(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        top_k(&self.scores(prefix)?, k)
    }

    /// Hit rate and MRR at each K, with a short/long prefix breakdown.
    pub fn evaluate(&self, samples: &[Sample], ks: &[usize]) -> Result<EvalResult> {
        let max_k = ks.iter().copied().max().unwrap_or(0);
        let mut ranked = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let prefixes: Vec<&[usize]> = chunk.iter().map(|s| s.prefix.as_slice()).collect();
            let scores = self.encode(&prefixes)?.matmul_t(&self.items)?;
            for r in 0..chunk.len() {
                ranked.push(top_k(scores.row(r), max_k)?);
            }
        }
        let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let lens: Vec<usize> = samples.iter().map(|s| s.prefix.len()).collect();
        let mut result = metrics(&ranked, &targets, ks)?;
        result.breakdowns = Some(length_split_eval(&lens, &ranked, &targets, SHORT_SESSION_MAX, ks)?);
        Ok(result)
    }

    /// Parameter values plus the flags needed to rebuild the model.
    pub fn checkpoint(&self, val_fraction: f64) -> Checkpoint {
        model_checkpoint(&self.model, &self.store, val_fraction)
    }
}

fn write_model_meta(ck: &mut Checkpoint, model: &CotrecModel, val_fraction: f64) {
    ck.insert("meta.no_position", Tensor::scalar(model.no_position as u8 as f64));
    ck.insert("meta.no_attention", Tensor::scalar(model.no_attention as u8 as f64));
    ck.insert("meta.val_fraction", Tensor::scalar(val_fraction));
}

/// Parameter values and architecture flags, as written to `model.ckpt`.
/// `val_fraction` records which sessions the item view was built from.
pub fn model_checkpoint(model: &CotrecModel, store: &ParamStore, val_fraction: f64) -> Checkpoint {
    let mut ck = Checkpoint::from_params(store);
    write_model_meta(&mut ck, model, val_fraction);
    ck
}

/// Rebuilds the predictor saved by [`model_checkpoint`] for `corpus`.
pub fn load_predictor(ck: &Checkpoint, corpus: &SessionCorpus) -> Result<Predictor> {
    let (model, store) = model_from_checkpoint(ck)?;
    if model.shape.n_items != corpus.n_items() {
        return Err(Error::Format(format!(
            "checkpoint has {} items but the corpus has {}",
            model.shape.n_items,
            corpus.n_items()
        )));
    }
    let val_fraction = ck.scalar("meta.val_fraction").unwrap_or(0.0);
    let (fit, _) = holdout(corpus, val_fraction)?;
    let adj = item_adjacency(&fit, corpus.n_items())?;
    Predictor::new(model, &store, &adj)
}

/// Rebuilds a model and its parameters from a checkpoint; the shape is read
/// off the stored tensors.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(CotrecModel, ParamStore)> {
    let need = |name: &str| {
        ck.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    };
    let emb = need("item_embedding")?;
    let layers = (0..)
        .take_while(|l| ck.get(&format!("item_conv.{l}")).is_some())
        .count();
    let shape = ModelShape {
        n_items: emb.rows(),
        d: emb.cols(),
        layers,
        max_len: need("position")?.rows(),
    };
    let config = TrainConfig {
        d: shape.d,
        layers,
        no_position: ck.scalar("meta.no_position").unwrap_or(0.0) != 0.0,
        no_attention: ck.scalar("meta.no_attention").unwrap_or(0.0) != 0.0,
        ..TrainConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = rng_for(0, 0);
    let model = CotrecModel::new(shape, &config, &mut store, &mut rng)?;
    ck.restore_into(&mut store)?;
    Ok((model, store))
}

/// The item view's normalized adjacency for the given sessions.
pub fn item_adjacency(sessions: &[Session], n_items: usize) -> Result<Arc<SparseMatrix>> {
    Ok(Arc::new(normalize(&build_item_graph(sessions, n_items)?)?.normalized))
}

/// Every sample ranked by training popularity.
pub fn evaluate_popularity(
    train: &[Session],
    n_items: usize,
    samples: &[Sample],
    ks: &[usize],
) -> Result<EvalResult> {
    let ranking = crate::eval::popularity_ranking(train, n_items);
    let max_k = ks.iter().copied().max().unwrap_or(0).min(n_items);
    let ranked = vec![ranking[..max_k].to_vec(); samples.len()];
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.prefix.len()).collect();
    let mut result = metrics(&ranked, &targets, ks)?;
    result.breakdowns = Some(length_split_eval(&lens, &ranked, &targets, SHORT_SESSION_MAX, ks)?);
    Ok(result)
}
