//! Pseudo-label mining, the contrastive co-training loss and the adversarial
//! divergence constraint.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{dot, softmax, Tensor};

/// Fraction of top-ranked items that hard negatives are drawn from.
pub const HARD_NEGATIVE_POOL: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Item,
    Session,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Item => "item",
            View::Session => "session",
        }
    }
}

/// A probability distribution over all items.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Item indices ordered by descending probability, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }
}

/// `softmax(E·θ)` over all items.
pub fn score_items(theta: &[f64], embeddings: &Tensor) -> ScoreVector {
    let scores: Vec<f64> = (0..embeddings.rows())
        .map(|i| dot(embeddings.row(i), theta))
        .collect();
    ScoreVector(softmax(&scores))
}

/// Item-view scorer: θ_I against the convolved embeddings `X_I`.
pub fn score_items_itemview(theta_i: &[f64], x_items: &Tensor) -> ScoreVector {
    score_items(theta_i, x_items)
}

/// Session-view scorer: θ_S against the raw embeddings `X⁽⁰⁾`, since the
/// session encoder produces no convolved item embeddings.
pub fn score_items_sessionview(theta_s: &[f64], x0: &Tensor) -> ScoreVector {
    score_items(theta_s, x0)
}

/// Positive and hard-negative pseudo-labels for one session, tagged with the
/// view whose scorer produced them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub source: View,
}

/// The `k` most probable items; ties go to the lower index.
pub fn select_positives(scores: &ScoreVector, k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {k} positives from {} items",
            scores.len()
        )));
    }
    let mut r = scores.ranking();
    r.truncate(k);
    Ok(r)
}

/// Number of top-ranked items negatives are drawn from: the top 10%, widened
/// to `2k` on catalogues too small to hold `k` negatives beside `k` positives.
pub fn hard_negative_pool_size(n_items: usize, k: usize) -> usize {
    let decile = (HARD_NEGATIVE_POOL * n_items as f64).ceil() as usize;
    decile.max(2 * k).min(n_items)
}

/// `k` items sampled uniformly without replacement from the top
/// [`hard_negative_pool_size`] ranked items, excluding `positives`.
pub fn select_hard_negatives<R: Rng + ?Sized>(
    scores: &ScoreVector,
    k: usize,
    positives: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool_size = hard_negative_pool_size(scores.len(), k);
    let pool: Vec<usize> = scores
        .ranking()
        .into_iter()
        .take(pool_size)
        .filter(|i| !positives.contains(i))
        .collect();
    if pool.len() < k {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            k,
        });
    }
    Ok(index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

pub fn mine_pseudo_labels<R: Rng + ?Sized>(
    scores: &ScoreVector,
    k: usize,
    source: View,
    rng: &mut R,
) -> Result<PseudoLabelSet> {
    let pos = select_positives(scores, k)?;
    let neg = select_hard_negatives(scores, k, &pos, rng)?;
    Ok(PseudoLabelSet { pos, neg, source })
}

/// One view's contrastive term for a batch, as a `B×1` column.
///
/// Row `p` is `−log Σ_pos ψ / (Σ_pos ψ + Σ_neg ψ)` with
/// `ψ(x₁, x₂, x₃) = exp(cos(x₁ + x₂, x₃ + x₂) / τ)`, `x₁` the last clicked
/// item, `x₂ = θ_p` and `x₃` a candidate row of `lookup`.
pub fn ssl_loss_rows(
    tape: &mut Tape,
    last_items: NodeId,
    thetas: NodeId,
    lookup: NodeId,
    labels: &[PseudoLabelSet],
    tau: f64,
) -> Result<NodeId> {
    let b = tape.shape(thetas).0;
    if labels.len() != b || tape.shape(last_items) != tape.shape(thetas) {
        return Err(Error::shape("ssl_loss", tape.shape(thetas), (labels.len(), 0)));
    }
    let k = labels.first().map_or(0, |l| l.pos.len());
    if labels.iter().any(|l| l.pos.len() != k || l.neg.len() != k) || k == 0 {
        return Err(Error::InvalidArgument(
            "every pseudo-label set needs the same nonzero number of positives and negatives".into(),
        ));
    }
    let width = 2 * k;
    let mut candidates = Vec::with_capacity(b * width);
    let mut owner = Vec::with_capacity(b * width);
    for (p, l) in labels.iter().enumerate() {
        candidates.extend(l.pos.iter().chain(&l.neg));
        owner.extend(std::iter::repeat_n(p, width));
    }
    let anchor = tape.add(last_items, thetas)?;
    let anchors = tape.gather_rows(anchor, &owner)?;
    let cand = tape.gather_rows(lookup, &candidates)?;
    let ctx = tape.gather_rows(thetas, &owner)?;
    let cand = tape.add(cand, ctx)?;
    let cos = tape.cosine_rows(anchors, cand)?;
    let logits = tape.reshape(cos, b, width)?;
    let logits = tape.scale(logits, 1.0 / tau);
    tape.info_nce(logits, k)
}

/// Single-session contrastive term; see [`ssl_loss_rows`].
pub fn ssl_loss(
    tape: &mut Tape,
    last_item: NodeId,
    theta: NodeId,
    lookup: NodeId,
    labels: &PseudoLabelSet,
    tau: f64,
) -> Result<NodeId> {
    let rows = ssl_loss_rows(tape, last_item, theta, lookup, std::slice::from_ref(labels), tau)?;
    Ok(tape.sum(rows))
}

/// An adversarial perturbation of the item embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
}

/// `Δ = ε·Γ/‖Γ‖_F`; a zero gradient yields a zero perturbation.
pub fn fgsm_perturbation(grad: &Tensor, epsilon: f64) -> Perturbation {
    let norm = grad.frobenius_norm();
    if norm == 0.0 || !norm.is_finite() {
        if epsilon != 0.0 {
            log::warn!("adversarial gradient has norm {norm}; using a zero perturbation");
        }
        return Perturbation {
            delta: Tensor::zeros(grad.rows(), grad.cols()),
        };
    }
    Perturbation {
        delta: grad.scale(epsilon / norm),
    }
}

/// Gradient, with respect to the item embeddings only, of the batch's mean
/// recommendation cross-entropy under `softmax(thetas · itemsᵀ)`.
pub fn adversarial_gradient(items: &Tensor, thetas: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.var(items.clone());
    let th = tape.constant(thetas.clone());
    let xt = tape.transpose(x);
    let scores = tape.matmul(th, xt)?;
    let probs = tape.softmax_rows(scores);
    let rows = tape.bce_one_hot(probs, targets)?;
    let loss = tape.mean(rows);
    let grads = tape.gradients(loss)?;
    Ok(grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(items.rows(), items.cols())))
}

/// `KL(Prob_I(X) ‖ Prob_S(X + Δᴵ)) + KL(Prob_S(X) ‖ Prob_I(X + Δˢ))`, each
/// averaged over the batch. `Prob_V(M) = softmax(θ_V · Mᵀ)` row-wise. The
/// perturbations are constants.
pub fn divergence_loss(
    tape: &mut Tape,
    items: NodeId,
    theta_i: NodeId,
    theta_s: NodeId,
    delta_i: &Perturbation,
    delta_s: &Perturbation,
) -> Result<NodeId> {
    let di = tape.constant(delta_i.delta.clone());
    let ds = tape.constant(delta_s.delta.clone());
    let x_plus_di = tape.add(items, di)?;
    let x_plus_ds = tape.add(items, ds)?;

    let probs = |tape: &mut Tape, theta: NodeId, m: NodeId| -> Result<NodeId> {
        let mt = tape.transpose(m);
        let s = tape.matmul(theta, mt)?;
        Ok(tape.softmax_rows(s))
    };
    let p_i = probs(tape, theta_i, items)?;
    let q_s = probs(tape, theta_s, x_plus_di)?;
    let p_s = probs(tape, theta_s, items)?;
    let q_i = probs(tape, theta_i, x_plus_ds)?;
    let kl_a = tape.kl_div_rows(p_i, q_s)?;
    let kl_b = tape.kl_div_rows(p_s, q_i)?;
    let kl_a = tape.mean(kl_a);
    let kl_b = tape.mean(kl_b);
    tape.add(kl_a, kl_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_embeddings_score_uniformly() {
        let x = Tensor::full(4, 3, 0.7);
        let s = score_items_itemview(&[1.0, -2.0, 0.5], &x);
        assert!(s.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = score_items_sessionview(&[0.0, 0.0, 0.0], &Tensor::identity(3));
        assert!(s.probs().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn positives_are_top_k() {
        let s = ScoreVector(vec![0.1, 0.5, 0.4]);
        assert_eq!(select_positives(&s, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_positives(&s, 3).unwrap().len(), 3);
        assert!(select_positives(&s, 4).is_err());
        let tie = ScoreVector(vec![0.25; 4]);
        assert_eq!(select_positives(&tie, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn negatives_come_from_top_decile() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<f64> = (0..100).map(|i| (100 - i) as f64).collect();
        let s = ScoreVector(softmax(&probs));
        let pos = select_positives(&s, 5).unwrap();
        let neg = select_hard_negatives(&s, 5, &pos, &mut rng).unwrap();
        assert_eq!(neg.len(), 5);
        assert!(neg.iter().all(|&n| n < 10 && !pos.contains(&n)));
        let mut sorted = neg.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
    }

    #[test]
    fn exact_pool_is_returned_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs: Vec<f64> = (0..100).map(|i| -(i as f64)).collect();
        let s = ScoreVector(softmax(&probs));
        let pos = select_positives(&s, 5).unwrap();
        let mut neg = select_hard_negatives(&s, 5, &pos, &mut rng).unwrap();
        neg.sort();
        assert_eq!(neg, vec![5, 6, 7, 8, 9]);

        let s = ScoreVector(vec![0.5, 0.3, 0.2]);
        assert!(matches!(
            select_hard_negatives(&s, 2, &[0, 1], &mut rng),
            Err(Error::PoolTooSmall { pool: 1, k: 2 })
        ));
    }

    #[test]
    fn pool_widens_only_for_tiny_catalogues() {
        assert_eq!(hard_negative_pool_size(100, 5), 10);
        assert_eq!(hard_negative_pool_size(500, 10), 50);
        assert_eq!(hard_negative_pool_size(20, 3), 6);
        assert_eq!(hard_negative_pool_size(3, 2), 3);
    }

    #[test]
    fn fgsm_scales_to_epsilon() {
        let g = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let p = fgsm_perturbation(&g, 0.5);
        assert_eq!(p.delta, g.scale(0.1));
        assert!((p.delta.frobenius_norm() - 0.5).abs() < 1e-15);
        assert_eq!(fgsm_perturbation(&g, 0.0).delta, Tensor::zeros(2, 2));
        assert_eq!(
            fgsm_perturbation(&Tensor::zeros(2, 2), 0.5).delta,
            Tensor::zeros(2, 2)
        );
    }

    #[test]
    fn divergence_vanishes_for_shared_theta() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6]]).unwrap());
        let th = tape.var(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let zero = Perturbation {
            delta: Tensor::zeros(3, 2),
        };
        let l = divergence_loss(&mut tape, x, th, th, &zero, &zero).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }
}
