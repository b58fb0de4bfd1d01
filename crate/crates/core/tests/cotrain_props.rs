mod common;

use common::{random_tensor, rank_of, rng};
use cotrec::cotrain::{
    divergence_loss, hard_negative_pool_size, mine_pseudo_labels, select_hard_negatives, select_positives, ssl_loss_rows, Perturbation,
    PseudoLabelSet, ScoreVector, View,
};
use cotrec::synth::{self, SynthConfig};
use cotrec::tape::Tape;
use cotrec::tensor::Tensor;
use cotrec::{TrainConfig, Trainer};
use proptest::prelude::*;
use rand::Rng;

fn ssl_value(last: &Tensor, theta: &Tensor, lookup: &Tensor, labels: &[PseudoLabelSet], tau: f64) -> Tensor {
    let mut tape = Tape::new();
    let l = tape.constant(last.clone());
    let t = tape.constant(theta.clone());
    let x = tape.constant(lookup.clone());
    let rows = ssl_loss_rows(&mut tape, l, t, x, labels, tau).unwrap();
    tape.value(rows).clone()
}

proptest! {
    #[test]
    fn negatives_are_disjoint_from_positives_and_in_pool(
        scores in prop::collection::vec(0.0f64..1.0, 100..300),
        k in 1usize..10,
        seed in any::<u64>(),
    ) {
        let s = ScoreVector(scores);
        let pos = select_positives(&s, k).unwrap();
        let neg = select_hard_negatives(&s, k, &pos, &mut rng(seed)).unwrap();
        let pool = hard_negative_pool_size(s.len(), k);
        if 2 * k <= s.len() / 10 {
            prop_assert_eq!(pool, (0.1 * s.len() as f64).ceil() as usize);
        }
        let worst_pos = pos.iter().map(|&i| rank_of(s.probs(), i)).max().unwrap();
        prop_assert_eq!(worst_pos, k);
        for &n in &neg {
            prop_assert!(!pos.contains(&n));
            let r = rank_of(s.probs(), n);
            prop_assert!(r > k && r <= pool);
        }
    }

    #[test]
    fn ssl_loss_ignores_uniform_scaling(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let mut g = rng(seed);
        let (n, b, d, k) = (12, 3, 4, 2);
        let last = random_tensor(&mut g, b, d, 1.0);
        let theta = random_tensor(&mut g, b, d, 1.0);
        let lookup = random_tensor(&mut g, n, d, 1.0);
        let labels: Vec<PseudoLabelSet> = (0..b)
            .map(|_| {
                let s = ScoreVector((0..n).map(|_| g.random()).collect());
                PseudoLabelSet {
                    pos: select_positives(&s, k).unwrap(),
                    neg: (0..k).map(|_| g.random_range(0..n)).collect(),
                    source: View::Item,
                }
            })
            .collect();
        let a = ssl_value(&last, &theta, &lookup, &labels, 0.2);
        let scaled = ssl_value(&last.scale(lambda), &theta.scale(lambda), &lookup.scale(lambda), &labels, 0.2);
        for (x, y) in a.data().iter().zip(scaled.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn divergence_is_nonnegative(seed in any::<u64>(), eps in 0.0f64..2.0) {
        let mut g = rng(seed);
        let (n, b, d) = (g.random_range(2..20), g.random_range(1..5), g.random_range(1..6));
        let x = random_tensor(&mut g, n, d, 1.0);
        let delta = |g: &mut rand_chacha::ChaCha8Rng| {
            let t = random_tensor(g, n, d, 1.0);
            let norm = t.frobenius_norm().max(1e-12);
            Perturbation { delta: t.scale(eps / norm) }
        };
        let (di, ds) = (delta(&mut g), delta(&mut g));
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let ti = tape.constant(random_tensor(&mut g, b, d, 2.0));
        let ts = tape.constant(random_tensor(&mut g, b, d, 2.0));
        let l = divergence_loss(&mut tape, xn, ti, ts, &di, &ds).unwrap();
        prop_assert!(tape.value(l).item() >= -1e-12);
    }
}

#[test]
fn mined_labels_carry_their_source_view() {
    let s = ScoreVector((0..50).map(|i| i as f64).collect());
    let l = mine_pseudo_labels(&s, 3, View::Session, &mut rng(0)).unwrap();
    assert_eq!(l.source, View::Session);
    assert_eq!(l.pos, vec![49, 48, 47]);
}

#[test]
fn label_dump_shows_cross_view_exchange() {
    let corpus = synth::corpus(
        &SynthConfig {
            n_items: 100,
            n_sessions: 60,
            ..SynthConfig::default()
        },
        0.1,
    )
    .unwrap();
    let config = TrainConfig {
        d: 8,
        epochs: 1,
        k: 3,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let mut dump = Vec::new();
    let mut trainer = Trainer::new(&corpus, config).unwrap();
    trainer.set_label_sink(Box::new(&mut dump));
    trainer.run().unwrap();

    let lines: Vec<serde_json::Value> = std::str::from_utf8(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let n_samples: usize = corpus.train_sessions.iter().map(|s| s.items.len() - 1).sum();
    assert_eq!(lines.len(), 2 * n_samples);
    for l in &lines {
        assert_ne!(l["consumer"], l["source"]);
        assert_eq!(l["pos"].as_array().unwrap().len(), 3);
        assert_eq!(l["neg"].as_array().unwrap().len(), 3);
    }
}
