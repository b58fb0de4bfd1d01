use cotrec::eval::{metrics, recommend, top_k};
use cotrec::tensor::Tensor;
use proptest::prelude::*;

fn ranked_lists() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<usize>)> {
    (1usize..30).prop_flat_map(|n| {
        prop::collection::vec(
            (Just((0..30).collect::<Vec<usize>>()).prop_shuffle(), 0usize..30),
            n,
        )
        .prop_map(|rows| rows.into_iter().unzip())
    })
}

proptest! {
    #[test]
    fn metrics_grow_with_k_and_mrr_is_bounded((ranked, targets) in ranked_lists()) {
        let ks: Vec<usize> = (1..=30).collect();
        let m = metrics(&ranked, &targets, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(m.p_at[&w[0]] <= m.p_at[&w[1]]);
            prop_assert!(m.mrr_at[&w[0]] <= m.mrr_at[&w[1]]);
        }
        for k in ks {
            prop_assert!(m.mrr_at[&k] <= m.p_at[&k]);
        }
    }

    #[test]
    fn metrics_of_a_union_are_weighted_means(
        (a_ranked, a_targets) in ranked_lists(),
        (b_ranked, b_targets) in ranked_lists(),
        k in 1usize..30,
    ) {
        let a = metrics(&a_ranked, &a_targets, &[k]).unwrap();
        let b = metrics(&b_ranked, &b_targets, &[k]).unwrap();
        let all = metrics(
            &[a_ranked, b_ranked].concat(),
            &[a_targets.clone(), b_targets.clone()].concat(),
            &[k],
        )
        .unwrap();
        let (na, nb) = (a_targets.len() as f64, b_targets.len() as f64);
        let mix = |x: f64, y: f64| (na * x + nb * y) / (na + nb);
        prop_assert!((all.p_at[&k] - mix(a.p_at[&k], b.p_at[&k])).abs() < 1e-12);
        prop_assert!((all.mrr_at[&k] - mix(a.mrr_at[&k], b.mrr_at[&k])).abs() < 1e-12);
    }

    #[test]
    fn recommendations_survive_positive_affine_maps(
        scores in prop::collection::vec(-100i32..100, 2..40),
        a in 1i32..7,
        b in -50i32..50,
        k in 1usize..40,
    ) {
        // Integer-valued scores keep the affine map exact, ties included.
        let k = k.min(scores.len());
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = scores.iter().map(|&v| (a * v + b) as f64).collect();
        prop_assert_eq!(top_k(&s, k).unwrap(), top_k(&t, k).unwrap());

        let items = Tensor::from_vec(s.len(), 1, s.clone()).unwrap();
        prop_assert_eq!(recommend(&[a as f64], &items, k).unwrap(), top_k(&s, k).unwrap());
    }
}
