mod common;

use common::*;
use mlkg::corpus::CorpusBundle;
use mlkg::graph::MultiLkg;
use mlkg::retrieval::{recall_at_k, top_k};
use mlkg::synth::{gen_two_hop, relation_chains};
use proptest::prelude::*;

/// `p` documents each stating `head_i r bridge`, `q` documents each stating
/// `bridge r tail_j`.
fn hub(p: usize, q: usize) -> CorpusBundle {
    let mut b = CorpusBundle::default();
    for i in 0..p {
        let head = word(10 + i);
        push_document(&mut b, &format!("h{i}"), "", vec![(format!("{head} r hub."), Some((head, "r".into(), "hub".into())))]);
    }
    for j in 0..q {
        let tail = word(100 + j);
        push_document(&mut b, &format!("t{j}"), "", vec![(format!("hub r {tail}."), Some(("hub".into(), "r".into(), tail)))]);
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hub_chain_count_is_product(p in 1usize..6, q in 1usize..6, seed in any::<u64>()) {
        let g = MultiLkg::build(&hub(p, q)).unwrap();
        let chains = relation_chains(&g, None, seed);
        prop_assert_eq!(chains.len(), p * q);
        prop_assert_eq!(gen_two_hop(&g, None, seed).len(), 2 * p * q);
        let capped = relation_chains(&g, Some(3), seed);
        prop_assert_eq!(capped.len(), (p * q).min(3));
        prop_assert!(capped.iter().all(|c| chains.contains(c)));
    }

    #[test]
    fn top_k_matches_sort_then_slice(
        scores in proptest::collection::vec(-3i32..3, 1..30),
        k in 1usize..35,
        gold_mask in any::<u32>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("d{:02}", (i * 7) % 31)).collect();
        let mut oracle: Vec<(String, f64)> = ids.iter().cloned().zip(scores.iter().copied()).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(k);
        let got = top_k(&ids, &scores, k).unwrap();
        prop_assert_eq!(&got.ranked, &oracle);

        let gold: Vec<String> = ids.iter().enumerate().filter(|(i, _)| gold_mask >> (i % 32) & 1 == 1).map(|(_, id)| id.clone()).collect();
        if !gold.is_empty() {
            let hits = oracle.iter().filter(|(id, _)| gold.contains(id)).count();
            prop_assert_eq!(recall_at_k(&got, &gold, k).unwrap(), hits as f64 / gold.len() as f64);
        }
    }
}

#[test]
fn zero_k_is_rejected() {
    assert!(top_k(&["a".to_string()], &[1.0], 0).is_err());
}
