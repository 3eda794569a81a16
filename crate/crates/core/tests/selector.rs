use proptest::prelude::*;
use trilevel_core::selector::{compound_counts, keep_count, select_attention, select_tokens, ta_select};
use trilevel_core::{AttentionRecord, SparsityConfig};
use trilevel_tensor::Tensor;

/// Oracle: sort every index by (score desc, index asc), keep the prefix.
fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    out.sort();
    out
}

fn rows_to_record(l: usize, vals: &[f64]) -> AttentionRecord<f64> {
    let mut data = vals.to_vec();
    for r in 0..l {
        let s: f64 = data[r * l..(r + 1) * l].iter().sum();
        data[r * l..(r + 1) * l].iter_mut().for_each(|v| *v /= s);
    }
    AttentionRecord {
        layer: 1,
        probs: Tensor::new(vec![1, l, l], data).unwrap(),
        live_tokens: (0..l).collect(),
    }
}

proptest! {
    #[test]
    fn select_tokens_matches_full_sort(
        scores in proptest::collection::vec(0u8..20, 1..60),
        r in 0.01f64..1.0,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = keep_count(r, scores.len());
        prop_assert_eq!(select_tokens(&scores, r, scores.len()), top_k_oracle(&scores, k));
    }

    #[test]
    fn selection_is_invariant_to_score_order(
        scores in proptest::collection::vec(0.0f64..1.0, 2..40),
        r in 0.05f64..1.0,
        rot in 0usize..40,
    ) {
        let n = scores.len();
        let rot = rot % n;
        let mut rotated = scores.clone();
        rotated.rotate_left(rot);
        let a = select_tokens(&scores, r, n);
        let mut b: Vec<usize> = select_tokens(&rotated, r, n).iter().map(|&p| (p + rot) % n).collect();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn attention_budget_and_membership(
        vals in proptest::collection::vec(0.01f64..1.0, 49),
        r_t in 0.2f64..1.0,
        r_a in 0.05f64..1.0,
    ) {
        let rec = rows_to_record(7, &vals);
        let sp = SparsityConfig { r_t, r_a, prune_layers: vec![2], ..SparsityConfig::default() };
        let m = ta_select(&rec, &sp, 0, true).unwrap();
        let k = keep_count(r_a, m.k_count);
        prop_assert_eq!(m.kept_tokens[0], 0);
        prop_assert_eq!(&m.kept_keys[0], &m.kept_tokens);
        for (slot, keys) in m.kept_keys.iter().enumerate().skip(1) {
            prop_assert_eq!(keys.len(), k + 1);
            prop_assert!(keys.contains(&0) && keys.contains(&m.kept_tokens[slot]));
            prop_assert!(keys.iter().all(|t| m.kept_tokens.contains(t)));
        }
        prop_assert!(m.key_sets().is_ok());
    }

    #[test]
    fn compounding_matches_stepwise_ceiling(n in 1usize..2000, r in 0.01f64..1.0) {
        let mut cur = n;
        let mut expect = Vec::new();
        for _ in 0..3 {
            cur = ((r * cur as f64 - 1e-9).ceil() as usize).clamp(1, cur);
            expect.push(cur);
        }
        prop_assert_eq!(compound_counts(n, r, 3), expect);
    }
}

#[test]
fn per_query_top_keys_against_oracle() {
    let l = 6;
    let vals: Vec<f64> = (0..l * l).map(|i| ((i * 37 + 11) % 23) as f64 + 1.0).collect();
    let rec = rows_to_record(l, &vals);
    let kept = vec![0, 1, 3, 4, 5];
    let keys = select_attention(&rec, &kept, 0.5, true).unwrap();
    let patches = [1usize, 3, 4, 5];
    let k = keep_count(0.5, patches.len());
    for (slot, &q) in kept.iter().enumerate().skip(1) {
        let others: Vec<usize> = patches.iter().copied().filter(|&p| p != q).collect();
        let scores: Vec<f64> = others.iter().map(|&p| rec.probs.data()[q * l + p]).collect();
        let mut expect: Vec<usize> = top_k_oracle(&scores, k - 1).iter().map(|&i| others[i]).collect();
        expect.extend([0, q]);
        expect.sort();
        assert_eq!(keys[slot], expect);
    }
}

#[test]
fn warm_up_drives_token_ratio() {
    let vals: Vec<f64> = (0..25).map(|i| (i % 7) as f64 + 1.0).collect();
    let rec = rows_to_record(5, &vals);
    let sp = SparsityConfig {
        rt_warmup_epochs: 10,
        ..SparsityConfig::tri_level(0.25, vec![2])
    };
    assert_eq!(ta_select(&rec, &sp, 0, true).unwrap().k_count, 4);
    assert_eq!(ta_select(&rec, &sp, 10, true).unwrap().k_count, 1);
}
