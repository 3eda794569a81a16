use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trilevel_core::forgetting::{
    attention_statistic, rank_for_removal, record_visit, ExampleStats, ForgettingTracker,
};
use trilevel_core::{AttentionRecord, TiebreakDirection};
use trilevel_tensor::Tensor;

fn recount(seq: &[bool]) -> (u32, u32) {
    let mut forget = 0;
    let mut learn = 0;
    let mut prev = false;
    for &c in seq {
        if prev && !c {
            forget += 1;
        }
        if !prev && c {
            learn += 1;
        }
        prev = c;
    }
    (forget, learn)
}

fn two_pass_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

#[test]
fn random_sequences_match_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let len = rng.random_range(0..=50);
        let seq: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
        let mut s = ExampleStats::new(0);
        for &c in &seq {
            record_visit(&mut s, c, 0.0);
        }
        assert_eq!((s.forget_count, s.learn_count), recount(&seq));
        assert!(s.forget_count <= s.learn_count);
        assert_eq!(s.ever_learned, s.learn_count > 0);
    }
}

#[test]
fn statistic_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (h, l) = (rng.random_range(1..4), rng.random_range(2..12));
        let mut data: Vec<f64> = (0..h * l * l).map(|_| rng.random_range(0.0..1.0)).collect();
        for r in 0..h * l {
            let s: f64 = data[r * l..(r + 1) * l].iter().sum();
            data[r * l..(r + 1) * l].iter_mut().for_each(|v| *v /= s);
        }
        let avg: Vec<f64> = (0..l * l)
            .map(|i| (0..h).map(|k| data[k * l * l + i]).sum::<f64>() / h as f64)
            .collect();
        let rec = AttentionRecord {
            layer: 1,
            probs: Tensor::new(vec![h, l, l], data).unwrap(),
            live_tokens: (0..l).collect(),
        };
        let cls_row = &avg[1..l];
        assert!((attention_statistic(&rec, true) - two_pass_variance(cls_row)).abs() < 1e-10);
        let sums: Vec<f64> = (0..l).map(|j| (0..l).map(|i| avg[i * l + j]).sum()).collect();
        let total: f64 = sums.iter().sum();
        let norm: Vec<f64> = sums.iter().map(|s| s / total).collect();
        assert!((attention_statistic(&rec, false) - two_pass_variance(&norm)).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn ranking_matches_full_sort_oracle(
        rows in proptest::collection::vec((0u32..4, 0u32..4, 0u8..4), 1..60),
        high_first in any::<bool>(),
    ) {
        let mut stats: Vec<ExampleStats> = Vec::new();
        for (id, &(f, l, v)) in rows.iter().enumerate() {
            let mut s = ExampleStats::new(id);
            record_visit(&mut s, false, 0.0);
            s.learn_count = l.max(f);
            s.forget_count = f;
            s.ever_learned = s.learn_count > 0;
            s.attn_stat = f64::from(v) * 0.25;
            stats.push(s);
        }
        let dir = if high_first { TiebreakDirection::HighVarianceFirst } else { TiebreakDirection::LowVarianceFirst };
        let ids: Vec<usize> = (0..stats.len()).rev().collect();
        let got = rank_for_removal(&stats, &ids, dir).unwrap();

        let mut keyed: Vec<(u8, u32, i64, usize)> = stats
            .iter()
            .map(|s| {
                let v = (s.attn_stat * 4.0) as i64;
                (u8::from(!s.ever_learned), s.forget_count, if high_first { -v } else { v }, s.example_id)
            })
            .collect();
        keyed.sort();
        let expect: Vec<usize> = keyed.iter().map(|k| k.3).collect();
        prop_assert_eq!(got, expect);
    }
}

#[test]
fn tracker_ranks_deterministically() {
    let mut t = ForgettingTracker::new(20);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        for id in 0..20 {
            t.record(id, rng.random_bool(0.6), rng.random_range(0.0..0.1));
        }
    }
    let ids: Vec<usize> = (0..20).collect();
    let a = t.rank(&ids, TiebreakDirection::LowVarianceFirst).unwrap();
    let b = t.clone().rank(&ids, TiebreakDirection::LowVarianceFirst).unwrap();
    assert_eq!(a, b);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, ids);
}
