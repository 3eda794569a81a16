//! Token & attention selection from a captured attention map.
//!
//! Token scores come from the head-averaged `[CLS]` attention row (or the
//! column sums of the head-averaged map when there is no class token). The
//! retained tokens 𝒯 then restrict the map to 𝒯×𝒯, and every retained patch
//! query keeps its own top keys. The resulting [`SelectionMask`] is frozen
//! for the rest of the stage.
//!
//! Scores are compared in f64 and ties go to the lower original index, so
//! selection is deterministic for any element type.

use std::cmp::Ordering;

use trilevel_tensor::{Float, KeySets};

use crate::config::SparsityConfig;
use crate::error::{CoreError, Result};
use crate::model::AttentionRecord;

/// `max(1, ⌈ratio·n⌉)`, never more than `n`.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (ratio * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Live patch count after each of `stages` selectors at ratio `ratio`.
pub fn compound_counts(n: usize, ratio: f64, stages: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(stages);
    let mut cur = n;
    for _ in 0..stages {
        cur = keep_count(ratio, cur);
        out.push(cur);
    }
    out
}

/// Descending by score, ascending by index on ties.
fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    /// Ascending original token indices; includes `[CLS]` (index 0) when present.
    pub kept_tokens: Vec<usize>,
    /// For each entry of `kept_tokens`, its ascending kept keys (original indices).
    pub kept_keys: Vec<Vec<usize>>,
    /// K: number of kept patch tokens.
    pub k_count: usize,
    pub has_cls: bool,
}

impl SelectionMask {
    /// Key sets as positions into `kept_tokens`, the token order of the
    /// gathered sequence.
    pub fn key_sets(&self) -> Result<KeySets> {
        let rows = self
            .kept_keys
            .iter()
            .map(|keys| {
                keys.iter()
                    .map(|k| {
                        self.kept_tokens.binary_search(k).map_err(|_| {
                            CoreError::SelectorContract(format!("key {k} is not a kept token"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KeySets::new(rows)?)
    }

    /// Checks that every referenced token is live.
    pub fn validate_against(&self, live: &[usize]) -> Result<()> {
        let dead = self
            .kept_tokens
            .iter()
            .chain(self.kept_keys.iter().flatten())
            .find(|t| live.binary_search(t).is_err());
        match dead {
            Some(t) => Err(CoreError::SelectorContract(format!(
                "mask references token {t}, which is not live"
            ))),
            None => Ok(()),
        }
    }
}

/// Importance score of every live patch token.
pub fn token_scores<F: Float>(rec: &AttentionRecord<F>, use_cls: bool) -> Vec<f64> {
    let l = rec.tokens();
    let avg = rec.head_mean();
    if use_cls {
        avg[1..l].to_vec()
    } else {
        (0..l)
            .map(|j| (0..l).map(|i| avg[i * l + j]).sum())
            .collect()
    }
}

/// Positions (0-based, among the scored patches) of the top
/// `⌈r_t·count⌉` scores, ascending.
pub fn select_tokens(scores: &[f64], r_t: f64, current_patch_count: usize) -> Vec<usize> {
    debug_assert_eq!(scores.len(), current_patch_count);
    let k = keep_count(r_t, current_patch_count);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(by_score_then_index(scores));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Per-query kept keys over `kept_tokens` (original indices).
///
/// Each patch query keeps itself plus its `k - 1` highest-scoring other
/// kept patch keys, `k = max(1, ⌈r_a·K⌉)`, and always the `[CLS]` key. The
/// `[CLS]` query keeps every kept token.
pub fn select_attention<F: Float>(
    rec: &AttentionRecord<F>,
    kept_tokens: &[usize],
    r_a: f64,
    use_cls: bool,
) -> Result<Vec<Vec<usize>>> {
    let l = rec.tokens();
    let avg = rec.head_mean();
    let pos: Vec<usize> = kept_tokens
        .iter()
        .map(|t| {
            rec.live_tokens.binary_search(t).map_err(|_| {
                CoreError::SelectorContract(format!("kept token {t} is not live in layer {}", rec.layer))
            })
        })
        .collect::<Result<_>>()?;
    let patch_slots: Vec<usize> = (0..kept_tokens.len())
        .filter(|&s| !(use_cls && kept_tokens[s] == 0))
        .collect();
    let k = keep_count(r_a, patch_slots.len());

    let mut out = Vec::with_capacity(kept_tokens.len());
    let mut scores = vec![0.0; kept_tokens.len()];
    for (slot, &q) in kept_tokens.iter().enumerate() {
        if use_cls && q == 0 {
            out.push(kept_tokens.to_vec());
            continue;
        }
        for &s in &patch_slots {
            scores[s] = avg[pos[slot] * l + pos[s]];
        }
        let mut others: Vec<usize> = patch_slots.iter().copied().filter(|&s| s != slot).collect();
        others.sort_by(by_score_then_index(&scores));
        others.truncate(k - 1);
        let mut keys: Vec<usize> = others.iter().map(|&s| kept_tokens[s]).collect();
        keys.push(q);
        if use_cls {
            keys.push(0);
        }
        keys.sort_unstable();
        out.push(keys);
    }
    Ok(out)
}

/// Full TA-selection for one image at `epoch` (drives the r_t warm-up).
pub fn ta_select<F: Float>(
    rec: &AttentionRecord<F>,
    cfg: &SparsityConfig,
    epoch: usize,
    use_cls: bool,
) -> Result<SelectionMask> {
    let lead = usize::from(use_cls);
    let patches = &rec.live_tokens[lead..];
    let scores = token_scores(rec, use_cls);
    let picked = select_tokens(&scores, cfg.effective_r_t(epoch), patches.len());
    let mut kept_tokens: Vec<usize> = Vec::with_capacity(picked.len() + lead);
    if use_cls {
        kept_tokens.push(rec.live_tokens[0]);
    }
    kept_tokens.extend(picked.iter().map(|&p| patches[p]));
    let kept_keys = select_attention(rec, &kept_tokens, cfg.r_a, use_cls)?;
    Ok(SelectionMask {
        k_count: picked.len(),
        kept_tokens,
        kept_keys,
        has_cls: use_cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use trilevel_tensor::Tensor;

    fn record(heads: usize, rows: &[&[f64]], live: Vec<usize>) -> AttentionRecord<f64> {
        let l = rows[0].len();
        let mut data = Vec::new();
        for h in 0..heads {
            for r in 0..l {
                data.extend_from_slice(rows[h * l + r]);
            }
        }
        AttentionRecord {
            layer: 1,
            probs: Tensor::new(vec![heads, l, l], data).unwrap(),
            live_tokens: live,
        }
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(0.7, 196), 138);
        assert_eq!(keep_count(0.7, 138), 97);
        assert_eq!(keep_count(0.7, 97), 68);
        assert_eq!(keep_count(0.7, 100), 70);
        assert_eq!(keep_count(0.01, 5), 1);
        assert_eq!(keep_count(1.0, 9), 9);
        assert_eq!(compound_counts(196, 0.7, 3), vec![138, 97, 68]);
    }

    #[test]
    fn cls_row_scores() {
        let rec = record(
            1,
            &[
                &[0.1, 0.4, 0.2, 0.3],
                &[0.25; 4],
                &[0.25; 4],
                &[0.25; 4],
            ],
            vec![0, 1, 2, 3],
        );
        assert_eq!(token_scores(&rec, true), vec![0.4, 0.2, 0.3]);
    }

    #[test]
    fn head_mean_scores() {
        let u = [1.0 / 3.0; 3];
        let rec = record(
            2,
            &[&[0.0, 0.6, 0.4], &u, &u, &[0.0, 0.2, 0.8], &u, &u],
            vec![0, 1, 2],
        );
        let s = token_scores(&rec, true);
        assert!((s[0] - 0.4).abs() < 1e-12 && (s[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cumulative_scores_without_cls() {
        let rec = record(1, &[&[1.0, 0.0], &[0.5, 0.5]], vec![0, 1]);
        assert_eq!(token_scores(&rec, false), vec![1.5, 0.5]);
    }

    #[test]
    fn select_tokens_examples() {
        assert_eq!(select_tokens(&[0.4, 0.2, 0.3], 2.0 / 3.0, 3), vec![0, 2]);
        assert_eq!(select_tokens(&[0.4, 0.2, 0.3], 1.0, 3), vec![0, 1, 2]);
        // tie goes to the lower index
        assert_eq!(select_tokens(&[0.5, 0.5, 0.5], 0.5, 3), vec![0, 1]);
    }

    #[test]
    fn select_attention_top2() {
        // K = 4 patches; query token 2 sees [0.1, 0.5, 0.15, 0.25] over them.
        let q = [0.0, 0.1, 0.5, 0.15, 0.25];
        let u = [0.2; 5];
        let rec = record(1, &[&u, &u, &q, &u, &u], vec![0, 1, 2, 3, 4]);
        let keys = select_attention(&rec, &[0, 1, 2, 3, 4], 0.5, true).unwrap();
        assert_eq!(keys[2], vec![0, 2, 4]);
        assert_eq!(keys[0], vec![0, 1, 2, 3, 4]);
        // the budget slot for self is always taken: query 1 keeps self + best other
        assert_eq!(keys[1].len(), 3);
        assert!(keys[1].contains(&1) && keys[1].contains(&0));
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let u = [0.25; 4];
        let rec = record(1, &[&u, &u, &u, &u], vec![0, 3, 5, 9]);
        let cfg = SparsityConfig::default();
        let m = ta_select(&rec, &cfg, 0, true).unwrap();
        assert_eq!(m.kept_tokens, vec![0, 3, 5, 9]);
        assert!(m.kept_keys.iter().all(|k| k == &vec![0, 3, 5, 9]));
        let ks = m.key_sets().unwrap();
        assert_eq!(ks.pair_count(), 16);
    }

    #[test]
    fn dead_token_is_a_contract_error() {
        let m = SelectionMask {
            kept_tokens: vec![0, 2],
            kept_keys: vec![vec![0, 2], vec![0, 2]],
            k_count: 1,
            has_cls: true,
        };
        assert!(m.validate_against(&[0, 2, 3]).is_ok());
        assert!(matches!(
            m.validate_against(&[0, 1, 3]),
            Err(CoreError::SelectorContract(_))
        ));
    }
}
