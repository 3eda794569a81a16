//! Active training subset: initial random removal and periodic
//! remove-and-restore against a pool of removed examples.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetState {
    /// The training subset, ascending.
    pub active: BTreeSet<usize>,
    /// Removed examples in pool order.
    pub pool: Vec<usize>,
    pub iteration: usize,
    pub max_iterations: usize,
    pub rng_seed: u64,
    pub dataset_size: usize,
}

/// Result of one remove-and-restore step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub removed: Vec<usize>,
    pub restored: Vec<usize>,
    pub digest: String,
}

/// `⌈m/n⌉ + 1` remove-and-restore steps, none when nothing is removed.
pub fn max_iterations(m_pct: f64, n_pct: f64) -> usize {
    if m_pct <= 0.0 {
        0
    } else {
        (m_pct / n_pct - 1e-9).ceil() as usize + 1
    }
}

/// `round(r_e·|D|)`.
pub fn active_size(dataset_size: usize, r_e: f64) -> usize {
    (r_e * dataset_size as f64).round() as usize
}

/// `⌊n·|D|/100⌋`.
pub fn removal_count(dataset_size: usize, n_pct: f64) -> usize {
    (n_pct * dataset_size as f64 / 100.0 + 1e-9).floor() as usize
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// sha256 over the ascending active ids (little-endian u64), hex encoded.
pub fn digest(active: &BTreeSet<usize>) -> String {
    let mut h = Sha256::new();
    for &id in active {
        h.update((id as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl SubsetState {
    /// Removes `(1 − r_e)·|D|` examples uniformly at random.
    pub fn init(dataset_size: usize, r_e: f64, n_pct: f64, seed: u64) -> Result<Self> {
        if !(r_e > 0.0 && r_e <= 1.0) {
            return Err(CoreError::Config(format!("r_e = {r_e} must lie in (0, 1]")));
        }
        let m_pct = ((1.0 - r_e) * 100.0 * 1e9).round() / 1e9;
        let keep = active_size(dataset_size, r_e);
        let mut ids: Vec<usize> = (0..dataset_size).collect();
        ids.shuffle(&mut rng_for(seed, 0));
        let pool = ids.split_off(keep);
        Ok(Self {
            active: ids.into_iter().collect(),
            pool,
            iteration: 0,
            max_iterations: max_iterations(m_pct, n_pct),
            rng_seed: seed,
            dataset_size,
        })
    }

    pub fn active_ids(&self) -> Vec<usize> {
        self.active.iter().copied().collect()
    }

    pub fn digest(&self) -> String {
        digest(&self.active)
    }

    pub fn exhausted(&self) -> bool {
        self.iteration >= self.max_iterations
    }

    /// Moves the first `⌊n·|D|/100⌋` ids of `ranking` into the pool,
    /// shuffles the pool and restores the same number from its front.
    pub fn remove_and_restore(&mut self, ranking: &[usize], n_pct: f64) -> Result<UpdateRecord> {
        if self.exhausted() {
            return Err(CoreError::ScheduleExhausted {
                iterations: self.iteration,
            });
        }
        let ranked: BTreeSet<usize> = ranking.iter().copied().collect();
        if let Some(&id) = self.active.iter().find(|id| !ranked.contains(id)) {
            return Err(CoreError::Staleness { id });
        }
        if ranked.len() != ranking.len() || ranked.len() != self.active.len() {
            return Err(CoreError::SelectorContract(
                "ranking must list each active example exactly once".into(),
            ));
        }
        let count = removal_count(self.dataset_size, n_pct).min(self.active.len());
        let removed = ranking[..count].to_vec();
        for id in &removed {
            self.active.remove(id);
        }
        self.pool.extend_from_slice(&removed);
        let mut rng = rng_for(self.rng_seed, 1 + self.iteration as u64);
        self.pool.shuffle(&mut rng);
        let restored: Vec<usize> = self.pool.drain(..count).collect();
        self.active.extend(restored.iter().copied());
        self.iteration += 1;
        Ok(UpdateRecord {
            iteration: self.iteration,
            removed,
            restored,
            digest: self.digest(),
        })
    }

    /// Whether an update runs after `completed_epochs` subset epochs.
    pub fn schedule_hook(&self, completed_epochs: usize, period: usize) -> bool {
        completed_epochs > 0 && completed_epochs.is_multiple_of(period) && !self.exhausted()
    }

    /// Exact partition of `0..|D|` into active and pool.
    pub fn check_partition(&self) -> bool {
        let mut seen = vec![false; self.dataset_size];
        for &id in self.active.iter().chain(&self.pool) {
            if id >= self.dataset_size || seen[id] {
                return false;
            }
            seen[id] = true;
        }
        seen.iter().all(|&s| s)
    }
}

/// Uniformly random ranking of the active set (removal baseline).
pub fn random_ranking(active: &BTreeSet<usize>, seed: u64, iteration: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = active.iter().copied().collect();
    ids.shuffle(&mut rng_for(seed ^ 0x5e_ed0f_5eed, iteration as u64));
    ids
}

/// Reorders a global ranking so its prefix of length `count` takes the
/// least-informative examples of every class in proportion to the class
/// sizes (class-balanced baseline).
pub fn class_balanced_ranking(ranking: &[usize], labels: &[usize], count: usize) -> Vec<usize> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &id in ranking {
        per[labels[id]].push(id);
    }
    let total = ranking.len().max(1);
    let mut quota: Vec<usize> = per.iter().map(|p| p.len() * count / total).collect();
    // largest remainder first
    let mut by_rem: Vec<usize> = (0..classes).collect();
    by_rem.sort_by_key(|&c| std::cmp::Reverse(per[c].len() * count % total));
    let mut short = count.saturating_sub(quota.iter().sum());
    for c in by_rem {
        if short == 0 {
            break;
        }
        if quota[c] < per[c].len() {
            quota[c] += 1;
            short -= 1;
        }
    }
    let mut head = Vec::with_capacity(count);
    let mut tail = Vec::with_capacity(ranking.len());
    for (c, ids) in per.iter().enumerate() {
        head.extend_from_slice(&ids[..quota[c]]);
        tail.extend_from_slice(&ids[quota[c]..]);
    }
    let pos: std::collections::HashMap<usize, usize> =
        ranking.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    head.sort_by_key(|id| pos[id]);
    tail.sort_by_key(|id| pos[id]);
    head.extend(tail);
    head
}
