//! Per-example learning history: forgetting and learning events plus the
//! attention statistic used to break ties between equally forgotten examples.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use trilevel_tensor::Float;

use crate::config::TiebreakDirection;
use crate::error::{CoreError, Result};
use crate::model::AttentionRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleStats {
    pub example_id: usize,
    pub prev_correct: Option<bool>,
    pub forget_count: u32,
    pub learn_count: u32,
    pub ever_learned: bool,
    pub attn_stat: f64,
    pub visits: u64,
    /// Visits since the last subset update.
    pub window_visits: u64,
}

impl ExampleStats {
    pub fn new(example_id: usize) -> Self {
        Self {
            example_id,
            prev_correct: None,
            forget_count: 0,
            learn_count: 0,
            ever_learned: false,
            attn_stat: 0.0,
            visits: 0,
            window_visits: 0,
        }
    }

    /// Learned at least once and never forgotten.
    pub fn unforgettable(&self) -> bool {
        self.ever_learned && self.forget_count == 0
    }
}

pub fn record_visit(stats: &mut ExampleStats, correct: bool, attn_stat: f64) {
    match (stats.prev_correct, correct) {
        (Some(true), false) => stats.forget_count += 1,
        (None | Some(false), true) => {
            stats.learn_count += 1;
            stats.ever_learned = true;
        }
        _ => {}
    }
    stats.prev_correct = Some(correct);
    stats.attn_stat = attn_stat;
    stats.visits += 1;
    stats.window_visits += 1;
}

/// Population variance (Welford).
pub fn population_variance(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for x in values {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    if n == 0.0 {
        0.0
    } else {
        m2 / n
    }
}

/// Variance of the head-averaged `[CLS]` row over live patches, or of the
/// normalized column sums of the head-averaged map without `[CLS]`.
pub fn attention_statistic<F: Float>(rec: &AttentionRecord<F>, use_cls: bool) -> f64 {
    let l = rec.tokens();
    let avg = rec.head_mean();
    if use_cls {
        population_variance(avg[1..l].iter().copied())
    } else {
        let sums: Vec<f64> = (0..l).map(|j| (0..l).map(|i| avg[i * l + j]).sum()).collect();
        let total: f64 = sums.iter().sum();
        population_variance(sums.iter().map(|s| s / total))
    }
}

/// Composite removal key: most removable first.
pub fn removal_order(a: &ExampleStats, b: &ExampleStats, dir: TiebreakDirection) -> Ordering {
    let stat = match dir {
        TiebreakDirection::LowVarianceFirst => a.attn_stat.total_cmp(&b.attn_stat),
        TiebreakDirection::HighVarianceFirst => b.attn_stat.total_cmp(&a.attn_stat),
    };
    (!a.ever_learned)
        .cmp(&!b.ever_learned)
        .then(a.forget_count.cmp(&b.forget_count))
        .then(stat)
        .then(a.example_id.cmp(&b.example_id))
}

/// Ranks `ids` least-informative first. Every id must have been visited in
/// the current window.
pub fn rank_for_removal(
    stats: &[ExampleStats],
    ids: &[usize],
    dir: TiebreakDirection,
) -> Result<Vec<usize>> {
    let mut picked: Vec<&ExampleStats> = Vec::with_capacity(ids.len());
    for &id in ids {
        match stats.get(id) {
            Some(s) if s.window_visits > 0 => picked.push(s),
            _ => return Err(CoreError::Staleness { id }),
        }
    }
    picked.sort_by(|a, b| removal_order(a, b, dir));
    Ok(picked.iter().map(|s| s.example_id).collect())
}

/// Statistics of every example in the training split, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingTracker {
    stats: Vec<ExampleStats>,
}

pub const STATS_HEADER: &str = "example_id,forget_count,learn_count,attn_stat,visits";

impl ForgettingTracker {
    pub fn new(dataset_size: usize) -> Self {
        Self {
            stats: (0..dataset_size).map(ExampleStats::new).collect(),
        }
    }

    pub fn stats(&self) -> &[ExampleStats] {
        &self.stats
    }

    pub fn get(&self, id: usize) -> &ExampleStats {
        &self.stats[id]
    }

    pub fn record(&mut self, id: usize, correct: bool, attn_stat: f64) {
        record_visit(&mut self.stats[id], correct, attn_stat);
    }

    pub fn rank(&self, ids: &[usize], dir: TiebreakDirection) -> Result<Vec<usize>> {
        rank_for_removal(&self.stats, ids, dir)
    }

    /// Starts a new staleness window (after a subset update).
    pub fn reset_window(&mut self) {
        self.stats.iter_mut().for_each(|s| s.window_visits = 0);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(STATS_HEADER);
        out.push('\n');
        for s in &self.stats {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{}",
                s.example_id, s.forget_count, s.learn_count, s.attn_stat, s.visits
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// One parsed row of `examples_stats.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub example_id: usize,
    pub forget_count: u32,
    pub learn_count: u32,
    pub attn_stat: f64,
    pub visits: u64,
}

pub fn read_stats_csv(path: &Path) -> Result<Vec<StatsRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let fail = |msg: String| CoreError::Format {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if i == 0 {
            if line != STATS_HEADER {
                return Err(fail(format!("unexpected header `{line}`")));
            }
        } else if !line.is_empty() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(fail(format!("expected 5 fields, found {}", f.len())));
            }
            let bad = |_| fail(format!("malformed row `{line}`"));
            rows.push(StatsRow {
                example_id: f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                forget_count: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                learn_count: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                attn_stat: f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                visits: f[4].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            });
        }
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

/// Aggregate view of a stats table.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSummary {
    pub examples: usize,
    pub never_learned: usize,
    pub unforgettable: usize,
    pub total_forgetting_events: u64,
    pub max_forget_count: u32,
    /// (forget_count, number of examples), ascending.
    pub histogram: Vec<(u32, usize)>,
    pub mean_attn_stat: f64,
}

pub fn summarize(rows: &[StatsRow]) -> StatsSummary {
    let mut hist = std::collections::BTreeMap::new();
    for r in rows {
        *hist.entry(r.forget_count).or_insert(0usize) += 1;
    }
    StatsSummary {
        examples: rows.len(),
        never_learned: rows.iter().filter(|r| r.learn_count == 0).count(),
        unforgettable: rows
            .iter()
            .filter(|r| r.learn_count > 0 && r.forget_count == 0)
            .count(),
        total_forgetting_events: rows.iter().map(|r| u64::from(r.forget_count)).sum(),
        max_forget_count: rows.iter().map(|r| r.forget_count).max().unwrap_or(0),
        histogram: hist.into_iter().collect(),
        mean_attn_stat: if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.attn_stat).sum::<f64>() / rows.len() as f64
        },
    }
}
