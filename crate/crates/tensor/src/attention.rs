//! Fused multi-head attention core over a packed `[B·L × 3d]` QKV matrix.
//!
//! Per head, logits `q·kᵀ/√d_head` are evaluated only for the (query, key)
//! pairs a [`KeySets`] keeps; softmax renormalizes over those keys and the
//! context is the probability-weighted sum of the kept value rows. A dense
//! pass is the same loop with every key kept, so a full key set reproduces
//! dense results bit for bit.

use std::sync::Arc;

use rayon::prelude::*;

use crate::kernels::{dot, softmax_in_place};
use crate::{Float, Result, TensorError};

/// Per-query kept keys, as positions into the current token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySets {
    rows: Vec<Vec<usize>>,
}

impl KeySets {
    /// `rows[q]` must be strictly ascending, non-empty and `< rows.len()`.
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        for (q, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(TensorError::DegenerateMask { row: q });
            }
            if r.windows(2).any(|w| w[0] >= w[1]) || r.last().is_some_and(|&k| k >= n) {
                return Err(TensorError::Invalid(format!(
                    "key set of query {q} is not an ascending subset of 0..{n}"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn full(tokens: usize) -> Self {
        Self {
            rows: (0..tokens).map(|_| (0..tokens).collect()).collect(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.rows.len()
    }

    pub fn keys(&self, query: usize) -> &[usize] {
        &self.rows[query]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn pair_count(&self) -> u64 {
        self.rows.iter().map(|r| r.len() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl AttnLayout {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub(crate) fn probs_per_image(&self) -> usize {
        self.heads * self.tokens * self.tokens
    }
}

pub(crate) struct Forward<F> {
    pub ctx: Vec<F>,
    /// `[B][H][L][L]`, zero where a key was not kept.
    pub probs: Vec<F>,
    pub pairs: u64,
}

fn keys_for<'a>(keys: &'a Option<Arc<KeySets>>, q: usize, all: &'a [usize]) -> &'a [usize] {
    match keys {
        Some(k) => k.keys(q),
        None => all,
    }
}

pub(crate) fn forward<F: Float>(
    qkv: &[F],
    layout: AttnLayout,
    keys: &[Option<Arc<KeySets>>],
) -> Forward<F> {
    let AttnLayout {
        tokens: l,
        heads,
        d_model: d,
        ..
    } = layout;
    let dh = layout.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let all: Vec<usize> = (0..l).collect();
    let mut ctx = vec![F::zero(); layout.batch * l * d];
    let mut probs = vec![F::zero(); layout.batch * layout.probs_per_image()];

    ctx.par_chunks_mut(l * d)
        .zip(probs.par_chunks_mut(layout.probs_per_image()))
        .enumerate()
        .for_each(|(b, (ctx_b, probs_b))| {
            let x = &qkv[b * l * 3 * d..(b + 1) * l * 3 * d];
            let mut buf = Vec::with_capacity(l);
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..l {
                    let ks = keys_for(&keys[b], i, &all);
                    let q = &x[i * 3 * d + qo..i * 3 * d + qo + dh];
                    buf.clear();
                    buf.extend(
                        ks.iter()
                            .map(|&j| dot(q, &x[j * 3 * d + ko..j * 3 * d + ko + dh]) * scale),
                    );
                    softmax_in_place(&mut buf);
                    let prow = &mut probs_b[(h * l + i) * l..(h * l + i + 1) * l];
                    let out = &mut ctx_b[i * d + h * dh..i * d + (h + 1) * dh];
                    for (&j, &p) in ks.iter().zip(&buf) {
                        prow[j] = p;
                        let v = &x[j * 3 * d + vo..j * 3 * d + vo + dh];
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        });

    let pairs = (0..layout.batch)
        .map(|b| match &keys[b] {
            Some(k) => k.pair_count(),
            None => (l * l) as u64,
        })
        .sum::<u64>()
        * heads as u64;
    Forward { ctx, probs, pairs }
}

pub(crate) fn backward<F: Float>(
    qkv: &[F],
    probs: &[F],
    dctx: &[F],
    layout: AttnLayout,
    keys: &[Option<Arc<KeySets>>],
) -> Vec<F> {
    let AttnLayout {
        tokens: l,
        heads,
        d_model: d,
        ..
    } = layout;
    let dh = layout.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let all: Vec<usize> = (0..l).collect();
    let mut dqkv = vec![F::zero(); qkv.len()];

    dqkv.par_chunks_mut(l * 3 * d)
        .enumerate()
        .for_each(|(b, dx)| {
            let x = &qkv[b * l * 3 * d..(b + 1) * l * 3 * d];
            let probs_b = &probs[b * layout.probs_per_image()..(b + 1) * layout.probs_per_image()];
            let dctx_b = &dctx[b * l * d..(b + 1) * l * d];
            let mut dp = Vec::with_capacity(l);
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..l {
                    let ks = keys_for(&keys[b], i, &all);
                    let prow = &probs_b[(h * l + i) * l..(h * l + i + 1) * l];
                    let g = &dctx_b[i * d + h * dh..i * d + (h + 1) * dh];
                    dp.clear();
                    for &j in ks {
                        let v = &x[j * 3 * d + vo..j * 3 * d + vo + dh];
                        dp.push(dot(g, v));
                        let p = prow[j];
                        let dv = &mut dx[j * 3 * d + vo..j * 3 * d + vo + dh];
                        for (o, &gg) in dv.iter_mut().zip(g) {
                            *o = *o + p * gg;
                        }
                    }
                    let mean = ks
                        .iter()
                        .zip(&dp)
                        .fold(F::zero(), |acc, (&j, &v)| acc + prow[j] * v);
                    for (&j, &dpj) in ks.iter().zip(&dp) {
                        let ds = prow[j] * (dpj - mean) * scale;
                        for c in 0..dh {
                            let kv = x[j * 3 * d + ko + c];
                            let qv = x[i * 3 * d + qo + c];
                            dx[i * 3 * d + qo + c] = dx[i * 3 * d + qo + c] + ds * kv;
                            dx[j * 3 * d + ko + c] = dx[j * 3 * d + ko + c] + ds * qv;
                        }
                    }
                }
            }
        });
    dqkv
}
