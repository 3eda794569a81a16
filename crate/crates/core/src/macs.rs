//! Analytic MAC cost model for dense and tri-level sparse ViTs, and the
//! bridge from the runtime counter.

use std::fmt;

use serde::{Deserialize, Serialize};
use trilevel_tensor::MacCounter;

use crate::config::{SparsityConfig, ViTConfig};
use crate::error::{CoreError, Result};
use crate::selector::keep_count;
use crate::subset::active_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: usize,
    pub qkv: u64,
    pub attn_logits: u64,
    pub attn_value: u64,
    pub proj: u64,
    pub ffn: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.qkv + self.attn_logits + self.attn_value + self.proj + self.ffn
    }

    fn components(&self) -> [u64; 5] {
        [self.qkv, self.attn_logits, self.attn_value, self.proj, self.ffn]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingCost {
    pub epochs: usize,
    pub dataset_size: usize,
    pub active_size: usize,
    pub total: u128,
    pub dense_total: u128,
    pub saving_vs_dense: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub embed_macs: u64,
    pub head_macs: u64,
    pub total_per_image: u64,
    pub dense_per_image: u64,
    pub saving_vs_dense: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingCost>,
}

fn layer_cost(cfg: &ViTConfig, layer: usize, tokens: usize, pairs: u64) -> LayerCost {
    let (l, d, h) = (tokens as u64, cfg.d_model as u64, cfg.hidden() as u64);
    LayerCost {
        layer,
        tokens,
        qkv: 3 * l * d * d,
        attn_logits: pairs * d,
        attn_value: pairs * d,
        proj: l * d * d,
        ffn: 2 * l * d * h,
    }
}

fn assemble(cfg: &ViTConfig, per_layer: Vec<LayerCost>, dense_per_image: Option<u64>) -> CostReport {
    let embed = (cfg.num_patches() * cfg.patch_dim() * cfg.d_model) as u64;
    let head = (cfg.d_model * cfg.num_classes) as u64;
    let total = embed + head + per_layer.iter().map(LayerCost::total).sum::<u64>();
    let dense = dense_per_image.unwrap_or(total);
    CostReport {
        per_layer,
        embed_macs: embed,
        head_macs: head,
        total_per_image: total,
        dense_per_image: dense,
        saving_vs_dense: 1.0 - total as f64 / dense as f64,
        training: None,
    }
}

/// Per-image forward cost of the dense model.
pub fn dense_macs(cfg: &ViTConfig) -> CostReport {
    let l = cfg.tokens();
    let layers = (1..=cfg.depth)
        .map(|i| layer_cost(cfg, i, l, (l * l) as u64))
        .collect();
    assemble(cfg, layers, None)
}

/// Per-image forward cost under `sp` with token keep ratio `r_t`.
fn sparse_with_rt(cfg: &ViTConfig, sp: &SparsityConfig, r_t: f64) -> CostReport {
    let lead = usize::from(cfg.use_cls_token);
    let mut patches = cfg.num_patches();
    let mut masked = false;
    let mut k = patches;
    let mut layers = Vec::with_capacity(cfg.depth);
    for i in 1..=cfg.depth {
        if sp.prune_layers.contains(&i) {
            patches = keep_count(r_t, patches);
            k = keep_count(sp.r_a, patches);
            masked = true;
        }
        let l = patches + lead;
        let feeder = sp.prune_layers.contains(&(i + 1));
        let pairs = if !masked || feeder {
            (l * l) as u64
        } else if lead == 1 {
            ((1 + patches) + patches * (k + 1)) as u64
        } else {
            (patches * k) as u64
        };
        layers.push(layer_cost(cfg, i, l, pairs));
    }
    let dense = dense_macs(cfg).total_per_image;
    assemble(cfg, layers, Some(dense))
}

/// Per-image forward cost under `sp` at its final (post-warm-up) ratios.
pub fn sparse_macs(cfg: &ViTConfig, sp: &SparsityConfig) -> CostReport {
    sparse_with_rt(cfg, sp, sp.r_t)
}

/// Per-image forward cost in training epoch `epoch` (0-based), following
/// the r_t warm-up.
pub fn sparse_macs_at(cfg: &ViTConfig, sp: &SparsityConfig, epoch: usize) -> CostReport {
    sparse_with_rt(cfg, sp, sp.effective_r_t(epoch))
}

/// Forward MACs over a whole run: every epoch visits `round(r_e·|D|)`
/// examples at that epoch's cost.
pub fn training_cost(
    cfg: &ViTConfig,
    sp: &SparsityConfig,
    epochs: usize,
    dataset_size: usize,
) -> TrainingCost {
    let active = active_size(dataset_size, sp.r_e);
    let total: u128 = (0..epochs)
        .map(|e| u128::from(sparse_macs_at(cfg, sp, e).total_per_image) * active as u128)
        .sum();
    let dense_total =
        u128::from(dense_macs(cfg).total_per_image) * dataset_size as u128 * epochs as u128;
    TrainingCost {
        epochs,
        dataset_size,
        active_size: active,
        total,
        dense_total,
        saving_vs_dense: 1.0 - total as f64 / dense_total as f64,
    }
}

/// Full report: per-image figures at final ratios plus the training total.
pub fn cost_report(
    cfg: &ViTConfig,
    sp: &SparsityConfig,
    epochs: usize,
    dataset_size: usize,
) -> CostReport {
    let mut r = sparse_macs(cfg, sp);
    r.training = Some(training_cost(cfg, sp, epochs, dataset_size));
    r
}

/// Per-image report from a counter that observed a forward pass over
/// `batch` identically shaped images.
pub fn from_counter(cfg: &ViTConfig, counter: &MacCounter, batch: usize) -> CostReport {
    let b = batch as u64;
    let per_layer = (1..=cfg.depth)
        .map(|i| {
            let c = counter.layer(i);
            LayerCost {
                layer: i,
                tokens: 0,
                qkv: c[0] / b,
                attn_logits: c[1] / b,
                attn_value: c[2] / b,
                proj: c[3] / b,
                ffn: c[4] / b,
            }
        })
        .collect::<Vec<_>>();
    let embed = counter.embed / b;
    let head = counter.head / b;
    let total = counter.total() / b;
    let dense = dense_macs(cfg).total_per_image;
    CostReport {
        per_layer,
        embed_macs: embed,
        head_macs: head,
        total_per_image: total,
        dense_per_image: dense,
        saving_vs_dense: 1.0 - total as f64 / dense as f64,
        training: None,
    }
}

/// Integer equality of two reports, naming the first divergent location.
pub fn check_agreement(analytic: &CostReport, instrumented: &CostReport) -> Result<()> {
    let fail = |location: String, a: u64, i: u64| {
        Err(CoreError::Accounting {
            location,
            analytic: a,
            instrumented: i,
        })
    };
    if analytic.embed_macs != instrumented.embed_macs {
        return fail("patch embedding".into(), analytic.embed_macs, instrumented.embed_macs);
    }
    const NAMES: [&str; 5] = ["qkv", "attention logits", "attention values", "projection", "ffn"];
    for (a, i) in analytic.per_layer.iter().zip(&instrumented.per_layer) {
        for ((name, x), y) in NAMES.iter().zip(a.components()).zip(i.components()) {
            if x != y {
                return fail(format!("layer {} {name}", a.layer), x, y);
            }
        }
    }
    if analytic.per_layer.len() != instrumented.per_layer.len() {
        return fail(
            "layer count".into(),
            analytic.per_layer.len() as u64,
            instrumented.per_layer.len() as u64,
        );
    }
    if analytic.head_macs != instrumented.head_macs {
        return fail("head".into(), analytic.head_macs, instrumented.head_macs);
    }
    if analytic.total_per_image != instrumented.total_per_image {
        return fail("total".into(), analytic.total_per_image, instrumented.total_per_image);
    }
    Ok(())
}

fn giga(v: f64) -> String {
    format!("{:.4} G", v / 1e9)
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5} {:>6} {:>14} {:>14} {:>14} {:>14} {:>14} {:>15}",
            "layer", "tokens", "qkv", "attn_logits", "attn_value", "proj", "ffn", "total"
        )?;
        for l in &self.per_layer {
            writeln!(
                f,
                "{:>5} {:>6} {:>14} {:>14} {:>14} {:>14} {:>14} {:>15}",
                l.layer, l.tokens, l.qkv, l.attn_logits, l.attn_value, l.proj, l.ffn, l.total()
            )?;
        }
        writeln!(f, "{:<18}{:>15}", "embed", self.embed_macs)?;
        writeln!(f, "{:<18}{:>15}", "head", self.head_macs)?;
        writeln!(
            f,
            "{:<18}{:>15} ({})",
            "per image",
            self.total_per_image,
            giga(self.total_per_image as f64)
        )?;
        writeln!(
            f,
            "{:<18}{:>15} ({})",
            "dense per image",
            self.dense_per_image,
            giga(self.dense_per_image as f64)
        )?;
        write!(f, "{:<18}{:>14.2}%", "saving", self.saving_vs_dense * 100.0)?;
        if let Some(t) = &self.training {
            writeln!(f)?;
            writeln!(
                f,
                "{:<18}{:>15} ({} epochs, {} of {} examples)",
                "training total",
                t.total,
                t.epochs,
                t.active_size,
                t.dataset_size
            )?;
            writeln!(f, "{:<18}{:>15}", "dense training", t.dense_total)?;
            write!(f, "{:<18}{:>14.2}%", "training saving", t.saving_vs_dense * 100.0)?;
        }
        Ok(())
    }
}
